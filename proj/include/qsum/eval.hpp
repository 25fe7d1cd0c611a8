#pragma once

#include <cstdint>
#include <vector>

namespace qsum {

struct Rouge {
    double p = 0.0, r = 0.0, f1 = 0.0;
};

int64_t levenshtein(const std::vector<int>& a, const std::vector<int>& b);

// edit distance over reference length; empty reference is an error
double wer(const std::vector<int>& hyp, const std::vector<int>& ref);

int64_t lcs_length(const std::vector<int>& a, const std::vector<int>& b);

// clipped n-gram overlap, n in {1, 2}
Rouge rouge_n(const std::vector<int>& hyp, const std::vector<int>& ref, int n);

// LCS-based: P = |LCS|/|hyp|, R = |LCS|/|ref|; empty inputs give zeros
Rouge rouge_l(const std::vector<int>& hyp, const std::vector<int>& ref);

}  // namespace qsum
