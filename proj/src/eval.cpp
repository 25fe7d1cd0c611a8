#include "qsum/eval.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

namespace qsum {

int64_t levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
    const size_t n = a.size(), m = b.size();
    std::vector<int64_t> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int64_t>(j);
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int64_t>(i);
        for (size_t j = 1; j <= m; ++j) {
            const int64_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double wer(const std::vector<int>& hyp, const std::vector<int>& ref) {
    if (ref.empty()) throw std::invalid_argument("wer: empty reference");
    return static_cast<double>(levenshtein(hyp, ref)) / static_cast<double>(ref.size());
}

int64_t lcs_length(const std::vector<int>& a, const std::vector<int>& b) {
    const size_t n = a.size(), m = b.size();
    std::vector<int64_t> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

static Rouge from_counts(double overlap, double hyp_total, double ref_total) {
    Rouge r;
    if (hyp_total > 0) r.p = overlap / hyp_total;
    if (ref_total > 0) r.r = overlap / ref_total;
    if (r.p + r.r > 0) r.f1 = 2.0 * r.p * r.r / (r.p + r.r);
    return r;
}

Rouge rouge_n(const std::vector<int>& hyp, const std::vector<int>& ref, int n) {
    if (n < 1) throw std::invalid_argument("rouge_n: n must be >= 1");
    auto grams = [n](const std::vector<int>& s) {
        std::map<std::vector<int>, int64_t> counts;
        if (static_cast<int>(s.size()) >= n)
            for (size_t i = 0; i + n <= s.size(); ++i)
                ++counts[std::vector<int>(s.begin() + i, s.begin() + i + n)];
        return counts;
    };
    const auto h = grams(hyp), r = grams(ref);
    int64_t overlap = 0, h_total = 0, r_total = 0;
    for (const auto& [g, c] : h) h_total += c;
    for (const auto& [g, c] : r) r_total += c;
    for (const auto& [g, c] : h) {
        auto it = r.find(g);
        if (it != r.end()) overlap += std::min(c, it->second);  // clipped
    }
    return from_counts(double(overlap), double(h_total), double(r_total));
}

Rouge rouge_l(const std::vector<int>& hyp, const std::vector<int>& ref) {
    if (hyp.empty() || ref.empty()) return {};
    return from_counts(double(lcs_length(hyp, ref)), double(hyp.size()), double(ref.size()));
}

}  // namespace qsum
