#pragma once

#include <string>
#include <vector>

#include "qsum/tensor.hpp"

namespace qsum {

// Synthetic corpus: 50 content tokens, 10 filler tokens, then the four
// specials. Transcripts are token sequences; "speech" is a deterministic
// frame rendering of them; summaries follow a fixed extraction rule.
struct CorpusSpec {
    static constexpr int n_content = 50;
    static constexpr int n_filler = 10;
    static constexpr int vocab = 64;
    static constexpr int bos = 60;
    static constexpr int eos = 61;
    static constexpr int pad = 62;
    static constexpr int mask = 63;

    int docs = 600;
    int seg_min = 2;
    int seg_max = 4;
    int tok_min = 16;
    int tok_max = 24;
    int frames_per_token = 4;  // u
    double sigma = 0.1;
    int summary_cap = 10;  // L_s
    int frame_dim = 32;
    double content_prob = 0.75;
    uint64_t seed = 0;

    void validate() const;
};

struct DatasetRecord {
    int64_t id = 0;
    std::vector<std::vector<int>> segments;  // transcript ids per segment
    std::vector<int> summary;                // ends with EOS
};

struct Corpus {
    CorpusSpec spec;  // the spec that generated the records, kept for frame rendering
    std::vector<DatasetRecord> train, dev, test;

    const std::vector<DatasetRecord>& split(const std::string& name) const;
};

// ordered first occurrences of content tokens, filler dropped, capped, EOS appended
std::vector<int> summarize_reference(const std::vector<int>& doc_tokens, int cap);

// fully determined by spec.seed; splits are disjoint 80/10/10 by document id
Corpus make_corpus(const CorpusSpec& spec);

void save_corpus(const Corpus& corpus, const CorpusSpec& spec, const std::string& dir);

// reloads and re-validates every record against the summary rule
Corpus load_corpus(const std::string& dir, CorpusSpec& spec_out);

// noise stream seed for one segment's frames
uint64_t frame_seed(const CorpusSpec& spec, int64_t doc_id, int seg_idx);

// per-token prototype vectors, [vocab, frame_dim], fixed by the corpus seed
template <class S>
Tensor<S> token_prototypes(const CorpusSpec& spec) {
    Rng rng(mix_seed(spec.seed, 0x70726f746fULL));
    return Tensor<S>::randn({CorpusSpec::vocab, spec.frame_dim}, rng, 1.0);
}

// each token becomes u noisy copies of its prototype; pure given (tokens, seed)
template <class S>
Tensor<S> tokens_to_frames(const std::vector<int>& tokens, const Tensor<S>& prototypes, int u,
                           double sigma, uint64_t seed) {
    if (u < 1) throw std::invalid_argument("tokens_to_frames: u must be >= 1");
    if (sigma < 0.0) throw std::invalid_argument("tokens_to_frames: sigma must be >= 0");
    if (tokens.empty()) throw std::invalid_argument("tokens_to_frames: empty token sequence");
    const int64_t d = prototypes.cols();
    Tensor<S> out = Tensor<S>::zeros({static_cast<int64_t>(tokens.size()) * u, d});
    Rng rng(seed);
    int64_t row = 0;
    for (int tok : tokens) {
        if (tok < 0 || tok >= prototypes.rows())
            throw std::invalid_argument("tokens_to_frames: unknown token id " +
                                        std::to_string(tok));
        for (int c = 0; c < u; ++c, ++row) {
            for (int64_t j = 0; j < d; ++j)
                out.data()[row * d + j] =
                    prototypes.at(tok, j) + static_cast<S>(sigma * rng.normal());
        }
    }
    return out;
}

}  // namespace qsum
