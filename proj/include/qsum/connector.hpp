#pragma once

#include "qsum/encoder.hpp"

namespace qsum {

struct ConnectorConfig {
    int n_q = 8;     // learnable queries per segment
    int d_q = 64;    // query width
    int layers = 2;  // q-former depth
    int g = 2;       // grouping factor; output tokens are n_q/g wide rows
    int n_max = 16;  // max segments per document
    int heads = 4;

    void validate() const {
        if (n_q < 1 || d_q < 1 || layers < 1 || g < 1 || n_max < 1 || heads < 1)
            throw std::invalid_argument("connector config fields must be positive");
        if (n_q % g != 0)
            throw std::invalid_argument("connector: g (" + std::to_string(g) +
                                        ") must divide n_q (" + std::to_string(n_q) + ")");
        if (d_q % heads != 0)
            throw std::invalid_argument("connector.d_q must be divisible by heads");
    }

    int64_t tokens_per_segment() const { return n_q / g; }
    int64_t d_out() const { return static_cast<int64_t>(g) * d_q; }
};

// Pure reshape: row i of the result is the concatenation of query rows
// [i*g, (i+1)*g). Invertible, carries gradients through unchanged.
template <class S>
Tensor<S> group_project(const Tensor<S>& q, int g) {
    if (g < 1 || q.rows() % g != 0)
        throw std::invalid_argument("group_project: g must divide the query count");
    return reshape(q, {q.rows() / g, g * q.cols()});
}

// Segment-level Q-Former: weighted-sum fusion over encoder layer states,
// segment position embeddings, cross-attending query blocks, and grouping
// into LM-width speech tokens.
template <class S>
class Connector {
public:
    Connector(const ConnectorConfig& cfg, const EncoderConfig& enc, ParamStore<S>& ps, Rng& rng)
        : cfg_(cfg), d_x_(enc.d_x) {
        cfg.validate();
        layer_logits_ = ps.create_const("connector/layer_logits",
                                        {1, static_cast<int64_t>(enc.layers) + 1}, S(0));
        seg_pos_ = ps.create("connector/seg_pos", {cfg.n_max, enc.d_x}, rng, 0.02);
        queries_ = ps.create("connector/queries", {cfg.n_q, cfg.d_q}, rng, 0.02);
        for (int l = 0; l < cfg.layers; ++l)
            blocks_.push_back(build_cross_block(ps, "connector/block" + std::to_string(l),
                                                cfg.d_q, enc.d_x, cfg.heads, 2 * cfg.d_q, rng));
    }

    const ConnectorConfig& config() const { return cfg_; }
    const Tensor<S>& layer_logits() const { return layer_logits_; }
    const Tensor<S>& seg_pos_table() const { return seg_pos_; }

    // softmax-normalized per-layer weights, shape [1, L+1]
    Tensor<S> layer_weights() const { return softmax(layer_logits_, 1); }

    Tensor<S> weighted_sum(const std::vector<Tensor<S>>& states) const {
        if (static_cast<int64_t>(states.size()) != layer_logits_.cols())
            throw std::invalid_argument(
                "weighted_sum: got " + std::to_string(states.size()) + " states for " +
                std::to_string(layer_logits_.cols()) + " layer weights");
        Tensor<S> w = layer_weights();
        Tensor<S> acc;
        for (size_t l = 0; l < states.size(); ++l) {
            Tensor<S> term = smul(states[l], col_slice(w, int64_t(l), int64_t(l) + 1));
            acc = l == 0 ? term : add(acc, term);
        }
        return acc;
    }

    Tensor<S> add_segment_pos(const Tensor<S>& x, int seg_idx) const {
        if (seg_idx < 0 || seg_idx >= cfg_.n_max)
            throw std::invalid_argument("add_segment_pos: segment index " +
                                        std::to_string(seg_idx) + " outside table of " +
                                        std::to_string(cfg_.n_max));
        Tensor<S> row = reshape(slice_rows(seg_pos_, seg_idx, seg_idx + 1), {d_x_});
        return add(x, row);
    }

    // n_q query rows regardless of the fused sequence length
    Tensor<S> qformer_forward(const Tensor<S>& fused) const {
        if (fused.rank() != 2 || fused.rows() < 1)
            throw std::invalid_argument("qformer_forward: fused states must be non-empty 2-D");
        Tensor<S> q = queries_;
        for (const auto& b : blocks_) q = b.forward(q, fused);
        return q;
    }

    // one segment end to end: fuse -> position -> q-former -> group
    Tensor<S> encode_segment(const std::vector<Tensor<S>>& states, int seg_idx,
                             bool use_segment_pos) const {
        Tensor<S> fused = weighted_sum(states);
        if (use_segment_pos) fused = add_segment_pos(fused, seg_idx);
        return group_project(qformer_forward(fused), cfg_.g);
    }

    // concatenated speech prompt for a whole document; `states_per_segment`
    // holds each segment's encoder states (so frozen-encoder caching stays
    // outside this class)
    Tensor<S> encode_long_speech(const std::vector<std::vector<Tensor<S>>>& states_per_segment,
                                 bool use_segment_pos) const {
        const int64_t n = static_cast<int64_t>(states_per_segment.size());
        if (n < 1) throw std::invalid_argument("encode_long_speech: no segments");
        if (n > cfg_.n_max)
            throw std::invalid_argument("encode_long_speech: " + std::to_string(n) +
                                        " segments exceed n_max " + std::to_string(cfg_.n_max));
        std::vector<Tensor<S>> parts;
        parts.reserve(static_cast<size_t>(n));
        for (int64_t s = 0; s < n; ++s)
            parts.push_back(
                encode_segment(states_per_segment[static_cast<size_t>(s)], int(s), use_segment_pos));
        return parts.size() == 1 ? parts[0] : concat_rows(parts);
    }

private:
    ConnectorConfig cfg_;
    int64_t d_x_;
    Tensor<S> layer_logits_, seg_pos_, queries_;
    std::vector<CrossBlock<S>> blocks_;
};

}  // namespace qsum
