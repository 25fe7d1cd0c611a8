#pragma once

#include "qsum/ctc.hpp"
#include "qsum/nn.hpp"

namespace qsum {

struct EncoderConfig {
    int layers = 4;
    int d_x = 64;
    int heads = 4;
    int ffn = 128;
    int max_frames = 512;
    int vocab = 64;     // CTC label space; blank sits at index vocab
    int frame_dim = 32;  // width of the synthetic frame features
    int bos = 60;
    int eos = 61;

    void validate() const {
        if (layers < 2) throw std::invalid_argument("encoder.layers must be >= 2");
        if (d_x < 1 || heads < 1 || ffn < 1 || max_frames < 1 || vocab < 1 || frame_dim < 1)
            throw std::invalid_argument("encoder config fields must be positive");
        if (d_x % heads != 0) throw std::invalid_argument("encoder.d_x must be divisible by heads");
        if (bos < 0 || bos >= vocab || eos < 0 || eos >= vocab)
            throw std::invalid_argument("encoder bos/eos must lie inside the vocab");
    }
};

namespace detail {

// fixed sinusoidal position table, [rows, d]
template <class S>
Tensor<S> sinusoid_table(int64_t rows, int64_t d) {
    Tensor<S> t = Tensor<S>::zeros({rows, d});
    for (int64_t p = 0; p < rows; ++p) {
        for (int64_t i = 0; i < d; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
            t.data()[p * d + i] = static_cast<S>(std::sin(double(p) * freq));
            if (i + 1 < d) t.data()[p * d + i + 1] = static_cast<S>(std::cos(double(p) * freq));
        }
    }
    return t;
}

}  // namespace detail

// Transformer encoder over frame features. encode() returns the embedding
// output plus every block output (L+1 states) for the weighted-sum module.
template <class S>
class Encoder {
public:
    Encoder(const EncoderConfig& cfg, ParamStore<S>& ps, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        in_proj_ = ps.create("encoder/in_proj", {cfg.d_x, cfg.frame_dim}, rng,
                             1.0 / std::sqrt(double(cfg.frame_dim)));
        for (int l = 0; l < cfg.layers; ++l)
            blocks_.push_back(build_block(ps, "encoder/block" + std::to_string(l), cfg.d_x,
                                          cfg.heads, cfg.ffn, rng));
        pos_ = detail::sinusoid_table<S>(cfg.max_frames, cfg.d_x);
    }

    const EncoderConfig& config() const { return cfg_; }

    std::vector<Tensor<S>> encode(const Tensor<S>& frames) const {
        if (frames.rank() != 2 || frames.cols() != cfg_.frame_dim)
            throw std::invalid_argument("encode: frames must be [n_x, " +
                                        std::to_string(cfg_.frame_dim) + "], got " +
                                        shape_str(frames.shape()));
        const int64_t n_x = frames.rows();
        if (n_x == 0) throw std::invalid_argument("encode: empty frame sequence");
        if (n_x > cfg_.max_frames)
            throw std::invalid_argument("encode: " + std::to_string(n_x) +
                                        " frames exceed max_frames " +
                                        std::to_string(cfg_.max_frames));
        Tensor<S> x = add(matmul_nt(frames, in_proj_), slice_rows(pos_, 0, n_x));
        std::vector<Tensor<S>> states{x};
        for (const auto& b : blocks_) {
            x = b.forward(x);
            states.push_back(x);
        }
        return states;
    }

private:
    EncoderConfig cfg_;
    Tensor<S> in_proj_;
    std::vector<TransformerBlock<S>> blocks_;
    Tensor<S> pos_;  // constant, not a parameter
};

template <class S>
Tensor<S> hybrid_loss(const Tensor<S>& ctc, const Tensor<S>& att, double lambda) {
    if (lambda < 0.0 || lambda > 1.0)
        throw std::invalid_argument("hybrid_loss: lambda must lie in [0, 1]");
    return add(scale(ctc, static_cast<S>(lambda)), scale(att, static_cast<S>(1.0 - lambda)));
}

// Encoder plus its stage-0 training apparatus: a CTC head and a small
// attention decoder. Both heads are dropped when the encoder is frozen.
template <class S>
class PretrainModel {
public:
    PretrainModel(const EncoderConfig& cfg, ParamStore<S>& ps, Rng& rng)
        : cfg_(cfg), encoder_(cfg, ps, rng) {
        const int64_t d = cfg.d_x;
        ctc_w_ = ps.create("pretrain/ctc_head", {cfg.vocab + 1, d}, rng, 1.0 / std::sqrt(double(d)));
        tok_emb_ = ps.create("pretrain/dec/tok_emb", {cfg.vocab, d}, rng, 0.02);
        for (int l = 0; l < 2; ++l)
            dec_blocks_.push_back(build_cross_block(ps, "pretrain/dec/block" + std::to_string(l),
                                                    d, d, cfg.heads, cfg.ffn, rng));
        final_ln_ = build_ln(ps, "pretrain/dec/final_ln", d);
        readout_ = ps.create("pretrain/dec/readout", {cfg.vocab, d}, rng, 0.02);
        dec_pos_ = detail::sinusoid_table<S>(cfg.max_frames, d);
    }

    Encoder<S>& encoder() { return encoder_; }
    const Encoder<S>& encoder() const { return encoder_; }

    Tensor<S> ctc_logits(const std::vector<Tensor<S>>& states) const {
        return matmul_nt(states.back(), ctc_w_);
    }

    // teacher-forced attention branch: [BOS, t1..tn] predicts [t1..tn, EOS]
    Tensor<S> attention_nll(const std::vector<Tensor<S>>& states,
                            const std::vector<int>& transcript) const {
        std::vector<int> in{cfg_.bos};
        in.insert(in.end(), transcript.begin(), transcript.end());
        std::vector<int> tgt(transcript);
        tgt.push_back(cfg_.eos);
        const int64_t t = static_cast<int64_t>(in.size());
        Tensor<S> x = add(rows(tok_emb_, in), slice_rows(dec_pos_, 0, t));
        Tensor<S> mask = causal_mask<S>(t);
        for (const auto& b : dec_blocks_) x = b.forward(x, states.back(), &mask);
        x = final_ln_.forward(x);
        return cross_entropy(matmul_nt(x, readout_), tgt, -1);
    }

    Tensor<S> loss(const Tensor<S>& frames, const std::vector<int>& transcript,
                   double lambda) const {
        auto states = encoder_.encode(frames);
        Tensor<S> ctc = ctc_loss(ctc_logits(states), transcript);
        Tensor<S> att = attention_nll(states, transcript);
        return hybrid_loss(ctc, att, lambda);
    }

    std::vector<int> decode_ctc(const Tensor<S>& frames) const {
        return ctc_greedy_decode(ctc_logits(encoder_.encode(frames)));
    }

private:
    EncoderConfig cfg_;
    Encoder<S> encoder_;
    Tensor<S> ctc_w_, tok_emb_, readout_;
    std::vector<CrossBlock<S>> dec_blocks_;
    LayerNormParams<S> final_ln_;
    Tensor<S> dec_pos_;
};

}  // namespace qsum
