#pragma once

#include <optional>

#include "qsum/nn.hpp"

namespace qsum {

struct LmConfig {
    int layers = 4;
    int d_lm = 128;
    int heads = 4;
    int vocab = 64;
    int max_seq = 1024;
    int lora_rank = 8;
    double lora_alpha = 16.0;
    int bos = 60;
    int eos = 61;
    int mask_id = 63;

    void validate() const {
        if (layers < 1 || d_lm < 1 || heads < 1 || vocab < 2 || max_seq < 2)
            throw std::invalid_argument("lm config fields must be positive");
        if (d_lm % heads != 0) throw std::invalid_argument("lm.d_lm must be divisible by heads");
        if (lora_rank < 1) throw std::invalid_argument("lm.lora_rank must be >= 1");
        if (lora_rank > d_lm)
            throw std::invalid_argument("lm.lora_rank exceeds the projection width");
        for (int id : {bos, eos, mask_id})
            if (id < 0 || id >= vocab)
                throw std::invalid_argument("lm special token ids must lie inside the vocab");
    }
};

// which modality of a segment (if any) is replaced by MASK embeddings
enum class MaskChoice { none, speech, text };

template <class S>
struct SegmentInput {
    Tensor<S> speech;                     // [k, d_lm] connector output
    const std::vector<int>* text = nullptr;  // transcript, or nullptr when dropped
    MaskChoice mask = MaskChoice::none;
};

template <class S>
struct BuiltPrefix {
    Tensor<S> embeds;          // [T, d_lm], modality + position embeddings applied
    std::vector<int> targets;  // per position; -1 marks no-loss positions
};

// Decoder-only LM. Attention projections carry LoRA adapters; the base
// matrices, feed-forward weights and layer norms form the frozen "base model"
// while embeddings, readout and adapters stay trainable.
template <class S>
class Lm {
public:
    Lm(const LmConfig& cfg, ParamStore<S>& ps, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        const int64_t d = cfg.d_lm;
        tok_emb_ = ps.create("lm/tok_emb", {cfg.vocab, d}, rng, 0.02);
        pos_emb_ = ps.create("lm/pos_emb", {cfg.max_seq, d}, rng, 0.02);
        mod_audio_ = ps.create("lm/mod_audio", {d}, rng, 0.02);
        mod_text_ = ps.create("lm/mod_text", {d}, rng, 0.02);
        for (int l = 0; l < cfg.layers; ++l)
            blocks_.push_back(build_block(ps, "lm/block" + std::to_string(l), d, cfg.heads, 2 * d,
                                          rng, "lora/block" + std::to_string(l), cfg.lora_rank,
                                          cfg.lora_alpha));
        final_ln_ = build_ln(ps, "lm/final_ln", d);
        // small readout keeps untrained predictions near-uniform (loss ~ ln V)
        readout_ = ps.create("lm/readout", {cfg.vocab, d}, rng, 0.02);
    }

    const LmConfig& config() const { return cfg_; }
    const Tensor<S>& tok_emb() const { return tok_emb_; }

    Tensor<S> forward_hidden(const Tensor<S>& x) const {
        if (x.rank() != 2 || x.cols() != cfg_.d_lm)
            throw std::invalid_argument("lm forward: expected [T, d_lm] input");
        if (x.rows() > cfg_.max_seq)
            throw std::invalid_argument("lm forward: sequence of " + std::to_string(x.rows()) +
                                        " exceeds max_seq " + std::to_string(cfg_.max_seq));
        Tensor<S> mask = causal_mask<S>(x.rows());
        Tensor<S> h = x;
        for (const auto& b : blocks_) h = b.forward(h, &mask);
        return final_ln_.forward(h);
    }

    Tensor<S> logits(const Tensor<S>& x) const { return matmul_nt(forward_hidden(x), readout_); }

    // Assembles [speech_1; text_1; ...; speech_N; text_N; summary?] with
    // modality and position embeddings, plus the aligned next-token targets.
    // Text blocks are [BOS, t1..tn] predicting [t1..tn, EOS]; the summary
    // block is [BOS, s1..s_{m-1}] predicting the full summary (which already
    // ends in EOS). Masked modalities keep their targets — only inputs change.
    BuiltPrefix<S> build_prefix(const std::vector<SegmentInput<S>>& segments,
                                const std::vector<int>* summary, bool supervise_text) const {
        std::vector<Tensor<S>> parts;
        std::vector<int> targets;
        assemble_segments(segments, supervise_text, parts, targets);
        if (summary != nullptr) {
            if (summary->empty()) throw std::invalid_argument("build_prefix: empty summary");
            std::vector<int> in{cfg_.bos};
            in.insert(in.end(), summary->begin(), summary->end() - 1);
            parts.push_back(add(rows(tok_emb_, in), mod_text_));
            targets.insert(targets.end(), summary->begin(), summary->end());
        }
        if (parts.empty()) throw std::invalid_argument("build_prefix: nothing to assemble");
        Tensor<S> seq = parts.size() == 1 ? parts[0] : concat_rows(parts);
        if (seq.rows() > cfg_.max_seq)
            throw std::invalid_argument("build_prefix: sequence of " + std::to_string(seq.rows()) +
                                        " exceeds max_seq " + std::to_string(cfg_.max_seq));
        BuiltPrefix<S> out;
        out.embeds = add(seq, slice_rows(pos_emb_, 0, seq.rows()));
        out.targets = std::move(targets);
        return out;
    }

    // mean NLL over target positions; gradients flow only into graph leaves
    // that require them (adapters, embeddings, readout, connector upstream)
    Tensor<S> lm_loss(const BuiltPrefix<S>& prefix) const {
        return cross_entropy(logits(prefix.embeds), prefix.targets, -1);
    }

    // Prefix for autoregressive decoding: the assembled segments followed by a
    // lone BOS under the text modality. Generation continues after the BOS.
    Tensor<S> generation_prefix(const std::vector<SegmentInput<S>>& segments) const {
        std::vector<Tensor<S>> parts;
        std::vector<int> targets;
        assemble_segments(segments, false, parts, targets);
        if (parts.empty()) throw std::invalid_argument("generation_prefix: no segments");
        parts.push_back(add(rows(tok_emb_, std::vector<int>{cfg_.bos}), mod_text_));
        Tensor<S> seq = concat_rows(parts);
        if (seq.rows() > cfg_.max_seq)
            throw std::invalid_argument("generation_prefix: sequence of " +
                                        std::to_string(seq.rows()) + " exceeds max_seq " +
                                        std::to_string(cfg_.max_seq));
        return add(seq, slice_rows(pos_emb_, 0, seq.rows()));
    }

    std::vector<int> generate_greedy(const Tensor<S>& prefix_embeds, int max_new) const {
        return generate_beam(prefix_embeds, max_new, 1);
    }

    // beam search over accumulated log-probability; ties break toward the
    // lower token id so width 1 reproduces greedy decoding exactly
    std::vector<int> generate_beam(const Tensor<S>& prefix_embeds, int max_new, int width) const {
        if (max_new < 1) throw std::invalid_argument("generate: max_new must be >= 1");
        if (width < 1) throw std::invalid_argument("generate: beam width must be >= 1");
        const int64_t t0 = prefix_embeds.rows();
        if (t0 + max_new > cfg_.max_seq)
            throw std::invalid_argument("generate: prefix plus max_new exceeds max_seq");

        struct Beam {
            Tensor<S> embeds;
            std::vector<int> toks;
            double logp = 0.0;
            bool done = false;
        };
        std::vector<Beam> beams{{prefix_embeds, {}, 0.0, false}};
        for (int step = 0; step < max_new; ++step) {
            bool any_live = false;
            struct Cand {
                size_t beam;
                int tok;      // -1 marks a finished beam carried over
                double logp;
            };
            std::vector<Cand> cands;
            for (size_t bi = 0; bi < beams.size(); ++bi) {
                if (beams[bi].done) {
                    cands.push_back({bi, -1, beams[bi].logp});
                    continue;
                }
                any_live = true;
                Tensor<S> lg = logits(beams[bi].embeds);
                Tensor<S> lp = log_softmax(slice_rows(lg, lg.rows() - 1, lg.rows()));
                for (int v = 0; v < cfg_.vocab; ++v)
                    cands.push_back({bi, v, beams[bi].logp + static_cast<double>(lp.data()[v])});
            }
            if (!any_live) break;
            std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
                if (a.logp != b.logp) return a.logp > b.logp;
                if (a.beam != b.beam) return a.beam < b.beam;
                return a.tok < b.tok;
            });
            std::vector<Beam> next;
            for (const Cand& c : cands) {
                if (static_cast<int>(next.size()) == width) break;
                if (c.tok < 0) {
                    next.push_back(beams[c.beam]);
                    continue;
                }
                Beam nb = beams[c.beam];
                nb.logp = c.logp;
                if (c.tok == cfg_.eos) {
                    nb.done = true;
                } else {
                    nb.toks.push_back(c.tok);
                    const int64_t pos = nb.embeds.rows();
                    Tensor<S> e = add(add(rows(tok_emb_, std::vector<int>{c.tok}), mod_text_),
                                      reshape(slice_rows(pos_emb_, pos, pos + 1),
                                              {static_cast<int64_t>(cfg_.d_lm)}));
                    nb.embeds = concat_rows<S>({nb.embeds, e});
                }
                next.push_back(std::move(nb));
            }
            beams = std::move(next);
        }
        return beams.front().toks;
    }

private:
    void assemble_segments(const std::vector<SegmentInput<S>>& segments, bool supervise_text,
                           std::vector<Tensor<S>>& parts, std::vector<int>& targets) const {
        for (const auto& seg : segments) {
            if (!seg.speech.defined() || seg.speech.cols() != cfg_.d_lm)
                throw std::invalid_argument("build_prefix: segment speech tokens must be [k, d_lm]");
            const int64_t k = seg.speech.rows();
            Tensor<S> sp = seg.mask == MaskChoice::speech
                               ? rows(tok_emb_, std::vector<int>(static_cast<size_t>(k),
                                                                 cfg_.mask_id))
                               : seg.speech;
            parts.push_back(add(sp, mod_audio_));
            targets.insert(targets.end(), static_cast<size_t>(k), -1);

            if (seg.text != nullptr) {
                std::vector<int> in{cfg_.bos};
                if (seg.mask == MaskChoice::text)
                    in.insert(in.end(), seg.text->size(), cfg_.mask_id);
                else
                    in.insert(in.end(), seg.text->begin(), seg.text->end());
                parts.push_back(add(rows(tok_emb_, in), mod_text_));
                if (supervise_text) {
                    targets.insert(targets.end(), seg.text->begin(), seg.text->end());
                    targets.push_back(cfg_.eos);
                } else {
                    targets.insert(targets.end(), in.size(), -1);
                }
            }
        }
    }

    LmConfig cfg_;
    Tensor<S> tok_emb_, pos_emb_, mod_audio_, mod_text_, readout_;
    std::vector<TransformerBlock<S>> blocks_;
    LayerNormParams<S> final_ln_;
};

}  // namespace qsum
