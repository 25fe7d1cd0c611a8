#pragma once

#include <vector>

#include "qsum/connector.hpp"
#include "qsum/ctc.hpp"
#include "qsum/lm.hpp"
#include "qsum/nn.hpp"

// Central-difference verification of every differentiable op, run in f64.
// Shared by the unit tests and the `qsum grad-check` CLI command.
namespace qsum {

struct GradCase {
    std::string name;
    GradCheckResult result;
};

namespace detail {

using T = Tensor<double>;

// reduce an arbitrary tensor to a scalar with distinct per-coordinate weights
// so no gradient component can hide behind a symmetric reduction
inline T weighted(const T& x, Rng& rng) {
    T w = T::randn(x.shape(), rng, 1.0);
    return sum(mul(x, w));
}

inline T rnd(Shape s, Rng& rng) { return T::randn(std::move(s), rng, 0.8, true); }

}  // namespace detail

inline std::vector<GradCase> run_grad_suite_ops(double eps = 1e-6, double tol = 1e-4) {
    using detail::rnd;
    using detail::T;
    using detail::weighted;
    std::vector<GradCase> out;
    Rng rng(20240915);

    auto run = [&](const std::string& name, const std::function<T()>& f,
                   std::vector<std::pair<std::string, T>> inputs) {
        out.push_back({name, grad_check<double>(f, std::move(inputs), eps, tol)});
    };

    {
        T a = rnd({3, 4}, rng), b = rnd({3, 4}, rng), w = rnd({3, 4}, rng);
        run("add", [=] { return sum(mul(add(a, b), w)); }, {{"a", a}, {"b", b}});
    }
    {
        T a = rnd({3, 4}, rng), b = rnd({4}, rng), w = rnd({3, 4}, rng);
        run("add_row_bcast", [=] { return sum(mul(add(a, b), w)); }, {{"a", a}, {"b", b}});
    }
    {
        T a = rnd({3, 4}, rng), b = rnd({1}, rng), w = rnd({3, 4}, rng);
        run("add_scalar_bcast", [=] { return sum(mul(add(a, b), w)); }, {{"a", a}, {"b", b}});
    }
    {
        T a = rnd({3, 4}, rng), b = rnd({4}, rng), w = rnd({3, 4}, rng);
        run("sub_row_bcast", [=] { return sum(mul(sub(a, b), w)); }, {{"a", a}, {"b", b}});
    }
    {
        T a = rnd({3, 4}, rng), b = rnd({3, 4}, rng), w = rnd({3, 4}, rng);
        run("mul", [=] { return sum(mul(mul(a, b), w)); }, {{"a", a}, {"b", b}});
    }
    {
        T a = rnd({3, 4}, rng), b = rnd({4}, rng), w = rnd({3, 4}, rng);
        run("mul_row_bcast", [=] { return sum(mul(mul(a, b), w)); }, {{"a", a}, {"b", b}});
    }
    {
        T a = rnd({3, 4}, rng), w = rnd({3, 4}, rng);
        run("scale_neg", [=] { return sum(mul(neg(scale(a, 1.7)), w)); }, {{"a", a}});
    }
    {
        T a = rnd({3, 4}, rng), s = rnd({1}, rng), w = rnd({3, 4}, rng);
        run("smul", [=] { return sum(mul(smul(a, s), w)); }, {{"a", a}, {"s", s}});
    }
    {
        T a = rnd({3, 4}, rng), b = rnd({4, 2}, rng), w = rnd({3, 2}, rng);
        run("matmul", [=] { return sum(mul(matmul(a, b), w)); }, {{"a", a}, {"b", b}});
    }
    {
        T a = rnd({3, 4}, rng), b = rnd({2, 4}, rng), w = rnd({3, 2}, rng);
        run("matmul_nt", [=] { return sum(mul(matmul_nt(a, b), w)); }, {{"a", a}, {"b", b}});
    }
    {
        T tab = rnd({5, 3}, rng), w = rnd({4, 3}, rng);
        std::vector<int> ids{1, 3, 3, 0};
        run("rows_gather", [=] { return sum(mul(rows(tab, ids), w)); }, {{"table", tab}});
    }
    {
        T a = rnd({5, 3}, rng), w = rnd({2, 3}, rng);
        run("slice_rows", [=] { return sum(mul(slice_rows(a, 1, 3), w)); }, {{"a", a}});
    }
    {
        T a = rnd({2, 3}, rng), b = rnd({3, 3}, rng), w = rnd({5, 3}, rng);
        run("concat_rows", [=] { return sum(mul(concat_rows<double>({a, b}), w)); },
            {{"a", a}, {"b", b}});
    }
    {
        T a = rnd({3, 5}, rng), w = rnd({3, 2}, rng);
        run("col_slice", [=] { return sum(mul(col_slice(a, 2, 4), w)); }, {{"a", a}});
    }
    {
        T a = rnd({3, 2}, rng), b = rnd({3, 3}, rng), w = rnd({3, 5}, rng);
        run("concat_cols", [=] { return sum(mul(concat_cols<double>({a, b}), w)); },
            {{"a", a}, {"b", b}});
    }
    {
        T a = rnd({3, 4}, rng), w = rnd({2, 6}, rng);
        run("reshape", [=] { return sum(mul(reshape(a, {2, 6}), w)); }, {{"a", a}});
    }
    {
        T a = rnd({3, 4}, rng), w = rnd({3, 4}, rng);
        run("softmax_axis1", [=] { return sum(mul(softmax(a, 1), w)); }, {{"a", a}});
        run("softmax_axis0", [=] { return sum(mul(softmax(a, 0), w)); }, {{"a", a}});
        run("log_softmax", [=] { return sum(mul(log_softmax(a), w)); }, {{"a", a}});
    }
    {
        T a = rnd({3, 4}, rng), g = rnd({4}, rng), b = rnd({4}, rng), w = rnd({3, 4}, rng);
        run("layer_norm", [=] { return sum(mul(layer_norm(a, g, b, 1e-5), w)); },
            {{"x", a}, {"gamma", g}, {"beta", b}});
    }
    {
        T a = rnd({3, 4}, rng), w = rnd({3, 4}, rng);
        run("gelu", [=] { return sum(mul(gelu(a), w)); }, {{"a", a}});
    }
    {
        T a = rnd({3, 4}, rng);
        run("sum", [=] { return sum(a); }, {{"a", a}});
        run("mean", [=] { return mean(a); }, {{"a", a}});
    }
    {
        T lg = rnd({4, 5}, rng);
        std::vector<int> tgt{1, 4, -1, 2};
        run("cross_entropy", [=] { return cross_entropy(lg, tgt, -1); }, {{"logits", lg}});
    }
    {
        T q = rnd({3, 4}, rng), k = rnd({5, 4}, rng), v = rnd({5, 4}, rng), w = rnd({3, 4}, rng);
        run("attention", [=] { return sum(mul(attention(q, k, v), w)); },
            {{"q", q}, {"k", k}, {"v", v}});
        T mask = T::zeros({3, 5});
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j <= i + 1; ++j) mask.data()[i * 5 + j] = 1.0;
        run("attention_masked",
            [=] { return sum(mul(attention(q, k, v, &mask), w)); },
            {{"q", q}, {"k", k}, {"v", v}});
    }
    {
        T x = rnd({3, 4}, rng), wt = rnd({5, 4}, rng), a = rnd({2, 4}, rng);
        T b = rnd({5, 2}, rng), w = rnd({3, 5}, rng);
        run("lora_linear",
            [=] { return sum(mul(lora_linear(x, wt, a, b, 16.0), w)); },
            {{"x", x}, {"w", wt}, {"a", a}, {"b", b}});
    }
    {
        Mha<double> mha;
        mha.heads = 2;
        mha.wq = rnd({4, 4}, rng);
        mha.wk = rnd({4, 4}, rng);
        mha.wv = rnd({4, 4}, rng);
        mha.wo = rnd({4, 4}, rng);
        mha.lora = true;
        mha.lora_alpha = 16.0;
        mha.aq = rnd({2, 4}, rng);
        mha.bq = rnd({4, 2}, rng);
        mha.ak = rnd({2, 4}, rng);
        mha.bk = rnd({4, 2}, rng);
        mha.av = rnd({2, 4}, rng);
        mha.bv = rnd({4, 2}, rng);
        mha.ao = rnd({2, 4}, rng);
        mha.bo = rnd({4, 2}, rng);
        T x = rnd({3, 4}, rng), w = rnd({3, 4}, rng);
        T mask = causal_mask<double>(3);
        run("mha_lora_causal", [=] { return sum(mul(mha.forward(x, x, &mask), w)); },
            {{"x", x},
             {"wq", mha.wq},
             {"aq", mha.aq},
             {"bq", mha.bq},
             {"ao", mha.ao},
             {"bo", mha.bo},
             {"wo", mha.wo}});
    }
    {
        Ffn<double> ffn{rnd({6, 4}, rng), rnd({4, 6}, rng)};
        T x = rnd({3, 4}, rng), w = rnd({3, 4}, rng);
        run("ffn", [=] { return sum(mul(ffn.forward(x), w)); },
            {{"x", x}, {"w1", ffn.w1}, {"w2", ffn.w2}});
    }
    {
        TransformerBlock<double> blk;
        blk.ln1 = {rnd({4}, rng), rnd({4}, rng)};
        blk.ln2 = {rnd({4}, rng), rnd({4}, rng)};
        blk.attn.heads = 2;
        blk.attn.wq = rnd({4, 4}, rng);
        blk.attn.wk = rnd({4, 4}, rng);
        blk.attn.wv = rnd({4, 4}, rng);
        blk.attn.wo = rnd({4, 4}, rng);
        blk.ffn = {rnd({8, 4}, rng), rnd({4, 8}, rng)};
        T x = rnd({3, 4}, rng), w = rnd({3, 4}, rng);
        T mask = causal_mask<double>(3);
        run("transformer_block",
            [=] { return sum(mul(blk.forward(x, &mask), w)); },
            {{"x", x},
             {"ln1.gamma", blk.ln1.gamma},
             {"wq", blk.attn.wq},
             {"wv", blk.attn.wv},
             {"w1", blk.ffn.w1},
             {"w2", blk.ffn.w2}});
    }
    {
        T lg = rnd({5, 4}, rng);  // T=5, V=3 plus blank
        std::vector<int> labels{1, 1, 2};
        run("ctc_loss", [=] { return ctc_loss(lg, labels); }, {{"logits", lg}});
    }
    return out;
}

// End-to-end microstep: two segments of encoder states flow through the
// connector into the adapted LM, with a masked transcript and a summary in
// the sequence. Every parameter (and the states themselves) is checked, so a
// dead or mis-wired path anywhere between the encoder output and the loss
// shows up here. size_mult widens the model for longer runs.
inline std::vector<GradCase> run_grad_suite_model(int size_mult = 1, double eps = 1e-6,
                                                  double tol = 1e-4) {
    using detail::T;
    if (size_mult < 1) throw std::invalid_argument("grad suite: size_mult must be >= 1");
    Rng rng(20241001);

    EncoderConfig ecfg;
    ecfg.layers = 2;
    ecfg.d_x = 6 * size_mult;
    ecfg.heads = 2;
    ecfg.ffn = 8 * size_mult;
    ecfg.max_frames = 16;
    ecfg.frame_dim = 4;
    ecfg.vocab = 10;
    ecfg.bos = 7;
    ecfg.eos = 8;

    ConnectorConfig ccfg;
    ccfg.n_q = 4;
    ccfg.d_q = 4 * size_mult;
    ccfg.layers = 1;
    ccfg.g = 2;
    ccfg.n_max = 3;
    ccfg.heads = 2;

    LmConfig lcfg;
    lcfg.layers = 1;
    lcfg.d_lm = ccfg.g * ccfg.d_q;
    lcfg.heads = 2;
    lcfg.vocab = 10;
    lcfg.max_seq = 32;
    lcfg.lora_rank = 2;
    lcfg.lora_alpha = 4.0;
    lcfg.bos = 7;
    lcfg.eos = 8;
    lcfg.mask_id = 9;

    ParamStore<double> ps;
    Connector<double> conn(ccfg, ecfg, ps, rng);
    Lm<double> lm(lcfg, ps, rng);

    std::vector<std::pair<std::string, T>> inputs;
    std::vector<std::vector<T>> states(2);
    const int frame_rows[2] = {3, 2};
    for (int s = 0; s < 2; ++s)
        for (int l = 0; l <= ecfg.layers; ++l) {
            T st = T::randn({frame_rows[s], ecfg.d_x}, rng, 0.8, true);
            states[static_cast<size_t>(s)].push_back(st);
            inputs.push_back(
                {"states/seg" + std::to_string(s) + "/layer" + std::to_string(l), st});
        }
    for (auto& [name, t] : ps.items()) {
        t.node()->requires_grad = true;  // include the zero-initialized fusion logits
        inputs.push_back({name, t});
    }

    const std::vector<int> text0{1, 2};
    const std::vector<int> text1{3};
    const std::vector<int> summary{2, 3, 8};
    auto loss_fn = [&]() {
        std::vector<SegmentInput<double>> segs(2);
        segs[0].speech = conn.encode_segment(states[0], 0, true);
        segs[0].text = &text0;
        segs[1].speech = conn.encode_segment(states[1], 1, true);
        segs[1].text = &text1;
        segs[1].mask = MaskChoice::text;  // route gradient through the MASK embedding too
        return lm.lm_loss(lm.build_prefix(segs, &summary, true));
    };

    std::vector<GradCase> out;
    out.push_back({"full_model_microstep",
                   grad_check<double>(loss_fn, std::move(inputs), eps, tol)});
    return out;
}

}  // namespace qsum
