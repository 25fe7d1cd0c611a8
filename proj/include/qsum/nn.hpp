#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "qsum/ops.hpp"

namespace qsum {

// Ordered collection of named parameters. Order is creation order and drives
// checkpoint layout and optimizer iteration, so runs stay reproducible.
template <class S>
class ParamStore {
public:
    Tensor<S> create(const std::string& name, Shape shape, Rng& rng, double stddev) {
        Tensor<S> t = stddev == 0.0 ? Tensor<S>::zeros(std::move(shape), true)
                                    : Tensor<S>::randn(std::move(shape), rng, stddev, true);
        insert(name, t);
        return t;
    }

    Tensor<S> create_const(const std::string& name, Shape shape, S fill) {
        Tensor<S> t = Tensor<S>::filled(std::move(shape), fill, true);
        insert(name, t);
        return t;
    }

    void insert(const std::string& name, Tensor<S> t) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
    }

    Tensor<S>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return items_[it->second].second;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<std::pair<std::string, Tensor<S>>>& items() const { return items_; }
    std::vector<std::pair<std::string, Tensor<S>>>& items() { return items_; }

    std::vector<std::pair<std::string, Tensor<S>>> with_prefix(const std::string& prefix) const {
        std::vector<std::pair<std::string, Tensor<S>>> out;
        for (const auto& [name, t] : items_)
            if (name.rfind(prefix, 0) == 0) out.emplace_back(name, t);
        return out;
    }

    void zero_grad() {
        for (auto& [name, t] : items_) t.zero_grad();
    }

    // FNV-1a over names and raw values of parameters selected by `pred`;
    // used to audit that frozen weights stay bit-identical.
    uint64_t hash_subset(const std::function<bool(const std::string&)>& pred) const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [name, t] : items_) {
            if (!pred(name)) continue;
            h = fnv1a(name, h);
            h = fnv1a_bytes(t.data(), sizeof(S) * static_cast<size_t>(t.size()), h);
        }
        return h;
    }

private:
    std::vector<std::pair<std::string, Tensor<S>>> items_;
    std::map<std::string, size_t> index_;
};

// Adam with bias correction. Moment buffers are keyed by registration order;
// a non-finite gradient aborts the run naming the offending parameter.
template <class S>
class Adam {
public:
    explicit Adam(S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8))
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void add_param(const std::string& name, Tensor<S> t) {
        params_.emplace_back(name, std::move(t));
        slots_.push_back({std::vector<S>(params_.back().second.size(), S(0)),
                          std::vector<S>(params_.back().second.size(), S(0))});
    }

    int64_t step_count() const { return step_; }
    const std::vector<std::pair<std::string, Tensor<S>>>& params() const { return params_; }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    void step(S lr) {
        ++step_;
        const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1_), double(step_)));
        const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2_), double(step_)));
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            auto& [name, t] = params_[pi];
            auto& slot = slots_[pi];
            if (!t.has_grad()) continue;  // parameter not touched by any graph this step
            const std::vector<S>& g = t.node()->grad;
            std::vector<S>& val = t.values();
            const int64_t n = t.size();
            for (int64_t i = 0; i < n; ++i) {
                if (!std::isfinite(static_cast<double>(g[i])))
                    throw std::runtime_error("adam: non-finite gradient in parameter '" + name +
                                             "' at index " + std::to_string(i));
                slot.m[i] = beta1_ * slot.m[i] + (S(1) - beta1_) * g[i];
                slot.v[i] = beta2_ * slot.v[i] + (S(1) - beta2_) * g[i] * g[i];
                const S mhat = slot.m[i] / bc1;
                const S vhat = slot.v[i] / bc2;
                val[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

private:
    struct Slot {
        std::vector<S> m, v;
    };
    S beta1_, beta2_, eps_;
    int64_t step_ = 0;
    std::vector<std::pair<std::string, Tensor<S>>> params_;
    std::vector<Slot> slots_;
};

template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w) {
    return matmul_nt(x, w);  // w is [d_out, d_in]
}

// x * W^T + (alpha/R) * x * A^T * B^T with W frozen
template <class S>
Tensor<S> lora_linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& a,
                      const Tensor<S>& b, S alpha) {
    const int64_t rank = a.rows();
    if (rank < 1) throw std::invalid_argument("lora_linear: rank must be >= 1");
    if (rank > std::min(w.rows(), w.cols()))
        throw std::invalid_argument("lora_linear: rank " + std::to_string(rank) +
                                    " exceeds min dim of base matrix " + shape_str(w.shape()));
    if (a.cols() != w.cols() || b.rows() != w.rows() || b.cols() != rank)
        throw std::invalid_argument("lora_linear: factor shapes inconsistent with base");
    Tensor<S> base = matmul_nt(x, w);
    Tensor<S> low = matmul_nt(matmul_nt(x, a), b);
    return add(base, scale(low, alpha / static_cast<S>(rank)));
}

// weights of one multi-head attention sublayer; LoRA factors are optional
template <class S>
struct Mha {
    Tensor<S> wq, wk, wv, wo;              // each [d, d]
    Tensor<S> aq, bq, ak, bk, av, bv, ao, bo;  // optional LoRA factors
    bool lora = false;
    S lora_alpha = S(0);
    int heads = 1;

    Tensor<S> project(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& a,
                      const Tensor<S>& b) const {
        return lora ? lora_linear(x, w, a, b, lora_alpha) : linear(x, w);
    }

    // cross-attention when kv != q; pass `mask` with 0 at excluded positions
    Tensor<S> forward(const Tensor<S>& xq, const Tensor<S>& xkv,
                      const Tensor<S>* mask = nullptr) const {
        Tensor<S> q = project(xq, wq, aq, bq);
        Tensor<S> k = project(xkv, wk, ak, bk);
        Tensor<S> v = project(xkv, wv, av, bv);
        const int64_t d = q.cols();
        if (d % heads != 0) throw std::logic_error("mha: width not divisible by heads");
        const int64_t hd = d / heads;
        std::vector<Tensor<S>> outs;
        outs.reserve(static_cast<size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            Tensor<S> qh = col_slice(q, h * hd, (h + 1) * hd);
            Tensor<S> kh = col_slice(k, h * hd, (h + 1) * hd);
            Tensor<S> vh = col_slice(v, h * hd, (h + 1) * hd);
            outs.push_back(attention(qh, kh, vh, mask));
        }
        Tensor<S> cat = heads == 1 ? outs[0] : concat_cols(outs);
        return project(cat, wo, ao, bo);
    }
};

template <class S>
struct Ffn {
    Tensor<S> w1, w2;  // [hidden, d], [d, hidden]
    Tensor<S> forward(const Tensor<S>& x) const { return linear(gelu(linear(x, w1)), w2); }
};

template <class S>
struct LayerNormParams {
    Tensor<S> gamma, beta;
    Tensor<S> forward(const Tensor<S>& x) const { return layer_norm(x, gamma, beta, S(1e-5)); }
};

template <class S>
Tensor<S> causal_mask(int64_t t) {
    Tensor<S> m = Tensor<S>::zeros({t, t});
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j <= i; ++j) m.data()[i * t + j] = S(1);
    return m;
}

// pre-norm residual block: x + attn(ln(x)), then x + ffn(ln(x))
template <class S>
struct TransformerBlock {
    LayerNormParams<S> ln1, ln2;
    Mha<S> attn;
    Ffn<S> ffn;

    Tensor<S> forward(const Tensor<S>& x, const Tensor<S>* mask = nullptr) const {
        Tensor<S> h = ln1.forward(x);
        Tensor<S> y = add(x, attn.forward(h, h, mask));
        return add(y, ffn.forward(ln2.forward(y)));
    }
};

// decoder-style block: causal/self attention, cross-attention to a memory
// sequence, then feed-forward, all pre-norm residual
template <class S>
struct CrossBlock {
    LayerNormParams<S> ln1, ln2, ln3;
    Mha<S> self_attn, cross_attn;
    Ffn<S> ffn;

    Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& mem,
                      const Tensor<S>* self_mask = nullptr) const {
        Tensor<S> h = ln1.forward(x);
        Tensor<S> y = add(x, self_attn.forward(h, h, self_mask));
        y = add(y, cross_attn.forward(ln2.forward(y), mem));
        return add(y, ffn.forward(ln3.forward(y)));
    }
};

template <class S>
LayerNormParams<S> build_ln(ParamStore<S>& ps, const std::string& prefix, int64_t width) {
    return {ps.create_const(prefix + "/gamma", {width}, S(1)),
            ps.create_const(prefix + "/beta", {width}, S(0))};
}

// d_kv is the width of the attended sequence (== d_model for self-attention).
// When lora_prefix is non-empty, adapters are registered on all four
// projections under that prefix and the base matrices act as frozen anchors.
template <class S>
Mha<S> build_mha(ParamStore<S>& ps, const std::string& prefix, int64_t d_model, int64_t d_kv,
                 int heads, Rng& rng, const std::string& lora_prefix = "", int lora_rank = 0,
                 double lora_alpha = 0.0) {
    Mha<S> m;
    m.heads = heads;
    const double sq = 1.0 / std::sqrt(static_cast<double>(d_model));
    const double skv = 1.0 / std::sqrt(static_cast<double>(d_kv));
    m.wq = ps.create(prefix + "/wq", {d_model, d_model}, rng, sq);
    m.wk = ps.create(prefix + "/wk", {d_model, d_kv}, rng, skv);
    m.wv = ps.create(prefix + "/wv", {d_model, d_kv}, rng, skv);
    m.wo = ps.create(prefix + "/wo", {d_model, d_model}, rng, sq);
    if (!lora_prefix.empty()) {
        if (lora_rank < 1) throw std::invalid_argument("build_mha: lora rank must be >= 1");
        m.lora = true;
        m.lora_alpha = static_cast<S>(lora_alpha);
        const int64_t r = lora_rank;
        m.aq = ps.create(lora_prefix + "/aq", {r, d_model}, rng, 0.02);
        m.bq = ps.create_const(lora_prefix + "/bq", {d_model, r}, S(0));
        m.ak = ps.create(lora_prefix + "/ak", {r, d_kv}, rng, 0.02);
        m.bk = ps.create_const(lora_prefix + "/bk", {d_model, r}, S(0));
        m.av = ps.create(lora_prefix + "/av", {r, d_kv}, rng, 0.02);
        m.bv = ps.create_const(lora_prefix + "/bv", {d_model, r}, S(0));
        m.ao = ps.create(lora_prefix + "/ao", {r, d_model}, rng, 0.02);
        m.bo = ps.create_const(lora_prefix + "/bo", {d_model, r}, S(0));
    }
    return m;
}

template <class S>
Ffn<S> build_ffn(ParamStore<S>& ps, const std::string& prefix, int64_t d, int64_t hidden,
                 Rng& rng) {
    return {ps.create(prefix + "/w1", {hidden, d}, rng, 1.0 / std::sqrt(double(d))),
            ps.create(prefix + "/w2", {d, hidden}, rng, 1.0 / std::sqrt(double(hidden)))};
}

template <class S>
TransformerBlock<S> build_block(ParamStore<S>& ps, const std::string& prefix, int64_t d,
                                int heads, int64_t hidden, Rng& rng,
                                const std::string& lora_prefix = "", int lora_rank = 0,
                                double lora_alpha = 0.0) {
    TransformerBlock<S> b;
    b.ln1 = build_ln(ps, prefix + "/ln1", d);
    b.attn = build_mha(ps, prefix + "/attn", d, d, heads, rng, lora_prefix, lora_rank, lora_alpha);
    b.ln2 = build_ln(ps, prefix + "/ln2", d);
    b.ffn = build_ffn(ps, prefix + "/ffn", d, hidden, rng);
    return b;
}

template <class S>
CrossBlock<S> build_cross_block(ParamStore<S>& ps, const std::string& prefix, int64_t d_model,
                                int64_t d_kv, int heads, int64_t hidden, Rng& rng) {
    CrossBlock<S> b;
    b.ln1 = build_ln(ps, prefix + "/ln1", d_model);
    b.self_attn = build_mha(ps, prefix + "/self", d_model, d_model, heads, rng);
    b.ln2 = build_ln(ps, prefix + "/ln2", d_model);
    b.cross_attn = build_mha(ps, prefix + "/cross", d_model, d_kv, heads, rng);
    b.ln3 = build_ln(ps, prefix + "/ln3", d_model);
    b.ffn = build_ffn(ps, prefix + "/ffn", d_model, hidden, rng);
    return b;
}

struct GradCheckResult {
    double worst_rel = 0.0;
    std::string worst_param;
    int64_t worst_index = -1;
    int64_t coords_checked = 0;
    bool pass = true;
};

// Central-difference check of reverse-mode gradients. `f` must rebuild the
// scalar loss from the current values of `inputs` on every call.
template <class S>
GradCheckResult grad_check(const std::function<Tensor<S>()>& f,
                           std::vector<std::pair<std::string, Tensor<S>>> inputs, double eps,
                           double tol) {
    static_assert(std::is_same_v<S, double>, "grad_check is meaningful only in f64");
    for (auto& [name, t] : inputs) t.zero_grad();
    Tensor<S> loss = f();
    loss.backward();
    if (!std::isfinite(loss.item())) throw std::runtime_error("grad_check: non-finite loss");

    std::vector<std::vector<S>> analytic;
    for (auto& [name, t] : inputs)
        analytic.push_back(t.has_grad() ? t.node()->grad : std::vector<S>(t.size(), S(0)));

    GradCheckResult res;
    for (size_t pi = 0; pi < inputs.size(); ++pi) {
        auto& t = inputs[pi].second;
        for (int64_t i = 0; i < t.size(); ++i) {
            const S saved = t.data()[i];
            t.data()[i] = saved + static_cast<S>(eps);
            const double up = f().item();
            t.data()[i] = saved - static_cast<S>(eps);
            const double down = f().item();
            t.data()[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw std::runtime_error("grad_check: non-finite perturbed loss at " +
                                         inputs[pi].first);
            const double numeric = (up - down) / (2.0 * eps);
            const double a = static_cast<double>(analytic[pi][static_cast<size_t>(i)]);
            const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
            ++res.coords_checked;
            if (rel > res.worst_rel) {
                res.worst_rel = rel;
                res.worst_param = inputs[pi].first;
                res.worst_index = i;
            }
        }
    }
    res.pass = res.worst_rel < tol;
    return res;
}

}  // namespace qsum
