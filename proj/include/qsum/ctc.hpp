#pragma once

#include <algorithm>
#include <limits>
#include <vector>

#include "qsum/ops.hpp"

namespace qsum {

namespace detail {

inline double lse2(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline double lse3(double a, double b, double c) { return lse2(lse2(a, b), c); }

}  // namespace detail

// Minimum frame count needed to emit `labels` (repeats force a blank between).
inline int64_t ctc_min_frames(const std::vector<int>& labels) {
    int64_t need = static_cast<int64_t>(labels.size());
    for (size_t i = 1; i < labels.size(); ++i)
        if (labels[i] == labels[i - 1]) ++need;
    return need;
}

// CTC negative log-likelihood for one sequence. `logits` is [T, V+1] with the
// blank at column V. Forward pass runs the forward algorithm in log space;
// backward uses alpha/beta occupation posteriors to produce d(-logP)/dlogits.
template <class S>
Tensor<S> ctc_loss(const Tensor<S>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw std::invalid_argument("ctc_loss: logits must be [T, V+1]");
    const int64_t t_len = logits.rows();
    const int64_t vocab = logits.cols() - 1;  // last column is blank
    if (vocab < 1) throw std::invalid_argument("ctc_loss: need at least one non-blank symbol");
    for (int lab : labels)
        if (lab < 0 || lab >= vocab)
            throw std::invalid_argument("ctc_loss: label " + std::to_string(lab) +
                                        " out of range [0, " + std::to_string(vocab) + ")");
    if (t_len < ctc_min_frames(labels))
        throw std::invalid_argument(
            "ctc_loss: target infeasible, needs " + std::to_string(ctc_min_frames(labels)) +
            " frames but input has " + std::to_string(t_len));

    const int blank = static_cast<int>(vocab);
    const int64_t u_len = static_cast<int64_t>(labels.size());
    const int64_t s_len = 2 * u_len + 1;  // blanks interleaved
    std::vector<int> ext(static_cast<size_t>(s_len), blank);
    for (int64_t u = 0; u < u_len; ++u) ext[static_cast<size_t>(2 * u + 1)] = labels[u];

    // row-wise log-softmax of logits, in double for the DP regardless of S
    std::vector<double> logp(static_cast<size_t>(t_len * (vocab + 1)));
    {
        const S* src = logits.data();
        for (int64_t t = 0; t < t_len; ++t) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t k = 0; k <= vocab; ++k)
                mx = std::max(mx, static_cast<double>(src[t * (vocab + 1) + k]));
            double z = 0.0;
            for (int64_t k = 0; k <= vocab; ++k)
                z += std::exp(static_cast<double>(src[t * (vocab + 1) + k]) - mx);
            const double lz = mx + std::log(z);
            for (int64_t k = 0; k <= vocab; ++k)
                logp[static_cast<size_t>(t * (vocab + 1) + k)] =
                    static_cast<double>(src[t * (vocab + 1) + k]) - lz;
        }
    }
    auto lp = [&](int64_t t, int k) { return logp[static_cast<size_t>(t * (vocab + 1) + k)]; };
    const double ninf = -std::numeric_limits<double>::infinity();

    // alpha[t][s]: log prob of consuming t+1 frames and sitting at ext position s
    // (emission at frame t included)
    std::vector<double> alpha(static_cast<size_t>(t_len * s_len), ninf);
    auto a = [&](int64_t t, int64_t s) -> double& {
        return alpha[static_cast<size_t>(t * s_len + s)];
    };
    a(0, 0) = lp(0, blank);
    if (s_len > 1) a(0, 1) = lp(0, ext[1]);
    for (int64_t t = 1; t < t_len; ++t) {
        for (int64_t s = 0; s < s_len; ++s) {
            double acc = a(t - 1, s);
            if (s >= 1) acc = detail::lse2(acc, a(t - 1, s - 1));
            if (s >= 2 && ext[static_cast<size_t>(s)] != blank &&
                ext[static_cast<size_t>(s)] != ext[static_cast<size_t>(s - 2)])
                acc = detail::lse2(acc, a(t - 1, s - 2));
            a(t, s) = acc + lp(t, ext[static_cast<size_t>(s)]);
        }
    }
    double log_p = a(t_len - 1, s_len - 1);
    if (s_len > 1) log_p = detail::lse2(log_p, a(t_len - 1, s_len - 2));
    if (!std::isfinite(log_p))
        throw std::runtime_error("ctc_loss: zero-probability alignment (logP = -inf)");

    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(-log_p));
    Tensor<S> lg = logits;  // copy the handle for the closure
    detail::wire(out, {logits}, [lg, logp, alpha, ext, log_p, t_len, s_len, vocab, blank,
                                 out_node = out.node().get()]() {
        const double ninf2 = -std::numeric_limits<double>::infinity();
        // beta[t][s]: log prob of the suffix starting at position s with frame t
        // (emission at frame t included, matching alpha's convention)
        std::vector<double> beta(static_cast<size_t>(t_len * s_len), ninf2);
        auto lp = [&](int64_t t, int k) {
            return logp[static_cast<size_t>(t * (vocab + 1) + k)];
        };
        auto b = [&](int64_t t, int64_t s) -> double& {
            return beta[static_cast<size_t>(t * s_len + s)];
        };
        b(t_len - 1, s_len - 1) = lp(t_len - 1, blank);
        if (s_len > 1) b(t_len - 1, s_len - 2) = lp(t_len - 1, ext[static_cast<size_t>(s_len - 2)]);
        for (int64_t t = t_len - 2; t >= 0; --t) {
            for (int64_t s = s_len - 1; s >= 0; --s) {
                double acc = b(t + 1, s);
                if (s + 1 < s_len) acc = detail::lse2(acc, b(t + 1, s + 1));
                if (s + 2 < s_len && ext[static_cast<size_t>(s + 2)] != blank &&
                    ext[static_cast<size_t>(s + 2)] != ext[static_cast<size_t>(s)])
                    acc = detail::lse2(acc, b(t + 1, s + 2));
                b(t, s) = acc + lp(t, ext[static_cast<size_t>(s)]);
            }
        }
        auto* ln = lg.node().get();
        ln->ensure_grad();
        const S up = out_node->grad[0];
        for (int64_t t = 0; t < t_len; ++t) {
            for (int k = 0; k <= vocab; ++k) {
                // posterior mass of symbol k at frame t, log space
                double acc = ninf2;
                for (int64_t s = 0; s < s_len; ++s) {
                    if (ext[static_cast<size_t>(s)] != k) continue;
                    const double as = alpha[static_cast<size_t>(t * s_len + s)];
                    const double bs = beta[static_cast<size_t>(t * s_len + s)];
                    if (as == ninf2 || bs == ninf2) continue;
                    // alpha and beta both include emission at t; divide one out
                    acc = detail::lse2(acc, as + bs - lp(t, k));
                }
                const double post = acc == ninf2 ? 0.0 : std::exp(acc - log_p);
                const double y = std::exp(lp(t, k));
                ln->grad[static_cast<size_t>(t * (vocab + 1) + k)] +=
                    up * static_cast<S>(y - post);
            }
        }
    });
    return out;
}

// Greedy CTC decode: per-frame argmax, collapse repeats, strip blanks.
template <class S>
std::vector<int> ctc_greedy_decode(const Tensor<S>& logits) {
    if (logits.rank() != 2) throw std::invalid_argument("ctc_greedy_decode: logits must be 2-D");
    const int64_t t_len = logits.rows();
    const int64_t width = logits.cols();
    const int blank = static_cast<int>(width - 1);
    std::vector<int> out;
    int prev = -1;
    const S* src = logits.data();
    for (int64_t t = 0; t < t_len; ++t) {
        int best = 0;
        S best_v = src[t * width];
        for (int64_t k = 1; k < width; ++k)
            if (src[t * width + k] > best_v) {
                best_v = src[t * width + k];
                best = static_cast<int>(k);
            }
        if (best != blank && best != prev) out.push_back(best);
        prev = best;
    }
    return out;
}

}  // namespace qsum
