#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "qsum/tensor.hpp"

// Differentiable primitives. Broadcasting is deliberately narrow: elementwise
// ops accept equal shapes, a rank-1 row vector broadcast over the rows of a
// 2-D tensor, or a scalar; anything else throws.

namespace qsum {

namespace detail {

enum class Bcast { same, row, scalar };

template <class S>
Bcast bcast_kind(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() == b.shape()) return Bcast::same;
    if (b.size() == 1) return Bcast::scalar;
    if (a.rank() == 2 && b.rank() == 1 && b.size() == a.cols()) return Bcast::row;
    throw std::invalid_argument(std::string(op) + ": unsupported shapes " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    const auto kind = detail::bcast_kind(a, b, "add");
    Tensor<S> out = Tensor<S>::from(a.shape(), a.values());
    S* o = out.data();
    const S* bv = b.data();
    const int64_t n = a.size(), c = a.cols();
    switch (kind) {
        case detail::Bcast::same:
            for (int64_t i = 0; i < n; ++i) o[i] += bv[i];
            break;
        case detail::Bcast::scalar:
            for (int64_t i = 0; i < n; ++i) o[i] += bv[0];
            break;
        case detail::Bcast::row:
            for (int64_t i = 0; i < n; ++i) o[i] += bv[i % c];
            break;
    }
    auto an = a.node(), bn = b.node();
    auto* on = out.node().get();
    detail::wire(out, {a, b}, [an, bn, on, kind, n, c] {
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            switch (kind) {
                case detail::Bcast::same:
                    for (int64_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
                    break;
                case detail::Bcast::scalar:
                    for (int64_t i = 0; i < n; ++i) bn->grad[0] += on->grad[i];
                    break;
                case detail::Bcast::row:
                    for (int64_t i = 0; i < n; ++i) bn->grad[i % c] += on->grad[i];
                    break;
            }
        }
    });
    return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    const auto kind = detail::bcast_kind(a, b, "sub");
    Tensor<S> out = Tensor<S>::from(a.shape(), a.values());
    S* o = out.data();
    const S* bv = b.data();
    const int64_t n = a.size(), c = a.cols();
    switch (kind) {
        case detail::Bcast::same:
            for (int64_t i = 0; i < n; ++i) o[i] -= bv[i];
            break;
        case detail::Bcast::scalar:
            for (int64_t i = 0; i < n; ++i) o[i] -= bv[0];
            break;
        case detail::Bcast::row:
            for (int64_t i = 0; i < n; ++i) o[i] -= bv[i % c];
            break;
    }
    auto an = a.node(), bn = b.node();
    auto* on = out.node().get();
    detail::wire(out, {a, b}, [an, bn, on, kind, n, c] {
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            switch (kind) {
                case detail::Bcast::same:
                    for (int64_t i = 0; i < n; ++i) bn->grad[i] -= on->grad[i];
                    break;
                case detail::Bcast::scalar:
                    for (int64_t i = 0; i < n; ++i) bn->grad[0] -= on->grad[i];
                    break;
                case detail::Bcast::row:
                    for (int64_t i = 0; i < n; ++i) bn->grad[i % c] -= on->grad[i];
                    break;
            }
        }
    });
    return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    const auto kind = detail::bcast_kind(a, b, "mul");
    Tensor<S> out = Tensor<S>::from(a.shape(), a.values());
    S* o = out.data();
    const S* bv = b.data();
    const int64_t n = a.size(), c = a.cols();
    auto bval = [&](int64_t i) {
        switch (kind) {
            case detail::Bcast::same: return bv[i];
            case detail::Bcast::scalar: return bv[0];
            default: return bv[i % c];
        }
    };
    for (int64_t i = 0; i < n; ++i) o[i] *= bval(i);
    auto an = a.node(), bn = b.node();
    auto* on = out.node().get();
    detail::wire(out, {a, b}, [an, bn, on, kind, n, c] {
        const S* av = an->value.data();
        const S* bv2 = bn->value.data();
        auto bval2 = [&](int64_t i) {
            switch (kind) {
                case detail::Bcast::same: return bv2[i];
                case detail::Bcast::scalar: return bv2[0];
                default: return bv2[i % c];
            }
        };
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bval2(i);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            switch (kind) {
                case detail::Bcast::same:
                    for (int64_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * av[i];
                    break;
                case detail::Bcast::scalar:
                    for (int64_t i = 0; i < n; ++i) bn->grad[0] += on->grad[i] * av[i];
                    break;
                case detail::Bcast::row:
                    for (int64_t i = 0; i < n; ++i) bn->grad[i % c] += on->grad[i] * av[i];
                    break;
            }
        }
    });
    return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::from(a.shape(), a.values());
    for (S& x : out.values()) x *= c;
    auto an = a.node();
    auto* on = out.node().get();
    detail::wire(out, {a}, [an, on, c] {
        an->ensure_grad();
        const int64_t n = static_cast<int64_t>(an->value.size());
        for (int64_t i = 0; i < n; ++i) an->grad[i] += c * on->grad[i];
    });
    return out;
}

template <class S>
Tensor<S> neg(const Tensor<S>& a) {
    return scale(a, S(-1));
}

// product of a matrix by a differentiable scalar (shape [1]) tensor
template <class S>
Tensor<S> smul(const Tensor<S>& a, const Tensor<S>& s) {
    if (s.size() != 1) throw std::invalid_argument("smul: scalar operand must have size 1");
    const S sv = s.item();
    Tensor<S> out = Tensor<S>::from(a.shape(), a.values());
    for (S& x : out.values()) x *= sv;
    auto an = a.node(), sn = s.node();
    auto* on = out.node().get();
    detail::wire(out, {a, s}, [an, sn, on] {
        const int64_t n = static_cast<int64_t>(an->value.size());
        const S svv = sn->value[0];
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i) an->grad[i] += svv * on->grad[i];
        }
        if (sn->requires_grad) {
            sn->ensure_grad();
            S acc = 0;
            for (int64_t i = 0; i < n; ++i) acc += on->grad[i] * an->value[i];
            sn->grad[0] += acc;
        }
    });
    return out;
}

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros({a.rows(), b.cols()});
    out.mat().noalias() = a.mat() * b.mat();
    auto an = a.node(), bn = b.node();
    auto* on = out.node().get();
    const int64_t n = a.rows(), k = a.cols(), m = b.cols();
    detail::wire(out, {a, b}, [an, bn, on, n, k, m] {
        ConstMatMap<S> g(on->grad.data(), n, m);
        ConstMatMap<S> av(an->value.data(), n, k);
        ConstMatMap<S> bv(bn->value.data(), k, m);
        if (an->requires_grad) {
            an->ensure_grad();
            MatMap<S>(an->grad.data(), n, k).noalias() += g * bv.transpose();
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            MatMap<S>(bn->grad.data(), k, m).noalias() += av.transpose() * g;
        }
    });
    return out;
}

// a [n,k] times b^T where b is [m,k]; saves materializing transposes
template <class S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
        throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()) + "^T");
    Tensor<S> out = Tensor<S>::zeros({a.rows(), b.rows()});
    out.mat().noalias() = a.mat() * b.mat().transpose();
    auto an = a.node(), bn = b.node();
    auto* on = out.node().get();
    const int64_t n = a.rows(), k = a.cols(), m = b.rows();
    detail::wire(out, {a, b}, [an, bn, on, n, k, m] {
        ConstMatMap<S> g(on->grad.data(), n, m);
        ConstMatMap<S> av(an->value.data(), n, k);
        ConstMatMap<S> bv(bn->value.data(), m, k);
        if (an->requires_grad) {
            an->ensure_grad();
            MatMap<S>(an->grad.data(), n, k).noalias() += g * bv;
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            MatMap<S>(bn->grad.data(), m, k).noalias() += g.transpose() * av;
        }
    });
    return out;
}

// gather rows of a 2-D table; backward scatter-adds
template <class S>
Tensor<S> rows(const Tensor<S>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw std::invalid_argument("rows: table must be 2-D");
    const int64_t r = table.rows(), c = table.cols();
    for (int id : ids)
        if (id < 0 || id >= r)
            throw std::out_of_range("rows: id " + std::to_string(id) + " out of range [0, " +
                                    std::to_string(r) + ")");
    Tensor<S> out = Tensor<S>::zeros({static_cast<int64_t>(ids.size()), c});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.data() + static_cast<int64_t>(ids[i]) * c, c, out.data() + i * c);
    auto tn = table.node();
    auto* on = out.node().get();
    detail::wire(out, {table}, [tn, on, ids, c] {
        tn->ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
            S* dst = tn->grad.data() + static_cast<int64_t>(ids[i]) * c;
            const S* src = on->grad.data() + i * c;
            for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
        }
    });
    return out;
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& a, int64_t r0, int64_t r1) {
    if (a.rank() != 2 || r0 < 0 || r1 > a.rows() || r0 >= r1)
        throw std::invalid_argument("slice_rows: bad range");
    const int64_t c = a.cols();
    Tensor<S> out = Tensor<S>::zeros({r1 - r0, c});
    std::copy_n(a.data() + r0 * c, (r1 - r0) * c, out.data());
    auto an = a.node();
    auto* on = out.node().get();
    detail::wire(out, {a}, [an, on, r0, r1, c] {
        an->ensure_grad();
        const int64_t n = (r1 - r0) * c;
        S* dst = an->grad.data() + r0 * c;
        for (int64_t i = 0; i < n; ++i) dst[i] += on->grad[i];
    });
    return out;
}

template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    const int64_t c = parts[0].cols();
    int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.cols() != c)
            throw std::invalid_argument("concat_rows: column mismatch");
        total += p.rows();
    }
    Tensor<S> out = Tensor<S>::zeros({total, c});
    int64_t off = 0;
    std::vector<int64_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(off);
        std::copy_n(p.data(), p.size(), out.data() + off * c);
        off += p.rows();
    }
    bool req = false;
    for (const auto& p : parts) req = req || p.requires_grad();
    if (req) {
        auto* on = out.node().get();
        std::vector<std::shared_ptr<TensorNode<S>>> pnodes;
        for (const auto& p : parts) pnodes.push_back(p.node());
        out.node()->requires_grad = true;
        out.node()->parents = pnodes;
        out.node()->backward_fn = [on, pnodes, offsets, c] {
            for (size_t i = 0; i < pnodes.size(); ++i) {
                auto& p = pnodes[i];
                if (!p->requires_grad) continue;
                p->ensure_grad();
                const S* src = on->grad.data() + offsets[i] * c;
                const int64_t n = static_cast<int64_t>(p->value.size());
                for (int64_t j = 0; j < n; ++j) p->grad[j] += src[j];
            }
        };
    }
    return out;
}

template <class S>
Tensor<S> col_slice(const Tensor<S>& a, int64_t c0, int64_t c1) {
    if (a.rank() != 2 || c0 < 0 || c1 > a.cols() || c0 >= c1)
        throw std::invalid_argument("col_slice: bad range");
    const int64_t r = a.rows(), c = a.cols(), w = c1 - c0;
    Tensor<S> out = Tensor<S>::zeros({r, w});
    for (int64_t i = 0; i < r; ++i)
        std::copy_n(a.data() + i * c + c0, w, out.data() + i * w);
    auto an = a.node();
    auto* on = out.node().get();
    detail::wire(out, {a}, [an, on, r, c, c0, w] {
        an->ensure_grad();
        for (int64_t i = 0; i < r; ++i) {
            S* dst = an->grad.data() + i * c + c0;
            const S* src = on->grad.data() + i * w;
            for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
        }
    });
    return out;
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
    const int64_t r = parts[0].rows();
    int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
        total += p.cols();
    }
    Tensor<S> out = Tensor<S>::zeros({r, total});
    std::vector<int64_t> offsets;
    int64_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        for (int64_t i = 0; i < r; ++i)
            std::copy_n(p.data() + i * p.cols(), p.cols(), out.data() + i * total + off);
        off += p.cols();
    }
    bool req = false;
    for (const auto& p : parts) req = req || p.requires_grad();
    if (req) {
        auto* on = out.node().get();
        std::vector<std::shared_ptr<TensorNode<S>>> pnodes;
        std::vector<int64_t> widths;
        for (const auto& p : parts) {
            pnodes.push_back(p.node());
            widths.push_back(p.cols());
        }
        out.node()->requires_grad = true;
        out.node()->parents = pnodes;
        out.node()->backward_fn = [on, pnodes, offsets, widths, r, total] {
            for (size_t i = 0; i < pnodes.size(); ++i) {
                auto& p = pnodes[i];
                if (!p->requires_grad) continue;
                p->ensure_grad();
                for (int64_t row = 0; row < r; ++row) {
                    const S* src = on->grad.data() + row * total + offsets[i];
                    S* dst = p->grad.data() + row * widths[i];
                    for (int64_t j = 0; j < widths[i]; ++j) dst[j] += src[j];
                }
            }
        };
    }
    return out;
}

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    if (numel(shape) != a.size())
        throw std::invalid_argument("reshape: size mismatch " + shape_str(a.shape()) + " -> " +
                                    shape_str(shape));
    Tensor<S> out = Tensor<S>::from(std::move(shape), a.values());
    auto an = a.node();
    auto* on = out.node().get();
    detail::wire(out, {a}, [an, on] {
        an->ensure_grad();
        const int64_t n = static_cast<int64_t>(an->value.size());
        for (int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
    });
    return out;
}

// numerically stable softmax along `axis` of a 1-D or 2-D tensor
template <class S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
    if (axis < 0 || axis >= x.rank())
        throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                    " out of range for rank " + std::to_string(x.rank()));
    if (x.rank() > 2) throw std::invalid_argument("softmax: rank > 2 unsupported");
    // normalize to: slices of length `len` with stride `stride`
    const bool along_cols = (x.rank() == 1) || (axis == 1);
    const int64_t slices = along_cols ? x.rows() : x.cols();
    const int64_t len = along_cols ? x.cols() : x.rows();
    const int64_t stride = along_cols ? 1 : x.cols();
    const int64_t slice_step = along_cols ? x.cols() : 1;

    Tensor<S> out = Tensor<S>::from(x.shape(), x.values());
    S* o = out.data();
    for (int64_t s = 0; s < slices; ++s) {
        S* p = o + s * slice_step;
        S mx = p[0];
        for (int64_t i = 1; i < len; ++i) mx = std::max(mx, p[i * stride]);
        S sum = 0;
        for (int64_t i = 0; i < len; ++i) {
            S e = std::exp(p[i * stride] - mx);
            p[i * stride] = e;
            sum += e;
        }
        for (int64_t i = 0; i < len; ++i) p[i * stride] /= sum;
    }
    auto xn = x.node();
    auto* on = out.node().get();
    detail::wire(out, {x}, [xn, on, slices, len, stride, slice_step] {
        xn->ensure_grad();
        for (int64_t s = 0; s < slices; ++s) {
            const S* y = on->value.data() + s * slice_step;
            const S* gy = on->grad.data() + s * slice_step;
            S* gx = xn->grad.data() + s * slice_step;
            S dot = 0;
            for (int64_t i = 0; i < len; ++i) dot += y[i * stride] * gy[i * stride];
            for (int64_t i = 0; i < len; ++i)
                gx[i * stride] += y[i * stride] * (gy[i * stride] - dot);
        }
    });
    return out;
}

// log-softmax along the last axis of a 2-D tensor
template <class S>
Tensor<S> log_softmax(const Tensor<S>& x) {
    if (x.rank() != 2) throw std::invalid_argument("log_softmax: expects 2-D input");
    const int64_t r = x.rows(), c = x.cols();
    Tensor<S> out = Tensor<S>::from(x.shape(), x.values());
    S* o = out.data();
    for (int64_t i = 0; i < r; ++i) {
        S* p = o + i * c;
        S mx = p[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, p[j]);
        S sum = 0;
        for (int64_t j = 0; j < c; ++j) sum += std::exp(p[j] - mx);
        const S lse = mx + std::log(sum);
        for (int64_t j = 0; j < c; ++j) p[j] -= lse;
    }
    auto xn = x.node();
    auto* on = out.node().get();
    detail::wire(out, {x}, [xn, on, r, c] {
        xn->ensure_grad();
        for (int64_t i = 0; i < r; ++i) {
            const S* y = on->value.data() + i * c;
            const S* gy = on->grad.data() + i * c;
            S* gx = xn->grad.data() + i * c;
            S gsum = 0;
            for (int64_t j = 0; j < c; ++j) gsum += gy[j];
            for (int64_t j = 0; j < c; ++j) gx[j] += gy[j] - std::exp(y[j]) * gsum;
        }
    });
    return out;
}

// per-row layer norm over the last axis; gamma/beta have that length
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
    if (eps <= S(0)) throw std::invalid_argument("layer_norm: eps must be positive");
    const int64_t r = x.rows(), c = x.cols();
    if (gamma.size() != c || beta.size() != c)
        throw std::invalid_argument("layer_norm: gamma/beta length " +
                                    std::to_string(gamma.size()) + " vs feature dim " +
                                    std::to_string(c));
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    std::vector<S> inv_std(static_cast<size_t>(r));
    std::vector<S> xhat(static_cast<size_t>(r * c));
    for (int64_t i = 0; i < r; ++i) {
        const S* p = x.data() + i * c;
        S mean = 0;
        for (int64_t j = 0; j < c; ++j) mean += p[j];
        mean /= static_cast<S>(c);
        S var = 0;
        for (int64_t j = 0; j < c; ++j) var += (p[j] - mean) * (p[j] - mean);
        var /= static_cast<S>(c);
        const S istd = S(1) / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = istd;
        S* h = xhat.data() + i * c;
        S* o = out.data() + i * c;
        for (int64_t j = 0; j < c; ++j) {
            h[j] = (p[j] - mean) * istd;
            o[j] = h[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    auto* on = out.node().get();
    detail::wire(out, {x, gamma, beta},
                 [xn, gn, bn, on, r, c, inv_std = std::move(inv_std), xhat = std::move(xhat)] {
                     for (int64_t i = 0; i < r; ++i) {
                         const S* gy = on->grad.data() + i * c;
                         const S* h = xhat.data() + i * c;
                         if (gn->requires_grad) {
                             gn->ensure_grad();
                             for (int64_t j = 0; j < c; ++j) gn->grad[j] += gy[j] * h[j];
                         }
                         if (bn->requires_grad) {
                             bn->ensure_grad();
                             for (int64_t j = 0; j < c; ++j) bn->grad[j] += gy[j];
                         }
                         if (xn->requires_grad) {
                             xn->ensure_grad();
                             S* gx = xn->grad.data() + i * c;
                             S m1 = 0, m2 = 0;
                             for (int64_t j = 0; j < c; ++j) {
                                 const S t = gy[j] * gn->value[static_cast<size_t>(j)];
                                 m1 += t;
                                 m2 += t * h[j];
                             }
                             m1 /= static_cast<S>(c);
                             m2 /= static_cast<S>(c);
                             const S istd = inv_std[static_cast<size_t>(i)];
                             for (int64_t j = 0; j < c; ++j) {
                                 const S t = gy[j] * gn->value[static_cast<size_t>(j)];
                                 gx[j] += istd * (t - m1 - h[j] * m2);
                             }
                         }
                     }
                 });
    return out;
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

// tanh-approximation GELU
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
    using detail::kGeluA;
    using detail::kGeluC;
    Tensor<S> out = Tensor<S>::from(x.shape(), x.values());
    for (S& v : out.values()) {
        const double xv = static_cast<double>(v);
        v = static_cast<S>(0.5 * xv * (1.0 + std::tanh(kGeluC * (xv + kGeluA * xv * xv * xv))));
    }
    auto xn = x.node();
    auto* on = out.node().get();
    detail::wire(out, {x}, [xn, on] {
        xn->ensure_grad();
        const int64_t n = static_cast<int64_t>(xn->value.size());
        for (int64_t i = 0; i < n; ++i) {
            const double xv = static_cast<double>(xn->value[i]);
            const double t = std::tanh(detail::kGeluC * (xv + detail::kGeluA * xv * xv * xv));
            const double d = 0.5 * (1.0 + t) +
                             0.5 * xv * (1.0 - t * t) * detail::kGeluC *
                                 (1.0 + 3.0 * detail::kGeluA * xv * xv);
            xn->grad[i] += on->grad[i] * static_cast<S>(d);
        }
    });
    return out;
}

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
    S acc = 0;
    for (S v : x.values()) acc += v;
    Tensor<S> out = Tensor<S>::scalar(acc);
    auto xn = x.node();
    auto* on = out.node().get();
    detail::wire(out, {x}, [xn, on] {
        xn->ensure_grad();
        for (S& g : xn->grad) g += on->grad[0];
    });
    return out;
}

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
    return scale(sum(x), S(1) / static_cast<S>(x.size()));
}

// mean negative log-softmax probability of `targets` over positions whose
// target differs from `ignore_id`
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets, int ignore_id) {
    if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be 2-D");
    const int64_t t = logits.rows(), v = logits.cols();
    if (static_cast<int64_t>(targets.size()) != t)
        throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(t) + " rows");
    int64_t kept = 0;
    for (int id : targets) {
        if (id == ignore_id) continue;
        if (id < 0 || id >= v)
            throw std::out_of_range("cross_entropy: target id " + std::to_string(id) +
                                    " outside vocab of " + std::to_string(v));
        ++kept;
    }
    if (kept == 0) throw std::invalid_argument("cross_entropy: every position is ignored");

    double loss = 0;
    for (int64_t i = 0; i < t; ++i) {
        if (targets[static_cast<size_t>(i)] == ignore_id) continue;
        const S* p = logits.data() + i * v;
        S mx = p[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, p[j]);
        double sum_exp = 0;
        for (int64_t j = 0; j < v; ++j) sum_exp += std::exp(static_cast<double>(p[j] - mx));
        const double lse = static_cast<double>(mx) + std::log(sum_exp);
        loss += lse - static_cast<double>(p[targets[static_cast<size_t>(i)]]);
    }
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(loss / static_cast<double>(kept)));
    auto ln = logits.node();
    auto* on = out.node().get();
    detail::wire(out, {logits}, [ln, on, targets, ignore_id, t, v, kept] {
        ln->ensure_grad();
        const S g = on->grad[0] / static_cast<S>(kept);
        for (int64_t i = 0; i < t; ++i) {
            const int tgt = targets[static_cast<size_t>(i)];
            if (tgt == ignore_id) continue;
            const S* p = ln->value.data() + i * v;
            S* gp = ln->grad.data() + i * v;
            S mx = p[0];
            for (int64_t j = 1; j < v; ++j) mx = std::max(mx, p[j]);
            S sum_exp = 0;
            for (int64_t j = 0; j < v; ++j) sum_exp += std::exp(p[j] - mx);
            for (int64_t j = 0; j < v; ++j) {
                const S soft = std::exp(p[j] - mx) / sum_exp;
                gp[j] += g * (soft - (j == tgt ? S(1) : S(0)));
            }
        }
    });
    return out;
}

// scaled dot-product attention; `mask` (optional, non-differentiable) is a
// [rows(q), rows(k)] tensor where 0 marks positions to exclude
template <class S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                    const Tensor<S>* mask = nullptr) {
    if (q.cols() != k.cols())
        throw std::invalid_argument("attention: query dim " + std::to_string(q.cols()) +
                                    " vs key dim " + std::to_string(k.cols()));
    if (k.rows() != v.rows())
        throw std::invalid_argument("attention: key/value row mismatch");
    Tensor<S> scores = scale(matmul_nt(q, k), S(1) / static_cast<S>(std::sqrt(double(q.cols()))));
    if (mask != nullptr) {
        if (mask->rows() != q.rows() || mask->cols() != k.rows())
            throw std::invalid_argument("attention: mask shape " + shape_str(mask->shape()) +
                                        " vs scores [" + std::to_string(q.rows()) + ", " +
                                        std::to_string(k.rows()) + "]");
        Tensor<S> bias = Tensor<S>::zeros(mask->shape());
        for (int64_t i = 0; i < mask->size(); ++i)
            bias.data()[i] = mask->data()[i] == S(0) ? S(-1e30) : S(0);
        scores = add(scores, bias);
    }
    return matmul(softmax(scores, 1), v);
}

}  // namespace qsum
