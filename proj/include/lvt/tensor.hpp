#pragma once

// Minimal dense f64 tensor engine with tape-based reverse-mode autodiff.
//
// Tensors are shared handles to row-major f64 buffers. Every differentiable
// op takes an explicit Graph; a node is recorded only when some input
// requires a gradient, so pure inference records nothing. Distinct graphs
// are independent and may live on distinct threads.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include "lvt/common.hpp"

namespace lvt {

class Tensor {
   public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        return Tensor(std::move(shape), 0.0, requires_grad);
    }
    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false) {
        return Tensor(std::move(shape), value, requires_grad);
    }
    static Tensor from(std::vector<std::size_t> shape, std::vector<double> values,
                       bool requires_grad = false) {
        Tensor t(std::move(shape), 0.0, requires_grad);
        if (values.size() != t.size())
            throw DimensionError("tensor data length does not match shape product");
        t.d_->values = std::move(values);
        return t;
    }
    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(d_); }
    const std::vector<std::size_t>& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t extent(std::size_t axis) const { return d_->shape.at(axis); }
    std::size_t size() const { return d_->values.size(); }

    // 2-D accessors; rank-1 tensors count as a single row.
    std::size_t rows() const { return rank() == 1 ? 1 : extent(0); }
    std::size_t cols() const { return rank() == 1 ? extent(0) : extent(rank() - 1); }

    double* data() { return d_->values.data(); }
    const double* data() const { return d_->values.data(); }
    double& at(std::size_t i) { return d_->values[i]; }
    double at(std::size_t i) const { return d_->values[i]; }
    double& at(std::size_t r, std::size_t c) { return d_->values[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return d_->values[r * cols() + c]; }

    bool requires_grad() const { return d_ && d_->requires_grad; }
    void set_requires_grad(bool rg) {
        d_->requires_grad = rg;
        if (rg) ensure_grad();
    }

    // Gradient buffer, same shape as values; allocated on demand.
    double* grad() {
        ensure_grad();
        return d_->grad.data();
    }
    const std::vector<double>& grad_vector() const { return d_->grad; }
    bool has_grad() const { return d_ && !d_->grad.empty(); }
    void ensure_grad() {
        if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
    }
    void zero_grad() {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
    }

    bool same_buffer(const Tensor& other) const { return d_ == other.d_; }

    Tensor clone() const {
        Tensor t;
        t.d_ = std::make_shared<Data>(*d_);
        return t;
    }

   private:
    struct Data {
        std::vector<std::size_t> shape;
        std::vector<double> values;
        std::vector<double> grad;
        bool requires_grad = false;
    };

    Tensor(std::vector<std::size_t> shape, double fill, bool requires_grad) {
        std::size_t total = 1;
        for (std::size_t e : shape) {
            if (e == 0) throw DimensionError("zero extent in tensor shape");
            total *= e;
        }
        d_ = std::make_shared<Data>();
        d_->shape = std::move(shape);
        d_->values.assign(total, fill);
        d_->requires_grad = requires_grad;
        if (requires_grad) d_->grad.assign(total, 0.0);
    }

    std::shared_ptr<Data> d_;
};

// Recorded forward pass. Nodes are appended in execution order; backward()
// replays them in reverse. Cleared between optimizer steps.
struct Graph {
    std::vector<std::function<void()>> nodes;

    void record(std::function<void()> backward_rule) { nodes.push_back(std::move(backward_rule)); }
    void clear() { nodes.clear(); }
    std::size_t size() const { return nodes.size(); }
};

namespace detail {

// Raw kernels. All tape ops and the sequence-parallel simulation funnel
// through these, which pins a single summation order and makes
// cross-path comparisons bitwise.

// out += a[m×k] · b[k×n]
inline void matmul_acc(const double* a, const double* b, double* out, std::size_t m,
                       std::size_t k, std::size_t n) {
    parallel_for(0, m, 16, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const double* arow = a + i * k;
            double* orow = out + i * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double aik = arow[kk];
                const double* brow = b + kk * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
            }
        }
    });
}

// out += a[m×k] · b[n×k]ᵀ
inline void matmul_nt_acc(const double* a, const double* b, double* out, std::size_t m,
                          std::size_t k, std::size_t n) {
    parallel_for(0, m, 16, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const double* arow = a + i * k;
            double* orow = out + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double* brow = b + j * k;
                double acc = 0.0;
                for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
                orow[j] += acc;
            }
        }
    });
}

// out += a[m×k]ᵀ · g[m×n]; parallel over output rows (columns of a)
inline void matmul_tn_acc(const double* a, const double* g, double* out, std::size_t m,
                          std::size_t k, std::size_t n) {
    parallel_for(0, k, 16, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t kk = lo; kk < hi; ++kk) {
            double* orow = out + kk * n;
            for (std::size_t i = 0; i < m; ++i) {
                const double aik = a[i * k + kk];
                const double* grow = g + i * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += aik * grow[j];
            }
        }
    });
}

struct SoftmaxRowResult {
    double row_max;
    double denom;
};

// Stabilized softmax of one row; probs may alias x.
inline SoftmaxRowResult softmax_row(const double* x, double* probs, std::size_t n) {
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(x[j] - mx);
        probs[j] = e;
        denom += e;
    }
    const double inv = 1.0 / denom;
    for (std::size_t j = 0; j < n; ++j) probs[j] *= inv;
    return {mx, denom};
}

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->requires_grad() || t->has_grad()) return true;
    return false;
}

// A tensor participates in backward once it carries a grad buffer; outputs
// of recorded ops get one so gradients can flow through them.
inline bool flows_grad(const Tensor& t) { return t.requires_grad() || t.has_grad(); }

inline void require_matching_inner(const Tensor& a, const Tensor& b, std::size_t ak,
                                   std::size_t bk, const char* what) {
    if (ak != bk)
        throw DimensionError(std::string(what) + ": inner extents " + std::to_string(ak) +
                             " vs " + std::to_string(bk));
}

}  // namespace detail

inline void check_finite(const Tensor& t, const char* what) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t.data()[i])) throw NumericError(std::string(what) + ": non-finite input");
}

// ---------------------------------------------------------------------------
// Differentiable ops
// ---------------------------------------------------------------------------

inline Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul: rank-2 tensors required");
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    detail::require_matching_inner(a, b, k, b.extent(0), "matmul");
    Tensor out = Tensor::zeros({m, n});
    detail::matmul_acc(a.data(), b.data(), out.data(), m, k, n);
    if (detail::any_requires_grad({&a, &b})) {
        out.ensure_grad();
        Tensor ac = a, bc = b, oc = out;
        g.record([ac, bc, oc, m, k, n]() mutable {
            if (detail::flows_grad(ac))
                detail::matmul_nt_acc(oc.grad(), bc.data(), ac.grad(), m, n, k);
            if (detail::flows_grad(bc))
                detail::matmul_tn_acc(ac.data(), oc.grad(), bc.grad(), m, k, n);
        });
    }
    return out;
}

// a · bᵀ with a[m×k], b[n×k]
inline Tensor matmul_nt(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul_nt: rank-2 tensors required");
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(0);
    detail::require_matching_inner(a, b, k, b.extent(1), "matmul_nt");
    Tensor out = Tensor::zeros({m, n});
    detail::matmul_nt_acc(a.data(), b.data(), out.data(), m, k, n);
    if (detail::any_requires_grad({&a, &b})) {
        out.ensure_grad();
        Tensor ac = a, bc = b, oc = out;
        g.record([ac, bc, oc, m, k, n]() mutable {
            if (detail::flows_grad(ac)) detail::matmul_acc(oc.grad(), bc.data(), ac.grad(), m, n, k);
            if (detail::flows_grad(bc)) detail::matmul_tn_acc(oc.grad(), ac.data(), bc.grad(), m, n, k);
        });
    }
    return out;
}

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError("add: shape mismatch");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a.at(i) + b.at(i);
    if (detail::any_requires_grad({&a, &b})) {
        out.ensure_grad();
        Tensor ac = a, bc = b, oc = out;
        g.record([ac, bc, oc]() mutable {
            const double* go = oc.grad();
            if (detail::flows_grad(ac)) {
                double* ga = ac.grad();
                for (std::size_t i = 0; i < ac.size(); ++i) ga[i] += go[i];
            }
            if (detail::flows_grad(bc)) {
                double* gb = bc.grad();
                for (std::size_t i = 0; i < bc.size(); ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

// [m×n] + row vector [n], broadcast over rows
inline Tensor add_rowvec(Graph& g, const Tensor& a, const Tensor& v) {
    if (a.rank() != 2 || v.rank() != 1 || a.extent(1) != v.extent(0))
        throw DimensionError("add_rowvec: need [m×n] and [n]");
    const std::size_t m = a.extent(0), n = a.extent(1);
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = a.at(i, j) + v.at(j);
    if (detail::any_requires_grad({&a, &v})) {
        out.ensure_grad();
        Tensor ac = a, vc = v, oc = out;
        g.record([ac, vc, oc, m, n]() mutable {
            const double* go = oc.grad();
            if (detail::flows_grad(ac)) {
                double* ga = ac.grad();
                for (std::size_t i = 0; i < m * n; ++i) ga[i] += go[i];
            }
            if (detail::flows_grad(vc)) {
                double* gv = vc.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gv[j] += go[i * n + j];
            }
        });
    }
    return out;
}

inline Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError("mul: shape mismatch");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a.at(i) * b.at(i);
    if (detail::any_requires_grad({&a, &b})) {
        out.ensure_grad();
        Tensor ac = a, bc = b, oc = out;
        g.record([ac, bc, oc]() mutable {
            const double* go = oc.grad();
            if (detail::flows_grad(ac)) {
                double* ga = ac.grad();
                for (std::size_t i = 0; i < ac.size(); ++i) ga[i] += go[i] * bc.at(i);
            }
            if (detail::flows_grad(bc)) {
                double* gb = bc.grad();
                for (std::size_t i = 0; i < bc.size(); ++i) gb[i] += go[i] * ac.at(i);
            }
        });
    }
    return out;
}

inline Tensor scale(Graph& g, const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a.at(i) * c;
    if (detail::any_requires_grad({&a})) {
        out.ensure_grad();
        Tensor ac = a, oc = out;
        g.record([ac, oc, c]() mutable {
            const double* go = oc.grad();
            double* ga = ac.grad();
            for (std::size_t i = 0; i < ac.size(); ++i) ga[i] += go[i] * c;
        });
    }
    return out;
}

inline Tensor gather_rows(Graph& g, const Tensor& a, std::vector<std::uint32_t> idx) {
    if (a.rank() != 2) throw DimensionError("gather_rows: rank-2 tensor required");
    const std::size_t n = a.extent(1);
    Tensor out = Tensor::zeros({idx.size(), n});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= a.extent(0)) throw DimensionError("gather_rows: index out of range");
        std::memcpy(out.data() + r * n, a.data() + static_cast<std::size_t>(idx[r]) * n,
                    n * sizeof(double));
    }
    if (detail::any_requires_grad({&a})) {
        out.ensure_grad();
        Tensor ac = a, oc = out;
        g.record([ac, oc, idx = std::move(idx), n]() mutable {
            const double* go = oc.grad();
            double* ga = ac.grad();
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < n; ++j)
                    ga[static_cast<std::size_t>(idx[r]) * n + j] += go[r * n + j];
        });
    }
    return out;
}

// dst[idx[r], :] += src[r, :], recorded on tape. Row sets of successive
// calls into the same dst must be disjoint until dst is next read.
inline void scatter_add_rows(Graph& g, Tensor& dst, const std::vector<std::uint32_t>& idx,
                             const Tensor& src) {
    if (dst.rank() != 2 || src.rank() != 2 || dst.extent(1) != src.extent(1) ||
        src.extent(0) != idx.size())
        throw DimensionError("scatter_add_rows: shape mismatch");
    const std::size_t n = dst.extent(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= dst.extent(0)) throw DimensionError("scatter_add_rows: index out of range");
        double* drow = dst.data() + static_cast<std::size_t>(idx[r]) * n;
        const double* srow = src.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) drow[j] += srow[j];
    }
    if (detail::any_requires_grad({&src, &dst})) {
        dst.ensure_grad();
        Tensor dc = dst, sc = src;
        g.record([dc, sc, idx, n]() mutable {
            if (!detail::flows_grad(sc)) return;
            const double* gd = dc.grad();
            double* gs = sc.grad();
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < n; ++j)
                    gs[r * n + j] += gd[static_cast<std::size_t>(idx[r]) * n + j];
        });
    }
}

inline Tensor slice_cols(Graph& g, const Tensor& a, std::size_t c0, std::size_t c1) {
    if (a.rank() != 2 || c1 > a.extent(1) || c0 >= c1)
        throw DimensionError("slice_cols: bad column range");
    const std::size_t m = a.extent(0), n = a.extent(1), width = c1 - c0;
    Tensor out = Tensor::zeros({m, width});
    for (std::size_t i = 0; i < m; ++i)
        std::memcpy(out.data() + i * width, a.data() + i * n + c0, width * sizeof(double));
    if (detail::any_requires_grad({&a})) {
        out.ensure_grad();
        Tensor ac = a, oc = out;
        g.record([ac, oc, c0, m, n, width]() mutable {
            const double* go = oc.grad();
            double* ga = ac.grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < width; ++j) ga[i * n + c0 + j] += go[i * width + j];
        });
    }
    return out;
}

inline Tensor concat_cols(Graph& g, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t m = parts[0].extent(0);
    std::size_t total = 0;
    bool needs_grad = false;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.extent(0) != m) throw DimensionError("concat_cols: row mismatch");
        total += p.extent(1);
        needs_grad = needs_grad || detail::flows_grad(p);
    }
    Tensor out = Tensor::zeros({m, total});
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.extent(1);
        for (std::size_t i = 0; i < m; ++i)
            std::memcpy(out.data() + i * total + off, p.data() + i * w, w * sizeof(double));
        off += w;
    }
    if (needs_grad) {
        out.ensure_grad();
        Tensor oc = out;
        std::vector<Tensor> pc = parts;
        g.record([pc, oc, m, total]() mutable {
            const double* go = oc.grad();
            std::size_t off = 0;
            for (Tensor& p : pc) {
                const std::size_t w = p.extent(1);
                if (detail::flows_grad(p)) {
                    double* gp = p.grad();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += go[i * total + off + j];
                }
                off += w;
            }
        });
    }
    return out;
}

// X[m×n] ⊙ v[m] broadcast over columns
inline Tensor row_scale(Graph& g, const Tensor& x, const Tensor& v) {
    if (x.rank() != 2 || v.rank() != 1 || v.extent(0) != x.extent(0))
        throw DimensionError("row_scale: need [m×n] and [m]");
    const std::size_t m = x.extent(0), n = x.extent(1);
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) * v.at(i);
    if (detail::any_requires_grad({&x, &v})) {
        out.ensure_grad();
        Tensor xc = x, vc = v, oc = out;
        g.record([xc, vc, oc, m, n]() mutable {
            const double* go = oc.grad();
            if (detail::flows_grad(xc)) {
                double* gx = xc.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[i * n + j] * vc.at(i);
            }
            if (detail::flows_grad(vc)) {
                double* gv = vc.grad();
                for (std::size_t i = 0; i < m; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * xc.at(i, j);
                    gv[i] += acc;
                }
            }
        });
    }
    return out;
}

// X[m×n] with row i divided by v[i]
inline Tensor row_divide(Graph& g, const Tensor& x, const Tensor& v) {
    if (x.rank() != 2 || v.rank() != 1 || v.extent(0) != x.extent(0))
        throw DimensionError("row_divide: need [m×n] and [m]");
    const std::size_t m = x.extent(0), n = x.extent(1);
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double inv = 1.0 / v.at(i);
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) * inv;
    }
    if (detail::any_requires_grad({&x, &v})) {
        out.ensure_grad();
        Tensor xc = x, vc = v, oc = out;
        g.record([xc, vc, oc, m, n]() mutable {
            const double* go = oc.grad();
            for (std::size_t i = 0; i < m; ++i) {
                const double inv = 1.0 / vc.at(i);
                if (detail::flows_grad(xc)) {
                    double* gx = xc.grad();
                    for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[i * n + j] * inv;
                }
                if (detail::flows_grad(vc)) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * oc.at(i, j);
                    vc.grad()[i] -= acc * inv;
                }
            }
        });
    }
    return out;
}

struct SoftmaxRows {
    Tensor probs;   // [m×n], rows sum to 1
    Tensor denoms;  // [m], stabilized: Σ_j exp(x_ij − max_i)
    std::vector<double> row_max;
};

// Row-stabilized softmax. The per-row max is reported as a plain constant:
// downstream uses are shift-invariant, so treating it as constant in
// backward still yields exact gradients.
inline SoftmaxRows softmax_rows(Graph& g, const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("softmax_rows: rank-2 tensor required");
    check_finite(x, "softmax_rows");
    const std::size_t m = x.extent(0), n = x.extent(1);
    SoftmaxRows r;
    r.probs = Tensor::zeros({m, n});
    r.denoms = Tensor::zeros({m});
    r.row_max.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        auto rr = detail::softmax_row(x.data() + i * n, r.probs.data() + i * n, n);
        r.row_max[i] = rr.row_max;
        r.denoms.at(i) = rr.denom;
    }
    if (detail::any_requires_grad({&x})) {
        r.probs.ensure_grad();
        r.denoms.ensure_grad();
        Tensor xc = x, pc = r.probs, dc = r.denoms;
        g.record([xc, pc, dc, m, n]() mutable {
            double* gx = xc.grad();
            const double* gp = pc.grad();
            const double* gd = dc.grad();
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += gp[i * n + j] * pc.at(i, j);
                const double denom = dc.at(i);
                for (std::size_t j = 0; j < n; ++j) {
                    const double p = pc.at(i, j);
                    gx[i * n + j] += p * (gp[i * n + j] - dot) + gd[i] * p * denom;
                }
            }
        });
    }
    return r;
}

// Per-row standardization over the last axis, then affine. eps = 1e-6.
inline Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-6) {
    const std::size_t d = x.cols();
    if (gamma.size() != d || beta.size() != d)
        throw DimensionError("layer_norm: affine params must have last-axis extent");
    const std::size_t m = x.size() / d;
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.data() + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[i] = istd;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (row[j] - mean) * istd;
            xhat[i * d + j] = h;
            out.data()[i * d + j] = gamma.at(j) * h + beta.at(j);
        }
    }
    if (detail::any_requires_grad({&x, &gamma, &beta})) {
        out.ensure_grad();
        Tensor xc = x, gc = gamma, bc = beta, oc = out;
        g.record([xc, gc, bc, oc, xhat = std::move(xhat), inv_std = std::move(inv_std), m,
                  d]() mutable {
            const double* go = oc.grad();
            for (std::size_t i = 0; i < m; ++i) {
                const double* h = xhat.data() + i * d;
                const double* grow = go + i * d;
                if (detail::flows_grad(gc) || detail::flows_grad(bc)) {
                    for (std::size_t j = 0; j < d; ++j) {
                        if (detail::flows_grad(gc)) gc.grad()[j] += grow[j] * h[j];
                        if (detail::flows_grad(bc)) bc.grad()[j] += grow[j];
                    }
                }
                if (detail::flows_grad(xc)) {
                    double sum_g = 0.0, sum_gh = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double gj = grow[j] * gc.at(j);
                        sum_g += gj;
                        sum_gh += gj * h[j];
                    }
                    const double inv_d = 1.0 / static_cast<double>(d);
                    double* gx = xc.grad() + i * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double gj = grow[j] * gc.at(j);
                        gx[j] += inv_std[i] * (gj - sum_g * inv_d - h[j] * sum_gh * inv_d);
                    }
                }
            }
        });
    }
    return out;
}

// x · Φ(x), tanh approximation
inline Tensor gelu(Graph& g, const Tensor& x) {
    constexpr double kSqrt2OverPi = 0.7978845608028654;
    constexpr double kCubic = 0.044715;
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.at(i);
        const double u = kSqrt2OverPi * (v + kCubic * v * v * v);
        out.at(i) = 0.5 * v * (1.0 + std::tanh(u));
    }
    if (detail::any_requires_grad({&x})) {
        out.ensure_grad();
        Tensor xc = x, oc = out;
        g.record([xc, oc]() mutable {
            const double* go = oc.grad();
            double* gx = xc.grad();
            for (std::size_t i = 0; i < xc.size(); ++i) {
                const double v = xc.at(i);
                const double u = kSqrt2OverPi * (v + kCubic * v * v * v);
                const double t = std::tanh(u);
                const double du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * v * v);
                gx[i] += go[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
            }
        });
    }
    return out;
}

inline Tensor sum_all(Graph& g, const Tensor& x) {
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) total += x.at(i);
    Tensor out = Tensor::scalar(total);
    if (detail::any_requires_grad({&x})) {
        out.ensure_grad();
        Tensor xc = x, oc = out;
        g.record([xc, oc]() mutable {
            const double go = oc.grad()[0];
            double* gx = xc.grad();
            for (std::size_t i = 0; i < xc.size(); ++i) gx[i] += go;
        });
    }
    return out;
}

// Column means of [m×n] -> [n]
inline Tensor mean_rows(Graph& g, const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("mean_rows: rank-2 tensor required");
    const std::size_t m = x.extent(0), n = x.extent(1);
    Tensor out = Tensor::zeros({n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j) += x.at(i, j);
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t j = 0; j < n; ++j) out.at(j) *= inv_m;
    if (detail::any_requires_grad({&x})) {
        out.ensure_grad();
        Tensor xc = x, oc = out;
        g.record([xc, oc, m, n, inv_m]() mutable {
            const double* go = oc.grad();
            double* gx = xc.grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[j] * inv_m;
        });
    }
    return out;
}

// v[k] · W[k×n] -> [n]
inline Tensor vecmat(Graph& g, const Tensor& v, const Tensor& w) {
    if (v.rank() != 1 || w.rank() != 2) throw DimensionError("vecmat: need [k] and [k×n]");
    const std::size_t k = v.extent(0), n = w.extent(1);
    detail::require_matching_inner(v, w, k, w.extent(0), "vecmat");
    Tensor out = Tensor::zeros({n});
    detail::matmul_acc(v.data(), w.data(), out.data(), 1, k, n);
    if (detail::any_requires_grad({&v, &w})) {
        out.ensure_grad();
        Tensor vc = v, wc = w, oc = out;
        g.record([vc, wc, oc, k, n]() mutable {
            const double* go = oc.grad();
            if (detail::flows_grad(vc)) detail::matmul_nt_acc(go, wc.data(), vc.grad(), 1, n, k);
            if (detail::flows_grad(wc)) {
                double* gw = wc.grad();
                for (std::size_t kk = 0; kk < k; ++kk)
                    for (std::size_t j = 0; j < n; ++j) gw[kk * n + j] += vc.at(kk) * go[j];
            }
        });
    }
    return out;
}

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Every tensor
// reachable with a grad buffer accumulates ∂loss/∂tensor.
inline void backward(Graph& g, Tensor& loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar");
    loss.grad()[0] += 1.0;
    for (auto it = g.nodes.rbegin(); it != g.nodes.rend(); ++it) (*it)();
}

}  // namespace lvt
