#pragma once

#include <Eigen/Core>

#include "fphys/tensor.hpp"

namespace fphys {

namespace detail {

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <class T>
ArrMap<T> arr(Tensor<T>& t) {
    return ArrMap<T>(t.data(), t.numel());
}
template <class T>
ConstArrMap<T> arr(const Tensor<T>& t) {
    return ConstArrMap<T>(t.data(), t.numel());
}
template <class T>
ArrMap<T> grad_arr(T* g, std::int64_t n) {
    return ArrMap<T>(g, n);
}
template <class T>
ConstArrMap<T> data_arr(const Storage<T>& s) {
    return ConstArrMap<T>(s.data.data(), static_cast<std::int64_t>(s.data.size()));
}
template <class T>
ConstArrMap<T> grad_of(const Storage<T>& s) {
    return ConstArrMap<T>(s.grad.data(), static_cast<std::int64_t>(s.grad.size()));
}

template <class T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("add", a, b);
    Tensor<T> out = Tensor<T>::empty(a.shape());
    detail::arr(out) = detail::arr(a) + detail::arr(b);
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    detail::finish_op<T>("add", out, {&a, &b}, [sa, sb, so]() {
        const auto g = detail::grad_of(*so);
        if (T* ga = detail::grad_sink(sa)) detail::grad_arr(ga, g.size()) += g;
        if (T* gb = detail::grad_sink(sb)) detail::grad_arr(gb, g.size()) += g;
    });
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("sub", a, b);
    Tensor<T> out = Tensor<T>::empty(a.shape());
    detail::arr(out) = detail::arr(a) - detail::arr(b);
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    detail::finish_op<T>("sub", out, {&a, &b}, [sa, sb, so]() {
        const auto g = detail::grad_of(*so);
        if (T* ga = detail::grad_sink(sa)) detail::grad_arr(ga, g.size()) += g;
        if (T* gb = detail::grad_sink(sb)) detail::grad_arr(gb, g.size()) -= g;
    });
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("mul", a, b);
    Tensor<T> out = Tensor<T>::empty(a.shape());
    detail::arr(out) = detail::arr(a) * detail::arr(b);
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    detail::finish_op<T>("mul", out, {&a, &b}, [sa, sb, so]() {
        const auto g = detail::grad_of(*so);
        if (T* ga = detail::grad_sink(sa))
            detail::grad_arr(ga, g.size()) += g * detail::data_arr(*sb);
        if (T* gb = detail::grad_sink(sb))
            detail::grad_arr(gb, g.size()) += g * detail::data_arr(*sa);
    });
    return out;
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("div", a, b);
    Tensor<T> out = Tensor<T>::empty(a.shape());
    detail::arr(out) = detail::arr(a) / detail::arr(b);
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    detail::finish_op<T>("div", out, {&a, &b}, [sa, sb, so]() {
        const auto g = detail::grad_of(*so);
        if (T* ga = detail::grad_sink(sa))
            detail::grad_arr(ga, g.size()) += g / detail::data_arr(*sb);
        if (T* gb = detail::grad_sink(sb))
            detail::grad_arr(gb, g.size()) -=
                g * detail::data_arr(*so) / detail::data_arr(*sb);
    });
    return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    Tensor<T> out = Tensor<T>::empty(a.shape());
    detail::arr(out) = detail::arr(a) + s;
    auto sa = a.storage(), so = out.storage();
    detail::finish_op<T>("add_scalar", out, {&a}, [sa, so]() {
        if (T* ga = detail::grad_sink(sa))
            detail::grad_arr(ga, so->grad.size()) += detail::grad_of(*so);
    });
    return out;
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    Tensor<T> out = Tensor<T>::empty(a.shape());
    detail::arr(out) = detail::arr(a) * s;
    auto sa = a.storage(), so = out.storage();
    detail::finish_op<T>("mul_scalar", out, {&a}, [sa, so, s]() {
        if (T* ga = detail::grad_sink(sa))
            detail::grad_arr(ga, so->grad.size()) += detail::grad_of(*so) * s;
    });
    return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::empty(x.shape());
    detail::arr(out) = detail::arr(x).max(T(0));
    auto sx = x.storage(), so = out.storage();
    detail::finish_op<T>("relu", out, {&x}, [sx, so]() {
        if (T* gx = detail::grad_sink(sx)) {
            // subgradient at 0 is 0
            const auto y = detail::data_arr(*so);
            detail::grad_arr(gx, so->grad.size()) +=
                (y > T(0)).select(detail::grad_of(*so), T(0));
        }
    });
    return out;
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::empty(x.shape());
    detail::arr(out) = detail::arr(x).tanh();
    auto sx = x.storage(), so = out.storage();
    detail::finish_op<T>("tanh", out, {&x}, [sx, so]() {
        if (T* gx = detail::grad_sink(sx)) {
            const auto y = detail::data_arr(*so);
            detail::grad_arr(gx, so->grad.size()) += detail::grad_of(*so) * (T(1) - y * y);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// matmul (2-D)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.rank() == 2 && b.rank() == 2,
          "matmul: expects 2-D operands, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
    check(a.dim(1) == b.dim(0), "matmul: inner dimensions differ, " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out = Tensor<T>::empty({m, n});
    detail::ConstMatMap<T> A(a.data(), m, k), B(b.data(), k, n);
    detail::MatMap<T>(out.data(), m, n).noalias() = A * B;
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    detail::finish_op<T>("matmul", out, {&a, &b}, [sa, sb, so, m, k, n]() {
        detail::ConstMatMap<T> G(so->grad.data(), m, n);
        if (T* ga = detail::grad_sink(sa)) {
            detail::ConstMatMap<T> B(sb->data.data(), k, n);
            detail::MatMap<T>(ga, m, k).noalias() += G * B.transpose();
        }
        if (T* gb = detail::grad_sink(sb)) {
            detail::ConstMatMap<T> A(sa->data.data(), m, k);
            detail::MatMap<T>(gb, k, n).noalias() += A.transpose() * G;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// shape movement
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    check(numel(new_shape) == x.numel(), "reshape: element count mismatch, " +
                                             shape_str(x.shape()) + " -> " + shape_str(new_shape));
    Tensor<T> out = Tensor<T>::empty(std::move(new_shape));
    std::copy(x.data(), x.data() + x.numel(), out.data());
    auto sx = x.storage(), so = out.storage();
    detail::finish_op<T>("reshape", out, {&x}, [sx, so]() {
        if (T* gx = detail::grad_sink(sx))
            detail::grad_arr(gx, so->grad.size()) += detail::grad_of(*so);
    });
    return out;
}

namespace detail {

// out[flat] (accum)= in[permuted index]; shared by permute fwd and bwd.
template <class T, class Accum>
void permute_copy(const Shape& in_shape, const std::vector<int>& axes, const T* in, T* out,
                  Accum accum) {
    const std::size_t r = in_shape.size();
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[static_cast<std::size_t>(axes[i])];
    auto in_strides = row_major_strides(in_shape);
    std::vector<std::int64_t> gather(r);
    for (std::size_t i = 0; i < r; ++i) gather[i] = in_strides[static_cast<std::size_t>(axes[i])];
    const std::int64_t n = numel(in_shape);
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t src = 0;
    for (std::int64_t flat = 0; flat < n; ++flat) {
        accum(out[flat], in[src]);
        for (std::int64_t d = static_cast<std::int64_t>(r) - 1; d >= 0; --d) {
            auto ud = static_cast<std::size_t>(d);
            ++idx[ud];
            src += gather[ud];
            if (idx[ud] < out_shape[ud]) break;
            src -= gather[ud] * out_shape[ud];
            idx[ud] = 0;
        }
    }
}

}  // namespace detail

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& axes) {
    check(axes.size() == x.rank(), "permute: axes rank mismatch");
    std::vector<bool> seen(x.rank(), false);
    for (int a : axes) {
        check(a >= 0 && static_cast<std::size_t>(a) < x.rank() && !seen[static_cast<std::size_t>(a)],
              "permute: invalid axis list");
        seen[static_cast<std::size_t>(a)] = true;
    }
    Shape out_shape(x.rank());
    for (std::size_t i = 0; i < x.rank(); ++i)
        out_shape[i] = x.dim(static_cast<std::size_t>(axes[i]));
    Tensor<T> out = Tensor<T>::empty(std::move(out_shape));
    detail::permute_copy<T>(x.shape(), axes, x.data(), out.data(),
                            [](T& dst, const T& src) { dst = src; });
    auto sx = x.storage(), so = out.storage();
    std::vector<int> inv(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i)
        inv[static_cast<std::size_t>(axes[i])] = static_cast<int>(i);
    detail::finish_op<T>("permute", out, {&x}, [sx, so, inv]() {
        if (T* gx = detail::grad_sink(sx)) {
            detail::permute_copy<T>(so->shape, inv, so->grad.data(), gx,
                                    [](T& dst, const T& src) { dst += src; });
        }
    });
    return out;
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& x) {
    check(x.rank() == 2, "transpose2d: expects a matrix");
    return permute(x, {1, 0});
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::scalar(detail::arr(x).sum());
    auto sx = x.storage(), so = out.storage();
    detail::finish_op<T>("reduce_sum", out, {&x}, [sx, so]() {
        if (T* gx = detail::grad_sink(sx))
            detail::grad_arr(gx, sx->data.size()) += so->grad[0];
    });
    return out;
}

template <class T>
Tensor<T> reduce_mean(const Tensor<T>& x) {
    check(x.numel() > 0, "reduce_mean: empty tensor");
    const std::int64_t n = x.numel();
    Tensor<T> out = Tensor<T>::scalar(detail::arr(x).sum() / static_cast<T>(n));
    auto sx = x.storage(), so = out.storage();
    detail::finish_op<T>("reduce_mean", out, {&x}, [sx, so, n]() {
        if (T* gx = detail::grad_sink(sx))
            detail::grad_arr(gx, sx->data.size()) += so->grad[0] / static_cast<T>(n);
    });
    return out;
}

// ---------------------------------------------------------------------------
// batch axis helpers
// ---------------------------------------------------------------------------

/// Slice along axis 0, dropping it: (D0, rest...) -> (rest...).
template <class T>
Tensor<T> select0(const Tensor<T>& x, std::int64_t i) {
    check(x.rank() >= 1 && i >= 0 && i < x.dim(0), "select0: index out of range");
    Shape sub(x.shape().begin() + 1, x.shape().end());
    if (sub.empty()) sub = {1};
    const std::int64_t block = numel(sub);
    Tensor<T> out = Tensor<T>::empty(sub);
    std::copy(x.data() + i * block, x.data() + (i + 1) * block, out.data());
    auto sx = x.storage(), so = out.storage();
    detail::finish_op<T>("select0", out, {&x}, [sx, so, i, block]() {
        if (T* gx = detail::grad_sink(sx))
            detail::grad_arr(gx + i * block, block) += detail::grad_of(*so);
    });
    return out;
}

/// Stack equally shaped tensors along a new leading axis.
template <class T>
Tensor<T> stack0(const std::vector<Tensor<T>>& parts) {
    check(!parts.empty(), "stack0: empty input");
    const Shape& sub = parts[0].shape();
    for (const auto& p : parts) check(p.shape() == sub, "stack0: mismatched shapes");
    Shape out_shape;
    out_shape.push_back(static_cast<std::int64_t>(parts.size()));
    out_shape.insert(out_shape.end(), sub.begin(), sub.end());
    const std::int64_t block = numel(sub);
    Tensor<T> out = Tensor<T>::empty(out_shape);
    for (std::size_t i = 0; i < parts.size(); ++i)
        std::copy(parts[i].data(), parts[i].data() + block,
                  out.data() + static_cast<std::int64_t>(i) * block);

    check(detail::all_finite(out.data(), out.numel()), "op 'stack0': non-finite value in output");
    bool track = false;
    for (const auto& p : parts) track = track || detail::tracks_grad(p);
    if (grad_enabled() && Tape<T>::current() != nullptr && track) {
        std::vector<std::shared_ptr<Storage<T>>> srcs;
        srcs.reserve(parts.size());
        for (const auto& p : parts) srcs.push_back(p.storage());
        auto so = out.storage();
        so->requires_grad = true;
        so->node = Tape<T>::current()->record("stack0", so, [srcs, so, block]() {
            for (std::size_t i = 0; i < srcs.size(); ++i) {
                if (T* gx = detail::grad_sink(srcs[i])) {
                    const T* g = so->grad.data() + static_cast<std::int64_t>(i) * block;
                    detail::grad_arr(gx, block) += detail::ConstArrMap<T>(g, block);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// temporal difference (N,C,T,H,W) -> (N,C,T-1,H,W)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> temporal_diff(const Tensor<T>& x) {
    check(x.rank() == 5, "temporal_diff: expects (N,C,T,H,W), got " + shape_str(x.shape()));
    const std::int64_t n = x.dim(0), c = x.dim(1), t = x.dim(2), h = x.dim(3), w = x.dim(4);
    check(t >= 2, "temporal_diff: needs at least 2 frames, got " + std::to_string(t));
    Tensor<T> out = Tensor<T>::empty({n, c, t - 1, h, w});
    const std::int64_t hw = h * w;
    const T* px = x.data();
    T* po = out.data();
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        detail::ConstArrMap<T> cur(px + nc * t * hw, (t - 1) * hw);
        detail::ConstArrMap<T> next(px + nc * t * hw + hw, (t - 1) * hw);
        detail::ArrMap<T>(po + nc * (t - 1) * hw, (t - 1) * hw) = next - cur;
    }
    auto sx = x.storage(), so = out.storage();
    detail::finish_op<T>("temporal_diff", out, {&x}, [sx, so, n, c, t, hw]() {
        if (T* gx = detail::grad_sink(sx)) {
            const T* g = so->grad.data();
            for (std::int64_t nc = 0; nc < n * c; ++nc) {
                detail::ConstArrMap<T> go(g + nc * (t - 1) * hw, (t - 1) * hw);
                detail::grad_arr(gx + nc * t * hw + hw, (t - 1) * hw) += go;
                detail::grad_arr(gx + nc * t * hw, (t - 1) * hw) -= go;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// instance normalization over all axes past (N, C)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, double eps = 1e-5) {
    check(x.rank() >= 3, "instance_norm: expects (N,C,...), got " + shape_str(x.shape()));
    const std::int64_t n = x.dim(0), c = x.dim(1);
    std::int64_t m = 1;
    for (std::size_t i = 2; i < x.rank(); ++i) m *= x.dim(i);
    check(m >= 1, "instance_norm: zero-size normalization slice");
    Tensor<T> out = Tensor<T>::empty(x.shape());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * c));
    const T* px = x.data();
    T* po = out.data();
    parallel_for(n * c, [&](std::int64_t s) {
        detail::ConstArrMap<T> xs(px + s * m, m);
        const double mean = xs.template cast<double>().sum() / static_cast<double>(m);
        const double var =
            (xs.template cast<double>() - mean).square().sum() / static_cast<double>(m);
        const T istd = static_cast<T>(1.0 / std::sqrt(var + eps));
        (*inv_std)[static_cast<std::size_t>(s)] = istd;
        detail::ArrMap<T>(po + s * m, m) = (xs - static_cast<T>(mean)) * istd;
    });
    auto sx = x.storage(), so = out.storage();
    detail::finish_op<T>("instance_norm", out, {&x}, [sx, so, inv_std, n, c, m]() {
        if (T* gx = detail::grad_sink(sx)) {
            const T* g = so->grad.data();
            const T* y = so->data.data();
            parallel_for(n * c, [&](std::int64_t s) {
                detail::ConstArrMap<T> gs(g + s * m, m);
                detail::ConstArrMap<T> ys(y + s * m, m);
                const T gmean = static_cast<T>(gs.template cast<double>().sum() /
                                               static_cast<double>(m));
                const T gymean = static_cast<T>((gs * ys).template cast<double>().sum() /
                                                static_cast<double>(m));
                const T istd = (*inv_std)[static_cast<std::size_t>(s)];
                detail::grad_arr(gx + s * m, m) += istd * (gs - gmean - ys * gymean);
            });
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// negative Pearson loss: mean over rows of 1 - corr(pred_row, target_row)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> neg_pearson(const Tensor<T>& pred, const Tensor<T>& target) {
    detail::check_same_shape("neg_pearson", pred, target);
    check(pred.rank() == 1 || pred.rank() == 2,
          "neg_pearson: expects (T) or (N,T), got " + shape_str(pred.shape()));
    const std::int64_t rows = pred.rank() == 2 ? pred.dim(0) : 1;
    const std::int64_t len = pred.rank() == 2 ? pred.dim(1) : pred.dim(0);
    check(len >= 2, "neg_pearson: signals must have at least 2 samples");

    struct RowStats {
        double inv_norm;  // 1/sqrt(sxx*syy)
        double ratio;     // sxy/sxx
        double mx, my;
    };
    auto stats = std::make_shared<std::vector<RowStats>>(static_cast<std::size_t>(rows));
    const T* pp = pred.data();
    const T* pt = target.data();
    double loss = 0.0;
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = pp + r * len;
        const T* yr = pt + r * len;
        double mx = 0.0, my = 0.0;
        for (std::int64_t i = 0; i < len; ++i) {
            mx += xr[i];
            my += yr[i];
        }
        mx /= static_cast<double>(len);
        my /= static_cast<double>(len);
        double sxy = 0.0, sxx = 0.0, syy = 0.0;
        for (std::int64_t i = 0; i < len; ++i) {
            double dx = xr[i] - mx, dy = yr[i] - my;
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
        check(sxx > 0.0 && syy > 0.0, "neg_pearson: zero-variance signal");
        double inv_norm = 1.0 / std::sqrt(sxx * syy);
        loss += 1.0 - sxy * inv_norm;
        (*stats)[static_cast<std::size_t>(r)] = {inv_norm, sxy / sxx, mx, my};
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss / static_cast<double>(rows)));
    auto sp = pred.storage(), st = target.storage(), so = out.storage();
    detail::finish_op<T>("neg_pearson", out, {&pred, &target}, [sp, st, so, stats, rows, len]() {
        // d(1-r)/dx_k = -( yc_k - (sxy/sxx) xc_k ) / sqrt(sxx*syy); gradient
        // w.r.t. the target is not propagated (labels are constants here).
        if (T* gx = detail::grad_sink(sp)) {
            const double scale = static_cast<double>(so->grad[0]) / static_cast<double>(rows);
            const T* px = sp->data.data();
            const T* py = st->data.data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const auto& s = (*stats)[static_cast<std::size_t>(r)];
                const T* xr = px + r * len;
                const T* yr = py + r * len;
                T* gr = gx + r * len;
                for (std::int64_t i = 0; i < len; ++i) {
                    double dx = xr[i] - s.mx, dy = yr[i] - s.my;
                    gr[i] += static_cast<T>(-scale * (dy - s.ratio * dx) * s.inv_norm);
                }
            }
        }
    });
    return out;
}

}  // namespace fphys
