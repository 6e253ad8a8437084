#pragma once

#include "fphys/ops.hpp"

namespace fphys {

/// Nonnegative factor pair: V ~= W * H with W (M x L), H (L x N).
template <class T>
struct FactorPair {
    Tensor<T> w;
    Tensor<T> h;
};

struct NmfConfig {
    std::int64_t rank = 1;
    int steps = 6;            // 4-8 covers the attention use; tests may go higher
    double delta = 1e-6;      // denominator floor of the multiplicative update
    std::uint64_t seed = 0x5eed;
    enum class GradMode { none, one_step };
    GradMode grad_mode = GradMode::none;

    void validate() const {
        check(rank >= 1, "nmf: rank must be >= 1");
        check(steps >= 1, "nmf: steps must be >= 1");
        check(delta > 0.0, "nmf: delta must be > 0");
    }
};

namespace detail {

template <class T>
void check_nonnegative(const char* op, const Tensor<T>& v) {
    const T* p = v.data();
    const std::int64_t n = v.numel();
    for (std::int64_t i = 0; i < n; ++i)
        check(p[i] >= T(0), std::string(op) + ": negative entry in input matrix");
}

}  // namespace detail

/// Seeded uniform (0.01, 1.0] factors; strictly positive so multiplicative
/// updates cannot lock onto zeros.
template <class T>
FactorPair<T> nmf_init(std::int64_t m, std::int64_t n, const NmfConfig& cfg) {
    cfg.validate();
    check(m >= 1 && n >= 1, "nmf_init: matrix dimensions must be >= 1");
    Rng rng(cfg.seed);
    FactorPair<T> fp;
    fp.w = Tensor<T>::zeros({m, cfg.rank});
    fp.h = Tensor<T>::zeros({cfg.rank, n});
    for (T* p = fp.w.data(), *e = p + fp.w.numel(); p != e; ++p)
        *p = static_cast<T>(0.01 + 0.99 * rng.uniform_open_closed());
    for (T* p = fp.h.data(), *e = p + fp.h.numel(); p != e; ++p)
        *p = static_cast<T>(0.01 + 0.99 * rng.uniform_open_closed());
    return fp;
}

/// One multiplicative update for min ||V - WH||_F^2: H first, then W using
/// the updated H. Composed from tensor ops so it can run on the tape.
template <class T>
FactorPair<T> mu_step(const Tensor<T>& v, const FactorPair<T>& fp, double delta) {
    detail::check_nonnegative("mu_step", v);
    const T d = static_cast<T>(delta);
    Tensor<T> wt = transpose2d(fp.w);
    Tensor<T> hn = mul(fp.h, div(matmul(wt, v), add_scalar(matmul(matmul(wt, fp.w), fp.h), d)));
    Tensor<T> hnt = transpose2d(hn);
    Tensor<T> wn =
        mul(fp.w, div(matmul(v, hnt), add_scalar(matmul(fp.w, matmul(hn, hnt)), d)));
    return {wn, hn};
}

template <class T>
T reconstruction_error(const Tensor<T>& v, const FactorPair<T>& fp) {
    check(v.rank() == 2 && fp.w.rank() == 2 && fp.h.rank() == 2, "reconstruction_error: 2-D only");
    check(fp.w.dim(0) == v.dim(0) && fp.h.dim(1) == v.dim(1) && fp.w.dim(1) == fp.h.dim(0),
          "reconstruction_error: factor shapes do not match " + shape_str(v.shape()));
    const std::int64_t m = v.dim(0), n = v.dim(1), l = fp.w.dim(1);
    detail::ConstMatMap<T> V(v.data(), m, n), W(fp.w.data(), m, l), H(fp.h.data(), l, n);
    return static_cast<T>((V - W * H).squaredNorm());
}

template <class T>
struct FactorizeResult {
    FactorPair<T> factors;
    Tensor<T> vhat;  // W*H; constant unless grad_mode = one_step
};

/// Runs nmf_init + `steps` multiplicative updates. With GradMode::none the
/// whole solve, including the reconstruction, is detached; with one_step the
/// final update and the product W*H stay on the tape, so gradients flow into
/// V through exactly one update.
template <class T>
FactorizeResult<T> factorize(const Tensor<T>& v, const NmfConfig& cfg) {
    cfg.validate();
    check(v.rank() == 2, "factorize: expects a matrix, got " + shape_str(v.shape()));
    detail::check_nonnegative("factorize", v);
    const std::int64_t m = v.dim(0), n = v.dim(1);

    FactorizeResult<T> res;
    if (cfg.grad_mode == NmfConfig::GradMode::none) {
        NoGradGuard ng;
        res.factors = nmf_init<T>(m, n, cfg);
        for (int k = 0; k < cfg.steps; ++k) res.factors = mu_step(v, res.factors, cfg.delta);
        res.vhat = matmul(res.factors.w, res.factors.h);
        return res;
    }
    FactorPair<T> fp;
    {
        NoGradGuard ng;
        fp = nmf_init<T>(m, n, cfg);
        for (int k = 0; k + 1 < cfg.steps; ++k) fp = mu_step(v, fp, cfg.delta);
    }
    res.factors = mu_step(v, fp, cfg.delta);
    res.vhat = matmul(res.factors.w, res.factors.h);
    return res;
}

}  // namespace fphys
