#pragma once

#include "fphys/conv.hpp"
#include "fphys/nmf.hpp"

namespace fphys {

/// Which embedding axes feed the factorization matrix's vector dimension M.
/// The temporal mapping (TauToM) is the one that makes the factorization act
/// as joint spatial-temporal-channel attention for time-series estimation.
enum class MappingVariant { TauToM, KappaToM, TauKappaToM, TsmFrameDepth };

struct MappingSpec {
    MappingVariant variant = MappingVariant::TauToM;
    std::int64_t frame_depth = 4;  // psi; TsmFrameDepth only, psi < kappa
};

struct FsamConfig {
    MappingSpec mapping;
    NmfConfig nmf;              // defaults: rank 1, 6 steps
    std::int64_t channels = 0;  // preprocess conv output channels; 0 = same as input
    bool residual = true;
};

/// The two 1x1x1 excitation convolutions around the factorization.
template <class T>
struct FsamParams {
    Tensor<T> w_pre, b_pre;    // kappa  -> kappa'
    Tensor<T> w_post, b_post;  // kappa' -> kappa
};

namespace detail {

inline void validate_mapping(const Shape& e, const MappingSpec& spec) {
    check(e.size() == 4, "fsam mapping: expects (kappa,tau,alpha,beta), got " + shape_str(e));
    if (spec.variant == MappingVariant::TsmFrameDepth) {
        check(spec.frame_depth >= 1 && spec.frame_depth < e[0],
              "fsam mapping: frame depth must satisfy 1 <= psi < kappa");
        check(e[0] % spec.frame_depth == 0,
              "fsam mapping: channel count " + std::to_string(e[0]) +
                  " not divisible by frame depth " + std::to_string(spec.frame_depth));
    }
}

}  // namespace detail

/// (M, N) of the factorization matrix for an embedding shaped (kappa,tau,alpha,beta).
inline std::pair<std::int64_t, std::int64_t> mapping_dims(const Shape& e,
                                                          const MappingSpec& spec) {
    detail::validate_mapping(e, spec);
    const std::int64_t kappa = e[0], tau = e[1], ab = e[2] * e[3];
    switch (spec.variant) {
        case MappingVariant::TauToM: return {tau, kappa * ab};
        case MappingVariant::KappaToM: return {kappa, tau * ab};
        case MappingVariant::TauKappaToM: return {tau * kappa, ab};
        case MappingVariant::TsmFrameDepth:
            return {spec.frame_depth, (kappa / spec.frame_depth) * tau * ab};
    }
    fail("fsam mapping: unknown variant");
}

/// Bijective tensor -> matrix transform. Entries must be nonnegative (the
/// caller guarantees this with a ReLU); the inverse is map_from_matrix.
template <class T>
Tensor<T> map_to_matrix(const Tensor<T>& e, const MappingSpec& spec) {
    detail::validate_mapping(e.shape(), spec);
    detail::check_nonnegative("map_to_matrix", e);
    const std::int64_t kappa = e.dim(0), tau = e.dim(1), a = e.dim(2), b = e.dim(3);
    const auto [m, n] = mapping_dims(e.shape(), spec);
    switch (spec.variant) {
        case MappingVariant::TauToM:
            return reshape(permute(e, {1, 0, 2, 3}), {m, n});
        case MappingVariant::KappaToM:
            return reshape(e, {m, n});
        case MappingVariant::TauKappaToM:
            // rows ordered (t, c): row index = t*kappa + c
            return reshape(permute(e, {1, 0, 2, 3}), {m, n});
        case MappingVariant::TsmFrameDepth: {
            const std::int64_t groups = kappa / spec.frame_depth;
            Tensor<T> g = reshape(e, {groups, spec.frame_depth, tau, a, b});
            return reshape(permute(g, {1, 0, 2, 3, 4}), {m, n});
        }
    }
    fail("map_to_matrix: unknown variant");
}

template <class T>
Tensor<T> map_from_matrix(const Tensor<T>& v, const MappingSpec& spec, const Shape& target) {
    detail::validate_mapping(target, spec);
    check(v.rank() == 2 && v.numel() == numel(target),
          "map_from_matrix: element count mismatch, " + shape_str(v.shape()) + " vs " +
              shape_str(target));
    const std::int64_t kappa = target[0], tau = target[1], a = target[2], b = target[3];
    switch (spec.variant) {
        case MappingVariant::TauToM:
        case MappingVariant::TauKappaToM:
            return permute(reshape(v, {tau, kappa, a, b}), {1, 0, 2, 3});
        case MappingVariant::KappaToM:
            return reshape(v, target);
        case MappingVariant::TsmFrameDepth: {
            const std::int64_t groups = kappa / spec.frame_depth;
            Tensor<T> g = permute(reshape(v, {spec.frame_depth, groups, tau, a, b}),
                                  {1, 0, 2, 3, 4});
            return reshape(g, target);
        }
    }
    fail("map_from_matrix: unknown variant");
}

namespace detail {

inline ConvSpec pointwise_spec(std::int64_t cin, std::int64_t cout) {
    ConvSpec s;
    s.in_channels = cin;
    s.out_channels = cout;
    s.kernel = {1, 1, 1};
    s.stride = {1, 1, 1};
    s.temporal_padding = Padding::valid;
    s.spatial_padding = Padding::valid;
    s.bias = true;
    return s;
}

}  // namespace detail

template <class T>
FsamParams<T> fsam_param_init(std::int64_t kappa, std::int64_t kappa_prime, Rng& rng) {
    auto init_conv = [&rng](std::int64_t cin, std::int64_t cout, Tensor<T>& w, Tensor<T>& b) {
        const double bound = std::sqrt(6.0 / static_cast<double>(cin));
        w = Tensor<T>::uniform({cout, cin, 1, 1, 1}, rng, -bound, bound);
        const double bb = 1.0 / std::sqrt(static_cast<double>(cin));
        b = Tensor<T>::uniform({cout}, rng, -bb, bb);
        w.set_requires_grad(true);
        b.set_requires_grad(true);
    };
    FsamParams<T> p;
    init_conv(kappa, kappa_prime, p.w_pre, p.b_pre);
    init_conv(kappa_prime, kappa, p.w_post, p.b_post);
    return p;
}

/// Factorized self-attention over voxel embeddings (N,kappa,tau,alpha,beta):
///   eps_hat = Gamma^-1( NMF( Gamma( ReLU(pre(eps)) ) ) )   [per sample]
///   out     = eps + IN( eps * ReLU(post(eps_hat)) )        [residual form]
/// The factorization runs detached unless the NMF config selects one_step.
template <class T>
Tensor<T> fsam_forward(const Tensor<T>& e, const FsamParams<T>& params, const FsamConfig& cfg) {
    check(e.rank() == 5, "fsam_forward: expects (N,kappa,tau,alpha,beta), got " +
                             shape_str(e.shape()));
    const std::int64_t batch = e.dim(0), kappa = e.dim(1);
    const std::int64_t kp = cfg.channels > 0 ? cfg.channels : kappa;
    const Shape embed{kp, e.dim(2), e.dim(3), e.dim(4)};
    const auto [m, n] = mapping_dims(embed, cfg.mapping);
    check(cfg.nmf.rank <= std::min(m, n),
          "fsam_forward: rank " + std::to_string(cfg.nmf.rank) + " exceeds min(M,N) = " +
              std::to_string(std::min(m, n)) + " under the chosen mapping");

    const ConvSpec pre_spec = detail::pointwise_spec(kappa, kp);
    const ConvSpec post_spec = detail::pointwise_spec(kp, kappa);
    const bool one_step = cfg.nmf.grad_mode == NmfConfig::GradMode::one_step;

    Tensor<T> eps_hat;
    auto run_factorization = [&](const Tensor<T>& nn) {
        std::vector<Tensor<T>> parts(static_cast<std::size_t>(batch));
        auto solve_one = [&](std::int64_t i) {
            Tensor<T> vi = map_to_matrix(select0(nn, i), cfg.mapping);
            auto fr = factorize(vi, cfg.nmf);
            parts[static_cast<std::size_t>(i)] = map_from_matrix(fr.vhat, cfg.mapping, embed);
        };
        if (one_step && grad_enabled() && Tape<T>::current() != nullptr) {
            for (std::int64_t i = 0; i < batch; ++i) solve_one(i);  // tape is per-thread
        } else {
            parallel_for(batch, solve_one);
        }
        return stack0(parts);
    };
    if (one_step) {
        eps_hat = run_factorization(relu(conv3d(e, pre_spec, params.w_pre, params.b_pre)));
    } else {
        NoGradGuard ng;  // factorization path carries no gradient
        eps_hat = run_factorization(relu(conv3d(e, pre_spec, params.w_pre, params.b_pre)));
    }

    Tensor<T> post = relu(conv3d(eps_hat, post_spec, params.w_post, params.b_post));
    Tensor<T> excited = instance_norm(mul(e, post));
    return cfg.residual ? add(e, excited) : excited;
}

/// Attention branch removed: the identity path only (inference-time skip).
template <class T>
Tensor<T> fsam_bypass(const Tensor<T>& e, const FsamParams<T>&, const FsamConfig&) {
    return e;
}

}  // namespace fphys
