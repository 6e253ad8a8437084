#pragma once

#include "fphys/fsam.hpp"

namespace fphys {

/// One feature layer: conv3d followed by TanH and instance normalization.
struct LayerSpec {
    ConvSpec conv;
};

/// End-to-end network description. Feature layers keep the temporal extent
/// (same temporal padding) and aggregate space without padding; spatial
/// strides sit on the 3rd and 6th feature layers. The head collapses the
/// remaining spatial extent and the channels to a single signal.
struct ArchConfig {
    std::int64_t input_channels = 3;
    std::vector<LayerSpec> layers;
    int fsam_after_layer = 0;  // 1-based feature-layer index
    FsamConfig fsam;
    ConvSpec head;

    void validate() const {
        check(!layers.empty(), "arch: no feature layers");
        check(fsam_after_layer >= 1 && fsam_after_layer <= static_cast<int>(layers.size()),
              "arch: fsam_after_layer out of range");
        std::int64_t cin = input_channels;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const ConvSpec& c = layers[i].conv;
            c.validate();
            check(c.in_channels == cin,
                  "arch: layer " + std::to_string(i + 1) + " expects " +
                      std::to_string(c.in_channels) + " input channels, previous layer gives " +
                      std::to_string(cin));
            check(c.temporal_padding == Padding::same && c.stride[0] == 1,
                  "arch: feature layers must retain the temporal extent");
            const bool strided = c.stride[1] > 1 || c.stride[2] > 1;
            const bool stride_slot = (i + 1 == 3) || (i + 1 == 6);
            check(strided == stride_slot,
                  "arch: spatial strides belong exactly on the 3rd and 6th feature layers");
            cin = c.out_channels;
        }
        head.validate();
        check(head.in_channels == cin, "arch: head input channels mismatch");
        check(head.temporal_padding == Padding::same && head.stride[0] == 1,
              "arch: head must retain the temporal extent");
    }

    /// Spatial extent after each feature layer for a square input.
    std::vector<std::int64_t> spatial_trace(std::int64_t hw) const {
        std::vector<std::int64_t> trace;
        for (const auto& l : layers) {
            hw = detail::conv_axis_out(hw, l.conv.kernel[1], l.conv.stride[1],
                                       l.conv.spatial_padding);
            trace.push_back(hw);
        }
        return trace;
    }

    std::int64_t parameter_count() const {
        auto conv_params = [](const ConvSpec& c) {
            std::int64_t n = c.out_channels * c.in_channels * c.kernel[0] * c.kernel[1] *
                             c.kernel[2];
            return n + (c.bias ? c.out_channels : 0);
        };
        std::int64_t total = 0;
        for (const auto& l : layers) total += conv_params(l.conv);
        total += conv_params(head);
        const std::int64_t kappa = layers[static_cast<std::size_t>(fsam_after_layer - 1)]
                                       .conv.out_channels;
        const std::int64_t kp = fsam.channels > 0 ? fsam.channels : kappa;
        total += kappa * kp + kp;  // pre conv
        total += kp * kappa + kappa;  // post conv
        return total;
    }
};

namespace detail {

inline ConvSpec feature_conv(std::int64_t cin, std::int64_t cout, bool strided) {
    ConvSpec c;
    c.in_channels = cin;
    c.out_channels = cout;
    c.kernel = strided ? std::array<std::int64_t, 3>{3, 4, 4} : std::array<std::int64_t, 3>{3, 3, 3};
    c.stride = strided ? std::array<std::int64_t, 3>{1, 2, 2} : std::array<std::int64_t, 3>{1, 1, 1};
    c.temporal_padding = Padding::same;
    c.spatial_padding = Padding::valid;
    c.bias = true;
    return c;
}

}  // namespace detail

/// The stock architecture for 72x72 inputs: nine feature layers tracing the
/// spatial extents 70,68,33,31,29,13,11,9,7, FSAM at the 7x7 stage, and a
/// (3,7,7) head producing one channel.
inline ArchConfig default_arch() {
    ArchConfig cfg;
    cfg.input_channels = 3;
    const std::int64_t plan[] = {8, 8, 8, 8, 8, 16, 16, 16, 16};
    std::int64_t cin = 3;
    for (int i = 0; i < 9; ++i) {
        const bool strided = (i + 1 == 3) || (i + 1 == 6);
        cfg.layers.push_back({detail::feature_conv(cin, plan[i], strided)});
        cin = plan[i];
    }
    cfg.fsam_after_layer = 9;
    cfg.fsam = FsamConfig{};
    cfg.head.in_channels = cin;
    cfg.head.out_channels = 1;
    cfg.head.kernel = {3, 7, 7};
    cfg.head.stride = {1, 1, 1};
    cfg.head.temporal_padding = Padding::same;
    cfg.head.spatial_padding = Padding::valid;
    cfg.head.bias = true;
    cfg.validate();
    return cfg;
}

/// A variant of the stock network accepting 128x128 frames; the trace ends at
/// 21x21, which the head collapses.
inline ArchConfig scaled_arch_128() {
    ArchConfig cfg = default_arch();
    cfg.head.kernel = {3, 21, 21};
    cfg.validate();
    return cfg;
}

template <class T>
struct ConvParams {
    Tensor<T> w, b;
};

template <class T>
struct ModelParams {
    std::vector<ConvParams<T>> layers;
    ConvParams<T> head;
    FsamParams<T> fsam;
    std::uint64_t seed = 0;

    std::vector<Tensor<T>> trainable() const {
        std::vector<Tensor<T>> out;
        for (const auto& l : layers) {
            out.push_back(l.w);
            out.push_back(l.b);
        }
        out.push_back(head.w);
        out.push_back(head.b);
        out.push_back(fsam.w_pre);
        out.push_back(fsam.b_pre);
        out.push_back(fsam.w_post);
        out.push_back(fsam.b_post);
        return out;
    }
};

/// Fan-in-scaled uniform init: weights in +-sqrt(6/fan_in), deterministic
/// per seed (fixed parameter order, fixed draw order).
template <class T>
ModelParams<T> param_init(const ArchConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    auto init_conv = [&rng](const ConvSpec& c) {
        const std::int64_t fan_in = c.in_channels * c.kernel[0] * c.kernel[1] * c.kernel[2];
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        ConvParams<T> p;
        p.w = Tensor<T>::uniform({c.out_channels, c.in_channels, c.kernel[0], c.kernel[1],
                                  c.kernel[2]},
                                 rng, -bound, bound);
        p.w.set_requires_grad(true);
        if (c.bias) {
            const double bb = 1.0 / std::sqrt(static_cast<double>(fan_in));
            p.b = Tensor<T>::uniform({c.out_channels}, rng, -bb, bb);
            p.b.set_requires_grad(true);
        }
        return p;
    };
    ModelParams<T> params;
    params.seed = seed;
    for (const auto& l : cfg.layers) params.layers.push_back(init_conv(l.conv));
    params.head = init_conv(cfg.head);
    const std::int64_t kappa =
        cfg.layers[static_cast<std::size_t>(cfg.fsam_after_layer - 1)].conv.out_channels;
    const std::int64_t kp = cfg.fsam.channels > 0 ? cfg.fsam.channels : kappa;
    params.fsam = fsam_param_init<T>(kappa, kp, rng);
    return params;
}

/// Adjacent-frame subtraction followed by instance normalization; removes
/// stationary image components before feature extraction.
template <class T>
Tensor<T> diff_layer(const Tensor<T>& frames) {
    return instance_norm(temporal_diff(frames));
}

template <class T>
struct ForwardCapture {
    Tensor<T> embedding;  // voxel embeddings entering FSAM
};

/// Full forward pass: frames (N,C,T,H,W) -> rPPG (N, T-1).
template <class T>
Tensor<T> model_forward(const Tensor<T>& frames, const ModelParams<T>& params,
                        const ArchConfig& cfg, bool use_fsam,
                        ForwardCapture<T>* capture = nullptr) {
    check(params.layers.size() == cfg.layers.size(), "model_forward: params do not match arch");
    Tensor<T> x = diff_layer(frames);
    for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
        const auto& l = cfg.layers[i];
        x = instance_norm(tanh(conv3d(x, l.conv, params.layers[i].w, params.layers[i].b)));
        if (static_cast<int>(i) + 1 == cfg.fsam_after_layer) {
            if (capture) capture->embedding = x;
            x = use_fsam ? fsam_forward(x, params.fsam, cfg.fsam)
                         : fsam_bypass(x, params.fsam, cfg.fsam);
        }
    }
    Tensor<T> y = conv3d(x, cfg.head, params.head.w, params.head.b);
    check(y.dim(1) == 1 && y.dim(3) == 1 && y.dim(4) == 1,
          "model_forward: head must collapse channels and space, got " + shape_str(y.shape()));
    return reshape(y, {y.dim(0), y.dim(2)});
}

}  // namespace fphys
