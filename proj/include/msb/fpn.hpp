#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "msb/ops.hpp"
#include "msb/rng.hpp"
#include "msb/tensor.hpp"

namespace msb {

// Small plain-CNN backbone: a stride-2 stem plus one stride-2 stage per
// pyramid level, each followed by ReLU, with 1x1 lateral convolutions mapping
// every level to a common channel width. Level i sits at stride 2^(i+2)
// relative to the input (4, 8, 16, 32, ...).
struct BackboneConfig {
    int input_channels = 3;
    std::vector<int> stage_channels = {16, 24, 32, 48};
    int num_levels = 4;
    int pyramid_channels = 32;
    bool smooth_after_fuse = false;  // optional 3x3 conv on each fused map

    std::vector<int> level_strides() const {
        std::vector<int> s(num_levels);
        for (int i = 0; i < num_levels; ++i) s[i] = 4 << i;
        return s;
    }

    int max_stride() const { return 4 << (num_levels - 1); }

    void validate() const {
        if (input_channels < 1) throw ConfigError("backbone: input_channels must be >= 1");
        if (num_levels < 1) throw ConfigError("backbone: num_levels must be >= 1");
        if (static_cast<int>(stage_channels.size()) != num_levels) {
            throw ConfigError("backbone: stage_channels must list one width per level");
        }
        for (int c : stage_channels) {
            if (c < 1) throw ConfigError("backbone: stage widths must be >= 1");
        }
        if (pyramid_channels < 1) throw ConfigError("backbone: pyramid_channels must be >= 1");
    }
};

template <typename T = float>
struct BackboneParams {
    std::vector<Filter<T>> convs;     // stem + one per level, all 3x3 stride 2
    std::vector<Filter<T>> laterals;  // 1x1 to pyramid_channels per level
    std::vector<Filter<T>> smooth;    // 3x3 per level, only when smooth_after_fuse

    static BackboneParams zeros(const BackboneConfig& cfg) {
        cfg.validate();
        BackboneParams p;
        int in_ch = cfg.input_channels;
        int out_ch = cfg.stage_channels[0];
        p.convs.emplace_back(out_ch, in_ch, 3, 3);
        for (int i = 0; i < cfg.num_levels; ++i) {
            in_ch = out_ch;
            out_ch = cfg.stage_channels[i];
            p.convs.emplace_back(out_ch, in_ch, 3, 3);
            p.laterals.emplace_back(cfg.pyramid_channels, out_ch, 1, 1);
        }
        if (cfg.smooth_after_fuse) {
            for (int i = 0; i < cfg.num_levels; ++i) {
                p.smooth.emplace_back(cfg.pyramid_channels, cfg.pyramid_channels, 3, 3);
            }
        }
        return p;
    }

    static BackboneParams init(Rng& rng, const BackboneConfig& cfg) {
        BackboneParams p = zeros(cfg);
        for (Filter<T>& f : p.convs) he_init(rng, f);
        for (Filter<T>& f : p.laterals) xavier_init(rng, f);
        for (Filter<T>& f : p.smooth) xavier_init(rng, f);
        return p;
    }

    static void he_init(Rng& rng, Filter<T>& f) {
        const double fan_in = static_cast<double>(f.in_channels) * f.kernel_h * f.kernel_w;
        const double sd = std::sqrt(2.0 / fan_in);
        for (T& w : f.weights) w = static_cast<T>(rng.normal(0.0, sd));
    }

    static void xavier_init(Rng& rng, Filter<T>& f) {
        const double fan_in = static_cast<double>(f.in_channels) * f.kernel_h * f.kernel_w;
        const double sd = std::sqrt(1.0 / fan_in);
        for (T& w : f.weights) w = static_cast<T>(rng.normal(0.0, sd));
    }
};

// Forward intermediates retained for the backward pass.
template <typename T = float>
struct BottomUpTrace {
    Tensor<T> input;
    std::vector<Tensor<T>> pre;  // pre-activation of each stride-2 conv
    std::vector<Tensor<T>> act;  // relu output of each stride-2 conv
};

inline constexpr ConvSpec kStride2Conv{1, 2, 1};

// Bottom-up pathway: returns one C_i^D per level, finest first, all at the
// configured common channel width.
template <typename T>
std::vector<Tensor<T>> bottom_up(const Tensor<T>& image, const BackboneParams<T>& params,
                                 const BackboneConfig& cfg, BottomUpTrace<T>* trace = nullptr) {
    cfg.validate();
    if (image.c != cfg.input_channels) {
        throw ShapeError("bottom_up: expected " + std::to_string(cfg.input_channels) +
                         " input channels, got " + std::to_string(image.c));
    }
    const int stride = cfg.max_stride();
    if (image.h % stride != 0 || image.w % stride != 0) {
        throw ConfigError("bottom_up: input " + image.dims_str() +
                          " not divisible by the largest stride " + std::to_string(stride));
    }

    if (trace) {
        trace->input = image;
        trace->pre.clear();
        trace->act.clear();
    }
    std::vector<Tensor<T>> downs;
    Tensor<T> cur = image;
    for (std::size_t j = 0; j < params.convs.size(); ++j) {
        Tensor<T> pre = conv2d(cur, params.convs[j], kStride2Conv);
        cur = relu(pre);
        if (trace) {
            trace->pre.push_back(pre);
            trace->act.push_back(cur);
        }
        if (j >= 1) {
            downs.push_back(conv2d(cur, params.laterals[j - 1], ConvSpec{}));
        }
    }
    return downs;
}

template <typename T = float>
struct Pyramid {
    std::vector<Tensor<T>> down;   // C_i^D
    std::vector<Tensor<T>> up;     // C_i^U
    std::vector<Tensor<T>> fused;  // P_i = C_i^D + C_i^U
};

// Top-down pathway plus skip fusion. Input maps are ordered fine to coarse
// with exact factor-2 spatial steps; the coarsest up map equals the coarsest
// down map and every finer one is its 2x nearest-neighbor upsampling.
template <typename T>
Pyramid<T> top_down_fuse(std::vector<Tensor<T>> downs) {
    if (downs.empty()) throw ShapeError("top_down_fuse: no levels");
    const int levels = static_cast<int>(downs.size());
    for (int i = 0; i + 1 < levels; ++i) {
        if (downs[i].h != 2 * downs[i + 1].h || downs[i].w != 2 * downs[i + 1].w ||
            downs[i].c != downs[i + 1].c || downs[i].n != downs[i + 1].n) {
            throw ShapeError("top_down_fuse: level " + std::to_string(i) + " (" +
                             downs[i].dims_str() + ") is not a factor-2 refinement of level " +
                             std::to_string(i + 1) + " (" + downs[i + 1].dims_str() + ")");
        }
    }
    Pyramid<T> pyr;
    pyr.up.resize(levels);
    pyr.fused.resize(levels);
    pyr.up[levels - 1] = downs[levels - 1];
    for (int i = levels - 2; i >= 0; --i) pyr.up[i] = upsample_nearest2x(pyr.up[i + 1]);
    for (int i = 0; i < levels; ++i) pyr.fused[i] = elementwise_add(downs[i], pyr.up[i]);
    pyr.down = std::move(downs);
    return pyr;
}

// Gradient of top_down_fuse with respect to the down maps.
template <typename T>
std::vector<Tensor<T>> top_down_fuse_backward(const std::vector<Tensor<T>>& grad_fused) {
    const int levels = static_cast<int>(grad_fused.size());
    if (levels == 0) throw ShapeError("top_down_fuse_backward: no levels");
    std::vector<Tensor<T>> grad_up(levels);
    grad_up[0] = grad_fused[0];
    for (int i = 1; i < levels; ++i) {
        grad_up[i] = upsample_nearest2x_backward(grad_up[i - 1]);
        add_into(grad_up[i], grad_fused[i]);
    }
    std::vector<Tensor<T>> grad_down(levels);
    for (int i = 0; i < levels; ++i) grad_down[i] = grad_fused[i];
    add_into(grad_down[levels - 1], grad_up[levels - 1]);
    return grad_down;
}

template <typename T = float>
struct BackboneGrads {
    std::vector<Filter<T>> convs;
    std::vector<Filter<T>> laterals;
    Tensor<T> input;
};

template <typename T>
BackboneGrads<T> bottom_up_backward(const BottomUpTrace<T>& trace,
                                    const BackboneParams<T>& params, const BackboneConfig& cfg,
                                    const std::vector<Tensor<T>>& grad_downs) {
    if (grad_downs.size() != params.laterals.size()) {
        throw ShapeError("bottom_up_backward: one upstream gradient per level required");
    }
    BackboneGrads<T> g;
    g.convs.reserve(params.convs.size());
    for (const Filter<T>& f : params.convs) {
        g.convs.emplace_back(f.out_channels, f.in_channels, f.kernel_h, f.kernel_w,
                             f.has_bias());
    }
    g.laterals.reserve(params.laterals.size());

    // Gradient flowing into each conv's relu output.
    std::vector<Tensor<T>> grad_act(params.convs.size());
    for (std::size_t j = 0; j < grad_act.size(); ++j) {
        const Tensor<T>& a = trace.act[j];
        grad_act[j] = Tensor<T>(a.n, a.c, a.h, a.w);
    }
    for (int i = 0; i < cfg.num_levels; ++i) {
        auto lg = conv2d_backward(trace.act[i + 1], params.laterals[i], ConvSpec{},
                                  grad_downs[i]);
        g.laterals.push_back(std::move(lg.filter));
        add_into(grad_act[i + 1], lg.input);
    }
    for (int j = static_cast<int>(params.convs.size()) - 1; j >= 0; --j) {
        Tensor<T> grad_pre = relu_backward(trace.pre[j], grad_act[j]);
        const Tensor<T>& in = j == 0 ? trace.input : trace.act[j - 1];
        auto cg = conv2d_backward(in, params.convs[j], kStride2Conv, grad_pre);
        g.convs[j] = std::move(cg.filter);
        if (j == 0) {
            g.input = std::move(cg.input);
        } else {
            add_into(grad_act[j - 1], cg.input);
        }
    }
    return g;
}

}  // namespace msb
