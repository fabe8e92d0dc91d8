#pragma once

#include <string>
#include <vector>

#include "msb/ops.hpp"
#include "msb/rng.hpp"
#include "msb/tensor.hpp"

namespace msb {

// Hierarchically dilated convolution: three dilated 3x3 branches sharing one
// filter, plus a 1x1 mapping branch carrying the original features.
struct HdcConfig {
    std::vector<int> dilation_rates = {1, 2, 3};
    int kernel_size = 3;
    int branch_channels = 32;

    void validate() const {
        if (dilation_rates.size() != 3) {
            throw ConfigError("hdc: exactly three dilation rates required, got " +
                              std::to_string(dilation_rates.size()));
        }
        int prev = 0;
        for (int r : dilation_rates) {
            if (r < 1) throw ConfigError("hdc: dilation rates must be >= 1");
            if (r <= prev) throw ConfigError("hdc: dilation rates must be strictly increasing");
            prev = r;
        }
        if (kernel_size < 1 || kernel_size % 2 == 0) {
            throw ConfigError("hdc: kernel size must be odd and >= 1");
        }
        if (branch_channels < 1) throw ConfigError("hdc: branch_channels must be >= 1");
    }

    int output_channels() const { return 4 * branch_channels; }
};

struct MsbOptions {
    bool sigmoid_gates = true;      // bounded squeeze-and-excitation style gates
    bool residual_add = false;      // add the gated map's input back onto the output
    bool channel_attention = true;  // ablation switches
    bool spatial_attention = true;
};

template <typename T = float>
struct MsbParams {
    Filter<T> shared;        // one kernel reused by all three dilation branches
    Filter<T> mapping;       // 1x1 projection of the input onto branch width
    Filter<T> channel_attn;  // 1x1 on the globally pooled vector
    Filter<T> spatial_attn;  // 3x3 on the channel-max map

    static MsbParams zeros(int in_channels, const HdcConfig& cfg) {
        cfg.validate();
        MsbParams p;
        p.shared = Filter<T>(cfg.branch_channels, in_channels, cfg.kernel_size, cfg.kernel_size);
        p.mapping = Filter<T>(cfg.branch_channels, in_channels, 1, 1);
        p.channel_attn = Filter<T>(cfg.output_channels(), cfg.output_channels(), 1, 1);
        p.spatial_attn = Filter<T>(1, 1, 3, 3);
        return p;
    }

    static MsbParams init(Rng& rng, int in_channels, const HdcConfig& cfg) {
        MsbParams p = zeros(in_channels, cfg);
        init_filter(rng, p.shared, 2.0);
        init_filter(rng, p.mapping, 1.0);
        // small attention weights keep initial gates near 0.5
        init_filter(rng, p.channel_attn, 0.05);
        init_filter(rng, p.spatial_attn, 0.05);
        return p;
    }

    void validate(int in_channels, const HdcConfig& cfg) const {
        cfg.validate();
        if (shared.in_channels != in_channels) {
            throw ShapeError("msb: shared filter expects " + std::to_string(shared.in_channels) +
                             " channels, level map has " + std::to_string(in_channels));
        }
        if (mapping.out_channels != shared.out_channels) {
            throw ConfigError("msb: mapping branch width must match the dilated branches");
        }
        if (channel_attn.in_channels != cfg.output_channels() ||
            channel_attn.out_channels != cfg.output_channels()) {
            throw ConfigError("msb: channel attention filter must be " +
                              std::to_string(cfg.output_channels()) + " -> " +
                              std::to_string(cfg.output_channels()));
        }
        if (spatial_attn.in_channels != 1 || spatial_attn.out_channels != 1) {
            throw ConfigError("msb: spatial attention filter must be 1 -> 1 channel");
        }
    }

    // Parameter count of the dilated + mapping branches; independent of the
    // number of dilation rates because the filter is shared.
    std::size_t hdc_param_count() const { return shared.param_count() + mapping.param_count(); }

private:
    static void init_filter(Rng& rng, Filter<T>& f, double gain) {
        const double fan_in = static_cast<double>(f.in_channels) * f.kernel_h * f.kernel_w;
        const double sd = std::sqrt(gain / fan_in);
        for (T& w : f.weights) w = static_cast<T>(rng.normal(0.0, sd));
    }
};

template <typename T>
ConvSpec hdc_branch_spec(const HdcConfig& cfg, const MsbParams<T>& params, int branch) {
    const int r = cfg.dilation_rates[branch];
    return ConvSpec{r, 1, same_padding(params.shared.kernel_h, r)};
}

// H = concat(D_r1(x), D_r2(x), D_r3(x), M(x)); spatial dims preserved.
template <typename T>
Tensor<T> hdc_forward(const Tensor<T>& level_map, const MsbParams<T>& params,
                      const HdcConfig& cfg) {
    params.validate(level_map.c, cfg);
    std::vector<Tensor<T>> parts;
    parts.reserve(4);
    for (int b = 0; b < 3; ++b) {
        parts.push_back(conv2d(level_map, params.shared, hdc_branch_spec(cfg, params, b)));
    }
    parts.push_back(conv2d(level_map, params.mapping, ConvSpec{}));
    return concat_channels(std::span<const Tensor<T>>(parts));
}

template <typename T>
struct HdcGrads {
    Tensor<T> input;
    Filter<T> shared;   // accumulated across all three branches
    Filter<T> mapping;
};

template <typename T>
HdcGrads<T> hdc_backward(const Tensor<T>& level_map, const MsbParams<T>& params,
                         const HdcConfig& cfg, const Tensor<T>& upstream) {
    params.validate(level_map.c, cfg);
    const int bc = cfg.branch_channels;
    if (upstream.c != 4 * bc || upstream.h != level_map.h || upstream.w != level_map.w ||
        upstream.n != level_map.n) {
        throw ShapeError("hdc_backward: upstream shape " + upstream.dims_str() +
                         " does not match forward output");
    }
    HdcGrads<T> g;
    g.input = Tensor<T>(level_map.n, level_map.c, level_map.h, level_map.w);
    g.shared = Filter<T>(params.shared.out_channels, params.shared.in_channels,
                         params.shared.kernel_h, params.shared.kernel_w, params.shared.has_bias());
    for (int b = 0; b < 3; ++b) {
        Tensor<T> up = slice_channels(upstream, b * bc, (b + 1) * bc);
        auto cg = conv2d_backward(level_map, params.shared, hdc_branch_spec(cfg, params, b), up);
        add_into(g.shared, cg.filter);
        add_into(g.input, cg.input);
    }
    Tensor<T> up_m = slice_channels(upstream, 3 * bc, 4 * bc);
    auto mg = conv2d_backward(level_map, params.mapping, ConvSpec{}, up_m);
    g.mapping = std::move(mg.filter);
    add_into(g.input, mg.input);
    return g;
}

// Per-channel gate: global average pool -> 1x1 conv -> sigmoid, one value per
// (n, channel), in (0, 1) when sigmoid gating is enabled.
template <typename T>
Tensor<T> channel_attention_gate(const Tensor<T>& hdc_map, const MsbParams<T>& params,
                                 const MsbOptions& opts = {}) {
    if (hdc_map.c != params.channel_attn.in_channels) {
        throw ShapeError("channel_attention_gate: expected " +
                         std::to_string(params.channel_attn.in_channels) + " channels, got " +
                         std::to_string(hdc_map.c));
    }
    Tensor<T> pooled = global_avg_pool(hdc_map);
    Tensor<T> pre = conv2d(pooled, params.channel_attn, ConvSpec{});
    return opts.sigmoid_gates ? sigmoid(pre) : pre;
}

template <typename T>
Tensor<T> apply_channel_attention(const Tensor<T>& hdc_map, const Tensor<T>& gate) {
    if (gate.h != 1 || gate.w != 1) {
        throw ShapeError("apply_channel_attention: gate must be shaped (n, c, 1, 1)");
    }
    return broadcast_mul(hdc_map, gate);
}

// Per-pixel gate: channel max pool -> 3x3 conv (padding 1) -> sigmoid, a
// one-channel map over the input's spatial grid.
template <typename T>
Tensor<T> spatial_attention_gate(const Tensor<T>& ch_map, const MsbParams<T>& params,
                                 const MsbOptions& opts = {}) {
    Tensor<T> pooled = channel_max_pool(ch_map);
    Tensor<T> pre = conv2d(pooled, params.spatial_attn,
                           ConvSpec{1, 1, same_padding(params.spatial_attn.kernel_h, 1)});
    return opts.sigmoid_gates ? sigmoid(pre) : pre;
}

template <typename T = float>
struct MsbTrace {
    Tensor<T> input;
    Tensor<T> hdc;        // H
    Tensor<T> ca_pooled;  // global average pool of H
    Tensor<T> ca_pre;     // 1x1 conv output
    Tensor<T> ca_gate;
    Tensor<T> gated_c;    // H re-weighted per channel
    Tensor<T> sa_pooled;  // channel max map
    Tensor<T> sa_pre;     // 3x3 conv output
    Tensor<T> sa_gate;
};

// Full booster: HDC, then channel attention, then spatial attention.
// Ablation switches select any subset; the optional residual variant adds the
// spatial stage's input back onto the gated output.
template <typename T>
Tensor<T> msb_forward(const Tensor<T>& level_map, const MsbParams<T>& params,
                      const HdcConfig& cfg, const MsbOptions& opts = {},
                      MsbTrace<T>* trace = nullptr) {
    Tensor<T> h = hdc_forward(level_map, params, cfg);
    if (trace) {
        trace->input = level_map;
        trace->hdc = h;
    }
    Tensor<T> gated = h;
    if (opts.channel_attention) {
        Tensor<T> pooled = global_avg_pool(h);
        Tensor<T> pre = conv2d(pooled, params.channel_attn, ConvSpec{});
        Tensor<T> gate = opts.sigmoid_gates ? sigmoid(pre) : pre;
        gated = broadcast_mul(h, gate);
        if (trace) {
            trace->ca_pooled = std::move(pooled);
            trace->ca_pre = std::move(pre);
            trace->ca_gate = gate;
            trace->gated_c = gated;
        }
    }
    Tensor<T> out = gated;
    if (opts.spatial_attention) {
        Tensor<T> pooled = channel_max_pool(gated);
        Tensor<T> pre = conv2d(pooled, params.spatial_attn,
                               ConvSpec{1, 1, same_padding(params.spatial_attn.kernel_h, 1)});
        Tensor<T> gate = opts.sigmoid_gates ? sigmoid(pre) : pre;
        out = broadcast_mul(gated, gate);
        if (trace) {
            trace->sa_pooled = std::move(pooled);
            trace->sa_pre = std::move(pre);
            trace->sa_gate = gate;
        }
    }
    if (opts.residual_add) out = elementwise_add(out, gated);
    return out;
}

template <typename T = float>
struct MsbGrads {
    Tensor<T> input;
    Filter<T> shared;
    Filter<T> mapping;
    Filter<T> channel_attn;
    Filter<T> spatial_attn;
};

template <typename T>
MsbGrads<T> msb_backward(const MsbTrace<T>& trace, const MsbParams<T>& params,
                         const HdcConfig& cfg, const MsbOptions& opts,
                         const Tensor<T>& upstream) {
    MsbGrads<T> g;
    g.channel_attn = Filter<T>(params.channel_attn.out_channels, params.channel_attn.in_channels,
                               1, 1, params.channel_attn.has_bias());
    g.spatial_attn = Filter<T>(1, 1, params.spatial_attn.kernel_h, params.spatial_attn.kernel_w,
                               params.spatial_attn.has_bias());

    const Tensor<T>& gated = opts.channel_attention ? trace.gated_c : trace.hdc;

    Tensor<T> grad_gated;
    if (opts.spatial_attention) {
        auto bm = broadcast_mul_backward(gated, trace.sa_gate, upstream);
        Tensor<T> grad_gate = std::move(bm.gate);
        grad_gated = std::move(bm.input);
        Tensor<T> grad_pre =
            opts.sigmoid_gates ? sigmoid_backward(trace.sa_gate, grad_gate) : grad_gate;
        auto cg = conv2d_backward(trace.sa_pooled, params.spatial_attn,
                                  ConvSpec{1, 1, same_padding(params.spatial_attn.kernel_h, 1)},
                                  grad_pre);
        g.spatial_attn = std::move(cg.filter);
        add_into(grad_gated, channel_max_pool_backward(gated, cg.input));
    } else {
        grad_gated = upstream;
    }
    if (opts.residual_add) add_into(grad_gated, upstream);

    Tensor<T> grad_h;
    if (opts.channel_attention) {
        auto bm = broadcast_mul_backward(trace.hdc, trace.ca_gate, grad_gated);
        grad_h = std::move(bm.input);
        Tensor<T> grad_pre =
            opts.sigmoid_gates ? sigmoid_backward(trace.ca_gate, bm.gate) : bm.gate;
        auto cg = conv2d_backward(trace.ca_pooled, params.channel_attn, ConvSpec{}, grad_pre);
        g.channel_attn = std::move(cg.filter);
        add_into(grad_h, global_avg_pool_backward(trace.hdc, cg.input));
    } else {
        grad_h = std::move(grad_gated);
    }

    auto hg = hdc_backward(trace.input, params, cfg, grad_h);
    g.input = std::move(hg.input);
    g.shared = std::move(hg.shared);
    g.mapping = std::move(hg.mapping);
    return g;
}

}  // namespace msb
