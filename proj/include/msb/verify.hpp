#pragma once

#include <string>
#include <vector>

#include "msb/gradcheck.hpp"
#include "msb/model.hpp"

namespace msb {

struct GradSuiteEntry {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

struct GradSuiteReport {
    std::vector<GradSuiteEntry> entries;
    bool all_pass = true;
};

namespace detail {

template <typename T>
Tensor<T> suite_random_tensor(Rng& rng, int n, int c, int h, int w, double lo = -1.0,
                              double hi = 1.0) {
    Tensor<T> t(n, c, h, w);
    for (T& x : t.v) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
Filter<T> suite_random_filter(Rng& rng, int co, int ci, int kh, int kw, double scale = 0.7) {
    Filter<T> f(co, ci, kh, kw);
    for (T& x : f.weights) x = static_cast<T>(rng.uniform(-scale, scale));
    for (T& x : f.bias) x = static_cast<T>(rng.uniform(-scale, scale));
    return f;
}

template <typename T>
T suite_dot(const Tensor<T>& a, const Tensor<T>& b) {
    T acc = T(0);
    for (std::size_t i = 0; i < a.v.size(); ++i) acc += a.v[i] * b.v[i];
    return acc;
}

// Corrupting the analytic gradient must trip the check; used as a fault
// injection hook by tests of the verification tooling itself.
template <typename T>
void maybe_corrupt(std::vector<T>& grad, const std::string& entry,
                   const std::string& inject_fault) {
    if (!inject_fault.empty() && entry == inject_fault) {
        for (T& g : grad) g = g * T(1.5) + T(0.01);
    }
}

// Smallest distance from the probe point to a kink of the loss surface:
// relu pre-activations at zero, channel-max argmax switches, smooth-L1
// curvature changes at |d| = 1. Central differences need the probe to sit
// clear of all of these by a multiple of epsilon.
template <typename T>
double min_abs(const Tensor<T>& t, double m) {
    for (const T& v : t.v) m = std::min(m, std::abs(static_cast<double>(v)));
    return m;
}

template <typename T>
double channel_max_margin(const Tensor<T>& t, double m) {
    if (t.c < 2) return m;
    const std::size_t plane = static_cast<std::size_t>(t.h) * t.w;
    for (int b = 0; b < t.n; ++b) {
        const T* base = t.data() + static_cast<std::size_t>(b) * t.c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            double best = base[i], second = -std::numeric_limits<double>::infinity();
            for (int c = 1; c < t.c; ++c) {
                const double v = base[static_cast<std::size_t>(c) * plane + i];
                if (v > best) {
                    second = best;
                    best = v;
                } else {
                    second = std::max(second, v);
                }
            }
            m = std::min(m, best - second);
        }
    }
    return m;
}

template <typename T>
double detector_probe_margin(const DetectorTrace<T>& tr, const DetectorConfig& cfg,
                             std::span<const T> deltas, const AssignResult& assign,
                             std::span<const BoundingBox> anchors,
                             std::span<const BoundingBox> gts) {
    double m = std::numeric_limits<double>::infinity();
    for (const Tensor<T>& pre : tr.backbone.pre) m = min_abs(pre, m);
    for (const Tensor<T>& pre : tr.head_pre) m = min_abs(pre, m);
    if (cfg.has_msb()) {
        const MsbOptions opts = cfg.effective_msb_options();
        if (opts.spatial_attention) {
            for (const MsbTrace<T>& t : tr.msb) {
                m = channel_max_margin(opts.channel_attention ? t.gated_c : t.hdc, m);
            }
        }
    }
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        if (assign.labels[a] != AnchorLabel::Positive || assign.matched_gt[a] < 0) continue;
        const std::array<double, 4> target = encode_box(anchors[a], gts[assign.matched_gt[a]]);
        for (int k = 0; k < 4; ++k) {
            const double d = static_cast<double>(deltas[4 * a + k]) - target[k];
            m = std::min(m, std::abs(std::abs(d) - 1.0));
        }
    }
    return m;
}

}  // namespace detail

template <typename T = float>
struct SmoothScene {
    DetectorParams<T> params;
    Tensor<T> image;
    double margin = 0.0;
    std::uint64_t salt = 0;
};

// Deterministic search for a detector scene whose loss surface is smooth
// around the probe point: draws (params, image) substreams until every relu
// pre-activation, channel-max runner-up gap and smooth-L1 |d|-1 distance
// clears a multiple of epsilon, so central differences see no kinks.
template <typename T>
SmoothScene<T> find_smooth_detector_scene(const DetectorConfig& cfg, int image_h, int image_w,
                                          std::span<const BoundingBox> gts, std::uint64_t seed,
                                          double eps, double safety = 8.0) {
    const AnchorSet anchors = anchor_set_for(cfg, image_h, image_w);
    const double needed = safety * eps;
    SmoothScene<T> best;
    best.margin = -1.0;
    for (std::uint64_t salt = 0; salt < 64; ++salt) {
        Rng rng = Rng(seed).fork(salt);
        auto params = DetectorParams<T>::init(rng, cfg);
        Tensor<T> image = detail::suite_random_tensor<T>(rng, 1, cfg.backbone.input_channels,
                                                         image_h, image_w);
        DetectorTrace<T> tr;
        auto outs = detector_forward(image, params, cfg, &tr);
        std::vector<T> logits, deltas;
        flatten_head_outputs<T>(outs, logits, deltas);
        auto assign = assign_targets(anchors.flat, gts, cfg.assign_iou_pos, cfg.assign_iou_neg);
        const double margin = detail::detector_probe_margin<T>(
            tr, cfg, std::span<const T>(deltas), assign, anchors.flat, gts);
        if (margin > best.margin) {
            best.params = std::move(params);
            best.image = std::move(image);
            best.margin = margin;
            best.salt = salt;
        }
        if (best.margin > needed) break;
    }
    return best;
}

// Finite-difference verification of every analytic backward pass, the
// composed booster pipeline, and the full detector loss at desk shapes.
template <typename T>
GradSuiteReport run_gradient_suite(double eps, double tol_op, double tol_pipeline,
                                   std::uint64_t seed, const std::string& inject_fault = "",
                                   double denom_floor = 1e-8) {
    GradSuiteReport report;
    const T e = static_cast<T>(eps);
    const T floor = static_cast<T>(denom_floor);
    auto add = [&](const std::string& name, double err, double tol) {
        report.entries.push_back({name, err, tol, err < tol});
        report.all_pass = report.all_pass && err < tol;
    };

    {  // conv2d, dilated
        Rng rng(seed + 1);
        Tensor<T> input = detail::suite_random_tensor<T>(rng, 1, 2, 8, 8);
        Filter<T> filter = detail::suite_random_filter<T>(rng, 3, 2, 3, 3);
        const ConvSpec spec{2, 1, 2};
        Tensor<T> proj = detail::suite_random_tensor<T>(rng, 1, 3, 8, 8);
        auto g = conv2d_backward(input, filter, spec, proj);
        detail::maybe_corrupt(g.filter.weights, "conv2d", inject_fault);
        std::vector<ParamView<T>> views;
        append_filter_views(views, "filter", filter, g.filter);
        views.push_back(view_of("input", input.v, g.input.v));
        auto loss = [&] { return detail::suite_dot(conv2d(input, filter, spec), proj); };
        add("conv2d", finite_difference_check<T>(loss, views, e, floor).max_rel_error, tol_op);
    }
    {  // conv2d, strided
        Rng rng(seed + 2);
        Tensor<T> input = detail::suite_random_tensor<T>(rng, 1, 3, 9, 9);
        Filter<T> filter = detail::suite_random_filter<T>(rng, 2, 3, 3, 3);
        const ConvSpec spec{1, 2, 1};
        Tensor<T> out = conv2d(input, filter, spec);
        Tensor<T> proj = detail::suite_random_tensor<T>(rng, out.n, out.c, out.h, out.w);
        auto g = conv2d_backward(input, filter, spec, proj);
        detail::maybe_corrupt(g.filter.weights, "conv2d_strided", inject_fault);
        std::vector<ParamView<T>> views;
        append_filter_views(views, "filter", filter, g.filter);
        views.push_back(view_of("input", input.v, g.input.v));
        auto loss = [&] { return detail::suite_dot(conv2d(input, filter, spec), proj); };
        add("conv2d_strided", finite_difference_check<T>(loss, views, e, floor).max_rel_error, tol_op);
    }
    {  // global_avg_pool
        Rng rng(seed + 3);
        Tensor<T> input = detail::suite_random_tensor<T>(rng, 2, 3, 5, 5);
        Tensor<T> proj = detail::suite_random_tensor<T>(rng, 2, 3, 1, 1);
        Tensor<T> g = global_avg_pool_backward(input, proj);
        detail::maybe_corrupt(g.v, "global_avg_pool", inject_fault);
        std::vector<ParamView<T>> views{view_of("input", input.v, g.v)};
        auto loss = [&] { return detail::suite_dot(global_avg_pool(input), proj); };
        add("global_avg_pool", finite_difference_check<T>(loss, views, e, floor).max_rel_error, tol_op);
    }
    {  // channel_max_pool; probe point kept clear of argmax ties
        Rng rng(seed + 4);
        Tensor<T> input = detail::suite_random_tensor<T>(rng, 1, 4, 6, 6);
        for (std::uint64_t salt = 0; salt < 64; ++salt) {
            if (detail::channel_max_margin(input, std::numeric_limits<double>::infinity()) >
                8.0 * eps) {
                break;
            }
            Rng retry = Rng(seed + 4).fork(salt + 1);
            input = detail::suite_random_tensor<T>(retry, 1, 4, 6, 6);
        }
        Tensor<T> proj = detail::suite_random_tensor<T>(rng, 1, 1, 6, 6);
        Tensor<T> g = channel_max_pool_backward(input, proj);
        detail::maybe_corrupt(g.v, "channel_max_pool", inject_fault);
        std::vector<ParamView<T>> views{view_of("input", input.v, g.v)};
        auto loss = [&] { return detail::suite_dot(channel_max_pool(input), proj); };
        add("channel_max_pool", finite_difference_check<T>(loss, views, e, floor).max_rel_error,
            tol_op);
    }
    {  // elementwise_add: upstream passes through to both operands
        Rng rng(seed + 5);
        Tensor<T> a = detail::suite_random_tensor<T>(rng, 1, 2, 5, 5);
        Tensor<T> b = detail::suite_random_tensor<T>(rng, 1, 2, 5, 5);
        Tensor<T> proj = detail::suite_random_tensor<T>(rng, 1, 2, 5, 5);
        Tensor<T> ga = proj, gb = proj;
        detail::maybe_corrupt(ga.v, "elementwise_add", inject_fault);
        std::vector<ParamView<T>> views{view_of("a", a.v, ga.v), view_of("b", b.v, gb.v)};
        auto loss = [&] { return detail::suite_dot(elementwise_add(a, b), proj); };
        add("elementwise_add", finite_difference_check<T>(loss, views, e, floor).max_rel_error, tol_op);
    }
    for (int kind = 0; kind < 2; ++kind) {  // broadcast_mul, both gate shapes
        Rng rng(seed + 6 + kind);
        Tensor<T> input = detail::suite_random_tensor<T>(rng, 1, 3, 5, 5);
        Tensor<T> gate = kind == 0 ? detail::suite_random_tensor<T>(rng, 1, 3, 1, 1)
                                   : detail::suite_random_tensor<T>(rng, 1, 1, 5, 5);
        Tensor<T> proj = detail::suite_random_tensor<T>(rng, 1, 3, 5, 5);
        auto g = broadcast_mul_backward(input, gate, proj);
        const std::string name =
            kind == 0 ? "broadcast_mul_channel" : "broadcast_mul_spatial";
        detail::maybe_corrupt(g.input.v, name, inject_fault);
        std::vector<ParamView<T>> views{view_of("input", input.v, g.input.v),
                                        view_of("gate", gate.v, g.gate.v)};
        auto loss = [&] { return detail::suite_dot(broadcast_mul(input, gate), proj); };
        add(name, finite_difference_check<T>(loss, views, e, floor).max_rel_error, tol_op);
    }
    {  // upsample_nearest2x
        Rng rng(seed + 8);
        Tensor<T> input = detail::suite_random_tensor<T>(rng, 1, 2, 4, 5);
        Tensor<T> proj = detail::suite_random_tensor<T>(rng, 1, 2, 8, 10);
        Tensor<T> g = upsample_nearest2x_backward(proj);
        detail::maybe_corrupt(g.v, "upsample_nearest2x", inject_fault);
        std::vector<ParamView<T>> views{view_of("input", input.v, g.v)};
        auto loss = [&] { return detail::suite_dot(upsample_nearest2x(input), proj); };
        add("upsample_nearest2x", finite_difference_check<T>(loss, views, e, floor).max_rel_error,
            tol_op);
    }
    {  // sigmoid
        Rng rng(seed + 9);
        Tensor<T> input = detail::suite_random_tensor<T>(rng, 1, 2, 5, 5, -2.0, 2.0);
        Tensor<T> proj = detail::suite_random_tensor<T>(rng, 1, 2, 5, 5);
        Tensor<T> g = sigmoid_backward(sigmoid(input), proj);
        detail::maybe_corrupt(g.v, "sigmoid", inject_fault);
        std::vector<ParamView<T>> views{view_of("input", input.v, g.v)};
        auto loss = [&] { return detail::suite_dot(sigmoid(input), proj); };
        add("sigmoid", finite_difference_check<T>(loss, views, e, floor).max_rel_error, tol_op);
    }
    {  // relu, probes nudged off the kink
        Rng rng(seed + 10);
        Tensor<T> input = detail::suite_random_tensor<T>(rng, 1, 2, 5, 5);
        for (T& x : input.v) {
            if (std::abs(static_cast<double>(x)) < 2.0 * eps) x += static_cast<T>(4.0 * eps);
        }
        Tensor<T> proj = detail::suite_random_tensor<T>(rng, 1, 2, 5, 5);
        Tensor<T> g = relu_backward(input, proj);
        detail::maybe_corrupt(g.v, "relu", inject_fault);
        std::vector<ParamView<T>> views{view_of("input", input.v, g.v)};
        auto loss = [&] { return detail::suite_dot(relu(input), proj); };
        add("relu", finite_difference_check<T>(loss, views, e, floor).max_rel_error, tol_op);
    }
    {  // composed booster pipeline over all of its parameters
        HdcConfig cfg;
        cfg.branch_channels = 3;
        const double margin_needed = 8.0 * eps;
        MsbParams<T> params;
        Tensor<T> input;
        MsbTrace<T> trace;
        double best_margin = -1.0;
        std::uint64_t best_salt = 0;
        for (std::uint64_t salt = 0; salt < 64; ++salt) {
            Rng rng = Rng(seed + 11).fork(salt);
            MsbParams<T> p = MsbParams<T>::init(rng, 3, cfg);
            Tensor<T> in = detail::suite_random_tensor<T>(rng, 1, 3, 8, 8);
            MsbTrace<T> tr;
            (void)msb_forward(in, p, cfg, MsbOptions{}, &tr);
            const double margin = detail::channel_max_margin(
                tr.gated_c, std::numeric_limits<double>::infinity());
            if (margin > best_margin) {
                best_margin = margin;
                best_salt = salt;
            }
            if (margin > margin_needed) break;
        }
        Rng rng = Rng(seed + 11).fork(best_salt);
        params = MsbParams<T>::init(rng, 3, cfg);
        input = detail::suite_random_tensor<T>(rng, 1, 3, 8, 8);
        Tensor<T> out = msb_forward(input, params, cfg, MsbOptions{}, &trace);
        Tensor<T> proj = detail::suite_random_tensor<T>(rng, out.n, out.c, out.h, out.w);
        MsbGrads<T> g = msb_backward(trace, params, cfg, MsbOptions{}, proj);
        detail::maybe_corrupt(g.shared.weights, "msb_pipeline", inject_fault);
        std::vector<ParamView<T>> views;
        append_filter_views(views, "shared", params.shared, g.shared);
        append_filter_views(views, "mapping", params.mapping, g.mapping);
        append_filter_views(views, "channel_attn", params.channel_attn, g.channel_attn);
        append_filter_views(views, "spatial_attn", params.spatial_attn, g.spatial_attn);
        views.push_back(view_of("input", input.v, g.input.v));
        auto loss = [&] {
            return detail::suite_dot(msb_forward(input, params, cfg), proj);
        };
        add("msb_pipeline", finite_difference_check<T>(loss, views, e, floor).max_rel_error,
            tol_pipeline);
    }
    {  // full detector loss at desk shape
        DetectorConfig cfg;
        cfg.backbone.input_channels = 3;
        cfg.backbone.stage_channels = {4, 6};
        cfg.backbone.num_levels = 2;
        cfg.backbone.pyramid_channels = 4;
        cfg.hdc.branch_channels = 4;
        cfg.anchors.scales = {8.0, 16.0};
        cfg.head_channels = 8;
        cfg.loss.sample_count = 64;
        const std::vector<BoundingBox> gts{{2.0, 2.0, 7.0, 6.0}, {8.0, 9.0, 15.0, 16.0}};
        const AnchorSet anchors = anchor_set_for(cfg, 16, 16);

        SmoothScene<T> scene = find_smooth_detector_scene<T>(cfg, 16, 16, gts, seed + 12, eps);
        DetectorParams<T>& params = scene.params;
        Tensor<T>& image = scene.image;
        auto grads = DetectorParams<T>::zeros(cfg);
        Rng srng(seed + 14);
        (void)detector_loss_and_grads<T>(image, gts, params, cfg, srng, grads);

        std::vector<ParamView<T>> views;
        auto prefs = param_registry(params);
        auto grefs = param_registry(grads);
        for (std::size_t i = 0; i < prefs.size(); ++i) {
            detail::maybe_corrupt(*grefs[i].values, "detector_loss", inject_fault);
            views.push_back({prefs[i].name, prefs[i].values->data(), grefs[i].values->data(),
                             prefs[i].values->size()});
        }
        auto loss = [&] {
            auto outs = detector_forward(image, params, cfg);
            std::vector<T> logits, deltas;
            flatten_head_outputs<T>(outs, logits, deltas);
            auto assign =
                assign_targets(anchors.flat, gts, cfg.assign_iou_pos, cfg.assign_iou_neg);
            Rng rng(seed + 14);
            return detection_loss<T>(logits, deltas, assign, anchors.flat, gts, cfg.loss, rng)
                .total;
        };
        add("detector_loss", finite_difference_check<T>(loss, views, e, floor).max_rel_error,
            tol_pipeline);
    }
    return report;
}

}  // namespace msb
