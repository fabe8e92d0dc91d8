#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "msb/detection.hpp"
#include "msb/fpn.hpp"
#include "msb/io.hpp"
#include "msb/msb.hpp"

namespace msb {

// Ablation grid: plain pyramid, dilated branches only, dilated + channel
// attention, dilated + spatial attention, or the full booster.
enum class ModelVariant { Fpn, FpnHdc, FpnHdcCh, FpnHdcSp, FpnMsb };

inline ModelVariant parse_variant(const std::string& name) {
    if (name == "fpn") return ModelVariant::Fpn;
    if (name == "fpn+hdc") return ModelVariant::FpnHdc;
    if (name == "fpn+hdc+ch") return ModelVariant::FpnHdcCh;
    if (name == "fpn+hdc+sp") return ModelVariant::FpnHdcSp;
    if (name == "fpn+msb") return ModelVariant::FpnMsb;
    throw ConfigError("unknown model variant '" + name +
                      "' (expected fpn, fpn+hdc, fpn+hdc+ch, fpn+hdc+sp or fpn+msb)");
}

inline std::string variant_name(ModelVariant v) {
    switch (v) {
        case ModelVariant::Fpn: return "fpn";
        case ModelVariant::FpnHdc: return "fpn+hdc";
        case ModelVariant::FpnHdcCh: return "fpn+hdc+ch";
        case ModelVariant::FpnHdcSp: return "fpn+hdc+sp";
        case ModelVariant::FpnMsb: return "fpn+msb";
    }
    return "fpn+msb";
}

// Which map each per-level booster consumes: the fused pyramid map (so the
// head sees top-down context) or the raw bottom-up map.
enum class MsbInput { Fused, Down };

struct DetectorConfig {
    BackboneConfig backbone;
    HdcConfig hdc;
    MsbOptions msb_options;
    MsbInput msb_input = MsbInput::Fused;
    AnchorLayout anchors;
    int head_channels = 32;
    ModelVariant variant = ModelVariant::FpnMsb;
    double assign_iou_pos = 0.7;
    double assign_iou_neg = 0.3;
    LossOptions loss;

    bool has_msb() const { return variant != ModelVariant::Fpn; }

    // Attention switches implied by the ablation variant.
    MsbOptions effective_msb_options() const {
        MsbOptions o = msb_options;
        switch (variant) {
            case ModelVariant::FpnHdc:
                o.channel_attention = false;
                o.spatial_attention = false;
                break;
            case ModelVariant::FpnHdcCh:
                o.channel_attention = true;
                o.spatial_attention = false;
                break;
            case ModelVariant::FpnHdcSp:
                o.channel_attention = false;
                o.spatial_attention = true;
                break;
            default:
                o.channel_attention = true;
                o.spatial_attention = true;
                break;
        }
        return o;
    }

    int head_in_channels() const {
        return has_msb() ? hdc.output_channels() : backbone.pyramid_channels;
    }

    void validate() const {
        backbone.validate();
        hdc.validate();
        anchors.validate(backbone.num_levels);
        if (head_channels < 1) throw ConfigError("detector: head_channels must be >= 1");
        if (!(assign_iou_neg <= assign_iou_pos)) {
            throw ConfigError("detector: assignment thresholds must satisfy neg <= pos");
        }
        if (has_msb() && hdc.branch_channels < 1) {
            throw ConfigError("detector: branch_channels must be >= 1");
        }
    }
};

template <typename T = float>
struct HeadParams {
    Filter<T> conv;  // 3x3 shared conv
    Filter<T> cls;   // 1x1, one objectness logit per anchor in the cell
    Filter<T> reg;   // 1x1, four deltas per anchor in the cell

    static HeadParams zeros(int in_channels, int mid_channels, int anchors_per_cell) {
        HeadParams p;
        p.conv = Filter<T>(mid_channels, in_channels, 3, 3);
        p.cls = Filter<T>(anchors_per_cell, mid_channels, 1, 1);
        p.reg = Filter<T>(4 * anchors_per_cell, mid_channels, 1, 1);
        return p;
    }

    static HeadParams init(Rng& rng, int in_channels, int mid_channels, int anchors_per_cell) {
        HeadParams p = zeros(in_channels, mid_channels, anchors_per_cell);
        BackboneParams<T>::he_init(rng, p.conv);
        init_small(rng, p.cls);
        init_small(rng, p.reg);
        // start with low objectness so early training is not flooded
        std::fill(p.cls.bias.begin(), p.cls.bias.end(), T(-2));
        return p;
    }

    static void init_small(Rng& rng, Filter<T>& f) {
        const double fan_in = static_cast<double>(f.in_channels) * f.kernel_h * f.kernel_w;
        const double sd = std::sqrt(0.1 / fan_in);
        for (T& w : f.weights) w = static_cast<T>(rng.normal(0.0, sd));
    }
};

// All parameters of one detector. The same struct doubles as the gradient
// container so optimizers can walk the two registries in lockstep.
template <typename T = float>
struct DetectorParams {
    BackboneParams<T> backbone;
    std::vector<MsbParams<T>> msb;  // one per pyramid level; empty without MSB
    HeadParams<T> head;

    static DetectorParams zeros(const DetectorConfig& cfg) {
        cfg.validate();
        DetectorParams p;
        p.backbone = BackboneParams<T>::zeros(cfg.backbone);
        if (cfg.has_msb()) {
            for (int l = 0; l < cfg.backbone.num_levels; ++l) {
                p.msb.push_back(MsbParams<T>::zeros(cfg.backbone.pyramid_channels, cfg.hdc));
            }
        }
        p.head = HeadParams<T>::zeros(cfg.head_in_channels(), cfg.head_channels,
                                      cfg.anchors.anchors_per_cell());
        return p;
    }

    static DetectorParams init(Rng& rng, const DetectorConfig& cfg) {
        cfg.validate();
        DetectorParams p;
        p.backbone = BackboneParams<T>::init(rng, cfg.backbone);
        if (cfg.has_msb()) {
            for (int l = 0; l < cfg.backbone.num_levels; ++l) {
                p.msb.push_back(MsbParams<T>::init(rng, cfg.backbone.pyramid_channels, cfg.hdc));
            }
        }
        p.head = HeadParams<T>::init(rng, cfg.head_in_channels(), cfg.head_channels,
                                     cfg.anchors.anchors_per_cell());
        return p;
    }
};

template <typename T>
struct ParamRef {
    std::string name;
    std::vector<T>* values;
    std::array<int, 4> shape;
};

namespace detail {

template <typename T>
void add_filter_refs(std::vector<ParamRef<T>>& refs, const std::string& name, Filter<T>& f) {
    refs.push_back({name + ".weight", &f.weights,
                    {f.out_channels, f.in_channels, f.kernel_h, f.kernel_w}});
    if (f.has_bias()) refs.push_back({name + ".bias", &f.bias, {1, f.out_channels, 1, 1}});
}

}  // namespace detail

// Stable, named enumeration of every parameter tensor; checkpoint order.
template <typename T>
std::vector<ParamRef<T>> param_registry(DetectorParams<T>& p) {
    std::vector<ParamRef<T>> refs;
    for (std::size_t j = 0; j < p.backbone.convs.size(); ++j) {
        detail::add_filter_refs(refs, "backbone.conv" + std::to_string(j), p.backbone.convs[j]);
    }
    for (std::size_t j = 0; j < p.backbone.laterals.size(); ++j) {
        detail::add_filter_refs(refs, "backbone.lateral" + std::to_string(j),
                                p.backbone.laterals[j]);
    }
    for (std::size_t j = 0; j < p.backbone.smooth.size(); ++j) {
        detail::add_filter_refs(refs, "backbone.smooth" + std::to_string(j),
                                p.backbone.smooth[j]);
    }
    for (std::size_t l = 0; l < p.msb.size(); ++l) {
        const std::string base = "msb" + std::to_string(l);
        detail::add_filter_refs(refs, base + ".shared", p.msb[l].shared);
        detail::add_filter_refs(refs, base + ".mapping", p.msb[l].mapping);
        detail::add_filter_refs(refs, base + ".channel_attn", p.msb[l].channel_attn);
        detail::add_filter_refs(refs, base + ".spatial_attn", p.msb[l].spatial_attn);
    }
    detail::add_filter_refs(refs, "head.conv", p.head.conv);
    detail::add_filter_refs(refs, "head.cls", p.head.cls);
    detail::add_filter_refs(refs, "head.reg", p.head.reg);
    return refs;
}

template <typename T>
void save_detector(const std::string& path, DetectorParams<T>& params) {
    std::vector<NamedTensor<float>> entries;
    for (const ParamRef<T>& r : param_registry(params)) {
        Tensor<float> t(r.shape[0], r.shape[1], r.shape[2], r.shape[3]);
        if (t.count() != r.values->size()) {
            throw ShapeError("checkpoint: registry shape mismatch for " + r.name);
        }
        for (std::size_t i = 0; i < t.v.size(); ++i) {
            t.v[i] = static_cast<float>((*r.values)[i]);
        }
        entries.push_back({r.name, std::move(t)});
    }
    write_checkpoint(path, entries);
}

template <typename T>
void load_detector(const std::string& path, DetectorParams<T>& params) {
    const std::vector<NamedTensor<float>> entries = read_checkpoint<float>(path);
    std::map<std::string, const NamedTensor<float>*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;
    for (const ParamRef<T>& r : param_registry(params)) {
        auto it = by_name.find(r.name);
        if (it == by_name.end()) {
            throw IoError("checkpoint " + path + " is missing tensor '" + r.name + "'");
        }
        const Tensor<float>& t = it->second->tensor;
        if (t.n != r.shape[0] || t.c != r.shape[1] || t.h != r.shape[2] || t.w != r.shape[3] ||
            t.count() != r.values->size()) {
            throw IoError("checkpoint " + path + ": tensor '" + r.name + "' has shape " +
                          t.dims_str() + ", model expects " + std::to_string(r.shape[0]) + "x" +
                          std::to_string(r.shape[1]) + "x" + std::to_string(r.shape[2]) + "x" +
                          std::to_string(r.shape[3]));
        }
        for (std::size_t i = 0; i < r.values->size(); ++i) {
            (*r.values)[i] = static_cast<T>(t.v[i]);
        }
        by_name.erase(it);
    }
    if (!by_name.empty()) {
        throw IoError("checkpoint " + path + " has unexpected tensor '" +
                      by_name.begin()->first + "'");
    }
}

template <typename T = float>
struct HeadLevelOut {
    Tensor<T> cls;  // (n, A, h, w)
    Tensor<T> reg;  // (n, 4A, h, w)
};

template <typename T = float>
struct DetectorTrace {
    BottomUpTrace<T> backbone;
    std::vector<Tensor<T>> downs;
    Pyramid<T> pyramid;
    std::vector<MsbTrace<T>> msb;
    std::vector<Tensor<T>> head_in;
    std::vector<Tensor<T>> head_pre;
    std::vector<Tensor<T>> head_act;
};

template <typename T>
std::vector<HeadLevelOut<T>> detector_forward(const Tensor<T>& image,
                                              const DetectorParams<T>& params,
                                              const DetectorConfig& cfg,
                                              DetectorTrace<T>* trace = nullptr) {
    cfg.validate();
    DetectorTrace<T> local;
    DetectorTrace<T>& tr = trace ? *trace : local;
    tr.downs = bottom_up(image, params.backbone, cfg.backbone, &tr.backbone);
    tr.pyramid = top_down_fuse(tr.downs);

    const MsbOptions opts = cfg.effective_msb_options();
    const int levels = cfg.backbone.num_levels;
    tr.msb.clear();
    tr.msb.resize(cfg.has_msb() ? levels : 0);
    tr.head_in.clear();
    tr.head_pre.clear();
    tr.head_act.clear();
    std::vector<HeadLevelOut<T>> out(levels);
    for (int l = 0; l < levels; ++l) {
        Tensor<T> x = cfg.msb_input == MsbInput::Fused ? tr.pyramid.fused[l] : tr.downs[l];
        if (cfg.has_msb()) {
            x = msb_forward(x, params.msb[l], cfg.hdc, opts, &tr.msb[l]);
        }
        Tensor<T> pre = conv2d(x, params.head.conv, ConvSpec{1, 1, 1});
        Tensor<T> act = relu(pre);
        out[l].cls = conv2d(act, params.head.cls, ConvSpec{});
        out[l].reg = conv2d(act, params.head.reg, ConvSpec{});
        tr.head_in.push_back(std::move(x));
        tr.head_pre.push_back(std::move(pre));
        tr.head_act.push_back(std::move(act));
    }
    return out;
}

struct AnchorSet {
    std::vector<std::vector<BoundingBox>> per_level;
    std::vector<BoundingBox> flat;
    std::vector<LevelShape> shapes;
};

inline AnchorSet anchor_set_for(const DetectorConfig& cfg, int image_h, int image_w) {
    AnchorSet s;
    const std::vector<int> strides = cfg.backbone.level_strides();
    for (int stride : strides) s.shapes.push_back({image_h / stride, image_w / stride});
    s.per_level = generate_anchors(cfg.anchors, s.shapes, strides);
    for (const auto& lvl : s.per_level) s.flat.insert(s.flat.end(), lvl.begin(), lvl.end());
    return s;
}

// Flattening order: level-major, then cell (row, column), then anchor within
// the cell; matches generate_anchors.
template <typename T>
void flatten_head_outputs(std::span<const HeadLevelOut<T>> outs, std::vector<T>& logits,
                          std::vector<T>& deltas) {
    logits.clear();
    deltas.clear();
    for (const HeadLevelOut<T>& o : outs) {
        const int A = o.cls.c;
        for (int y = 0; y < o.cls.h; ++y) {
            for (int x = 0; x < o.cls.w; ++x) {
                for (int a = 0; a < A; ++a) {
                    logits.push_back(o.cls.at(0, a, y, x));
                    for (int k = 0; k < 4; ++k) {
                        deltas.push_back(o.reg.at(0, 4 * a + k, y, x));
                    }
                }
            }
        }
    }
}

template <typename T>
struct DetectorLoss {
    T total = T(0), classification = T(0), regression = T(0);
    int positives = 0, sampled = 0;
};

// Loss and parameter gradients for one image. Gradients accumulate into
// `grads` (a zeros-initialized DetectorParams of the same shape).
template <typename T>
DetectorLoss<T> detector_loss_and_grads(const Tensor<T>& image,
                                        std::span<const BoundingBox> gt_boxes,
                                        const DetectorParams<T>& params,
                                        const DetectorConfig& cfg, Rng& sample_rng,
                                        DetectorParams<T>& grads) {
    if (image.n != 1) throw ShapeError("detector_loss_and_grads: expects batch of one image");
    DetectorTrace<T> tr;
    std::vector<HeadLevelOut<T>> outs = detector_forward(image, params, cfg, &tr);

    AnchorSet anchors = anchor_set_for(cfg, image.h, image.w);
    std::vector<T> logits, deltas;
    flatten_head_outputs<T>(outs, logits, deltas);

    AssignResult assign =
        assign_targets(anchors.flat, gt_boxes, cfg.assign_iou_pos, cfg.assign_iou_neg);
    DetectionLossResult<T> loss = detection_loss<T>(logits, deltas, assign, anchors.flat,
                                                    gt_boxes, cfg.loss, sample_rng);

    // unflatten the loss gradients into per-level head-output maps
    const int levels = cfg.backbone.num_levels;
    std::size_t offset = 0;
    const MsbOptions opts = cfg.effective_msb_options();
    std::vector<Tensor<T>> grad_head_in(levels);
    for (int l = 0; l < levels; ++l) {
        const HeadLevelOut<T>& o = outs[l];
        Tensor<T> gcls(1, o.cls.c, o.cls.h, o.cls.w);
        Tensor<T> greg(1, o.reg.c, o.reg.h, o.reg.w);
        for (int y = 0; y < o.cls.h; ++y) {
            for (int x = 0; x < o.cls.w; ++x) {
                for (int a = 0; a < o.cls.c; ++a) {
                    const std::size_t idx =
                        offset + (static_cast<std::size_t>(y) * o.cls.w + x) * o.cls.c + a;
                    gcls.at(0, a, y, x) = loss.grad_logits[idx];
                    for (int k = 0; k < 4; ++k) {
                        greg.at(0, 4 * a + k, y, x) = loss.grad_deltas[4 * idx + k];
                    }
                }
            }
        }
        offset += static_cast<std::size_t>(o.cls.c) * o.cls.h * o.cls.w;

        auto gc = conv2d_backward(tr.head_act[l], params.head.cls, ConvSpec{}, gcls);
        auto gr = conv2d_backward(tr.head_act[l], params.head.reg, ConvSpec{}, greg);
        add_into(grads.head.cls, gc.filter);
        add_into(grads.head.reg, gr.filter);
        Tensor<T> gact = std::move(gc.input);
        add_into(gact, gr.input);
        Tensor<T> gpre = relu_backward(tr.head_pre[l], gact);
        auto gconv = conv2d_backward(tr.head_in[l], params.head.conv, ConvSpec{1, 1, 1}, gpre);
        add_into(grads.head.conv, gconv.filter);
        grad_head_in[l] = std::move(gconv.input);
    }

    // through the boosters (when present) down to the pyramid maps
    std::vector<Tensor<T>> grad_levels(levels);
    for (int l = 0; l < levels; ++l) {
        if (cfg.has_msb()) {
            MsbGrads<T> mg = msb_backward(tr.msb[l], params.msb[l], cfg.hdc, opts,
                                          grad_head_in[l]);
            add_into(grads.msb[l].shared, mg.shared);
            add_into(grads.msb[l].mapping, mg.mapping);
            add_into(grads.msb[l].channel_attn, mg.channel_attn);
            add_into(grads.msb[l].spatial_attn, mg.spatial_attn);
            grad_levels[l] = std::move(mg.input);
        } else {
            grad_levels[l] = std::move(grad_head_in[l]);
        }
    }

    std::vector<Tensor<T>> grad_downs;
    if (cfg.msb_input == MsbInput::Fused) {
        grad_downs = top_down_fuse_backward(grad_levels);
    } else {
        grad_downs = std::move(grad_levels);
    }
    BackboneGrads<T> bg = bottom_up_backward(tr.backbone, params.backbone, cfg.backbone,
                                             grad_downs);
    for (std::size_t j = 0; j < bg.convs.size(); ++j) add_into(grads.backbone.convs[j], bg.convs[j]);
    for (std::size_t j = 0; j < bg.laterals.size(); ++j) {
        add_into(grads.backbone.laterals[j], bg.laterals[j]);
    }

    DetectorLoss<T> out;
    out.total = loss.total;
    out.classification = loss.classification;
    out.regression = loss.regression;
    out.positives = loss.positives;
    out.sampled = loss.sampled;
    return out;
}

struct InferOptions {
    double score_threshold = 0.05;
    double nms_iou = 0.7;
    int max_detections = 100;
};

template <typename T>
std::vector<Detection> detector_infer(const Tensor<T>& image, const std::string& image_id,
                                      const DetectorParams<T>& params, const DetectorConfig& cfg,
                                      const InferOptions& opts = {}) {
    std::vector<HeadLevelOut<T>> outs = detector_forward(image, params, cfg);
    AnchorSet anchors = anchor_set_for(cfg, image.h, image.w);
    std::vector<T> logits, deltas;
    flatten_head_outputs<T>(outs, logits, deltas);

    std::vector<Detection> candidates;
    for (std::size_t a = 0; a < anchors.flat.size(); ++a) {
        const double score = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[a])));
        if (score < opts.score_threshold) continue;
        const std::array<double, 4> d{
            static_cast<double>(deltas[4 * a]), static_cast<double>(deltas[4 * a + 1]),
            static_cast<double>(deltas[4 * a + 2]), static_cast<double>(deltas[4 * a + 3])};
        BoundingBox box = clamp_box(decode_box(anchors.flat[a], d), image.w, image.h);
        if (!box.valid()) continue;
        candidates.push_back({image_id, box, score});
    }
    return nms(candidates, opts.nms_iou, opts.score_threshold,
               static_cast<std::size_t>(opts.max_detections));
}

// Plain SGD with momentum; velocity buffers follow the parameter registry.
template <typename T = float>
class SgdOptimizer {
public:
    SgdOptimizer(double learning_rate, double momentum)
        : lr_(learning_rate), momentum_(momentum) {}

    void step(DetectorParams<T>& params, DetectorParams<T>& grads) {
        std::vector<ParamRef<T>> prefs = param_registry(params);
        std::vector<ParamRef<T>> grefs = param_registry(grads);
        if (velocity_.empty()) {
            velocity_.resize(prefs.size());
            for (std::size_t i = 0; i < prefs.size(); ++i) {
                velocity_[i].assign(prefs[i].values->size(), T(0));
            }
        }
        if (velocity_.size() != prefs.size()) {
            throw ShapeError("optimizer: parameter registry changed size");
        }
        for (std::size_t i = 0; i < prefs.size(); ++i) {
            std::vector<T>& v = velocity_[i];
            std::vector<T>& w = *prefs[i].values;
            const std::vector<T>& g = *grefs[i].values;
            for (std::size_t k = 0; k < w.size(); ++k) {
                v[k] = static_cast<T>(momentum_) * v[k] + g[k];
                w[k] -= static_cast<T>(lr_) * v[k];
            }
        }
    }

private:
    double lr_, momentum_;
    std::vector<std::vector<T>> velocity_;
};

template <typename T>
void zero_params(DetectorParams<T>& p) {
    for (ParamRef<T>& r : param_registry(p)) {
        std::fill(r.values->begin(), r.values->end(), T(0));
    }
}

template <typename T>
void scale_params(DetectorParams<T>& p, T factor) {
    for (ParamRef<T>& r : param_registry(p)) {
        for (T& v : *r.values) v *= factor;
    }
}

}  // namespace msb
