#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "msb/froc.hpp"
#include "msb/model.hpp"
#include "msb/synth.hpp"

namespace msb {

inline constexpr const char* kToolVersion = "0.1.0";

struct OptimizerConfig {
    double learning_rate = 0.01;
    double momentum = 0.9;
    int epochs = 10;
    int batch_size = 2;

    void validate() const {
        if (learning_rate < 0.0) throw ConfigError("optimizer: learning_rate must be >= 0");
        if (momentum < 0.0 || momentum >= 1.0) {
            throw ConfigError("optimizer: momentum must be in [0, 1)");
        }
        if (epochs < 1) throw ConfigError("optimizer: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("optimizer: batch_size must be >= 1");
    }
};

struct EvalConfig {
    double iou_threshold = 0.5;
    std::vector<double> fp_rates = default_fp_rates();
    bool interpolate = false;
    double bucket_fp_rate = 4.0;
    SizeBuckets buckets;

    void validate() const {
        if (iou_threshold <= 0.0 || iou_threshold > 1.0) {
            throw ConfigError("eval: iou_threshold must be in (0, 1]");
        }
        if (fp_rates.empty()) throw ConfigError("eval: fp_rates must be non-empty");
        buckets.validate();
    }
};

struct GradCheckConfig {
    std::string precision = "f64";  // f64 or f32 (relaxed tolerances, warns)
    double epsilon = 1e-4;
    double tol_per_op = 1e-5;
    double tol_pipeline = 1e-4;
    double f32_epsilon = 2e-3;
    double f32_tolerance = 1e-1;
    double f32_denominator_floor = 5e-2;

    void validate() const {
        if (precision != "f64" && precision != "f32") {
            throw ConfigError("gradcheck: precision must be f64 or f32");
        }
        if (epsilon <= 0.0) throw ConfigError("gradcheck: epsilon must be > 0");
    }
};

// Complete description of one reproducible run. Serialized verbatim into
// every run directory.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string model = "fpn+msb";
    std::string out_dir = "runs/default";

    BackboneConfig backbone;
    HdcConfig hdc{{1, 2, 3}, 3, 0};  // 0 branch channels = follow pyramid width
    MsbOptions msb;
    MsbInput msb_input = MsbInput::Fused;
    AnchorLayout anchors{{8.0, 16.0, 32.0, 64.0}, {0.5, 1.0, 2.0}};
    int head_channels = 32;
    double assign_iou_pos = 0.7;
    double assign_iou_neg = 0.3;
    LossOptions loss;
    OptimizerConfig optimizer;
    PhantomSpec phantom;
    SplitCounts dataset{120, 20, 200};
    EvalConfig eval;
    InferOptions infer;
    GradCheckConfig gradcheck;

    DetectorConfig detector_config() const {
        DetectorConfig cfg;
        cfg.backbone = backbone;
        cfg.hdc = hdc;
        if (cfg.hdc.branch_channels <= 0) cfg.hdc.branch_channels = backbone.pyramid_channels;
        cfg.msb_options = msb;
        cfg.msb_input = msb_input;
        cfg.anchors = anchors;
        cfg.head_channels = head_channels;
        cfg.variant = parse_variant(model);
        cfg.assign_iou_pos = assign_iou_pos;
        cfg.assign_iou_neg = assign_iou_neg;
        cfg.loss = loss;
        return cfg;
    }

    // The run seed drives every stochastic component, the dataset included.
    PhantomSpec effective_phantom() const {
        PhantomSpec p = phantom;
        p.seed = seed;
        return p;
    }

    void validate() const {
        detector_config().validate();
        optimizer.validate();
        effective_phantom().validate();
        eval.validate();
        gradcheck.validate();
        if (infer.score_threshold < 0.0 || infer.score_threshold > 1.0) {
            throw ConfigError("infer: score_threshold must be in [0, 1]");
        }
        if (infer.max_detections < 1) throw ConfigError("infer: max_detections must be >= 1");
    }
};

inline nlohmann::json run_config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["model"] = c.model;
    j["out_dir"] = c.out_dir;
    j["backbone"] = {{"input_channels", c.backbone.input_channels},
                     {"stage_channels", c.backbone.stage_channels},
                     {"num_levels", c.backbone.num_levels},
                     {"pyramid_channels", c.backbone.pyramid_channels},
                     {"smooth_after_fuse", c.backbone.smooth_after_fuse}};
    j["hdc"] = {{"dilation_rates", c.hdc.dilation_rates},
                {"kernel_size", c.hdc.kernel_size},
                {"branch_channels", c.hdc.branch_channels}};
    j["msb"] = {{"sigmoid_gates", c.msb.sigmoid_gates},
                {"residual_add", c.msb.residual_add},
                {"input", c.msb_input == MsbInput::Fused ? "fused" : "down"}};
    j["anchors"] = {{"scales", c.anchors.scales},
                    {"ratios", c.anchors.ratios},
                    {"assignment", c.anchors.assignment ==
                                           AnchorLayout::Assignment::AllScalesPerLevel
                                       ? "all_scales_per_level"
                                       : "one_scale_per_level"}};
    j["head"] = {{"channels", c.head_channels}};
    j["assign"] = {{"iou_pos", c.assign_iou_pos}, {"iou_neg", c.assign_iou_neg}};
    j["loss"] = {{"sample_count", c.loss.sample_count},
                 {"positive_fraction", c.loss.positive_fraction}};
    j["optimizer"] = {{"learning_rate", c.optimizer.learning_rate},
                      {"momentum", c.optimizer.momentum},
                      {"epochs", c.optimizer.epochs},
                      {"batch_size", c.optimizer.batch_size}};
    j["phantom"] = phantom_spec_to_json(c.phantom);
    j["dataset"] = {{"train", c.dataset.train}, {"val", c.dataset.val}, {"test", c.dataset.test}};
    j["eval"] = {{"iou_threshold", c.eval.iou_threshold},
                 {"fp_rates", c.eval.fp_rates},
                 {"interpolate", c.eval.interpolate},
                 {"bucket_fp_rate", c.eval.bucket_fp_rate},
                 {"bucket_edges", c.eval.buckets.edges}};
    j["infer"] = {{"score_threshold", c.infer.score_threshold},
                  {"nms_iou", c.infer.nms_iou},
                  {"max_detections", c.infer.max_detections}};
    j["gradcheck"] = {{"precision", c.gradcheck.precision},
                      {"epsilon", c.gradcheck.epsilon},
                      {"tol_per_op", c.gradcheck.tol_per_op},
                      {"tol_pipeline", c.gradcheck.tol_pipeline},
                      {"f32_epsilon", c.gradcheck.f32_epsilon},
                      {"f32_tolerance", c.gradcheck.f32_tolerance},
                      {"f32_denominator_floor", c.gradcheck.f32_denominator_floor}};
    return j;
}

// Defaults overridden by whatever keys are present.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        c.model = j.value("model", c.model);
        c.out_dir = j.value("out_dir", c.out_dir);
        if (j.contains("backbone")) {
            const auto& b = j["backbone"];
            c.backbone.input_channels = b.value("input_channels", c.backbone.input_channels);
            if (b.contains("stage_channels")) {
                c.backbone.stage_channels = b["stage_channels"].get<std::vector<int>>();
            }
            c.backbone.num_levels = b.value("num_levels", c.backbone.num_levels);
            c.backbone.pyramid_channels =
                b.value("pyramid_channels", c.backbone.pyramid_channels);
            c.backbone.smooth_after_fuse =
                b.value("smooth_after_fuse", c.backbone.smooth_after_fuse);
        }
        if (j.contains("hdc")) {
            const auto& h = j["hdc"];
            if (h.contains("dilation_rates")) {
                c.hdc.dilation_rates = h["dilation_rates"].get<std::vector<int>>();
            }
            c.hdc.kernel_size = h.value("kernel_size", c.hdc.kernel_size);
            c.hdc.branch_channels = h.value("branch_channels", c.hdc.branch_channels);
        }
        if (j.contains("msb")) {
            const auto& m = j["msb"];
            c.msb.sigmoid_gates = m.value("sigmoid_gates", c.msb.sigmoid_gates);
            c.msb.residual_add = m.value("residual_add", c.msb.residual_add);
            const std::string input = m.value("input", "fused");
            if (input == "fused") {
                c.msb_input = MsbInput::Fused;
            } else if (input == "down") {
                c.msb_input = MsbInput::Down;
            } else {
                throw ConfigError("msb.input must be 'fused' or 'down', got '" + input + "'");
            }
        }
        if (j.contains("anchors")) {
            const auto& a = j["anchors"];
            if (a.contains("scales")) c.anchors.scales = a["scales"].get<std::vector<double>>();
            if (a.contains("ratios")) c.anchors.ratios = a["ratios"].get<std::vector<double>>();
            const std::string mode = a.value("assignment", "one_scale_per_level");
            if (mode == "one_scale_per_level") {
                c.anchors.assignment = AnchorLayout::Assignment::OneScalePerLevel;
            } else if (mode == "all_scales_per_level") {
                c.anchors.assignment = AnchorLayout::Assignment::AllScalesPerLevel;
            } else {
                throw ConfigError("anchors.assignment must be one_scale_per_level or "
                                  "all_scales_per_level");
            }
        }
        if (j.contains("head")) c.head_channels = j["head"].value("channels", c.head_channels);
        if (j.contains("assign")) {
            c.assign_iou_pos = j["assign"].value("iou_pos", c.assign_iou_pos);
            c.assign_iou_neg = j["assign"].value("iou_neg", c.assign_iou_neg);
        }
        if (j.contains("loss")) {
            c.loss.sample_count = j["loss"].value("sample_count", c.loss.sample_count);
            c.loss.positive_fraction =
                j["loss"].value("positive_fraction", c.loss.positive_fraction);
        }
        if (j.contains("optimizer")) {
            const auto& o = j["optimizer"];
            c.optimizer.learning_rate = o.value("learning_rate", c.optimizer.learning_rate);
            c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
            c.optimizer.epochs = o.value("epochs", c.optimizer.epochs);
            c.optimizer.batch_size = o.value("batch_size", c.optimizer.batch_size);
        }
        if (j.contains("phantom")) c.phantom = phantom_spec_from_json(j["phantom"]);
        if (j.contains("dataset")) {
            const auto& d = j["dataset"];
            c.dataset.train = d.value("train", c.dataset.train);
            c.dataset.val = d.value("val", c.dataset.val);
            c.dataset.test = d.value("test", c.dataset.test);
        }
        if (j.contains("eval")) {
            const auto& e = j["eval"];
            c.eval.iou_threshold = e.value("iou_threshold", c.eval.iou_threshold);
            if (e.contains("fp_rates")) {
                c.eval.fp_rates = e["fp_rates"].get<std::vector<double>>();
            }
            c.eval.interpolate = e.value("interpolate", c.eval.interpolate);
            c.eval.bucket_fp_rate = e.value("bucket_fp_rate", c.eval.bucket_fp_rate);
            if (e.contains("bucket_edges")) {
                c.eval.buckets.edges = e["bucket_edges"].get<std::vector<double>>();
            }
        }
        if (j.contains("infer")) {
            const auto& i = j["infer"];
            c.infer.score_threshold = i.value("score_threshold", c.infer.score_threshold);
            c.infer.nms_iou = i.value("nms_iou", c.infer.nms_iou);
            c.infer.max_detections = i.value("max_detections", c.infer.max_detections);
        }
        if (j.contains("gradcheck")) {
            const auto& g = j["gradcheck"];
            c.gradcheck.precision = g.value("precision", c.gradcheck.precision);
            c.gradcheck.epsilon = g.value("epsilon", c.gradcheck.epsilon);
            c.gradcheck.tol_per_op = g.value("tol_per_op", c.gradcheck.tol_per_op);
            c.gradcheck.tol_pipeline = g.value("tol_pipeline", c.gradcheck.tol_pipeline);
            c.gradcheck.f32_epsilon = g.value("f32_epsilon", c.gradcheck.f32_epsilon);
            c.gradcheck.f32_tolerance = g.value("f32_tolerance", c.gradcheck.f32_tolerance);
            c.gradcheck.f32_denominator_floor =
                g.value("f32_denominator_floor", c.gradcheck.f32_denominator_floor);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return run_config_from_json(j);
}

inline void save_run_config(const std::string& path, const RunConfig& c) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << run_config_to_json(c).dump(2) << '\n';
    if (!os) throw IoError("failed writing " + path);
}

}  // namespace msb
