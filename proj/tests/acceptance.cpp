// Acceptance suite: every release criterion checked end to end, one verdict
// line per criterion. Criteria 7 and 8 drive the installed CLI binary the way
// an operator would.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "msb/froc.hpp"
#include "msb/model.hpp"
#include "msb/synth.hpp"
#include "msb/verify.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

int run_command(const std::string& cmd) {
    const int status = std::system((cmd + " > /dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_file(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------- criterion 1
Outcome criterion_oracle_equivalence() {
    const auto start = Clock::now();
    msb::Rng rng(1001);
    double worst = 0.0;
    int shapes = 0;
    for (int trial = 0; trial < 120; ++trial) {
        const int n = rng.uniform_int(1, 2);
        const int ci = rng.uniform_int(1, 4);
        const int co = rng.uniform_int(1, 4);
        const int k = 2 * rng.uniform_int(0, 2) + 1;
        const int r = rng.uniform_int(1, 3);
        const int stride = rng.uniform_int(1, 2);
        const int eff = (k - 1) * r + 1;
        const int h = eff + rng.uniform_int(0, 8);
        const int w = eff + rng.uniform_int(0, 8);
        const int pad = rng.uniform_int(0, 3);
        auto in = oracle::random_tensor<double>(rng, n, ci, h, w);
        auto f = oracle::random_filter<double>(rng, co, ci, k, k);
        const msb::ConvSpec spec{r, stride, pad};
        worst = std::max(worst, oracle::max_abs_diff(msb::conv2d(in, f, spec),
                                                     oracle::conv2d_direct(in, f, spec)));
        ++shapes;
    }
    for (int trial = 0; trial < 40; ++trial) {
        auto in = oracle::random_tensor<double>(rng, rng.uniform_int(1, 2),
                                                rng.uniform_int(1, 5), rng.uniform_int(1, 9),
                                                rng.uniform_int(1, 9));
        worst = std::max(worst, oracle::max_abs_diff(msb::global_avg_pool(in),
                                                     oracle::global_avg_pool_direct(in)));
        worst = std::max(worst, oracle::max_abs_diff(msb::channel_max_pool(in),
                                                     oracle::channel_max_pool_direct(in)));

        // concat/slice round trip
        std::vector<msb::Tensor<double>> parts;
        for (int p = 0; p < 3; ++p) {
            parts.push_back(
                oracle::random_tensor<double>(rng, in.n, rng.uniform_int(1, 3), in.h, in.w));
        }
        auto cat = msb::concat_channels(std::span<const msb::Tensor<double>>(parts));
        int off = 0;
        for (const auto& p : parts) {
            worst = std::max(worst,
                             oracle::max_abs_diff(msb::slice_channels(cat, off, off + p.c), p));
            off += p.c;
        }

        // upsampling against its definition
        auto up = msb::upsample_nearest2x(in);
        double updiff = 0.0;
        for (int b = 0; b < up.n; ++b) {
            for (int c = 0; c < up.c; ++c) {
                for (int y = 0; y < up.h; ++y) {
                    for (int x = 0; x < up.w; ++x) {
                        updiff = std::max(updiff, std::abs(up.at(b, c, y, x) -
                                                           in.at(b, c, y / 2, x / 2)));
                    }
                }
            }
        }
        worst = std::max(worst, updiff);
        shapes += 3;
    }
    const double elapsed = seconds_since(start);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%d shapes, max |diff| %.2e (tol 1e-12), %.1fs (limit 60s)",
                  shapes, worst, elapsed);
    return {worst < 1e-12 && elapsed < 60.0 && shapes >= 100, buf};
}

// ---------------------------------------------------------------- criterion 2
Outcome criterion_gradient_suite() {
    const auto start = Clock::now();
    const msb::GradSuiteReport report =
        msb::run_gradient_suite<double>(1e-4, 1e-5, 1e-4, 0);
    const double elapsed = seconds_since(start);
    double worst_op = 0.0, worst_pipeline = 0.0;
    bool pass = true;
    for (const auto& e : report.entries) {
        pass = pass && e.pass;
        if (e.tolerance == 1e-5) {
            worst_op = std::max(worst_op, e.max_rel_error);
        } else {
            worst_pipeline = std::max(worst_pipeline, e.max_rel_error);
        }
    }
    char buf[200];
    std::snprintf(buf, sizeof(buf),
                  "per-op worst %.2e (tol 1e-5), composed worst %.2e (tol 1e-4), %.1fs "
                  "(limit 300s)",
                  worst_op, worst_pipeline, elapsed);
    return {pass && elapsed < 300.0, buf};
}

// ---------------------------------------------------------------- criterion 3
Outcome criterion_weight_sharing() {
    msb::Rng rng(1003);
    msb::HdcConfig cfg;
    cfg.branch_channels = 4;
    auto params = msb::MsbParams<double>::init(rng, 3, cfg);
    const std::size_t count = params.hdc_param_count();
    const std::size_t expected = params.shared.param_count() + params.mapping.param_count();

    msb::HdcConfig wider = cfg;
    wider.dilation_rates = {1, 2, 5};
    auto params2 = msb::MsbParams<double>::init(rng, 3, wider);
    const bool count_ok = count == expected && params2.hdc_param_count() == expected;

    auto in = oracle::random_tensor<double>(rng, 1, 3, 9, 9);
    auto h = msb::hdc_forward(in, params, cfg);
    auto up = oracle::random_tensor<double>(rng, h.n, h.c, h.h, h.w);
    auto tied = msb::hdc_backward(in, params, cfg, up);
    msb::Filter<double> sum(params.shared.out_channels, params.shared.in_channels, 3, 3);
    for (int b = 0; b < 3; ++b) {
        msb::Filter<double> copy = params.shared;
        auto slice = msb::slice_channels(up, b * cfg.branch_channels,
                                         (b + 1) * cfg.branch_channels);
        auto g = msb::conv2d_backward(in, copy, msb::hdc_branch_spec(cfg, params, b), slice);
        msb::add_into(sum, g.filter);
    }
    double diff = 0.0;
    for (std::size_t i = 0; i < sum.weights.size(); ++i) {
        diff = std::max(diff, std::abs(sum.weights[i] - tied.shared.weights[i]));
    }
    for (std::size_t i = 0; i < sum.bias.size(); ++i) {
        diff = std::max(diff, std::abs(sum.bias[i] - tied.shared.bias[i]));
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "param count %zu == |shared|+|mapping| %zu, tied-vs-untied grad diff %.2e "
                  "(tol 1e-10)",
                  count, expected, diff);
    return {count_ok && diff < 1e-10, buf};
}

// ---------------------------------------------------------------- criterion 4
Outcome criterion_structural() {
    msb::Rng rng(1004);
    bool ok = true;
    std::ostringstream detail;
    for (std::vector<int> rates : {std::vector<int>{1, 2, 3}, std::vector<int>{1, 2, 5}}) {
        msb::HdcConfig cfg;
        cfg.dilation_rates = rates;
        cfg.branch_channels = 5;
        auto params = msb::MsbParams<double>::init(rng, 4, cfg);
        auto in = oracle::random_tensor<double>(rng, 1, 4, 11, 13, -5.0, 5.0);
        msb::MsbTrace<double> trace;
        auto out = msb::msb_forward(in, params, cfg, msb::MsbOptions{}, &trace);
        ok = ok && trace.hdc.c == 4 * cfg.branch_channels;
        ok = ok && out.h == in.h && out.w == in.w && out.c == 4 * cfg.branch_channels;
        for (double v : trace.ca_gate.v) ok = ok && v > 0.0 && v < 1.0;
        for (double v : trace.sa_gate.v) ok = ok && v > 0.0 && v < 1.0;
        detail << "rates(" << rates[0] << "," << rates[1] << "," << rates[2] << "): channels "
               << trace.hdc.c << "==" << 4 * cfg.branch_channels << ", spatial " << out.h << "x"
               << out.w << "==" << in.h << "x" << in.w << "; ";
    }
    detail << "gates strictly inside (0,1)";
    return {ok, detail.str()};
}

// ---------------------------------------------------------------- criterion 5
Outcome criterion_froc_fixtures() {
    // hand-enumerated two-image scene
    std::vector<msb::EvalImage> images(2);
    images[0].image_id = "img1";
    images[0].annotations = {{"img1", {0, 0, 10, 10}, 20.0}};
    images[0].detections = {{"img1", {0, 0, 10, 10}, 0.9}, {"img1", {50, 50, 60, 60}, 0.8}};
    images[1].image_id = "img2";
    images[1].annotations = {{"img2", {0, 0, 10, 10}, 20.0}};
    images[1].detections = {{"img2", {50, 50, 60, 60}, 0.7}, {"img2", {0, 0, 10, 10}, 0.6}};
    const msb::FrocCurve curve = msb::froc(images);
    const std::vector<double> rates{0.5, 1, 2, 4, 8};
    const auto sens = msb::sensitivity_at(curve, rates);
    bool ok = sens[0] == 0.5;
    for (int i = 1; i < 5; ++i) ok = ok && sens[i] == 1.0;

    // four-lesion size-bucket scene with the largest lesion missed
    std::vector<msb::EvalImage> scene(1);
    scene[0].image_id = "i";
    scene[0].annotations = {{"i", {0, 0, 5, 5}, 5.0},
                            {"i", {20, 20, 40, 40}, 20.0},
                            {"i", {60, 60, 110, 110}, 50.0},
                            {"i", {150, 150, 300, 300}, 150.0}};
    scene[0].detections = {{"i", {0, 0, 5, 5}, 0.9},
                           {"i", {20, 20, 40, 40}, 0.8},
                           {"i", {60, 60, 110, 110}, 0.7}};
    const auto buckets = msb::size_bucketed_sensitivity(scene, msb::SizeBuckets{}, 4.0);
    ok = ok && buckets.sensitivity[0] && *buckets.sensitivity[0] == 1.0;
    ok = ok && buckets.sensitivity[1] && *buckets.sensitivity[1] == 1.0;
    ok = ok && buckets.sensitivity[2] && *buckets.sensitivity[2] == 1.0;
    ok = ok && !buckets.sensitivity[3].has_value();
    ok = ok && buckets.sensitivity[4] && *buckets.sensitivity[4] == 0.0;
    char buf[200];
    std::snprintf(buf, sizeof(buf),
                  "two-image curve: %.2f @0.5 and %.2f/%.2f/%.2f/%.2f; buckets "
                  "1.0/1.0/1.0/absent/0.0 reproduced exactly",
                  sens[0], sens[1], sens[2], sens[3], sens[4]);
    return {ok, buf};
}

// ---------------------------------------------------------------- criterion 6
msb::AssignResult assignment_oracle(std::span<const msb::BoundingBox> anchors,
                                    std::span<const msb::BoundingBox> gts) {
    msb::AssignResult res;
    res.labels.assign(anchors.size(), msb::AnchorLabel::Negative);
    res.matched_gt.assign(anchors.size(), -1);
    if (gts.empty()) return res;
    std::vector<std::vector<double>> m(anchors.size(), std::vector<double>(gts.size()));
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        for (std::size_t g = 0; g < gts.size(); ++g) m[a][g] = msb::iou(anchors[a], gts[g]);
    }
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        double best = 0.0;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (m[a][g] > best) {
                best = m[a][g];
                res.matched_gt[a] = static_cast<int>(g);
            }
        }
        if (best >= 0.7) {
            res.labels[a] = msb::AnchorLabel::Positive;
        } else if (best >= 0.3) {
            res.labels[a] = msb::AnchorLabel::Ignore;
        }
    }
    for (std::size_t g = 0; g < gts.size(); ++g) {
        double best = 0.0;
        for (std::size_t a = 0; a < anchors.size(); ++a) best = std::max(best, m[a][g]);
        if (best <= 0.0) continue;
        for (std::size_t a = 0; a < anchors.size(); ++a) {
            if (m[a][g] == best) res.labels[a] = msb::AnchorLabel::Positive;
        }
    }
    return res;
}

Outcome criterion_nms_assignment_oracles() {
    msb::Rng rng(1006);
    auto random_box = [&](double span) {
        const double x = rng.uniform(0.0, span);
        const double y = rng.uniform(0.0, span);
        return msb::BoundingBox{x, y, x + rng.uniform(2.0, 18.0), y + rng.uniform(2.0, 18.0)};
    };
    int nms_scenes = 0, assign_scenes = 0;
    for (int scene = 0; scene < 1000; ++scene) {
        std::vector<msb::Detection> dets;
        const int n = rng.uniform_int(1, 12);
        for (int i = 0; i < n; ++i) dets.push_back({"i", random_box(30.0), rng.uniform(0.0, 1.0)});
        const double thresh = rng.uniform(0.1, 0.7);
        auto got = msb::nms(dets, thresh);

        // exhaustive greedy reference
        std::vector<int> idx(dets.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](int a, int b) { return dets[a].score > dets[b].score; });
        std::vector<msb::Detection> want;
        for (int i : idx) {
            bool keep = true;
            for (const auto& k : want) {
                if (msb::iou(k.box, dets[i].box) > thresh) keep = false;
            }
            if (keep) want.push_back(dets[i]);
        }
        if (got.size() != want.size()) return {false, "nms size mismatch"};
        for (std::size_t i = 0; i < got.size(); ++i) {
            if (got[i].score != want[i].score || got[i].box.x_min != want[i].box.x_min) {
                return {false, "nms content mismatch"};
            }
        }
        ++nms_scenes;
    }
    for (int scene = 0; scene < 1000; ++scene) {
        std::vector<msb::BoundingBox> anchors, gts;
        const int na = rng.uniform_int(1, 14);
        const int ng = rng.uniform_int(0, 4);
        for (int i = 0; i < na; ++i) anchors.push_back(random_box(36.0));
        for (int i = 0; i < ng; ++i) gts.push_back(random_box(36.0));
        auto got = msb::assign_targets(anchors, gts);
        auto want = assignment_oracle(anchors, gts);
        for (std::size_t a = 0; a < anchors.size(); ++a) {
            if (got.labels[a] != want.labels[a] || got.matched_gt[a] != want.matched_gt[a]) {
                return {false, "assignment mismatch"};
            }
        }
        ++assign_scenes;
    }
    char buf[120];
    std::snprintf(buf, sizeof(buf), "exact agreement on %d NMS and %d assignment micro-scenes",
                  nms_scenes, assign_scenes);
    return {true, buf};
}

// ---------------------------------------------------------------- criterion 7
nlohmann::json ablation_config() {
    nlohmann::json j;
    j["model"] = "fpn+msb";
    j["backbone"] = {{"input_channels", 3}, {"stage_channels", {8, 12, 16, 16, 16}},
                     {"num_levels", 5},     {"pyramid_channels", 16},
                     {"smooth_after_fuse", false}};
    j["hdc"] = {{"dilation_rates", {1, 2, 3}}, {"kernel_size", 3}, {"branch_channels", 16}};
    j["anchors"] = {{"scales", {8.0, 16.0, 32.0, 64.0, 128.0}}, {"ratios", {0.5, 1.0, 2.0}}};
    j["head"] = {{"channels", 24}};
    j["loss"] = {{"sample_count", 64}, {"positive_fraction", 0.5}};
    j["optimizer"] = {{"learning_rate", 0.01}, {"momentum", 0.9}, {"epochs", 10},
                      {"batch_size", 2}};
    j["phantom"] = {{"image_size", 128},        {"min_lesions", 1},
                    {"max_lesions", 3},         {"diameter_min_mm", 4.0},
                    {"diameter_max_mm", 135.0}, {"mm_per_pixel", 1.2},
                    {"noise_level", 0.01}};
    j["dataset"] = {{"train", 200}, {"val", 0}, {"test", 200}};
    j["infer"] = {{"score_threshold", 0.05}, {"nms_iou", 0.5}, {"max_detections", 50}};
    j["eval"] = {{"iou_threshold", 0.5}};
    return j;
}

struct AblationPoint {
    double overall = 0.0;   // sensitivity at 4 FPs/image
    double extremes = 0.0;  // combined <10 mm and >100 mm buckets
};

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

Outcome criterion_ablation(const std::string& cli) {
    const auto start = Clock::now();
    const fs::path dir = fs::temp_directory_path() / "msbdet_acceptance_ablation";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const fs::path cfg_path = dir / "config.json";
    {
        std::ofstream os(cfg_path);
        os << ablation_config().dump(2);
    }

    // one fixed dataset; training seeds vary per run
    const std::string synth_cmd = cli + " synth --config " + cfg_path.string() + " --seed 100 " +
                                  "--out " + (dir / "data_run").string();
    if (run_command(synth_cmd) != 0) return {false, "synth failed"};
    const fs::path manifest = dir / "data_run" / "dataset" / "manifest.json";
    const fs::path gt = dir / "data_run" / "dataset" / "test_annotations.jsonl";

    // the split must populate every diameter bucket
    {
        const auto annos = msb::read_annotations_jsonl(gt.string());
        msb::SizeBuckets buckets;
        std::vector<int> counts(buckets.count(), 0);
        for (const auto& a : annos) counts[buckets.bucket_of(a.diameter_mm)]++;
        for (int b = 0; b < buckets.count(); ++b) {
            if (counts[b] == 0) return {false, "bucket " + buckets.label(b) + " is empty"};
        }
        if (annos.empty()) return {false, "no test annotations"};
    }

    const std::vector<int> seeds{100, 101, 102, 103, 104};
    std::vector<double> msb_overall, msb_extremes, fpn_overall, fpn_extremes;
    for (const std::string& model : {std::string("fpn+msb"), std::string("fpn")}) {
        for (int seed : seeds) {
            const fs::path run = dir / (model + "_" + std::to_string(seed));
            const std::string base = cli + " --config " + cfg_path.string() + " --model " +
                                     model + " --seed " + std::to_string(seed) + " --out " +
                                     run.string();
            if (run_command(base + " train --data " + manifest.string()) != 0) {
                return {false, "train failed for " + model};
            }
            if (run_command(base + " infer --checkpoint " +
                            (run / "checkpoint.msbck").string() + " --data " +
                            manifest.string() + " --split test") != 0) {
                return {false, "infer failed for " + model};
            }
            if (run_command(base + " eval --detections " +
                            (run / "detections_test.csv").string() + " --ground-truth " +
                            gt.string() + " --manifest " + manifest.string() +
                            " --split test") != 0) {
                return {false, "eval failed for " + model};
            }
            nlohmann::json report;
            std::ifstream is(run / "report.json");
            is >> report;
            AblationPoint p;
            for (const auto& s : report["sensitivity_at"]) {
                if (s["fp_per_image"].get<double>() == 4.0) {
                    p.overall = s["sensitivity"].get<double>();
                }
            }
            const auto& buckets = report["buckets"];
            const int m = buckets[0]["matched"].get<int>() + buckets[4]["matched"].get<int>();
            const int t = buckets[0]["total"].get<int>() + buckets[4]["total"].get<int>();
            p.extremes = t > 0 ? static_cast<double>(m) / t : 0.0;
            if (model == "fpn+msb") {
                msb_overall.push_back(p.overall);
                msb_extremes.push_back(p.extremes);
            } else {
                fpn_overall.push_back(p.overall);
                fpn_extremes.push_back(p.extremes);
            }
        }
    }

    const double mo = median(msb_overall), fo = median(fpn_overall);
    const double me = median(msb_extremes), fe = median(fpn_extremes);
    const double elapsed = seconds_since(start);
    char buf[240];
    std::snprintf(buf, sizeof(buf),
                  "median sens@4FP over 5 seeds: msb %.3f vs fpn %.3f (need >=); extremes "
                  "(<10mm,>100mm): msb %.3f vs fpn %.3f (need >); %.0fs (limit 1800s)",
                  mo, fo, me, fe, elapsed);
    return {mo >= fo && me > fe && elapsed < 1800.0, buf};
}

// ---------------------------------------------------------------- criterion 8
Outcome criterion_determinism(const std::string& cli) {
    const fs::path dir = fs::temp_directory_path() / "msbdet_acceptance_determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    nlohmann::json j;
    j["seed"] = 17;
    j["backbone"] = {{"input_channels", 3}, {"stage_channels", {4, 6}}, {"num_levels", 2},
                     {"pyramid_channels", 6}};
    j["hdc"] = {{"branch_channels", 6}};
    j["anchors"] = {{"scales", {8.0, 16.0}}, {"ratios", {0.5, 1.0, 2.0}}};
    j["head"] = {{"channels", 8}};
    j["loss"] = {{"sample_count", 64}};
    j["optimizer"] = {{"learning_rate", 0.01}, {"momentum", 0.9}, {"epochs", 2},
                      {"batch_size", 2}};
    j["phantom"] = {{"image_size", 32},        {"min_lesions", 1},
                    {"max_lesions", 2},        {"diameter_min_mm", 16.0},
                    {"diameter_max_mm", 90.0}, {"mm_per_pixel", 4.0},
                    {"noise_level", 0.01}};
    j["dataset"] = {{"train", 4}, {"val", 0}, {"test", 3}};
    const fs::path cfg_path = dir / "config.json";
    {
        std::ofstream os(cfg_path);
        os << j.dump(2);
    }

    auto pipeline = [&](const fs::path& run) -> bool {
        const std::string base = cli + " --config " + cfg_path.string() + " --out " +
                                 run.string();
        if (run_command(base + " synth") != 0) return false;
        const std::string manifest = (run / "dataset" / "manifest.json").string();
        if (run_command(base + " train --data " + manifest) != 0) return false;
        if (run_command(base + " infer --checkpoint " + (run / "checkpoint.msbck").string() +
                        " --data " + manifest + " --split test") != 0) {
            return false;
        }
        return run_command(base + " eval --detections " +
                           (run / "detections_test.csv").string() + " --ground-truth " +
                           (run / "dataset" / "test_annotations.jsonl").string() +
                           " --manifest " + manifest + " --split test") == 0;
    };
    if (!pipeline(dir / "run_a")) return {false, "pipeline A failed"};
    if (!pipeline(dir / "run_b")) return {false, "pipeline B failed"};

    const std::vector<std::string> artifacts{
        "dataset/manifest.json",   "dataset/test_annotations.jsonl",
        "dataset/train_annotations.jsonl", "dataset/images/test_00000_1.png",
        "checkpoint.msbck",        "loss_log.csv",
        "detections_test.csv",     "report.json",
        "report.txt"};
    for (const std::string& rel : artifacts) {
        const std::string a = read_file(dir / "run_a" / rel);
        const std::string b = read_file(dir / "run_b" / rel);
        if (a.empty() || a != b) return {false, rel + " differs between reruns"};
    }
    return {true, std::to_string(artifacts.size()) +
                      " artifacts byte-identical across synth/train/infer/eval reruns"};
}

}  // namespace

int main() {
    const std::string cli = MSBDET_CLI_PATH;
    struct Criterion {
        int id;
        const char* title;
        Outcome (*fn)();
        Outcome (*fn_cli)(const std::string&);
    };
    const std::vector<Criterion> criteria{
        {1, "oracle equivalence", criterion_oracle_equivalence, nullptr},
        {2, "gradient suite", criterion_gradient_suite, nullptr},
        {3, "weight-sharing invariant", criterion_weight_sharing, nullptr},
        {4, "structural equalities", criterion_structural, nullptr},
        {5, "FROC fixtures", criterion_froc_fixtures, nullptr},
        {6, "NMS/assignment oracles", criterion_nms_assignment_oracles, nullptr},
        {7, "desk-scale ablation", nullptr, criterion_ablation},
        {8, "pipeline determinism", nullptr, criterion_determinism},
    };
    bool all = true;
    for (const Criterion& c : criteria) {
        Outcome o;
        try {
            o = c.fn ? c.fn() : c.fn_cli(cli);
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("[%s] criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", c.id, c.title,
                    o.detail.c_str());
        std::fflush(stdout);
        all = all && o.pass;
    }
    std::printf("%s\n", all ? "ACCEPTANCE: all criteria passed"
                            : "ACCEPTANCE: criteria failed");
    return all ? 0 : 1;
}
