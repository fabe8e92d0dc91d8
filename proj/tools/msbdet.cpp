#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "msb/config.hpp"
#include "msb/verify.hpp"

namespace fs = std::filesystem;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    bool has_seed = false;
    std::string model;
    std::string out_dir;
    double iou_thresh = 0.5;
    bool has_iou = false;
    std::string fp_rates_csv;
};

std::vector<double> parse_rate_list(const std::string& csv) {
    std::vector<double> rates;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            rates.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw msb::ConfigError("--fp-rates: '" + item + "' is not a number");
        }
    }
    if (rates.empty()) throw msb::ConfigError("--fp-rates: empty list");
    return rates;
}

msb::RunConfig effective_config(const GlobalArgs& g) {
    msb::RunConfig cfg;
    if (!g.config_path.empty()) cfg = msb::load_run_config(g.config_path);
    if (g.has_seed) cfg.seed = g.seed;
    if (!g.model.empty()) cfg.model = g.model;
    if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
    if (g.has_iou) cfg.eval.iou_threshold = g.iou_thresh;
    if (!g.fp_rates_csv.empty()) cfg.eval.fp_rates = parse_rate_list(g.fp_rates_csv);
    cfg.validate();
    return cfg;
}

// Every output-producing run records the exact config, tool version and seed.
void write_run_stamp(const msb::RunConfig& cfg, const std::string& command) {
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw msb::IoError("cannot create " + cfg.out_dir + ": " + ec.message());
    msb::save_run_config((fs::path(cfg.out_dir) / "config.json").string(), cfg);
    nlohmann::json info;
    info["tool_version"] = msb::kToolVersion;
    info["seed"] = cfg.seed;
    info["command"] = command;
    info["model"] = cfg.model;
    const std::string path =
        (fs::path(cfg.out_dir) / ("run_info_" + command + ".json")).string();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw msb::IoError("cannot open " + path + " for writing");
    os << info.dump(2) << '\n';
}

int cmd_gradcheck(const msb::RunConfig& cfg, const std::string& inject_fault) {
    const msb::GradCheckConfig& gc = cfg.gradcheck;
    msb::GradSuiteReport report;
    if (gc.precision == "f32") {
        std::cout << "warning: 32-bit verification precision requested; applying relaxed "
                     "tolerance "
                  << gc.f32_tolerance << " at epsilon " << gc.f32_epsilon << "\n";
        report = msb::run_gradient_suite<float>(gc.f32_epsilon, gc.f32_tolerance,
                                                gc.f32_tolerance, cfg.seed, inject_fault,
                                                gc.f32_denominator_floor);
    } else {
        report = msb::run_gradient_suite<double>(gc.epsilon, gc.tol_per_op, gc.tol_pipeline,
                                                 cfg.seed, inject_fault);
    }
    for (const msb::GradSuiteEntry& e : report.entries) {
        std::printf("%-24s max rel err %10.3e   tol %7.0e   %s\n", e.name.c_str(),
                    e.max_rel_error, e.tolerance, e.pass ? "PASS" : "FAIL");
    }
    if (!report.all_pass) {
        for (const msb::GradSuiteEntry& e : report.entries) {
            if (!e.pass) {
                std::printf("gradient check failed for %s (max rel err %.3e > %.0e)\n",
                            e.name.c_str(), e.max_rel_error, e.tolerance);
            }
        }
        return 1;
    }
    std::puts("all gradient checks passed");
    return 0;
}

int cmd_synth(const msb::RunConfig& cfg, std::string data_dir) {
    if (data_dir.empty()) data_dir = (fs::path(cfg.out_dir) / "dataset").string();
    const msb::PhantomSpec spec = cfg.effective_phantom();
    write_run_stamp(cfg, "synth");
    const msb::DatasetManifest manifest = msb::write_dataset(spec, cfg.dataset, data_dir);
    std::cout << "dataset written to " << data_dir << "\n";
    for (const auto& [name, split] : manifest.splits) {
        std::size_t lesions = 0;
        for (const auto& img : split.images) lesions += img.num_annotations;
        std::cout << "  " << name << ": " << split.images.size() << " images, " << lesions
                  << " lesions\n";
    }
    return 0;
}

struct LoadedSplit {
    std::vector<std::string> ids;
    std::vector<msb::Tensor<float>> stacks;
    std::vector<std::vector<msb::BoundingBox>> boxes;
    std::vector<std::vector<msb::Annotation>> annotations;
};

LoadedSplit load_split(const std::string& manifest_path, const std::string& split) {
    const msb::DatasetManifest manifest = msb::read_manifest(manifest_path);
    msb::DatasetReader reader(manifest, split);
    LoadedSplit out;
    for (std::size_t i = 0; i < reader.size(); ++i) {
        out.ids.push_back(reader.info(i).image_id);
        out.stacks.push_back(reader.load_stack(i));
        std::vector<msb::BoundingBox> bx;
        for (const msb::Annotation& a : reader.annotations(i)) bx.push_back(a.box);
        out.boxes.push_back(std::move(bx));
        out.annotations.push_back(reader.annotations(i));
    }
    return out;
}

int cmd_train(const msb::RunConfig& cfg, const std::string& manifest_path,
              const std::string& split) {
    const msb::DetectorConfig dcfg = cfg.detector_config();
    LoadedSplit data = load_split(manifest_path, split);
    if (data.ids.empty()) throw msb::ConfigError("train: split '" + split + "' is empty");
    write_run_stamp(cfg, "train");

    msb::Rng init_rng(cfg.seed);
    auto params = msb::DetectorParams<float>::init(init_rng, dcfg);
    msb::SgdOptimizer<float> opt(cfg.optimizer.learning_rate, cfg.optimizer.momentum);
    const msb::Rng sample_base = msb::Rng(cfg.seed).fork(0x747261696eULL);

    std::ostringstream log;
    log << "epoch,iteration,loss,cls,reg\n";
    char line[160];
    const int n = static_cast<int>(data.ids.size());
    const int bs = cfg.optimizer.batch_size;
    long iteration = 0;
    double epoch_loss = 0.0;
    for (int epoch = 0; epoch < cfg.optimizer.epochs; ++epoch) {
        epoch_loss = 0.0;
        int batches = 0;
        for (int start = 0; start < n; start += bs) {
            const int count = std::min(bs, n - start);
            auto grads = msb::DetectorParams<float>::zeros(dcfg);
            double loss = 0.0, cls = 0.0, reg = 0.0;
            for (int k = 0; k < count; ++k) {
                const int i = start + k;
                // anchor sampling is a pure function of (seed, image index)
                msb::Rng sample_rng = sample_base.fork(static_cast<std::uint64_t>(i));
                auto l = msb::detector_loss_and_grads<float>(data.stacks[i], data.boxes[i],
                                                             params, dcfg, sample_rng, grads);
                loss += l.total;
                cls += l.classification;
                reg += l.regression;
            }
            msb::scale_params(grads, 1.0f / static_cast<float>(count));
            opt.step(params, grads);
            loss /= count;
            cls /= count;
            reg /= count;
            std::snprintf(line, sizeof(line), "%d,%ld,%.9g,%.9g,%.9g\n", epoch, iteration,
                          loss, cls, reg);
            log << line;
            epoch_loss += loss;
            ++iteration;
            ++batches;
        }
        std::printf("epoch %d/%d  mean loss %.6f\n", epoch + 1, cfg.optimizer.epochs,
                    epoch_loss / std::max(batches, 1));
    }

    const std::string ckpt = (fs::path(cfg.out_dir) / "checkpoint.msbck").string();
    msb::save_detector(ckpt, params);
    const std::string log_path = (fs::path(cfg.out_dir) / "loss_log.csv").string();
    std::ofstream os(log_path, std::ios::binary);
    if (!os) throw msb::IoError("cannot open " + log_path + " for writing");
    os << log.str();
    std::cout << "checkpoint written to " << ckpt << "\n";
    return 0;
}

int cmd_infer(const msb::RunConfig& cfg, const std::string& checkpoint,
              const std::string& manifest_path, const std::string& split,
              std::string csv_path) {
    const msb::DetectorConfig dcfg = cfg.detector_config();
    LoadedSplit data = load_split(manifest_path, split);
    write_run_stamp(cfg, "infer");

    auto params = msb::DetectorParams<float>::zeros(dcfg);
    msb::load_detector(checkpoint, params);

    std::vector<msb::Detection> all;
    for (std::size_t i = 0; i < data.ids.size(); ++i) {
        auto dets = msb::detector_infer(data.stacks[i], data.ids[i], params, dcfg, cfg.infer);
        all.insert(all.end(), dets.begin(), dets.end());
    }
    if (csv_path.empty()) {
        csv_path = (fs::path(cfg.out_dir) / ("detections_" + split + ".csv")).string();
    }
    msb::write_detections_csv(csv_path, all);
    std::cout << all.size() << " detections over " << data.ids.size() << " images -> "
              << csv_path << "\n";
    return 0;
}

int cmd_eval(const msb::RunConfig& cfg, const std::string& detections_path,
             const std::string& gt_path, const std::string& manifest_path,
             const std::string& split) {
    const std::vector<msb::Detection> dets = msb::read_detections_csv(detections_path);
    const std::vector<msb::Annotation> annos = msb::read_annotations_jsonl(gt_path);
    std::vector<std::string> ids;
    if (!manifest_path.empty()) {
        const msb::DatasetManifest manifest = msb::read_manifest(manifest_path);
        const auto it = manifest.splits.find(split);
        if (it == manifest.splits.end()) {
            throw msb::ConfigError("manifest has no split named '" + split + "'");
        }
        for (const auto& img : it->second.images) ids.push_back(img.image_id);
    }
    const auto images = msb::group_by_image(dets, annos, std::move(ids));
    const msb::EvalReport report =
        msb::evaluate(images, cfg.eval.iou_threshold, cfg.eval.fp_rates, cfg.eval.buckets,
                      cfg.eval.bucket_fp_rate, cfg.eval.interpolate);

    const std::string text = msb::render_report_text(report);
    std::cout << text;
    write_run_stamp(cfg, "eval");
    {
        const std::string path = (fs::path(cfg.out_dir) / "report.txt").string();
        std::ofstream os(path, std::ios::binary);
        if (!os) throw msb::IoError("cannot open " + path + " for writing");
        os << text;
    }
    {
        const std::string path = (fs::path(cfg.out_dir) / "report.json").string();
        std::ofstream os(path, std::ios::binary);
        if (!os) throw msb::IoError("cannot open " + path + " for writing");
        os << msb::report_to_json(report).dump(2) << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-scale boosted pyramid lesion detection toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalArgs g;
    app.add_option("--config", g.config_path, "JSON run configuration");
    auto* seed_opt = app.add_option("--seed", g.seed, "override the run seed");
    app.add_option("--model", g.model,
                   "model variant: fpn, fpn+hdc, fpn+hdc+ch, fpn+hdc+sp, fpn+msb");
    app.add_option("--out", g.out_dir, "run output directory");
    auto* iou_opt = app.add_option("--iou-thresh", g.iou_thresh, "evaluation IoU threshold");
    app.add_option("--fp-rates", g.fp_rates_csv, "comma-separated FPs/image rates");

    CLI::App* sub_gradcheck =
        app.add_subcommand("gradcheck", "finite-difference check of every backward pass");
    std::string inject_fault;
    sub_gradcheck->add_option("--inject-fault", inject_fault,
                              "corrupt one op's analytic gradient (test hook)");

    CLI::App* sub_synth = app.add_subcommand("synth", "generate the phantom dataset");
    std::string synth_dir;
    sub_synth->add_option("--data", synth_dir, "dataset directory (default <out>/dataset)");

    CLI::App* sub_train = app.add_subcommand("train", "train a detector");
    std::string train_manifest, train_split = "train";
    sub_train->add_option("--data", train_manifest, "dataset manifest.json")->required();
    sub_train->add_option("--split", train_split, "split to train on");

    CLI::App* sub_infer = app.add_subcommand("infer", "run detection on a split");
    std::string infer_ckpt, infer_manifest, infer_split = "test", infer_csv;
    sub_infer->add_option("--checkpoint", infer_ckpt, "checkpoint file")->required();
    sub_infer->add_option("--data", infer_manifest, "dataset manifest.json")->required();
    sub_infer->add_option("--split", infer_split, "split to run on");
    sub_infer->add_option("--out-csv", infer_csv, "detections CSV path");

    CLI::App* sub_eval = app.add_subcommand("eval", "FROC evaluation of detections");
    std::string eval_dets, eval_gt, eval_manifest, eval_split = "test";
    sub_eval->add_option("--detections", eval_dets, "detections CSV")->required();
    sub_eval->add_option("--ground-truth", eval_gt, "ground truth JSONL")->required();
    sub_eval->add_option("--manifest", eval_manifest,
                         "dataset manifest (fixes the image list, including empty images)");
    sub_eval->add_option("--split", eval_split, "manifest split for the image list");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        GlobalArgs args = g;
        args.has_seed = seed_opt->count() > 0;
        args.has_iou = iou_opt->count() > 0;
        const msb::RunConfig cfg = effective_config(args);
        if (sub_gradcheck->parsed()) return cmd_gradcheck(cfg, inject_fault);
        if (sub_synth->parsed()) return cmd_synth(cfg, synth_dir);
        if (sub_train->parsed()) return cmd_train(cfg, train_manifest, train_split);
        if (sub_infer->parsed()) {
            return cmd_infer(cfg, infer_ckpt, infer_manifest, infer_split, infer_csv);
        }
        if (sub_eval->parsed()) {
            return cmd_eval(cfg, eval_dets, eval_gt, eval_manifest, eval_split);
        }
        std::cerr << "error: no subcommand\n";
        return 1;
    } catch (const msb::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
