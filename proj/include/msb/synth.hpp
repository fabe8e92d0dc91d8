#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "msb/froc.hpp"
#include "msb/png_io.hpp"
#include "msb/rng.hpp"
#include "msb/tensor.hpp"

namespace msb {

// Deterministic phantom generator: smooth background texture plus soft-edged
// elliptical pseudo-lesions, rendered as 3-slice stacks with the neighbors
// carrying an attenuated copy of the center slice's lesions.
struct PhantomSpec {
    int image_size = 512;
    int min_lesions = 1;
    int max_lesions = 3;
    double diameter_min_mm = 4.0;   // log-uniform diameter distribution
    double diameter_max_mm = 360.0;
    double mm_per_pixel = 0.8;
    double noise_level = 0.01;
    std::uint64_t seed = 0;

    void validate() const {
        if (image_size < 16) throw ConfigError("phantom: image_size must be >= 16");
        if (min_lesions < 0 || max_lesions < min_lesions) {
            throw ConfigError("phantom: bad lesions_per_image range");
        }
        if (!(diameter_min_mm > 0.0) || !(diameter_min_mm < diameter_max_mm)) {
            throw ConfigError("phantom: need 0 < diameter_min_mm < diameter_max_mm");
        }
        if (!(mm_per_pixel > 0.0)) throw ConfigError("phantom: mm_per_pixel must be positive");
        if (diameter_max_mm / mm_per_pixel > 0.9 * image_size) {
            throw ConfigError("phantom: largest lesion (" +
                              std::to_string(diameter_max_mm / mm_per_pixel) +
                              " px) does not fit the image");
        }
        if (noise_level < 0.0) throw ConfigError("phantom: noise_level must be >= 0");
    }
};

struct Ellipse {
    double cx = 0.0, cy = 0.0;
    double semi_major = 1.0, semi_minor = 1.0;
    double angle = 0.0;  // radians

    // Tight axis-aligned bounds of the rotated ellipse.
    BoundingBox bbox() const {
        const double c = std::cos(angle), s = std::sin(angle);
        const double ex = std::sqrt(semi_major * semi_major * c * c +
                                    semi_minor * semi_minor * s * s);
        const double ey = std::sqrt(semi_major * semi_major * s * s +
                                    semi_minor * semi_minor * c * c);
        return {cx - ex, cy - ey, cx + ex, cy + ey};
    }

    double diameter_mm(double mm_per_pixel) const { return 2.0 * semi_major * mm_per_pixel; }
};

namespace detail {

// Adds one soft-edged ellipse; full amplitude inside 85% of the radius, then
// a smoothstep falloff to zero at the boundary.
template <typename T>
void render_lesion(Tensor<T>& stack, int slice, const Ellipse& e, double amplitude) {
    const BoundingBox b = e.bbox();
    const int x0 = std::max(0, static_cast<int>(std::floor(b.x_min)));
    const int y0 = std::max(0, static_cast<int>(std::floor(b.y_min)));
    const int x1 = std::min(stack.w - 1, static_cast<int>(std::ceil(b.x_max)));
    const int y1 = std::min(stack.h - 1, static_cast<int>(std::ceil(b.y_max)));
    const double c = std::cos(e.angle), s = std::sin(e.angle);
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            const double dx = (x + 0.5) - e.cx;
            const double dy = (y + 0.5) - e.cy;
            const double u = (dx * c + dy * s) / e.semi_major;
            const double v = (-dx * s + dy * c) / e.semi_minor;
            const double rho = std::sqrt(u * u + v * v);
            double f = std::clamp((1.0 - rho) / 0.15, 0.0, 1.0);
            f = f * f * (3.0 - 2.0 * f);
            if (f > 0.0) stack.at(0, slice, y, x) += static_cast<T>(amplitude * f);
        }
    }
}

inline std::uint16_t quantize16(float v) {
    return static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 65535.0f));
}

}  // namespace detail

template <typename T = float>
struct Phantom {
    Tensor<T> stack;  // (1, 3, size, size), values in [0, 1]
    std::vector<Annotation> annotations;
};

inline std::string default_image_id(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%06d", index);
    return buf;
}

// Core generator consuming an already-forked substream.
template <typename T = float>
Phantom<T> generate_phantom_with(const PhantomSpec& spec, Rng rng, const std::string& image_id) {
    spec.validate();
    const int S = spec.image_size;
    Phantom<T> out;
    out.stack = Tensor<T>(1, 3, S, S);

    // smooth low-frequency background shared by the three slices
    struct Wave {
        double ax, fx, fy, phase;
    };
    const double twopi = 6.283185307179586;
    std::array<Wave, 4> waves;
    for (Wave& w : waves) {
        w.ax = rng.uniform(0.02, 0.06);
        w.fx = rng.uniform(0.3, 1.8) / S;
        w.fy = rng.uniform(0.3, 1.8) / S;
        w.phase = rng.uniform(0.0, twopi);
    }
    std::vector<double> background(static_cast<std::size_t>(S) * S);
    for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x) {
            double v = 0.35;
            for (const Wave& w : waves) {
                v += w.ax * std::cos(twopi * (w.fx * x + w.fy * y) + w.phase);
            }
            background[static_cast<std::size_t>(y) * S + x] = v;
        }
    }
    for (int slice = 0; slice < 3; ++slice) {
        for (int y = 0; y < S; ++y) {
            for (int x = 0; x < S; ++x) {
                out.stack.at(0, slice, y, x) =
                    static_cast<T>(background[static_cast<std::size_t>(y) * S + x]);
            }
        }
    }

    // lesions: log-uniform diameters, near-axis-aligned ellipses, bounded
    // retries against overlap; placement failure just yields fewer lesions
    const int want = rng.uniform_int(spec.min_lesions, spec.max_lesions);
    std::vector<BoundingBox> placed;
    const double atten0 = rng.uniform(0.55, 0.75);
    const double atten1 = rng.uniform(0.55, 0.75);
    for (int l = 0; l < want; ++l) {
        for (int attempt = 0; attempt < 25; ++attempt) {
            const double d_mm = std::exp(rng.uniform(std::log(spec.diameter_min_mm),
                                                     std::log(spec.diameter_max_mm)));
            Ellipse e;
            e.semi_major = 0.5 * d_mm / spec.mm_per_pixel;
            e.semi_minor = e.semi_major * rng.uniform(0.55, 0.95);
            e.angle = (rng.uniform() < 0.5 ? 0.0 : 1.5707963267948966) + rng.uniform(-0.05, 0.05);
            const BoundingBox probe = e.bbox();
            const double ex = 0.5 * probe.width(), ey = 0.5 * probe.height();
            if (2.0 * ex + 4.0 > S || 2.0 * ey + 4.0 > S) continue;
            e.cx = rng.uniform(ex + 2.0, S - ex - 2.0);
            e.cy = rng.uniform(ey + 2.0, S - ey - 2.0);
            const BoundingBox box = e.bbox();
            bool overlaps = false;
            for (const BoundingBox& p : placed) {
                if (iou(box, p) > 0.2) {
                    overlaps = true;
                    break;
                }
            }
            if (overlaps) continue;
            const double amplitude = rng.uniform(0.25, 0.45);
            detail::render_lesion(out.stack, 1, e, amplitude);
            detail::render_lesion(out.stack, 0, e, amplitude * atten0);
            detail::render_lesion(out.stack, 2, e, amplitude * atten1);
            placed.push_back(box);
            out.annotations.push_back({image_id, box, e.diameter_mm(spec.mm_per_pixel)});
            break;
        }
    }

    if (spec.noise_level > 0.0) {
        for (T& v : out.stack.v) v += static_cast<T>(rng.normal(0.0, spec.noise_level));
    }
    for (T& v : out.stack.v) v = std::clamp(v, T(0), T(1));
    return out;
}

// Pure function of (spec, index): identical inputs reproduce the stack and
// annotations bit for bit.
template <typename T = float>
Phantom<T> generate_phantom(const PhantomSpec& spec, int index, std::string image_id = "") {
    if (index < 0) throw ConfigError("generate_phantom: index must be >= 0");
    if (image_id.empty()) image_id = default_image_id(index);
    return generate_phantom_with<T>(spec, Rng(spec.seed).fork(static_cast<std::uint64_t>(index)),
                                    image_id);
}

struct SplitCounts {
    int train = 0;
    int val = 0;
    int test = 0;
};

struct ManifestImage {
    std::string image_id;
    std::array<std::string, 3> files;  // slice paths relative to the dataset root
    int num_annotations = 0;
};

struct ManifestSplit {
    std::string ground_truth_file;
    std::vector<ManifestImage> images;
};

struct DatasetManifest {
    double mm_per_pixel = 0.8;
    std::uint64_t seed = 0;
    int image_size = 512;
    PhantomSpec spec;
    std::map<std::string, ManifestSplit> splits;
    std::string root_dir;  // directory holding manifest.json; set when loaded
};

inline const std::array<const char*, 3>& split_names() {
    static const std::array<const char*, 3> names{"train", "val", "test"};
    return names;
}

inline nlohmann::json phantom_spec_to_json(const PhantomSpec& s) {
    return {{"image_size", s.image_size},
            {"min_lesions", s.min_lesions},
            {"max_lesions", s.max_lesions},
            {"diameter_min_mm", s.diameter_min_mm},
            {"diameter_max_mm", s.diameter_max_mm},
            {"mm_per_pixel", s.mm_per_pixel},
            {"noise_level", s.noise_level},
            {"seed", s.seed}};
}

inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
    PhantomSpec s;
    s.image_size = j.value("image_size", s.image_size);
    s.min_lesions = j.value("min_lesions", s.min_lesions);
    s.max_lesions = j.value("max_lesions", s.max_lesions);
    s.diameter_min_mm = j.value("diameter_min_mm", s.diameter_min_mm);
    s.diameter_max_mm = j.value("diameter_max_mm", s.diameter_max_mm);
    s.mm_per_pixel = j.value("mm_per_pixel", s.mm_per_pixel);
    s.noise_level = j.value("noise_level", s.noise_level);
    s.seed = j.value("seed", s.seed);
    return s;
}

inline void write_manifest(const std::string& path, const DatasetManifest& m) {
    nlohmann::json j;
    j["mm_per_pixel"] = m.mm_per_pixel;
    j["seed"] = m.seed;
    j["image_size"] = m.image_size;
    j["phantom_spec"] = phantom_spec_to_json(m.spec);
    nlohmann::json splits;
    for (const auto& [name, split] : m.splits) {
        nlohmann::json js;
        js["ground_truth"] = split.ground_truth_file;
        js["images"] = nlohmann::json::array();
        for (const ManifestImage& mi : split.images) {
            js["images"].push_back({{"image_id", mi.image_id},
                                    {"files", {mi.files[0], mi.files[1], mi.files[2]}},
                                    {"num_annotations", mi.num_annotations}});
        }
        splits[name] = std::move(js);
    }
    j["splits"] = std::move(splits);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << j.dump(2) << '\n';
    if (!os) throw IoError("failed writing manifest " + path);
}

inline DatasetManifest read_manifest(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": " + std::string(e.what()));
    }
    DatasetManifest m;
    try {
        m.mm_per_pixel = j.at("mm_per_pixel").get<double>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.image_size = j.at("image_size").get<int>();
        if (j.contains("phantom_spec")) m.spec = phantom_spec_from_json(j["phantom_spec"]);
        for (const auto& [name, js] : j.at("splits").items()) {
            ManifestSplit split;
            split.ground_truth_file = js.at("ground_truth").get<std::string>();
            for (const auto& ji : js.at("images")) {
                ManifestImage mi;
                mi.image_id = ji.at("image_id").get<std::string>();
                for (int s = 0; s < 3; ++s) mi.files[s] = ji.at("files").at(s).get<std::string>();
                mi.num_annotations = ji.value("num_annotations", 0);
                split.images.push_back(std::move(mi));
            }
            m.splits[name] = std::move(split);
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": " + std::string(e.what()));
    }
    m.root_dir = std::filesystem::path(path).parent_path().string();
    return m;
}

// Renders every split to 16-bit grayscale PNGs (three slices per stack),
// writes per-split ground-truth JSONL plus manifest.json, and returns the
// manifest. The dataset is a pure function of (spec, counts).
inline DatasetManifest write_dataset(const PhantomSpec& spec, const SplitCounts& counts,
                                     const std::string& out_dir) {
    spec.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

    DatasetManifest manifest;
    manifest.mm_per_pixel = spec.mm_per_pixel;
    manifest.seed = spec.seed;
    manifest.image_size = spec.image_size;
    manifest.spec = spec;
    manifest.root_dir = out_dir;

    const int split_count[3] = {counts.train, counts.val, counts.test};
    for (int si = 0; si < 3; ++si) {
        const std::string split = split_names()[si];
        ManifestSplit ms;
        ms.ground_truth_file = split + "_annotations.jsonl";
        std::vector<Annotation> all_annotations;
        for (int i = 0; i < split_count[si]; ++i) {
            char idbuf[48];
            std::snprintf(idbuf, sizeof(idbuf), "%s_%05d", split.c_str(), i);
            const std::string image_id = idbuf;
            // split index in the high bits keeps the substreams disjoint
            const std::uint64_t stream =
                (static_cast<std::uint64_t>(si + 1) << 32) + static_cast<std::uint64_t>(i);
            Phantom<float> ph =
                generate_phantom_with<float>(spec, Rng(spec.seed).fork(stream), image_id);
            ManifestImage mi;
            mi.image_id = image_id;
            mi.num_annotations = static_cast<int>(ph.annotations.size());
            for (int s = 0; s < 3; ++s) {
                Image16 img;
                img.width = spec.image_size;
                img.height = spec.image_size;
                img.pixels.resize(static_cast<std::size_t>(spec.image_size) * spec.image_size);
                for (int y = 0; y < spec.image_size; ++y) {
                    for (int x = 0; x < spec.image_size; ++x) {
                        img.pixels[static_cast<std::size_t>(y) * spec.image_size + x] =
                            detail::quantize16(ph.stack.at(0, s, y, x));
                    }
                }
                const std::string rel = "images/" + image_id + "_" + std::to_string(s) + ".png";
                write_png16((fs::path(out_dir) / rel).string(), img);
                mi.files[s] = rel;
            }
            all_annotations.insert(all_annotations.end(), ph.annotations.begin(),
                                   ph.annotations.end());
            ms.images.push_back(std::move(mi));
        }
        write_annotations_jsonl((fs::path(out_dir) / ms.ground_truth_file).string(),
                                all_annotations);
        manifest.splits[split] = std::move(ms);
    }
    write_manifest((fs::path(out_dir) / "manifest.json").string(), manifest);
    return manifest;
}

// Lazy per-image loader for one split. Raw stacks are [0, 1] floats exactly
// as quantized on disk; load_stack() additionally normalizes each stack to
// zero mean, unit variance (the training-time convention).
class DatasetReader {
public:
    DatasetReader(DatasetManifest manifest, const std::string& split)
        : manifest_(std::move(manifest)), split_name_(split) {
        const auto it = manifest_.splits.find(split);
        if (it == manifest_.splits.end()) {
            throw ConfigError("dataset has no split named '" + split + "'");
        }
        split_ = &it->second;
        const std::string gt_path =
            (std::filesystem::path(manifest_.root_dir) / split_->ground_truth_file).string();
        std::vector<Annotation> annos = read_annotations_jsonl(gt_path);
        std::map<std::string, std::vector<Annotation>> by_id;
        for (Annotation& a : annos) by_id[a.image_id].push_back(std::move(a));
        annotations_.resize(split_->images.size());
        for (std::size_t i = 0; i < split_->images.size(); ++i) {
            auto found = by_id.find(split_->images[i].image_id);
            if (found != by_id.end()) {
                annotations_[i] = std::move(found->second);
                by_id.erase(found);
            }
        }
        if (!by_id.empty()) {
            throw IoError(gt_path + ": annotation references image '" + by_id.begin()->first +
                          "' absent from the manifest split");
        }
    }

    std::size_t size() const { return split_->images.size(); }
    const ManifestImage& info(std::size_t i) const { return split_->images.at(i); }
    const std::vector<Annotation>& annotations(std::size_t i) const {
        return annotations_.at(i);
    }

    Tensor<float> load_stack_raw(std::size_t i) const {
        const ManifestImage& mi = info(i);
        Tensor<float> stack(1, 3, manifest_.image_size, manifest_.image_size);
        for (int s = 0; s < 3; ++s) {
            const std::string path =
                (std::filesystem::path(manifest_.root_dir) / mi.files[s]).string();
            if (!std::filesystem::exists(path)) {
                throw IoError("dataset corrupt: missing image file " + path);
            }
            Image16 img = read_png16(path);
            if (img.width != manifest_.image_size || img.height != manifest_.image_size) {
                throw IoError("dataset corrupt: " + path + " has unexpected dimensions");
            }
            for (int y = 0; y < img.height; ++y) {
                for (int x = 0; x < img.width; ++x) {
                    stack.at(0, s, y, x) =
                        img.pixels[static_cast<std::size_t>(y) * img.width + x] / 65535.0f;
                }
            }
        }
        return stack;
    }

    Tensor<float> load_stack(std::size_t i) const {
        Tensor<float> stack = load_stack_raw(i);
        double mean = 0.0;
        for (float v : stack.v) mean += v;
        mean /= static_cast<double>(stack.v.size());
        double var = 0.0;
        for (float v : stack.v) var += (v - mean) * (v - mean);
        var /= static_cast<double>(stack.v.size());
        const float scale = static_cast<float>(1.0 / (std::sqrt(var) + 1e-6));
        for (float& v : stack.v) v = (v - static_cast<float>(mean)) * scale;
        return stack;
    }

    const DatasetManifest& manifest() const { return manifest_; }
    const std::string& split_name() const { return split_name_; }

private:
    DatasetManifest manifest_;
    std::string split_name_;
    const ManifestSplit* split_ = nullptr;
    std::vector<std::vector<Annotation>> annotations_;
};

}  // namespace msb
