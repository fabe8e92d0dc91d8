#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "msb/detection.hpp"

namespace msb {

struct Annotation {
    std::string image_id;
    BoundingBox box;
    double diameter_mm = 0.0;
};

// One evaluated image; annotation list may be empty.
struct EvalImage {
    std::string image_id;
    std::vector<Detection> detections;
    std::vector<Annotation> annotations;
};

struct MatchResult {
    std::vector<bool> det_is_tp;       // aligned with detections in input order
    std::vector<int> det_matched;      // annotation index, -1 for false positives
    std::vector<bool> annotation_hit;  // aligned with annotations
};

// Greedy matching within one image: detections in descending score order each
// claim the highest-IoU still-unmatched annotation with IoU >= threshold.
// Score ties keep input order; annotation ties take the lowest index.
inline MatchResult match_detections(std::span<const Detection> dets,
                                    std::span<const Annotation> annos,
                                    double iou_threshold = 0.5) {
    MatchResult res;
    res.det_is_tp.assign(dets.size(), false);
    res.det_matched.assign(dets.size(), -1);
    res.annotation_hit.assign(annos.size(), false);

    std::vector<int> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return dets[a].score > dets[b].score; });

    for (int d : order) {
        int best = -1;
        double best_iou = 0.0;
        for (std::size_t g = 0; g < annos.size(); ++g) {
            if (res.annotation_hit[g]) continue;
            const double o = iou(dets[d].box, annos[g].box);
            if (o >= iou_threshold && o > best_iou) {
                best_iou = o;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            res.det_is_tp[d] = true;
            res.det_matched[d] = best;
            res.annotation_hit[best] = true;
        }
    }
    return res;
}

struct FrocPoint {
    double threshold = 0.0;
    double fp_per_image = 0.0;
    double sensitivity = 0.0;
};

// Operating points ordered by descending score threshold, one per distinct
// detection score; fp_per_image is non-decreasing along the list.
struct FrocCurve {
    std::vector<FrocPoint> points;
};

namespace detail {

struct SweepData {
    std::vector<double> fp_scores;        // scores of false-positive detections
    std::vector<double> hit_scores;       // per matched annotation, its detection's score
    std::vector<double> thresholds;       // distinct detection scores, descending
    std::size_t total_annotations = 0;
    std::size_t total_detections = 0;
    int num_images = 0;
};

inline SweepData sweep_matches(std::span<const EvalImage> images, double iou_threshold,
                               std::vector<std::vector<int>>* matched_annotation = nullptr) {
    SweepData s;
    s.num_images = static_cast<int>(images.size());
    std::vector<double> all_scores;
    for (const EvalImage& img : images) {
        const MatchResult m = match_detections(img.detections, img.annotations, iou_threshold);
        if (matched_annotation) matched_annotation->push_back(m.det_matched);
        s.total_annotations += img.annotations.size();
        s.total_detections += img.detections.size();
        for (std::size_t d = 0; d < img.detections.size(); ++d) {
            all_scores.push_back(img.detections[d].score);
            if (m.det_is_tp[d]) {
                s.hit_scores.push_back(img.detections[d].score);
            } else {
                s.fp_scores.push_back(img.detections[d].score);
            }
        }
    }
    std::sort(all_scores.begin(), all_scores.end(), std::greater<>());
    all_scores.erase(std::unique(all_scores.begin(), all_scores.end()), all_scores.end());
    s.thresholds = std::move(all_scores);
    std::sort(s.fp_scores.begin(), s.fp_scores.end(), std::greater<>());
    std::sort(s.hit_scores.begin(), s.hit_scores.end(), std::greater<>());
    return s;
}

}  // namespace detail

// Free-response operating curve: every distinct detection score is swept as
// the decision threshold over the whole image set.
inline FrocCurve froc(std::span<const EvalImage> images, double iou_threshold = 0.5) {
    if (images.empty()) throw ConfigError("froc: at least one image required");
    detail::SweepData s = detail::sweep_matches(images, iou_threshold);
    if (s.total_annotations == 0) {
        throw ConfigError("froc: no annotations in the whole set; sensitivity is undefined");
    }
    FrocCurve curve;
    std::size_t fp_i = 0, hit_i = 0;
    for (double t : s.thresholds) {
        while (fp_i < s.fp_scores.size() && s.fp_scores[fp_i] >= t) ++fp_i;
        while (hit_i < s.hit_scores.size() && s.hit_scores[hit_i] >= t) ++hit_i;
        curve.points.push_back(
            {t, static_cast<double>(fp_i) / s.num_images,
             static_cast<double>(hit_i) / static_cast<double>(s.total_annotations)});
    }
    return curve;
}

// Best sensitivity among operating points with fp_per_image at or below each
// rate (step mode), or piecewise-linear interpolation between the envelope
// points when interpolate is set.
inline std::vector<double> sensitivity_at(const FrocCurve& curve, std::span<const double> rates,
                                          bool interpolate = false) {
    // envelope: best sensitivity at or below each fp level
    std::vector<FrocPoint> env = curve.points;
    std::sort(env.begin(), env.end(), [](const FrocPoint& a, const FrocPoint& b) {
        return a.fp_per_image < b.fp_per_image;
    });
    double run = 0.0;
    for (FrocPoint& p : env) {
        run = std::max(run, p.sensitivity);
        p.sensitivity = run;
    }
    std::vector<double> out;
    out.reserve(rates.size());
    for (double rate : rates) {
        if (!interpolate) {
            double best = 0.0;
            for (const FrocPoint& p : env) {
                if (p.fp_per_image <= rate) best = std::max(best, p.sensitivity);
            }
            out.push_back(best);
            continue;
        }
        // linear interpolation, anchored at (0, 0) below the first point
        double x0 = 0.0, y0 = 0.0;
        double value = env.empty() ? 0.0 : env.back().sensitivity;
        for (const FrocPoint& p : env) {
            if (p.fp_per_image <= rate) {
                x0 = p.fp_per_image;
                y0 = p.sensitivity;
                value = y0;
                continue;
            }
            const double x1 = p.fp_per_image, y1 = p.sensitivity;
            value = x1 > x0 ? y0 + (y1 - y0) * (rate - x0) / (x1 - x0) : y0;
            break;
        }
        out.push_back(value);
    }
    return out;
}

inline const std::vector<double>& default_fp_rates() {
    static const std::vector<double> rates{0.5, 1.0, 2.0, 4.0, 8.0};
    return rates;
}

// Lesion-diameter buckets in millimetres; edges partition (0, inf).
struct SizeBuckets {
    std::vector<double> edges = {10.0, 30.0, 60.0, 100.0};

    void validate() const {
        if (edges.empty()) throw ConfigError("size buckets: need at least one edge");
        double prev = 0.0;
        for (double e : edges) {
            if (e <= prev) throw ConfigError("size buckets: edges must be strictly increasing");
            prev = e;
        }
    }

    int count() const { return static_cast<int>(edges.size()) + 1; }

    int bucket_of(double diameter_mm) const {
        int b = 0;
        while (b < static_cast<int>(edges.size()) && diameter_mm >= edges[b]) ++b;
        return b;
    }

    std::string label(int b) const {
        char buf[48];
        if (b == 0) {
            std::snprintf(buf, sizeof(buf), "<%g", edges.front());
        } else if (b == static_cast<int>(edges.size())) {
            std::snprintf(buf, sizeof(buf), ">%g", edges.back());
        } else {
            std::snprintf(buf, sizeof(buf), "%g-%g", edges[b - 1], edges[b]);
        }
        return buf;
    }
};

struct BucketSensitivity {
    std::vector<std::optional<double>> sensitivity;  // absent for empty buckets
    std::vector<int> total;
    std::vector<int> matched;
    double threshold = std::numeric_limits<double>::infinity();
};

// Fix one global score threshold: the operating point with the best
// sensitivity among those at or below fp_rate false positives per image.
// Then report matched/total per diameter bucket at that threshold.
inline BucketSensitivity size_bucketed_sensitivity(std::span<const EvalImage> images,
                                                   const SizeBuckets& buckets,
                                                   double fp_rate = 4.0,
                                                   double iou_threshold = 0.5) {
    buckets.validate();
    if (images.empty()) throw ConfigError("size_bucketed_sensitivity: no images");

    std::vector<std::vector<int>> det_matched;
    detail::SweepData s = detail::sweep_matches(images, iou_threshold, &det_matched);
    if (s.total_annotations == 0) {
        throw ConfigError("size_bucketed_sensitivity: no annotations in the whole set");
    }

    // smallest threshold whose false-positive rate stays within budget
    double chosen = std::numeric_limits<double>::infinity();
    std::size_t fp_i = 0;
    for (double t : s.thresholds) {
        while (fp_i < s.fp_scores.size() && s.fp_scores[fp_i] >= t) ++fp_i;
        if (static_cast<double>(fp_i) / s.num_images <= fp_rate) {
            chosen = t;
        } else {
            break;
        }
    }

    BucketSensitivity out;
    out.threshold = chosen;
    out.total.assign(buckets.count(), 0);
    out.matched.assign(buckets.count(), 0);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const EvalImage& img = images[i];
        for (const Annotation& a : img.annotations) out.total[buckets.bucket_of(a.diameter_mm)]++;
        for (std::size_t d = 0; d < img.detections.size(); ++d) {
            const int g = det_matched[i][d];
            if (g >= 0 && img.detections[d].score >= chosen) {
                out.matched[buckets.bucket_of(img.annotations[g].diameter_mm)]++;
            }
        }
    }
    out.sensitivity.resize(buckets.count());
    for (int b = 0; b < buckets.count(); ++b) {
        if (out.total[b] > 0) {
            out.sensitivity[b] = static_cast<double>(out.matched[b]) / out.total[b];
        }
    }
    return out;
}

// Group flat detection/annotation lists into per-image records. When an
// explicit id list is given it defines the image set (so images without
// annotations still count toward FPs per image); otherwise the union of ids
// seen in either list is used, sorted for determinism.
inline std::vector<EvalImage> group_by_image(std::span<const Detection> dets,
                                             std::span<const Annotation> annos,
                                             std::vector<std::string> image_ids = {}) {
    std::map<std::string, EvalImage> by_id;
    const bool fixed = !image_ids.empty();
    for (const std::string& id : image_ids) by_id[id].image_id = id;
    for (const Annotation& a : annos) {
        if (fixed && by_id.find(a.image_id) == by_id.end()) {
            throw ConfigError("annotation references unknown image_id " + a.image_id);
        }
        EvalImage& img = by_id[a.image_id];
        img.image_id = a.image_id;
        img.annotations.push_back(a);
    }
    for (const Detection& d : dets) {
        if (fixed && by_id.find(d.image_id) == by_id.end()) {
            throw ConfigError("detection references unknown image_id " + d.image_id);
        }
        EvalImage& img = by_id[d.image_id];
        img.image_id = d.image_id;
        img.detections.push_back(d);
    }
    std::vector<EvalImage> out;
    out.reserve(by_id.size());
    if (fixed) {
        for (const std::string& id : image_ids) out.push_back(std::move(by_id[id]));
    } else {
        for (auto& [id, img] : by_id) out.push_back(std::move(img));
    }
    return out;
}

// Ground truth JSON-lines: one object per annotation with image_id, box
// [x_min, y_min, x_max, y_max] and diameter_mm.
inline void write_annotations_jsonl(std::ostream& os, std::span<const Annotation> annos) {
    for (const Annotation& a : annos) {
        nlohmann::json j;
        j["image_id"] = a.image_id;
        j["box"] = {a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max};
        j["diameter_mm"] = a.diameter_mm;
        os << j.dump() << '\n';
    }
    if (!os) throw IoError("failed writing annotations");
}

inline void write_annotations_jsonl(const std::string& path, std::span<const Annotation> annos) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write_annotations_jsonl(os, annos);
}

inline std::vector<Annotation> read_annotations_jsonl(std::istream& is) {
    std::vector<Annotation> out;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("ground truth line " + std::to_string(line_no) + ": " + e.what());
        }
        Annotation a;
        try {
            a.image_id = j.at("image_id").get<std::string>();
            const auto& b = j.at("box");
            a.box = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                     b.at(3).get<double>()};
            a.diameter_mm = j.at("diameter_mm").get<double>();
        } catch (const nlohmann::json::exception& e) {
            throw IoError("ground truth line " + std::to_string(line_no) + ": " + e.what());
        }
        out.push_back(std::move(a));
    }
    return out;
}

inline std::vector<Annotation> read_annotations_jsonl(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    return read_annotations_jsonl(is);
}

struct EvalReport {
    double iou_threshold = 0.5;
    int num_images = 0;
    std::size_t num_annotations = 0;
    std::size_t num_detections = 0;
    FrocCurve curve;
    std::vector<double> fp_rates;
    std::vector<double> sensitivity;
    SizeBuckets buckets;
    double bucket_fp_rate = 4.0;
    BucketSensitivity bucket_result;
};

inline EvalReport evaluate(std::span<const EvalImage> images, double iou_threshold = 0.5,
                           std::vector<double> fp_rates = default_fp_rates(),
                           const SizeBuckets& buckets = {}, double bucket_fp_rate = 4.0,
                           bool interpolate = false) {
    EvalReport r;
    r.iou_threshold = iou_threshold;
    r.num_images = static_cast<int>(images.size());
    for (const EvalImage& img : images) {
        r.num_annotations += img.annotations.size();
        r.num_detections += img.detections.size();
    }
    r.curve = froc(images, iou_threshold);
    r.fp_rates = std::move(fp_rates);
    r.sensitivity = sensitivity_at(r.curve, r.fp_rates, interpolate);
    r.buckets = buckets;
    r.bucket_fp_rate = bucket_fp_rate;
    r.bucket_result = size_bucketed_sensitivity(images, buckets, bucket_fp_rate, iou_threshold);
    return r;
}

inline std::string render_report_text(const EvalReport& r) {
    std::ostringstream os;
    char buf[64];
    os << "FROC evaluation (IoU >= " << r.iou_threshold << ", " << r.num_images << " images, "
       << r.num_annotations << " lesions, " << r.num_detections << " detections)\n\n";
    os << "Sensitivity at FPs per image\n";
    os << "  FPs/img:    ";
    for (double rate : r.fp_rates) {
        std::snprintf(buf, sizeof(buf), "%8g", rate);
        os << buf;
    }
    os << "\n  sensitivity:";
    for (double s : r.sensitivity) {
        std::snprintf(buf, sizeof(buf), "%8.3f", s);
        os << buf;
    }
    os << "\n\nSensitivity at " << r.bucket_fp_rate
       << " FPs per image by lesion diameter (mm)\n";
    os << "  bucket:     ";
    for (int b = 0; b < r.buckets.count(); ++b) {
        std::snprintf(buf, sizeof(buf), "%8s", r.buckets.label(b).c_str());
        os << buf;
    }
    os << "\n  sensitivity:";
    for (int b = 0; b < r.buckets.count(); ++b) {
        if (r.bucket_result.sensitivity[b]) {
            std::snprintf(buf, sizeof(buf), "%8.3f", *r.bucket_result.sensitivity[b]);
        } else {
            std::snprintf(buf, sizeof(buf), "%8s", "n/a");
        }
        os << buf;
    }
    os << "\n  lesions:    ";
    for (int b = 0; b < r.buckets.count(); ++b) {
        std::snprintf(buf, sizeof(buf), "%8d", r.bucket_result.total[b]);
        os << buf;
    }
    os << '\n';
    return os.str();
}

inline nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["iou_threshold"] = r.iou_threshold;
    j["num_images"] = r.num_images;
    j["num_annotations"] = r.num_annotations;
    j["num_detections"] = r.num_detections;
    j["operating_points"] = nlohmann::json::array();
    for (const FrocPoint& p : r.curve.points) {
        j["operating_points"].push_back(
            {{"threshold", p.threshold}, {"fp_per_image", p.fp_per_image},
             {"sensitivity", p.sensitivity}});
    }
    j["sensitivity_at"] = nlohmann::json::array();
    for (std::size_t i = 0; i < r.fp_rates.size(); ++i) {
        j["sensitivity_at"].push_back(
            {{"fp_per_image", r.fp_rates[i]}, {"sensitivity", r.sensitivity[i]}});
    }
    j["buckets"] = nlohmann::json::array();
    for (int b = 0; b < r.buckets.count(); ++b) {
        nlohmann::json jb;
        jb["label"] = r.buckets.label(b);
        jb["total"] = r.bucket_result.total[b];
        jb["matched"] = r.bucket_result.matched[b];
        if (r.bucket_result.sensitivity[b]) {
            jb["sensitivity"] = *r.bucket_result.sensitivity[b];
        } else {
            jb["sensitivity"] = nullptr;
        }
        j["buckets"].push_back(jb);
    }
    j["bucket_fp_rate"] = r.bucket_fp_rate;
    return j;
}

}  // namespace msb
