#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "msb/rng.hpp"
#include "msb/tensor.hpp"

namespace msb {

// Axis-aligned box in input-image pixel coordinates.
struct BoundingBox {
    double x_min = 0.0, y_min = 0.0, x_max = 0.0, y_max = 0.0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    double center_x() const { return 0.5 * (x_min + x_max); }
    double center_y() const { return 0.5 * (y_min + y_max); }
    bool valid() const { return x_min < x_max && y_min < y_max; }
};

struct Detection {
    std::string image_id;
    BoundingBox box;
    double score = 0.0;
};

inline double iou(const BoundingBox& a, const BoundingBox& b) {
    const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

// Anchor tiling: per cell one box per (scale, ratio) pair active at the
// level. A scale-s 1:1 anchor has side s; other w:h ratios keep area s^2.
struct AnchorLayout {
    std::vector<double> scales = {8.0, 16.0, 32.0, 64.0, 128.0};
    std::vector<double> ratios = {0.5, 1.0, 2.0};  // w:h
    enum class Assignment { OneScalePerLevel, AllScalesPerLevel };
    Assignment assignment = Assignment::OneScalePerLevel;

    int anchors_per_cell() const {
        const int s = assignment == Assignment::AllScalesPerLevel
                          ? static_cast<int>(scales.size())
                          : 1;
        return s * static_cast<int>(ratios.size());
    }

    void validate(int num_levels) const {
        if (scales.empty() || ratios.empty()) {
            throw ConfigError("anchors: scales and ratios must be non-empty");
        }
        for (double s : scales) {
            if (s <= 0.0) throw ConfigError("anchors: scales must be positive");
        }
        for (double r : ratios) {
            if (r <= 0.0) throw ConfigError("anchors: ratios must be positive");
        }
        if (assignment == Assignment::OneScalePerLevel &&
            static_cast<int>(scales.size()) != num_levels) {
            throw ConfigError("anchors: one-scale-per-level needs exactly one scale per pyramid "
                              "level (" +
                              std::to_string(scales.size()) + " scales, " +
                              std::to_string(num_levels) + " levels)");
        }
    }
};

struct LevelShape {
    int h = 0, w = 0;
};

inline BoundingBox make_anchor(double cx, double cy, double scale, double ratio) {
    const double w = scale * std::sqrt(ratio);
    const double h = scale / std::sqrt(ratio);
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

// Anchors per level, cell-major (row, column), then scale, then ratio.
inline std::vector<std::vector<BoundingBox>> generate_anchors(
    const AnchorLayout& layout, std::span<const LevelShape> level_shapes,
    std::span<const int> level_strides) {
    if (level_shapes.size() != level_strides.size()) {
        throw ConfigError("generate_anchors: shape/stride lists differ in length");
    }
    layout.validate(static_cast<int>(level_shapes.size()));
    std::vector<std::vector<BoundingBox>> out(level_shapes.size());
    for (std::size_t l = 0; l < level_shapes.size(); ++l) {
        const LevelShape& shape = level_shapes[l];
        const double stride = level_strides[l];
        std::vector<BoundingBox>& boxes = out[l];
        boxes.reserve(static_cast<std::size_t>(shape.h) * shape.w * layout.anchors_per_cell());
        for (int y = 0; y < shape.h; ++y) {
            for (int x = 0; x < shape.w; ++x) {
                const double cx = (x + 0.5) * stride;
                const double cy = (y + 0.5) * stride;
                if (layout.assignment == AnchorLayout::Assignment::AllScalesPerLevel) {
                    for (double s : layout.scales) {
                        for (double r : layout.ratios) boxes.push_back(make_anchor(cx, cy, s, r));
                    }
                } else {
                    const double s = layout.scales[l];
                    for (double r : layout.ratios) boxes.push_back(make_anchor(cx, cy, s, r));
                }
            }
        }
    }
    return out;
}

// Box regression parameterization: center offsets normalized by anchor size,
// log size ratios.
inline std::array<double, 4> encode_box(const BoundingBox& anchor, const BoundingBox& target) {
    if (anchor.width() <= 0.0 || anchor.height() <= 0.0) {
        throw ShapeError("encode_box: degenerate anchor");
    }
    return {(target.center_x() - anchor.center_x()) / anchor.width(),
            (target.center_y() - anchor.center_y()) / anchor.height(),
            std::log(target.width() / anchor.width()),
            std::log(target.height() / anchor.height())};
}

inline BoundingBox decode_box(const BoundingBox& anchor, const std::array<double, 4>& deltas) {
    if (anchor.width() <= 0.0 || anchor.height() <= 0.0) {
        throw ShapeError("decode_box: degenerate anchor");
    }
    const double cx = deltas[0] * anchor.width() + anchor.center_x();
    const double cy = deltas[1] * anchor.height() + anchor.center_y();
    const double w = anchor.width() * std::exp(deltas[2]);
    const double h = anchor.height() * std::exp(deltas[3]);
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

inline BoundingBox clamp_box(const BoundingBox& b, double image_w, double image_h) {
    return {std::clamp(b.x_min, 0.0, image_w), std::clamp(b.y_min, 0.0, image_h),
            std::clamp(b.x_max, 0.0, image_w), std::clamp(b.y_max, 0.0, image_h)};
}

enum class AnchorLabel : std::int8_t { Ignore = -1, Negative = 0, Positive = 1 };

struct AssignResult {
    std::vector<AnchorLabel> labels;
    std::vector<int> matched_gt;  // index of the anchor's best ground-truth box, -1 if none
};

// RPN-style assignment: positive when IoU >= iou_pos with any ground truth or
// when the anchor ties the best IoU for some ground truth (so every ground
// truth with nonzero overlap gets at least one positive); negative when the
// best IoU < iou_neg; ignored otherwise.
inline AssignResult assign_targets(std::span<const BoundingBox> anchors,
                                   std::span<const BoundingBox> gts, double iou_pos = 0.7,
                                   double iou_neg = 0.3) {
    AssignResult res;
    res.labels.assign(anchors.size(), AnchorLabel::Negative);
    res.matched_gt.assign(anchors.size(), -1);
    if (gts.empty()) return res;

    std::vector<double> gt_best(gts.size(), 0.0);
    std::vector<double> anchor_best(anchors.size(), 0.0);
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        for (std::size_t g = 0; g < gts.size(); ++g) {
            const double o = iou(anchors[a], gts[g]);
            if (o > anchor_best[a]) {
                anchor_best[a] = o;
                res.matched_gt[a] = static_cast<int>(g);
            }
            gt_best[g] = std::max(gt_best[g], o);
        }
        if (anchor_best[a] >= iou_pos) {
            res.labels[a] = AnchorLabel::Positive;
        } else if (anchor_best[a] >= iou_neg) {
            res.labels[a] = AnchorLabel::Ignore;
        }
    }
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (gt_best[g] > 0.0 && iou(anchors[a], gts[g]) == gt_best[g]) {
                res.labels[a] = AnchorLabel::Positive;
            }
        }
    }
    return res;
}

struct LossOptions {
    int sample_count = 256;
    double positive_fraction = 0.5;
};

template <typename T>
struct DetectionLossResult {
    T total = T(0);
    T classification = T(0);
    T regression = T(0);
    std::vector<T> grad_logits;
    std::vector<T> grad_deltas;  // 4 per anchor, (dx, dy, dw, dh)
    int sampled = 0;
    int positives = 0;
};

namespace detail {

// Deterministic partial Fisher-Yates draw of k items.
inline void sample_indices(std::vector<int>& pool, std::size_t k, Rng& rng) {
    k = std::min(k, pool.size());
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j =
            i + static_cast<std::size_t>(rng.next_u64() % (pool.size() - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
}

}  // namespace detail

// Binary cross-entropy on a fixed-size anchor sample plus smooth-L1 on the
// sampled positives' regression deltas, each averaged over its own count.
template <typename T>
DetectionLossResult<T> detection_loss(std::span<const T> logits, std::span<const T> deltas,
                                      const AssignResult& assign,
                                      std::span<const BoundingBox> anchors,
                                      std::span<const BoundingBox> gts, const LossOptions& opts,
                                      Rng& rng) {
    const std::size_t n = anchors.size();
    if (logits.size() != n || deltas.size() != 4 * n || assign.labels.size() != n) {
        throw ShapeError("detection_loss: logits/deltas/assignments must align with anchors");
    }
    std::vector<int> pos, neg;
    for (std::size_t a = 0; a < n; ++a) {
        if (assign.labels[a] == AnchorLabel::Positive) pos.push_back(static_cast<int>(a));
        if (assign.labels[a] == AnchorLabel::Negative) neg.push_back(static_cast<int>(a));
    }
    const std::size_t want_pos =
        static_cast<std::size_t>(opts.sample_count * opts.positive_fraction);
    detail::sample_indices(pos, want_pos, rng);
    detail::sample_indices(neg, static_cast<std::size_t>(opts.sample_count) - pos.size(), rng);
    if (pos.empty() && neg.empty()) {
        throw ConfigError("detection_loss: no anchors available to sample");
    }

    DetectionLossResult<T> res;
    res.grad_logits.assign(n, T(0));
    res.grad_deltas.assign(4 * n, T(0));
    res.sampled = static_cast<int>(pos.size() + neg.size());
    res.positives = static_cast<int>(pos.size());

    const T inv_sampled = T(1) / static_cast<T>(res.sampled);
    auto bce = [&](int a, T y) {
        const T z = logits[a];
        const T soft = std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
        res.classification += (soft - y * z) * inv_sampled;
        const T sig = T(1) / (T(1) + std::exp(-z));
        res.grad_logits[a] = (sig - y) * inv_sampled;
    };
    for (int a : pos) bce(a, T(1));
    for (int a : neg) bce(a, T(0));

    if (!pos.empty()) {
        const T inv_pos = T(1) / static_cast<T>(pos.size());
        for (int a : pos) {
            const int g = assign.matched_gt[a];
            if (g < 0) continue;  // positives forced without overlap cannot happen here
            const std::array<double, 4> target = encode_box(anchors[a], gts[g]);
            for (int k = 0; k < 4; ++k) {
                const T d = deltas[4 * a + k] - static_cast<T>(target[k]);
                const T ad = std::abs(d);
                res.regression += (ad < T(1) ? T(0.5) * d * d : ad - T(0.5)) * inv_pos;
                res.grad_deltas[4 * a + k] = std::clamp(d, T(-1), T(1)) * inv_pos;
            }
        }
    }
    res.total = res.classification + res.regression;
    return res;
}

// Greedy non-maximum suppression. Ties in score are broken by input order;
// output is a subset of the input in non-increasing score order.
inline std::vector<Detection> nms(std::span<const Detection> dets, double iou_threshold,
                                  double score_threshold = 0.0,
                                  std::size_t max_out = std::numeric_limits<std::size_t>::max()) {
    std::vector<int> order;
    order.reserve(dets.size());
    for (std::size_t i = 0; i < dets.size(); ++i) {
        if (dets[i].score >= score_threshold) order.push_back(static_cast<int>(i));
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return dets[a].score > dets[b].score; });
    std::vector<Detection> kept;
    for (int idx : order) {
        if (kept.size() >= max_out) break;
        bool suppressed = false;
        for (const Detection& k : kept) {
            if (iou(k.box, dets[idx].box) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(dets[idx]);
    }
    return kept;
}

// Detections CSV: image_id,x_min,y_min,x_max,y_max,score with a header line.
inline void write_detections_csv(std::ostream& os, std::span<const Detection> dets) {
    os << "image_id,x_min,y_min,x_max,y_max,score\n";
    char buf[160];
    for (const Detection& d : dets) {
        std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%.9g,%.9g", d.box.x_min, d.box.y_min,
                      d.box.x_max, d.box.y_max, d.score);
        os << d.image_id << ',' << buf << '\n';
    }
    if (!os) throw IoError("failed writing detections CSV");
}

inline void write_detections_csv(const std::string& path, std::span<const Detection> dets) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write_detections_csv(os, dets);
}

inline std::vector<Detection> read_detections_csv(std::istream& is) {
    std::vector<Detection> dets;
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (first && line.rfind("image_id,", 0) == 0) {
            first = false;
            continue;
        }
        first = false;
        Detection d;
        std::array<double, 5> nums{};
        std::size_t pos = line.find(',');
        if (pos == std::string::npos) throw IoError("detections CSV: malformed line: " + line);
        d.image_id = line.substr(0, pos);
        std::size_t start = pos + 1;
        for (int k = 0; k < 5; ++k) {
            const std::size_t end = k == 4 ? line.size() : line.find(',', start);
            if (end == std::string::npos) {
                throw IoError("detections CSV: expected 6 fields: " + line);
            }
            try {
                nums[k] = std::stod(line.substr(start, end - start));
            } catch (const std::exception&) {
                throw IoError("detections CSV: bad number in line: " + line);
            }
            start = end + 1;
        }
        d.box = {nums[0], nums[1], nums[2], nums[3]};
        d.score = nums[4];
        dets.push_back(std::move(d));
    }
    return dets;
}

inline std::vector<Detection> read_detections_csv(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    return read_detections_csv(is);
}

}  // namespace msb
