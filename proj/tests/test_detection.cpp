#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "msb/detection.hpp"
#include "msb/gradcheck.hpp"
#include "oracles.hpp"

using msb::AnchorLabel;
using msb::AnchorLayout;
using msb::BoundingBox;
using msb::Detection;
using msb::LevelShape;
using msb::Rng;

namespace {

BoundingBox random_box(Rng& rng, double span = 40.0) {
    const double x = rng.uniform(0.0, span);
    const double y = rng.uniform(0.0, span);
    const double w = rng.uniform(2.0, 0.5 * span);
    const double h = rng.uniform(2.0, 0.5 * span);
    return {x, y, x + w, y + h};
}

// Independent assignment oracle: full IoU matrix, then the labeling rule
// applied verbatim.
msb::AssignResult assign_oracle(std::span<const BoundingBox> anchors,
                                std::span<const BoundingBox> gts, double iou_pos,
                                double iou_neg) {
    msb::AssignResult res;
    res.labels.assign(anchors.size(), AnchorLabel::Negative);
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
        if (best >= iou_pos) {
            res.labels[a] = AnchorLabel::Positive;
        } else if (best >= iou_neg) {
            res.labels[a] = AnchorLabel::Ignore;
        }
    }
    for (std::size_t g = 0; g < gts.size(); ++g) {
        double best = 0.0;
        for (std::size_t a = 0; a < anchors.size(); ++a) best = std::max(best, m[a][g]);
        if (best <= 0.0) continue;
        for (std::size_t a = 0; a < anchors.size(); ++a) {
            if (m[a][g] == best) res.labels[a] = AnchorLabel::Positive;
        }
    }
    return res;
}

// Independent greedy NMS oracle.
std::vector<Detection> nms_oracle(std::span<const Detection> dets, double thresh) {
    std::vector<int> idx(dets.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return dets[a].score > dets[b].score; });
    std::vector<Detection> kept;
    for (int i : idx) {
        bool ok = true;
        for (const Detection& k : kept) {
            if (msb::iou(k.box, dets[i].box) > thresh) ok = false;
        }
        if (ok) kept.push_back(dets[i]);
    }
    return kept;
}

}  // namespace

TEST(Anchors, UnitRatioDefinition) {
    AnchorLayout layout;
    layout.scales = {8.0};
    layout.ratios = {1.0};
    std::vector<LevelShape> shapes{{1, 1}};
    std::vector<int> strides{4};
    auto anchors = msb::generate_anchors(layout, shapes, strides);
    ASSERT_EQ(anchors.size(), 1u);
    ASSERT_EQ(anchors[0].size(), 1u);
    const BoundingBox& b = anchors[0][0];
    EXPECT_DOUBLE_EQ(b.x_min, -2.0);
    EXPECT_DOUBLE_EQ(b.y_min, -2.0);
    EXPECT_DOUBLE_EQ(b.x_max, 6.0);
    EXPECT_DOUBLE_EQ(b.y_max, 6.0);
}

TEST(Anchors, RatioPreservesArea) {
    const BoundingBox b = msb::make_anchor(0.0, 0.0, 16.0, 0.5);  // w:h = 1:2
    EXPECT_NEAR(b.width(), 16.0 / std::sqrt(2.0), 1e-9);
    EXPECT_NEAR(b.height(), 16.0 * std::sqrt(2.0), 1e-9);
    EXPECT_NEAR(b.area(), 256.0, 1e-9);
}

TEST(Anchors, CountsMatchGrid) {
    AnchorLayout layout;
    layout.scales = {8.0};
    layout.ratios = {0.5, 1.0, 2.0};
    std::vector<LevelShape> shapes{{4, 4}};
    std::vector<int> strides{4};
    auto anchors = msb::generate_anchors(layout, shapes, strides);
    EXPECT_EQ(anchors[0].size(), 48u);

    AnchorLayout multi;
    multi.scales = {8.0, 16.0, 32.0};
    multi.ratios = {0.5, 1.0, 2.0};
    std::vector<LevelShape> shapes3{{8, 8}, {4, 4}, {2, 2}};
    std::vector<int> strides3{4, 8, 16};
    auto per_level = msb::generate_anchors(multi, shapes3, strides3);
    std::size_t total = 0;
    for (const auto& lvl : per_level) total += lvl.size();
    EXPECT_EQ(total, (64u + 16u + 4u) * 3u);

    multi.assignment = AnchorLayout::Assignment::AllScalesPerLevel;
    per_level = msb::generate_anchors(multi, shapes3, strides3);
    total = 0;
    for (const auto& lvl : per_level) total += lvl.size();
    EXPECT_EQ(total, (64u + 16u + 4u) * 9u);

    AnchorLayout bad;
    bad.scales = {8.0, 16.0};
    EXPECT_THROW(msb::generate_anchors(bad, shapes3, strides3), msb::ConfigError);
}

TEST(Iou, KnownValues) {
    const BoundingBox a{0, 0, 10, 10};
    EXPECT_DOUBLE_EQ(msb::iou(a, a), 1.0);
    EXPECT_DOUBLE_EQ(msb::iou(a, BoundingBox{20, 20, 30, 30}), 0.0);
    EXPECT_NEAR(msb::iou(a, BoundingBox{5, 5, 15, 15}), 1.0 / 7.0, 1e-12);
}

TEST(Iou, SymmetricBoundedAndTranslationInvariant) {
    Rng rng(60);
    for (int i = 0; i < 100; ++i) {
        const BoundingBox a = random_box(rng);
        const BoundingBox b = random_box(rng);
        const double ab = msb::iou(a, b);
        EXPECT_DOUBLE_EQ(ab, msb::iou(b, a));
        EXPECT_GE(ab, 0.0);
        EXPECT_LE(ab, 1.0);
        const double dx = rng.uniform(-20.0, 20.0), dy = rng.uniform(-20.0, 20.0);
        const BoundingBox at{a.x_min + dx, a.y_min + dy, a.x_max + dx, a.y_max + dy};
        const BoundingBox bt{b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy};
        EXPECT_NEAR(msb::iou(at, bt), ab, 1e-12);
    }
}

TEST(BoxCoding, FixedPointAndHandValues) {
    const BoundingBox anchor{0, 0, 10, 10};
    auto z = msb::encode_box(anchor, anchor);
    for (double d : z) EXPECT_DOUBLE_EQ(d, 0.0);

    auto d = msb::encode_box(anchor, BoundingBox{0, 0, 20, 20});
    EXPECT_DOUBLE_EQ(d[0], 0.5);
    EXPECT_DOUBLE_EQ(d[1], 0.5);
    EXPECT_DOUBLE_EQ(d[2], std::log(2.0));
    EXPECT_DOUBLE_EQ(d[3], std::log(2.0));

    EXPECT_THROW(msb::encode_box(BoundingBox{5, 5, 5, 10}, anchor), msb::ShapeError);
}

TEST(BoxCoding, RandomRoundTrip) {
    Rng rng(61);
    for (int i = 0; i < 200; ++i) {
        const BoundingBox anchor = random_box(rng);
        const BoundingBox target = random_box(rng);
        const BoundingBox back = msb::decode_box(anchor, msb::encode_box(anchor, target));
        EXPECT_NEAR(back.x_min, target.x_min, 1e-9);
        EXPECT_NEAR(back.y_min, target.y_min, 1e-9);
        EXPECT_NEAR(back.x_max, target.x_max, 1e-9);
        EXPECT_NEAR(back.y_max, target.y_max, 1e-9);
    }
}

TEST(AssignTargets, EdgeCases) {
    std::vector<BoundingBox> anchors{{0, 0, 8, 8}, {8, 8, 16, 16}};
    auto none = msb::assign_targets(anchors, {});
    for (auto l : none.labels) EXPECT_EQ(l, AnchorLabel::Negative);

    std::vector<BoundingBox> gts{{0, 0, 8, 8}};
    auto res = msb::assign_targets(anchors, gts);
    EXPECT_EQ(res.labels[0], AnchorLabel::Positive);
    EXPECT_EQ(res.matched_gt[0], 0);
    EXPECT_EQ(res.labels[1], AnchorLabel::Negative);
}

TEST(AssignTargets, EveryGtGetsAPositive) {
    // ground truth whose best anchor IoU is far below the positive threshold
    std::vector<BoundingBox> anchors{{0, 0, 16, 16}, {16, 0, 32, 16}};
    std::vector<BoundingBox> gts{{2, 2, 6, 6}};
    auto res = msb::assign_targets(anchors, gts);
    EXPECT_EQ(res.labels[0], AnchorLabel::Positive);
    EXPECT_EQ(res.matched_gt[0], 0);
}

TEST(AssignTargets, MatchesExhaustiveOracle) {
    Rng rng(62);
    for (int scene = 0; scene < 200; ++scene) {
        std::vector<BoundingBox> anchors, gts;
        const int na = rng.uniform_int(1, 12);
        const int ng = rng.uniform_int(0, 4);
        for (int i = 0; i < na; ++i) anchors.push_back(random_box(rng));
        for (int i = 0; i < ng; ++i) gts.push_back(random_box(rng));
        auto got = msb::assign_targets(anchors, gts);
        auto want = assign_oracle(anchors, gts, 0.7, 0.3);
        ASSERT_EQ(got.labels.size(), want.labels.size());
        for (std::size_t a = 0; a < anchors.size(); ++a) {
            EXPECT_EQ(got.labels[a], want.labels[a]) << "scene " << scene << " anchor " << a;
            EXPECT_EQ(got.matched_gt[a], want.matched_gt[a]);
        }
    }
}

TEST(AssignTargets, TranslationEquivariant) {
    Rng rng(63);
    std::vector<BoundingBox> anchors, gts;
    for (int i = 0; i < 10; ++i) anchors.push_back(random_box(rng));
    for (int i = 0; i < 3; ++i) gts.push_back(random_box(rng));
    auto base = msb::assign_targets(anchors, gts);
    const double dx = 13.5, dy = -7.25;
    for (auto& b : anchors) b = {b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy};
    for (auto& b : gts) b = {b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy};
    auto moved = msb::assign_targets(anchors, gts);
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        EXPECT_EQ(base.labels[a], moved.labels[a]);
        EXPECT_EQ(base.matched_gt[a], moved.matched_gt[a]);
    }
}

TEST(DetectionLoss, PerfectPredictionsGiveZero) {
    std::vector<BoundingBox> anchors{{0, 0, 8, 8}, {20, 20, 28, 28}};
    std::vector<BoundingBox> gts{{0, 0, 8, 8}};
    auto assign = msb::assign_targets(anchors, gts);
    std::vector<double> logits{40.0, -40.0};
    std::vector<double> deltas(8, 0.0);
    msb::LossOptions opts;
    Rng rng(64);
    auto res = msb::detection_loss<double>(logits, deltas, assign, anchors, gts, opts, rng);
    EXPECT_LT(res.total, 1e-12);
}

TEST(DetectionLoss, BalancedZeroLogitsGiveLogTwo) {
    std::vector<BoundingBox> anchors{{0, 0, 8, 8}, {16, 16, 24, 24}, {40, 0, 48, 8},
                                     {0, 40, 8, 48}};
    std::vector<BoundingBox> gts{{0, 0, 8, 8}, {16, 16, 24, 24}};
    auto assign = msb::assign_targets(anchors, gts);
    std::vector<double> logits(4, 0.0);
    std::vector<double> deltas(16, 0.0);
    msb::LossOptions opts;
    opts.sample_count = 4;
    Rng rng(65);
    auto res = msb::detection_loss<double>(logits, deltas, assign, anchors, gts, opts, rng);
    EXPECT_EQ(res.sampled, 4);
    EXPECT_EQ(res.positives, 2);
    EXPECT_NEAR(res.classification, std::log(2.0), 1e-12);
    EXPECT_NEAR(res.regression, 0.0, 1e-12);
}

TEST(DetectionLoss, GradientMatchesFiniteDifferences) {
    Rng scene_rng(66);
    std::vector<BoundingBox> anchors, gts;
    for (int i = 0; i < 12; ++i) anchors.push_back(random_box(scene_rng));
    for (int i = 0; i < 3; ++i) gts.push_back(random_box(scene_rng));
    auto assign = msb::assign_targets(anchors, gts);
    std::vector<double> logits(12), deltas(48);
    for (auto& v : logits) v = scene_rng.uniform(-2.0, 2.0);
    for (auto& v : deltas) v = scene_rng.uniform(-1.5, 1.5);

    msb::LossOptions opts;
    opts.sample_count = 8;
    auto run = [&] {
        Rng rng(99);  // sampling must be identical across probes
        return msb::detection_loss<double>(logits, deltas, assign, anchors, gts, opts, rng);
    };
    auto base = run();
    std::vector<msb::ParamView<double>> views{
        msb::view_of("logits", logits, base.grad_logits),
        msb::view_of("deltas", deltas, base.grad_deltas)};
    auto loss = [&] { return run().total; };
    auto res = msb::finite_difference_check<double>(loss, views, 1e-5);
    EXPECT_LT(res.max_rel_error, 1e-5) << res.worst_param << "[" << res.worst_index << "]";
}

TEST(Nms, Basics) {
    std::vector<Detection> one{{"img", {0, 0, 10, 10}, 0.7}};
    auto kept = msb::nms(one, 0.5);
    ASSERT_EQ(kept.size(), 1u);

    std::vector<Detection> two{{"img", {0, 0, 10, 10}, 0.9}, {"img", {0, 0, 10, 10}, 0.8}};
    kept = msb::nms(two, 0.5);
    ASSERT_EQ(kept.size(), 1u);
    EXPECT_DOUBLE_EQ(kept[0].score, 0.9);

    kept = msb::nms(two, 0.5, 0.95);
    EXPECT_TRUE(kept.empty());

    std::vector<Detection> sep{{"img", {0, 0, 10, 10}, 0.5}, {"img", {20, 20, 30, 30}, 0.9}};
    kept = msb::nms(sep, 0.5, 0.0, 1);
    ASSERT_EQ(kept.size(), 1u);
    EXPECT_DOUBLE_EQ(kept[0].score, 0.9);
}

TEST(Nms, MatchesExhaustiveOracleOnRandomScenes) {
    Rng rng(67);
    for (int scene = 0; scene < 300; ++scene) {
        std::vector<Detection> dets;
        const int n = rng.uniform_int(1, 10);
        for (int i = 0; i < n; ++i) {
            dets.push_back({"img", random_box(rng, 30.0), rng.uniform(0.0, 1.0)});
        }
        const double thresh = rng.uniform(0.1, 0.7);
        auto got = msb::nms(dets, thresh);
        auto want = nms_oracle(dets, thresh);
        ASSERT_EQ(got.size(), want.size()) << "scene " << scene;
        for (std::size_t i = 0; i < got.size(); ++i) {
            EXPECT_DOUBLE_EQ(got[i].score, want[i].score);
            EXPECT_DOUBLE_EQ(got[i].box.x_min, want[i].box.x_min);
        }
        // kept boxes pairwise below threshold, in non-increasing score order
        for (std::size_t i = 0; i < got.size(); ++i) {
            if (i > 0) EXPECT_GE(got[i - 1].score, got[i].score);
            for (std::size_t j = i + 1; j < got.size(); ++j) {
                EXPECT_LE(msb::iou(got[i].box, got[j].box), thresh);
            }
        }
    }
}

TEST(Nms, InvariantUnderPositiveScoreRescaling) {
    Rng rng(68);
    std::vector<Detection> dets;
    for (int i = 0; i < 12; ++i) {
        dets.push_back({"img", random_box(rng, 25.0), rng.uniform(0.1, 1.0)});
    }
    auto base = msb::nms(dets, 0.4);
    std::vector<Detection> scaled = dets;
    for (auto& d : scaled) d.score *= 7.5;
    auto rescaled = msb::nms(scaled, 0.4);
    ASSERT_EQ(base.size(), rescaled.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        EXPECT_DOUBLE_EQ(base[i].box.x_min, rescaled[i].box.x_min);
        EXPECT_DOUBLE_EQ(base[i].score * 7.5, rescaled[i].score);
    }
}

TEST(DetectionsCsv, RoundTrip) {
    std::vector<Detection> dets{{"test_00001", {1.5, 2.25, 10.0, 12.125}, 0.875},
                                {"test_00002", {0.0, 0.0, 5.0, 5.0}, 0.0625}};
    std::stringstream ss;
    msb::write_detections_csv(ss, dets);
    auto back = msb::read_detections_csv(ss);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].image_id, "test_00001");
    EXPECT_DOUBLE_EQ(back[0].box.y_max, 12.125);
    EXPECT_DOUBLE_EQ(back[1].score, 0.0625);

    std::stringstream bad("test_x,1,2\n");
    EXPECT_THROW(msb::read_detections_csv(bad), msb::IoError);
}
