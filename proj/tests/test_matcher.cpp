#include <catch2/catch_amalgamated.hpp>

#include "pacr/matcher.hpp"
#include "pacr/metrics.hpp"
#include "pacr/scenegen.hpp"
#include "test_helpers.hpp"

using namespace pacr;
using namespace pacr::testing;

namespace {

// Construct-and-recover fixture: the scene pyramid is the CAD pyramid moved
// by the inverse ground truth, with exact one-hot correspondences. Pose
// recovery from it should be exact to solver precision.
struct ConstructedPair {
    FeaturePyramid scene, cad;
    Pose gt;  // scene -> CAD
};

ConstructedPair constructed_pair(Rng& rng, const SyntheticObject& obj) {
    ConstructedPair out;
    auto [centered, offset] = recenter_cad(obj.cloud);
    out.cad = build_pyramid(centered, PyramidConfig::for_diameter(obj.diameter));
    out.gt = random_pose(rng, 0.5);
    const Pose placement = inverse(out.gt);
    out.scene = out.cad;
    out.scene.coarse_points = transform(out.cad.coarse_points, placement);
    out.scene.fine_points = transform(out.cad.fine_points, placement);
    const auto nc = static_cast<Eigen::Index>(out.cad.coarse_points.size());
    const auto nf = static_cast<Eigen::Index>(out.cad.fine_points.size());
    out.cad.coarse_features = Eigen::MatrixXd::Identity(nc, nc);
    out.scene.coarse_features = Eigen::MatrixXd::Identity(nc, nc);
    out.cad.fine_features = Eigen::MatrixXd::Identity(nf, nf);
    out.scene.fine_features = Eigen::MatrixXd::Identity(nf, nf);
    return out;
}

MatcherConfig oracle_config() {
    MatcherConfig cfg;
    cfg.oracle_features = false;  // features are already one-hot by construction
    cfg.refine_steps = 3;
    return cfg;
}

double pose_gap(const Pose& a, const Pose& b) {
    return std::max(rotation_angle(a.rotation, b.rotation),
                    (a.translation - b.translation).norm());
}

}  // namespace

TEST_CASE("initial_pose recovers constructed instances") {
    Rng rng(2);
    auto objects = builtin_objects();
    ConstructedPair pair = constructed_pair(rng, *find_object(objects, "l-bracket"));

    SECTION("one-hot features give the pose to solver precision") {
        // Skips the attention stack entirely: matching is feature-only here.
        auto [pose, corr] = initial_pose(pair.scene, pair.cad, 256);
        REQUIRE(pose_gap(pose, pair.gt) < 1e-6);
        REQUIRE(!corr.empty());
        for (const auto& c : corr.pairs) {
            REQUIRE(c.weight >= 0.0);
            REQUIRE(c.weight <= 1.0);
        }
    }
    SECTION("huge K clamps to the full similarity matrix") {
        const auto n = pair.scene.coarse_points.size() * pair.cad.coarse_points.size();
        auto [pose, corr] = initial_pose(pair.scene, pair.cad, 1 << 30);
        REQUIRE(corr.size() == n);
    }
    SECTION("constant features are uninformative") {
        FeaturePyramid s = pair.scene, c = pair.cad;
        s.coarse_features.setConstant(0.7);
        c.coarse_features.setConstant(0.7);
        REQUIRE_THROWS_WITH(initial_pose(s, c, 64),
                            Catch::Matchers::ContainsSubstring("uninformative features"));
    }
}

TEST_CASE("coarse_refine") {
    Rng rng(21);
    auto objects = builtin_objects();
    ConstructedPair pair = constructed_pair(rng, *find_object(objects, "l-bracket"));
    MatcherConfig cfg = oracle_config();
    cfg.oracle_features = true;  // identity feature updates, weights unused
    AttentionWeights no_weights;

    SECTION("ground-truth init is a fixed point") {
        auto [init, init_corr] = initial_pose(pair.scene, pair.cad, cfg.top_k);
        CoarseRefineResult res = coarse_refine(pair.scene, pair.cad, pair.gt, init_corr,
                                               no_weights, cfg, pair.gt, 0.01);
        REQUIRE(res.trace.size() == static_cast<std::size_t>(cfg.refine_steps) + 1);
        REQUIRE(pose_gap(res.pose, pair.gt) < 1e-6);
        REQUIRE_FALSE(res.warning);
    }
    SECTION("zero steps return the init unchanged with a length-1 trace") {
        auto [init, init_corr] = initial_pose(pair.scene, pair.cad, cfg.top_k);
        MatcherConfig zero = cfg;
        zero.refine_steps = 0;
        CoarseRefineResult res =
            coarse_refine(pair.scene, pair.cad, init, init_corr, no_weights, zero);
        REQUIRE(res.trace.size() == 1);
        REQUIRE(pose_gap(res.pose, init) == 0.0);
    }
    SECTION("residual is non-increasing along the trace") {
        auto [init, init_corr] = initial_pose(pair.scene, pair.cad, cfg.top_k);
        CoarseRefineResult res =
            coarse_refine(pair.scene, pair.cad, init, init_corr, no_weights, cfg);
        for (std::size_t i = 1; i < res.trace.size(); ++i)
            REQUIRE(res.trace.steps[i].residual <= res.trace.steps[i - 1].residual + 1e-12);
    }
}

TEST_CASE("fine_refine hypothesis tie-break picks the lowest pair index") {
    // Two superpoint pairs whose hypotheses disagree (identity vs. a shift)
    // but tie on inlier count; the lower flat index must win.
    FeaturePyramid cad;
    auto add_group = [](FeaturePyramid& pyr, const Eigen::Vector3d& center,
                        std::vector<Eigen::Vector3d> offsets) {
        std::vector<int> group;
        for (const auto& o : offsets) {
            group.push_back(static_cast<int>(pyr.fine_points.size()));
            pyr.fine_points.points.push_back(center + o);
        }
        pyr.coarse_points.points.push_back(center);
        pyr.grouping.push_back(group);
    };
    const std::vector<Eigen::Vector3d> offsets = {
        {0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}};
    add_group(cad, {0, 0, 0}, offsets);
    add_group(cad, {10, 10, 10}, offsets);
    cad.coarse_features = Eigen::MatrixXd::Identity(2, 2);
    cad.fine_features = Eigen::MatrixXd::Identity(10, 10);

    FeaturePyramid scene = cad;
    // Shift the second scene group: its hypothesis will disagree.
    for (int idx : scene.grouping[1]) scene.fine_points.points[idx] += Eigen::Vector3d(0.5, 0, 0);

    CorrespondenceSet coarse_corr;
    coarse_corr.pairs = {{0, 0, 1.0}, {1, 1, 1.0}};

    MatcherConfig cfg;
    cfg.oracle_features = true;
    cfg.refine_steps = 1;
    AttentionWeights no_weights;
    // fine_voxel chosen so tau = 0.15 < the 0.5 shift
    FineRefineResult res = fine_refine(scene, cad, Pose::identity(), coarse_corr, no_weights,
                                       cfg, 0.1);
    // Winner must be the identity hypothesis from pair (0,0).
    REQUIRE(pose_gap(res.pose, Pose::identity()) < 1e-9);
    REQUIRE(res.corr.size() == 5);
}

TEST_CASE("fine_refine skips empty groups and degrades to the coarse pose") {
    FeaturePyramid cad;
    cad.coarse_points.points = {{0, 0, 0}};
    cad.grouping = {{}};
    cad.fine_points.points = {{0, 0, 0}};
    cad.coarse_features = Eigen::MatrixXd::Identity(1, 1);
    cad.fine_features = Eigen::MatrixXd::Identity(1, 1);
    FeaturePyramid scene = cad;

    CorrespondenceSet corr;
    corr.pairs = {{0, 0, 1.0}};
    MatcherConfig cfg;
    cfg.oracle_features = true;
    cfg.refine_steps = 2;
    AttentionWeights no_weights;
    Pose coarse(rot_z(0.2), Eigen::Vector3d(1, 2, 3));
    FineRefineResult res = fine_refine(scene, cad, coarse, corr, no_weights, cfg, 0.1);
    REQUIRE(res.warning);
    REQUIRE(pose_gap(res.pose, coarse) == 0.0);
}

TEST_CASE("estimate end to end with oracle features") {
    auto objects = builtin_objects();
    const SyntheticObject& obj = *find_object(objects, "l-bracket");
    MatcherConfig cfg;
    cfg.oracle_features = true;
    AttentionWeights no_weights;

    SECTION("noiseless single-instance scenes recover ADD below 1% diameter") {
        for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
            auto scene = generate_scene(obj, 1, seed, 0.0, OcclusionMode::depth);
            EstimationResult res =
                estimate(scene[0].visible, obj.cloud, no_weights, cfg, scene[0].gt_pose);
            const double err = add_error(subsample_cloud(obj.cloud, 2048, 3), res.pose,
                                         scene[0].gt_pose);
            REQUIRE(err < 0.01 * obj.diameter);
            for (std::size_t i = 1; i < res.coarse_trace.size(); ++i)
                REQUIRE(res.coarse_trace.steps[i].residual <=
                        res.coarse_trace.steps[i - 1].residual + 1e-12);
        }
    }
    SECTION("oracle estimation is deterministic") {
        auto scene = generate_scene(obj, 1, 42, 0.0, OcclusionMode::depth);
        EstimationResult a =
            estimate(scene[0].visible, obj.cloud, no_weights, cfg, scene[0].gt_pose);
        EstimationResult b =
            estimate(scene[0].visible, obj.cloud, no_weights, cfg, scene[0].gt_pose);
        REQUIRE(a.pose.rotation == b.pose.rotation);
        REQUIRE(a.pose.translation == b.pose.translation);
    }
    SECTION("the reported pose lives in the original CAD frame") {
        // Shift the CAD model far from the origin; the returned pose must map
        // scene points onto the shifted model.
        PointCloud cad_shifted = obj.cloud;
        const Eigen::Vector3d shift(5, -3, 2);
        for (auto& p : cad_shifted.points) p += shift;
        auto scene = generate_scene(obj, 1, 7, 0.0, OcclusionMode::depth);
        Pose gt_shifted(scene[0].gt_pose.rotation, scene[0].gt_pose.translation + shift);
        EstimationResult res =
            estimate(scene[0].visible, cad_shifted, no_weights, cfg, gt_shifted);
        double worst = 0.0;
        KdTree tree(cad_shifted);
        for (const auto& p : scene[0].visible.points)
            worst = std::max(worst, tree.nearest(res.pose.apply(p)).second);
        REQUIRE(worst < 0.02 * obj.diameter);
    }
    SECTION("empty inputs raise a structured error") {
        REQUIRE_THROWS_WITH(estimate(PointCloud{}, obj.cloud, no_weights, cfg),
                            Catch::Matchers::ContainsSubstring("empty input"));
    }
    SECTION("60% occlusion still returns a valid pose") {
        auto scene = generate_scene(obj, 1, 13, 0.0, OcclusionMode::half, 1.6, 0.6);
        EstimationResult res =
            estimate(scene[0].visible, obj.cloud, no_weights, cfg, scene[0].gt_pose);
        REQUIRE(is_rotation(res.pose.rotation, 1e-9));
    }
}

TEST_CASE("correspondences emitted by the pipeline are valid") {
    Rng rng(88);
    auto objects = builtin_objects();
    ConstructedPair pair = constructed_pair(rng, *find_object(objects, "hex-nut"));
    MatcherConfig cfg;
    cfg.oracle_features = true;
    AttentionWeights no_weights;
    auto [init, init_corr] = initial_pose(pair.scene, pair.cad, cfg.top_k);
    CoarseRefineResult res =
        coarse_refine(pair.scene, pair.cad, init, init_corr, no_weights, cfg);
    for (const auto& step : res.trace.steps)
        for (const auto& c : step.corr.pairs) {
            REQUIRE(c.scene_index >= 0);
            REQUIRE(c.scene_index < static_cast<int>(pair.scene.coarse_points.size()));
            REQUIRE(c.cad_index >= 0);
            REQUIRE(c.cad_index < static_cast<int>(pair.cad.coarse_points.size()));
            REQUIRE(c.weight >= 0.0);
            REQUIRE(c.weight <= 1.0);
        }
}
