#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "pacr/attention.hpp"
#include "pacr/error.hpp"
#include "pacr/geometry.hpp"
#include "pacr/kdtree.hpp"
#include "pacr/matcher.hpp"
#include "pacr/rng.hpp"
#include "pacr/scenegen.hpp"

namespace pacr {

/// Mean displacement of CAD model points between the predicted and true poses.
/// Poses follow the solver convention (scene -> CAD); the metric applies the
/// object -> camera mapping, i.e. their inverses, internally.
inline double add_error(const PointCloud& cad, const Pose& pose_pred, const Pose& pose_gt) {
    require(!cad.empty(), "empty cloud");
    const Pose pred = inverse(pose_pred);
    const Pose gt = inverse(pose_gt);
    double acc = 0.0;
    for (const auto& q : cad.points) acc += (pred.apply(q) - gt.apply(q)).norm();
    return acc / static_cast<double>(cad.size());
}

/// Symmetric variant: nearest-point matching against the ground-truth-posed
/// cloud (exact KD-tree search).
inline double adds_error(const PointCloud& cad, const Pose& pose_pred, const Pose& pose_gt) {
    require(!cad.empty(), "empty cloud");
    const Pose pred = inverse(pose_pred);
    const Pose gt = inverse(pose_gt);
    PointCloud gt_cloud;
    gt_cloud.points.reserve(cad.size());
    for (const auto& q : cad.points) gt_cloud.points.push_back(gt.apply(q));
    KdTree tree(gt_cloud);
    double acc = 0.0;
    for (const auto& q : cad.points) acc += tree.nearest(pred.apply(q)).second;
    return acc / static_cast<double>(cad.size());
}

/// Seeded uniform subsample without replacement (partial Fisher-Yates), used
/// to cap evaluation clouds. Returns the input when it is already small.
inline PointCloud subsample_cloud(const PointCloud& cloud, std::size_t cap, std::uint64_t seed) {
    if (cloud.size() <= cap) return cloud;
    std::vector<int> idx(cloud.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = Rng::stream(seed, "eval.subsample");
    for (std::size_t i = 0; i < cap; ++i) {
        const auto j = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(i),
                            static_cast<std::int64_t>(idx.size()) - 1));
        std::swap(idx[i], idx[j]);
    }
    PointCloud out;
    out.points.reserve(cap);
    for (std::size_t i = 0; i < cap; ++i) out.points.push_back(cloud.points[idx[i]]);
    return out;
}

inline constexpr std::size_t kEvalCloudCap = 2048;
inline constexpr double kRecallThreshold = 0.1;  // fraction of the object diameter

/// Per-instance evaluation entry.
struct InstanceScore {
    std::string object;
    int instance_id = 0;
    double error = std::numeric_limits<double>::infinity();  // ADD or ADD-S, meters
    double diameter = 0.0;
    bool symmetric = false;
    bool correct = false;
    bool failed = false;       // estimation raised a structured error
    double runtime_s = 0.0;    // timing, excluded from determinism comparisons
};

struct EvalReport {
    std::string variant;  // no-PE | coords-PE | coords-PE-refine | directional-PE | ...
    std::vector<InstanceScore> instances;
};

/// ADD(-S) with the Table-I convention: symmetric objects score with ADD-S.
inline double pose_error(const PointCloud& eval_cad, const Pose& pred, const Pose& gt,
                         bool symmetric) {
    return symmetric ? adds_error(eval_cad, pred, gt) : add_error(eval_cad, pred, gt);
}

/// Average recall at the 10%-diameter threshold: per object and mean over
/// objects present in the report.
struct RecallSummary {
    std::map<std::string, double> per_object;  // percent
    double mean = 0.0;                         // percent, mean over objects
};

inline RecallSummary average_recall(const EvalReport& report) {
    require(!report.instances.empty(), "empty report");
    std::map<std::string, std::pair<int, int>> counts;  // object -> (correct, total)
    for (const auto& inst : report.instances) {
        auto& c = counts[inst.object];
        c.second += 1;
        if (inst.correct) c.first += 1;
    }
    RecallSummary out;
    double sum = 0.0;
    for (const auto& [name, c] : counts) {
        const double ar = 100.0 * static_cast<double>(c.first) / static_cast<double>(c.second);
        out.per_object[name] = ar;
        sum += ar;
    }
    out.mean = sum / static_cast<double>(counts.size());
    return out;
}

/// One evaluation case: a scene instance with its ground truth.
struct EvalCase {
    std::string object;
    int instance_id = 0;
    PointCloud scene;
    Pose gt;  // scene -> CAD, original frame
};

/// A pipeline variant under evaluation: label, config deltas and its weights.
struct AblationVariant {
    std::string label;
    MatcherConfig config;
    AttentionWeights weights;
};

/// Evaluates one variant over a suite. CAD pyramids are built once per object.
inline EvalReport evaluate_variant(const std::vector<SyntheticObject>& objects,
                                   const std::vector<EvalCase>& suite,
                                   const AblationVariant& variant,
                                   std::uint64_t subsample_seed = 91) {
    struct Prepared {
        const SyntheticObject* object;
        FeaturePyramid cad_pyr;
        PointCloud cad_centered;
        Eigen::Vector3d offset;
        PointCloud eval_cloud;
    };
    std::map<std::string, Prepared> prepared;
    for (const auto& obj : objects) {
        Prepared p;
        p.object = &obj;
        auto [centered, offset] = recenter_cad(obj.cloud);
        p.offset = offset;
        p.cad_pyr = build_pyramid(centered, variant.config.pyramid_for(obj.diameter));
        p.cad_centered = std::move(centered);
        p.eval_cloud = subsample_cloud(obj.cloud, kEvalCloudCap, subsample_seed);
        prepared.emplace(obj.name, std::move(p));
    }

    EvalReport report;
    report.variant = variant.label;
    for (const auto& ec : suite) {
        auto it = prepared.find(ec.object);
        require(it != prepared.end(), "unknown object in suite: " + ec.object);
        const Prepared& p = it->second;

        InstanceScore score;
        score.object = ec.object;
        score.instance_id = ec.instance_id;
        score.diameter = p.object->diameter;
        score.symmetric = p.object->symmetry != Symmetry::none;

        const auto t0 = std::chrono::steady_clock::now();
        try {
            FeaturePyramid scene_pyr =
                build_pyramid(ec.scene, variant.config.pyramid_for(p.object->diameter));
            std::optional<Pose> gt;
            if (variant.config.oracle_features) gt = ec.gt;
            EstimationResult est =
                estimate_with_pyramids(scene_pyr, p.cad_pyr, p.offset, p.object->diameter,
                                       variant.weights, variant.config, gt);
            score.error = pose_error(p.eval_cloud, est.pose, ec.gt, score.symmetric);
            score.correct = score.error < kRecallThreshold * score.diameter;
        } catch (const Error&) {
            score.failed = true;
        }
        score.runtime_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.instances.push_back(std::move(score));
    }
    return report;
}

/// Runs every variant over the same suite; rows with missing weights (label
/// present, zero layers, non-oracle) are skipped and reported absent.
inline std::vector<EvalReport> run_ablation(const std::vector<SyntheticObject>& objects,
                                            const std::vector<EvalCase>& suite,
                                            const std::vector<AblationVariant>& variants,
                                            std::uint64_t subsample_seed = 91) {
    std::vector<EvalReport> reports;
    for (const auto& v : variants) {
        if (!v.config.oracle_features && v.weights.layer_count() < v.config.refine_steps) {
            EvalReport absent;
            absent.variant = v.label + " (absent)";
            reports.push_back(std::move(absent));
            continue;
        }
        reports.push_back(evaluate_variant(objects, suite, v, subsample_seed));
    }
    return reports;
}

}  // namespace pacr
