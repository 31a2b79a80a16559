#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "pacr/attention.hpp"
#include "pacr/error.hpp"
#include "pacr/features.hpp"
#include "pacr/geometry.hpp"
#include "pacr/kdtree.hpp"
#include "pacr/posenc.hpp"
#include "pacr/solver.hpp"

namespace pacr {

/// Positional information fed to the attention layers. `directional` is the
/// full method (unit vectors + multiplicative reweighting + gate); `coords`
/// embeds raw shared-frame coordinates without reweighting; `none` disables
/// positional input entirely (plain cross-attention baseline).
enum class PositionalMode { none, coords, directional };

inline std::string to_string(PositionalMode m) {
    switch (m) {
        case PositionalMode::none: return "none";
        case PositionalMode::coords: return "coords";
        case PositionalMode::directional: return "directional";
    }
    return "directional";
}

struct MatcherConfig {
    int top_k = 256;
    int refine_steps = 3;            // N, also the attention stack depth
    double gate_threshold = 0.2;     // positional gate on rematching
    bool use_position_gate = true;
    double inlier_tau_factor = 1.5;  // tau_inlier = factor * fine voxel
    double eps_degenerate = 1e-6;    // zero-vector threshold for encodings
    bool squared_norm_encoding = false;
    ReweightMode reweight_mode = ReweightMode::logits;
    PositionalMode positional = PositionalMode::directional;
    bool alternate_refinement = true;  // re-solve the pose between layers
    bool pac_on_superpoints = true;
    bool pac_on_points = true;
    bool oracle_features = false;  // ground-truth indicator features, no learned updates
    double fine_voxel_divisor = 64.0;
    double coarse_voxel_divisor = 16.0;

    PyramidConfig pyramid_for(double diameter) const {
        PyramidConfig cfg;
        cfg.fine_voxel = diameter / fine_voxel_divisor;
        cfg.coarse_voxel = diameter / coarse_voxel_divisor;
        return cfg;
    }
};

/// Snapshot of one refinement step: the pose after the step, the matches that
/// produced it, and quality numbers (inlier precision only when ground truth
/// is supplied).
struct RefinementStep {
    Pose pose;
    CorrespondenceSet corr;
    double residual = std::numeric_limits<double>::quiet_NaN();
    double inlier_precision = std::numeric_limits<double>::quiet_NaN();
};

struct RefinementTrace {
    std::vector<RefinementStep> steps;

    std::size_t size() const { return steps.size(); }
};

struct EstimateDiagnostics {
    int scene_coarse = 0, cad_coarse = 0;
    int scene_fine = 0, cad_fine = 0;
    std::vector<std::string> warnings;
};

/// Wall-clock numbers, kept apart from the deterministic payload.
struct EstimateTiming {
    double pyramid_s = 0.0;
    double coarse_s = 0.0;
    double fine_s = 0.0;
    double total_s = 0.0;
};

struct EstimationResult {
    Pose pose;  // scene -> CAD in the original (uncentered) CAD frame
    RefinementTrace coarse_trace;
    RefinementTrace fine_trace;
    CorrespondenceSet fine_corr;
    EstimateDiagnostics diagnostics;
    EstimateTiming timing;
};

namespace detail {

inline Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd& m) {
    Eigen::MatrixXd out = m;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        const double n = out.row(i).norm();
        if (n > 0.0) out.row(i) /= n;
    }
    return out;
}

/// Top-K entries of the similarity matrix by (similarity desc, flat index asc),
/// optionally excluding pairs whose positional alignment falls below the gate.
inline CorrespondenceSet top_k_matches(const Eigen::MatrixXd& similarity, int k, CorrLevel level,
                                       const Eigen::MatrixXd* gate = nullptr,
                                       double gate_threshold = 0.0) {
    const Eigen::Index rows = similarity.rows(), cols = similarity.cols();
    std::vector<std::int64_t> flat;
    flat.reserve(rows * cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
            if (gate && (*gate)(i, j) < gate_threshold) continue;
            flat.push_back(i * cols + j);
        }
    const auto kk = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), flat.size());
    auto better = [&](std::int64_t a, std::int64_t b) {
        const double sa = similarity(a / cols, a % cols), sb = similarity(b / cols, b % cols);
        return sa > sb || (sa == sb && a < b);
    };
    std::nth_element(flat.begin(), flat.begin() + kk, flat.end(), better);
    flat.resize(kk);
    std::sort(flat.begin(), flat.end(), better);

    CorrespondenceSet corr;
    corr.level = level;
    corr.pairs.reserve(kk);
    for (std::int64_t f : flat) {
        const int i = static_cast<int>(f / cols), j = static_cast<int>(f % cols);
        corr.pairs.push_back({i, j, std::clamp(similarity(i, j), 0.0, 1.0)});
    }
    return corr;
}

inline double inlier_precision(const CorrespondenceSet& corr, const PointCloud& scene,
                               const PointCloud& cad, const Pose& gt, double tau) {
    if (corr.empty()) return std::numeric_limits<double>::quiet_NaN();
    int good = 0;
    for (const auto& c : corr.pairs)
        if ((gt.apply(scene.points[c.scene_index]) - cad.points[c.cad_index]).norm() < tau)
            ++good;
    return static_cast<double>(good) / static_cast<double>(corr.size());
}

/// Residual of a trace step; NaN instead of an error when the step's matches
/// carry no usable weight.
inline double safe_residual(const PointCloud& scene, const PointCloud& cad,
                            const CorrespondenceSet& corr, const Pose& pose) {
    double total = 0.0;
    for (const auto& c : corr.pairs) total += c.weight;
    if (corr.empty() || total <= 0.0) return std::numeric_limits<double>::quiet_NaN();
    return residual_rmse(scene, cad, corr, pose);
}

inline std::pair<Eigen::MatrixX3d, Eigen::MatrixX3d> positional_encodings(
    const PointCloud& scene_pts, const PointCloud& cad_pts, const Pose& current_scene_to_cad,
    const MatcherConfig& cfg) {
    // The encodings live in the scene frame, so they need the CAD -> scene
    // alignment: the inverse of the running scene -> CAD estimate.
    const Pose align_pose = inverse(current_scene_to_cad);
    switch (cfg.positional) {
        case PositionalMode::none:
            return {Eigen::MatrixX3d::Zero(scene_pts.size(), 3),
                    Eigen::MatrixX3d::Zero(cad_pts.size(), 3)};
        case PositionalMode::coords:
            return {scene_offsets(scene_pts, align_pose), cad_offsets(cad_pts, align_pose)};
        case PositionalMode::directional:
        default:
            return {encode_scene(scene_pts, align_pose, cfg.eps_degenerate,
                                 cfg.squared_norm_encoding)
                        .vectors,
                    encode_cad(cad_pts, align_pose, cfg.eps_degenerate,
                               cfg.squared_norm_encoding)
                        .vectors};
    }
}

}  // namespace detail

/// Replaces pyramid descriptors with ground-truth indicator features: each CAD
/// point carries its own one-hot vector, each scene point the one-hot of its
/// nearest CAD point under the true pose. Isolates the geometric pipeline from
/// feature quality in construct-and-recover tests.
inline void assign_oracle_features(FeaturePyramid& scene, FeaturePyramid& cad,
                                   const Pose& gt_scene_to_cad) {
    auto assign = [&](const PointCloud& scene_pts, const PointCloud& cad_pts,
                      Eigen::MatrixXd& scene_f, Eigen::MatrixXd& cad_f) {
        const auto dim = static_cast<Eigen::Index>(cad_pts.size());
        cad_f = Eigen::MatrixXd::Identity(dim, dim);
        scene_f = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(scene_pts.size()), dim);
        KdTree tree(cad_pts);
        for (std::size_t i = 0; i < scene_pts.size(); ++i) {
            const auto [j, dist] = tree.nearest(gt_scene_to_cad.apply(scene_pts.points[i]));
            scene_f(static_cast<Eigen::Index>(i), j) = 1.0;
        }
    };
    assign(scene.coarse_points, cad.coarse_points, scene.coarse_features, cad.coarse_features);
    assign(scene.fine_points, cad.fine_points, scene.fine_features, cad.fine_features);
}

/// Initial pose from feature-only matching: cosine similarity of coarse
/// descriptors, top-K selection, weighted SVD.
inline std::pair<Pose, CorrespondenceSet> initial_pose(const FeaturePyramid& scene_pyr,
                                                       const FeaturePyramid& cad_pyr, int k) {
    require(!scene_pyr.coarse_points.empty() && !cad_pyr.coarse_points.empty(),
            "empty pyramid");
    const Eigen::MatrixXd sim = detail::normalize_rows(scene_pyr.coarse_features) *
                                detail::normalize_rows(cad_pyr.coarse_features).transpose();
    require(sim.maxCoeff() - sim.minCoeff() > 1e-12, "uninformative features");
    CorrespondenceSet corr = detail::top_k_matches(sim, k, CorrLevel::coarse);
    Pose pose = wsvd_solve(scene_pyr.coarse_points, cad_pyr.coarse_points, corr);
    return {pose, corr};
}

struct CoarseRefineResult {
    Pose pose;
    CorrespondenceSet corr;
    RefinementTrace trace;
    bool warning = false;
};

/// N-step alternate refinement at the coarse level: re-encode positions under
/// the current pose, run that step's attention layer, rematch (position-gated
/// in directional mode) and re-solve. A solver failure keeps the last valid
/// pose and raises a warning instead of aborting.
inline CoarseRefineResult coarse_refine(const FeaturePyramid& scene_pyr,
                                        const FeaturePyramid& cad_pyr, const Pose& init,
                                        const CorrespondenceSet& init_corr,
                                        const AttentionWeights& weights,
                                        const MatcherConfig& cfg,
                                        const std::optional<Pose>& gt = std::nullopt,
                                        double precision_tau = 0.0) {
    const PointCloud& ps = scene_pyr.coarse_points;
    const PointCloud& po = cad_pyr.coarse_points;
    const int n_steps = cfg.refine_steps;
    if (!cfg.oracle_features && n_steps > 0)
        require(weights.layer_count() >= n_steps, "not enough attention layers");

    CoarseRefineResult res;
    res.pose = init;
    res.corr = init_corr;

    auto record = [&](const Pose& pose, const CorrespondenceSet& corr) {
        RefinementStep step;
        step.pose = pose;
        step.corr = corr;
        step.residual = detail::safe_residual(ps, po, corr, pose);
        if (gt && !corr.empty())
            step.inlier_precision = detail::inlier_precision(corr, ps, po, *gt, precision_tau);
        res.trace.steps.push_back(std::move(step));
    };
    record(res.pose, res.corr);

    Eigen::MatrixXd feat_s = scene_pyr.coarse_features;
    Eigen::MatrixXd feat_o = cad_pyr.coarse_features;

    for (int step = 1; step <= n_steps; ++step) {
        auto [enc_s, enc_o] = detail::positional_encodings(ps, po, res.pose, cfg);

        Eigen::MatrixXd align;
        const bool use_direction =
            cfg.pac_on_superpoints && cfg.positional == PositionalMode::directional;
        if (use_direction) {
            DirectionalEncoding ds{enc_s}, dc{enc_o};
            align = cosine_alignment(ds, dc);
        } else {
            align = Eigen::MatrixXd::Ones(ps.size(), po.size());
        }

        if (!cfg.oracle_features) {
            const AttentionLayer& layer = weights.layers[step - 1];
            const bool embed = cfg.pac_on_superpoints && cfg.positional != PositionalMode::none;
            EmbeddedFeatures s2c_src{feat_s, embed ? embed_directions(enc_s, layer.scene_to_cad)
                                                   : Eigen::MatrixXd::Zero(feat_s.rows(),
                                                                           feat_s.cols())};
            EmbeddedFeatures s2c_dst{feat_o, embed ? embed_directions(enc_o, layer.scene_to_cad)
                                                   : Eigen::MatrixXd::Zero(feat_o.rows(),
                                                                           feat_o.cols())};
            EmbeddedFeatures c2s_src{feat_o, embed ? embed_directions(enc_o, layer.cad_to_scene)
                                                   : Eigen::MatrixXd::Zero(feat_o.rows(),
                                                                           feat_o.cols())};
            EmbeddedFeatures c2s_dst{feat_s, embed ? embed_directions(enc_s, layer.cad_to_scene)
                                                   : Eigen::MatrixXd::Zero(feat_s.rows(),
                                                                           feat_s.cols())};
            Eigen::MatrixXd new_s = paca_forward(s2c_src, s2c_dst, align, layer.scene_to_cad,
                                                 cfg.reweight_mode);
            Eigen::MatrixXd new_o = paca_forward(c2s_src, c2s_dst, align.transpose().eval(),
                                                 layer.cad_to_scene, cfg.reweight_mode);
            feat_s = std::move(new_s);
            feat_o = std::move(new_o);
        }

        // Enhanced-feature cosine mapped affinely into [0,1]: monotone in the
        // similarity, so the ranking is unchanged, but solver weights stay
        // strictly positive for confident matches even when the learned
        // features are anti-correlated on average.
        const Eigen::MatrixXd sim =
            ((detail::normalize_rows(feat_s) * detail::normalize_rows(feat_o).transpose())
                 .array() *
                 0.5 +
             0.5)
                .matrix();
        const bool gated = use_direction && cfg.use_position_gate;
        CorrespondenceSet corr = detail::top_k_matches(sim, cfg.top_k, CorrLevel::coarse,
                                                       gated ? &align : nullptr,
                                                       cfg.gate_threshold);

        if (cfg.alternate_refinement || step == n_steps) {
            try {
                res.pose = wsvd_solve(ps, po, corr);
                res.corr = corr;
            } catch (const Error&) {
                res.warning = true;  // keep the last valid pose
            }
        }
        record(res.pose, corr);
    }
    return res;
}

struct FineRefineResult {
    Pose pose;
    CorrespondenceSet corr;
    RefinementTrace trace;
    bool warning = false;
};

/// Fine-level refinement with hypothesis-and-verify: per matched superpoint
/// pair, mutual-nearest-neighbor matching of (position-updated) fine features
/// yields local correspondences and a pose hypothesis; the hypothesis with the
/// most inliers over the union of local matches wins, ties resolving to the
/// lowest superpoint-pair flat index. Falls back to the coarse pose when no
/// hypothesis reaches 3 inliers.
inline FineRefineResult fine_refine(const FeaturePyramid& scene_pyr,
                                    const FeaturePyramid& cad_pyr, const Pose& coarse_pose,
                                    const CorrespondenceSet& coarse_corr,
                                    const AttentionWeights& weights, const MatcherConfig& cfg,
                                    double fine_voxel,
                                    const std::optional<Pose>& gt = std::nullopt) {
    require(!coarse_corr.empty(), "empty coarse correspondence");
    const PointCloud& ps = scene_pyr.fine_points;
    const PointCloud& po = cad_pyr.fine_points;
    const double tau = cfg.inlier_tau_factor * fine_voxel;
    const int n_steps = cfg.refine_steps;

    // Hypothesis order: ascending superpoint-pair flat index (tie-break rule).
    std::vector<Correspondence> pairs = coarse_corr.pairs;
    const auto n_cad_coarse = static_cast<std::int64_t>(cad_pyr.coarse_points.size());
    std::sort(pairs.begin(), pairs.end(), [&](const Correspondence& a, const Correspondence& b) {
        return a.scene_index * n_cad_coarse + a.cad_index <
               b.scene_index * n_cad_coarse + b.cad_index;
    });

    FineRefineResult res;
    res.pose = coarse_pose;
    res.corr.level = CorrLevel::fine;

    auto record = [&](const Pose& pose, const CorrespondenceSet& corr) {
        RefinementStep step;
        step.pose = pose;
        step.corr = corr;
        step.residual = detail::safe_residual(ps, po, corr, pose);
        if (gt && !corr.empty())
            step.inlier_precision = detail::inlier_precision(corr, ps, po, *gt, tau);
        res.trace.steps.push_back(std::move(step));
    };
    record(res.pose, res.corr);

    Eigen::MatrixXd feat_s = scene_pyr.fine_features;
    Eigen::MatrixXd feat_o = cad_pyr.fine_features;
    if (!cfg.oracle_features && cfg.pac_on_points &&
        cfg.positional != PositionalMode::none && n_steps > 0)
        require(weights.layer_count() >= n_steps, "not enough attention layers");

    for (int step = 1; step <= n_steps; ++step) {
        if (!cfg.oracle_features && cfg.pac_on_points &&
            cfg.positional != PositionalMode::none) {
            auto [enc_s, enc_o] = detail::positional_encodings(ps, po, res.pose, cfg);
            const AttentionLayer& layer = weights.layers[step - 1];
            feat_s = fine_forward(feat_s, embed_directions(enc_s, layer.fine_scene),
                                  layer.fine_scene);
            feat_o = fine_forward(feat_o, embed_directions(enc_o, layer.fine_cad),
                                  layer.fine_cad);
        }
        const Eigen::MatrixXd nf_s = detail::normalize_rows(feat_s);
        const Eigen::MatrixXd nf_o = detail::normalize_rows(feat_o);

        // Local mutual-nearest-neighbor correspondences per superpoint pair.
        std::vector<CorrespondenceSet> local_sets(pairs.size());
        CorrespondenceSet all;
        all.level = CorrLevel::fine;
        for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
            const auto& sp = pairs[pi];
            const auto& sidx = scene_pyr.grouping[sp.scene_index];
            const auto& cidx = cad_pyr.grouping[sp.cad_index];
            if (sidx.empty() || cidx.empty()) continue;  // pair contributes nothing
            Eigen::MatrixXd sim(sidx.size(), cidx.size());
            for (std::size_t u = 0; u < sidx.size(); ++u)
                for (std::size_t v = 0; v < cidx.size(); ++v)
                    sim(u, v) = nf_s.row(sidx[u]).dot(nf_o.row(cidx[v])) * 0.5 + 0.5;
            for (std::size_t u = 0; u < sidx.size(); ++u) {
                Eigen::Index best_v;
                sim.row(u).maxCoeff(&best_v);
                Eigen::Index best_u;
                sim.col(best_v).maxCoeff(&best_u);
                if (static_cast<std::size_t>(best_u) == u) {
                    Correspondence c{sidx[u], cidx[best_v],
                                     std::clamp(sim(u, best_v), 0.0, 1.0)};
                    local_sets[pi].pairs.push_back(c);
                    all.pairs.push_back(c);
                }
            }
        }

        // Hypothesis-and-verify over the union of local matches.
        int best_inliers = -1;
        Pose best_hyp;
        for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
            if (local_sets[pi].size() < 3) continue;
            Pose hyp;
            try {
                hyp = wsvd_solve(ps, po, local_sets[pi]);
            } catch (const Error&) {
                continue;
            }
            int inliers = 0;
            for (const auto& c : all.pairs)
                if ((hyp.apply(ps.points[c.scene_index]) - po.points[c.cad_index]).norm() < tau)
                    ++inliers;
            if (inliers > best_inliers) {
                best_inliers = inliers;
                best_hyp = hyp;
            }
        }

        if (best_inliers < 3) {
            res.warning = true;  // keep the current pose for this step
            record(res.pose, res.corr);
            continue;
        }

        CorrespondenceSet winners;
        winners.level = CorrLevel::fine;
        for (const auto& c : all.pairs)
            if ((best_hyp.apply(ps.points[c.scene_index]) - po.points[c.cad_index]).norm() < tau)
                winners.pairs.push_back(c);
        try {
            res.pose = wsvd_solve(ps, po, winners);
            res.corr = winners;
        } catch (const Error&) {
            res.warning = true;
        }
        record(res.pose, res.corr);
    }
    return res;
}

/// Full pipeline on prebuilt pyramids (CAD already recentered). `offset` is
/// the recentering offset that restores the original CAD frame; ground truth,
/// when given, is expressed in the original frame.
inline EstimationResult estimate_with_pyramids(const FeaturePyramid& scene_pyr,
                                               FeaturePyramid cad_pyr,
                                               const Eigen::Vector3d& offset, double diameter,
                                               const AttentionWeights& weights,
                                               const MatcherConfig& cfg,
                                               const std::optional<Pose>& gt_original =
                                                   std::nullopt) {
    const PyramidConfig pyr_cfg = cfg.pyramid_for(diameter);
    std::optional<Pose> gt;
    if (gt_original) gt = Pose(gt_original->rotation, gt_original->translation - offset);

    FeaturePyramid scene = scene_pyr;
    if (cfg.oracle_features) {
        require(gt.has_value(), "oracle features require ground truth");
        assign_oracle_features(scene, cad_pyr, *gt);
    }

    EstimationResult result;
    result.diagnostics.scene_coarse = static_cast<int>(scene.coarse_points.size());
    result.diagnostics.cad_coarse = static_cast<int>(cad_pyr.coarse_points.size());
    result.diagnostics.scene_fine = static_cast<int>(scene.fine_points.size());
    result.diagnostics.cad_fine = static_cast<int>(cad_pyr.fine_points.size());

    Pose init;
    CorrespondenceSet init_corr;
    try {
        std::tie(init, init_corr) = initial_pose(scene, cad_pyr, cfg.top_k);
    } catch (const Error& e) {
        throw Error(std::string("initial_pose: ") + e.what());
    }

    CoarseRefineResult coarse;
    try {
        coarse = coarse_refine(scene, cad_pyr, init, init_corr, weights, cfg, gt,
                               pyr_cfg.coarse_voxel);
    } catch (const Error& e) {
        throw Error(std::string("coarse_refine: ") + e.what());
    }
    if (coarse.warning) result.diagnostics.warnings.push_back("coarse solver degraded");

    FineRefineResult fine;
    try {
        fine = fine_refine(scene, cad_pyr, coarse.pose, coarse.corr, weights, cfg,
                           pyr_cfg.fine_voxel, gt);
    } catch (const Error& e) {
        throw Error(std::string("fine_refine: ") + e.what());
    }
    if (fine.warning) result.diagnostics.warnings.push_back("fine hypothesis fallback");

    // Restore the original CAD frame: q_orig = q_centered + offset.
    auto restore = [&](Pose& p) { p.translation += offset; };
    result.pose = fine.pose;
    restore(result.pose);
    result.coarse_trace = std::move(coarse.trace);
    result.fine_trace = std::move(fine.trace);
    for (auto& s : result.coarse_trace.steps) restore(s.pose);
    for (auto& s : result.fine_trace.steps) restore(s.pose);
    result.fine_corr = std::move(fine.corr);
    return result;
}

/// End-to-end estimation from raw clouds: recenter the CAD, build pyramids,
/// run initial matching, coarse alternate refinement and fine
/// hypothesis-and-verify, and report the pose in the original CAD frame.
inline EstimationResult estimate(const PointCloud& scene_cloud, const PointCloud& cad_cloud,
                                 const AttentionWeights& weights, const MatcherConfig& cfg,
                                 const std::optional<Pose>& gt_original = std::nullopt) {
    require(!scene_cloud.empty() && !cad_cloud.empty(), "empty input");
    auto [cad_centered, offset] = recenter_cad(cad_cloud);
    const double diameter = cloud_diameter(cad_centered);
    const PyramidConfig pyr_cfg = cfg.pyramid_for(diameter);
    FeaturePyramid scene_pyr, cad_pyr;
    try {
        scene_pyr = build_pyramid(scene_cloud, pyr_cfg);
        cad_pyr = build_pyramid(cad_centered, pyr_cfg);
    } catch (const Error& e) {
        throw Error(std::string("build_pyramid: ") + e.what());
    }
    return estimate_with_pyramids(scene_pyr, std::move(cad_pyr), offset, diameter, weights, cfg,
                                  gt_original);
}

}  // namespace pacr
