#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "pacr/attention.hpp"
#include "pacr/error.hpp"
#include "pacr/matcher.hpp"
#include "pacr/rng.hpp"
#include "pacr/scenegen.hpp"
#include "pacr/solver.hpp"

namespace pacr {

struct TrainConfig {
    std::uint64_t seed = 7;
    double learning_rate = 1e-3;
    int steps = 2000;
    int batch_size = 4;
    double momentum = 0.9;
    // Overlap-aware circle loss.
    double delta_pos = 0.1;
    double delta_neg = 1.4;
    double gamma_circle = 10.0;
    double overlap_threshold = 0.1;
    double intermediate_loss_weight = 1.0;  // circle loss weight applied at every layer
    double fine_loss_weight = 1.0;          // lambda for the fine-level NLL loss
    int max_fine_pairs = 8;                 // supervised superpoint pairs per instance

    void validate() const {
        require(learning_rate > 0.0, "learning rate must be positive");
        require(delta_pos < delta_neg, "circle margins must satisfy pos < neg");
        require(steps >= 0 && batch_size >= 1, "invalid step/batch configuration");
    }
};

/// Overlap-aware circle loss over one feature pair set. Positives are pairs
/// with overlap above the threshold, weighted by their overlap; anchors with
/// no positive pair are skipped. Returns exact gradients for both feature
/// matrices.
struct CircleLossResult {
    double loss = 0.0;
    Eigen::MatrixXd d_feat_s, d_feat_o;
    int anchors = 0;
};

inline CircleLossResult circle_loss(const Eigen::MatrixXd& feat_s, const Eigen::MatrixXd& feat_o,
                                    const Eigen::MatrixXd& overlap, const TrainConfig& cfg) {
    require(overlap.rows() == feat_s.rows() && overlap.cols() == feat_o.rows(),
            "shape mismatch: overlap matrix");
    CircleLossResult res;
    res.d_feat_s = Eigen::MatrixXd::Zero(feat_s.rows(), feat_s.cols());
    res.d_feat_o = Eigen::MatrixXd::Zero(feat_o.rows(), feat_o.cols());

    const Eigen::Index n = feat_s.rows(), m = feat_o.rows();

    // Pairwise distances via the Gram expansion.
    Eigen::MatrixXd d2 = (-2.0 * feat_s * feat_o.transpose());
    d2.colwise() += feat_s.rowwise().squaredNorm();
    d2.rowwise() += feat_o.rowwise().squaredNorm().transpose();
    const Eigen::ArrayXXd dist = d2.array().max(0.0).sqrt();

    const Eigen::ArrayXXd pos_mask =
        (overlap.array() > cfg.overlap_threshold).cast<double>();
    const Eigen::ArrayXXd neg_mask = 1.0 - pos_mask;
    // Saturating terms, masked after the exponential.
    const Eigen::ArrayXXd exp_pos =
        (cfg.gamma_circle * (dist - cfg.delta_pos) * overlap.array()).exp() * pos_mask;
    const Eigen::ArrayXXd exp_neg =
        (cfg.gamma_circle * (cfg.delta_neg - dist)).exp() * neg_mask;

    const Eigen::ArrayXd row_pos = exp_pos.rowwise().sum();
    const Eigen::ArrayXd row_neg = exp_neg.rowwise().sum();
    const Eigen::ArrayXd col_pos = exp_pos.colwise().sum().transpose();
    const Eigen::ArrayXd col_neg = exp_neg.colwise().sum().transpose();
    const Eigen::ArrayXd row_has_pos = (pos_mask.rowwise().maxCoeff() > 0.0).cast<double>();
    const Eigen::ArrayXd col_has_pos =
        (pos_mask.colwise().maxCoeff() > 0.0).cast<double>().transpose();

    const int counted =
        static_cast<int>(row_has_pos.sum()) + static_cast<int>(col_has_pos.sum());
    if (counted == 0) return res;  // no positive pair anywhere: loss 0
    const double inv_count = 1.0 / static_cast<double>(counted);

    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        if (row_has_pos(i) > 0.0) total += std::log1p(row_pos(i) * row_neg(i));
    for (Eigen::Index j = 0; j < m; ++j)
        if (col_has_pos(j) > 0.0) total += std::log1p(col_pos(j) * col_neg(j));
    res.loss = total * inv_count;
    res.anchors = counted;

    // dL/d(dist): scene-anchored rows plus CAD-anchored columns share the
    // same per-pair direction, so the coefficients just add up.
    const Eigen::ArrayXd row_outer = row_has_pos / (1.0 + row_pos * row_neg);
    const Eigen::ArrayXd col_outer = col_has_pos / (1.0 + col_pos * col_neg);
    Eigen::ArrayXXd coeff =
        exp_pos * cfg.gamma_circle * overlap.array() *
            ((row_outer * row_neg).replicate(1, m) +
             (col_outer * col_neg).transpose().replicate(n, 1)) -
        exp_neg * cfg.gamma_circle *
            ((row_outer * row_pos).replicate(1, m) +
             (col_outer * col_pos).transpose().replicate(n, 1));
    coeff *= inv_count;
    // Distance kink at zero: subgradient 0.
    const Eigen::ArrayXXd w = (dist > 1e-12).cast<double>() * coeff / dist.max(1e-300);

    const Eigen::MatrixXd wm = w.matrix();
    res.d_feat_s = wm.rowwise().sum().asDiagonal() * feat_s - wm * feat_o;
    res.d_feat_o = wm.colwise().sum().asDiagonal() * feat_o - wm.transpose() * feat_s;
    return res;
}

/// Negative log-likelihood over softmax-normalized score rows at the
/// ground-truth matches. Returns the gradient with respect to the scores.
struct NllResult {
    double loss = 0.0;
    Eigen::MatrixXd d_scores;
};

inline NllResult nll_point_loss(const Eigen::MatrixXd& scores,
                                const std::vector<std::pair<int, int>>& gt_matches) {
    NllResult res;
    res.d_scores = Eigen::MatrixXd::Zero(scores.rows(), scores.cols());
    if (gt_matches.empty()) return res;
    const double inv = 1.0 / static_cast<double>(gt_matches.size());
    for (const auto& [r, c] : gt_matches) {
        require(r >= 0 && r < scores.rows() && c >= 0 && c < scores.cols(),
                "ground-truth match index out of range");
        const double s = std::max(scores(r, c), 1e-300);
        res.loss -= std::log(s) * inv;
        res.d_scores(r, c) -= inv / s;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Training data preparation
// ---------------------------------------------------------------------------

struct TrainingObject {
    PointCloud cad_centered;
    Eigen::Vector3d offset = Eigen::Vector3d::Zero();
    double diameter = 0.0;
    PyramidConfig pyr_cfg;
    FeaturePyramid cad_pyr;
};

struct TrainingInstance {
    int object_index = 0;
    FeaturePyramid scene_pyr;
    Pose gt_centered;          // scene -> centered CAD
    Eigen::MatrixXd overlap;   // coarse scene x coarse CAD ground-truth overlap
    std::vector<int> fine_gt;  // scene fine index -> CAD fine index or -1
};

struct TrainingSet {
    std::vector<TrainingObject> objects;
    std::vector<TrainingInstance> instances;
};

/// Ground-truth overlap between superpoints: the fraction of the scene
/// superpoint's fine points lying within the matching radius of the CAD
/// superpoint's fine points under the true pose.
inline Eigen::MatrixXd superpoint_overlap(const FeaturePyramid& scene_pyr,
                                          const FeaturePyramid& cad_pyr, const Pose& gt,
                                          double radius) {
    const auto n = static_cast<Eigen::Index>(scene_pyr.coarse_points.size());
    const auto m = static_cast<Eigen::Index>(cad_pyr.coarse_points.size());
    Eigen::MatrixXd overlap = Eigen::MatrixXd::Zero(n, m);

    std::vector<KdTree> group_trees;
    group_trees.reserve(cad_pyr.grouping.size());
    std::vector<char> group_ok(cad_pyr.grouping.size(), 0);
    for (std::size_t j = 0; j < cad_pyr.grouping.size(); ++j) {
        std::vector<Eigen::Vector3d> pts;
        for (int idx : cad_pyr.grouping[j]) pts.push_back(cad_pyr.fine_points.points[idx]);
        if (!pts.empty()) {
            group_trees.emplace_back(pts);
            group_ok[j] = 1;
        } else {
            group_trees.emplace_back(std::vector<Eigen::Vector3d>{Eigen::Vector3d::Zero()});
        }
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& members = scene_pyr.grouping[i];
        if (members.empty()) continue;
        std::vector<Eigen::Vector3d> moved;
        moved.reserve(members.size());
        for (int idx : members) moved.push_back(gt.apply(scene_pyr.fine_points.points[idx]));
        for (Eigen::Index j = 0; j < m; ++j) {
            if (!group_ok[j]) continue;
            int hit = 0;
            for (const auto& p : moved)
                if (group_trees[j].nearest(p).second < radius) ++hit;
            overlap(i, j) = static_cast<double>(hit) / static_cast<double>(members.size());
        }
    }
    return overlap;
}

inline TrainingSet prepare_training_set(
    const std::vector<std::pair<const SyntheticObject*, std::vector<SceneInstance>>>& scenes,
    const MatcherConfig& cfg) {
    TrainingSet set;
    for (const auto& [object, instances] : scenes) {
        auto [centered, offset] = recenter_cad(object->cloud);
        TrainingObject entry;
        entry.offset = offset;
        entry.diameter = object->diameter;
        entry.pyr_cfg = cfg.pyramid_for(object->diameter);
        entry.cad_pyr = build_pyramid(centered, entry.pyr_cfg);
        entry.cad_centered = std::move(centered);
        const int object_index = static_cast<int>(set.objects.size());
        const double tau = cfg.inlier_tau_factor * entry.pyr_cfg.fine_voxel;
        KdTree cad_fine_tree(entry.cad_pyr.fine_points);

        for (const auto& inst : instances) {
            if (inst.visible.empty()) continue;
            TrainingInstance ti;
            ti.object_index = object_index;
            ti.scene_pyr = build_pyramid(inst.visible, entry.pyr_cfg);
            ti.gt_centered = Pose(inst.gt_pose.rotation, inst.gt_pose.translation - offset);
            ti.overlap = superpoint_overlap(ti.scene_pyr, entry.cad_pyr, ti.gt_centered, tau);
            ti.fine_gt.assign(ti.scene_pyr.fine_points.size(), -1);
            for (std::size_t k = 0; k < ti.scene_pyr.fine_points.size(); ++k) {
                const auto [j, dist] =
                    cad_fine_tree.nearest(ti.gt_centered.apply(ti.scene_pyr.fine_points.points[k]));
                if (dist < tau) ti.fine_gt[k] = j;
            }
            set.instances.push_back(std::move(ti));
        }
        set.objects.push_back(std::move(entry));
    }
    return set;
}

// ---------------------------------------------------------------------------
// Gradient containers and the optimizer step
// ---------------------------------------------------------------------------

struct LayerGrads {
    DirectionGrads scene_to_cad, cad_to_scene;
    FineGrads fine_scene, fine_cad;
};

struct WeightGrads {
    std::vector<LayerGrads> layers;

    static WeightGrads zeros(const AttentionWeights& w) {
        WeightGrads g;
        g.layers.reserve(w.layers.size());
        for (int i = 0; i < w.layer_count(); ++i)
            g.layers.push_back({DirectionGrads::zeros(w.feature_dim, w.hidden_dim),
                                DirectionGrads::zeros(w.feature_dim, w.hidden_dim),
                                FineGrads::zeros(w.feature_dim, w.hidden_dim),
                                FineGrads::zeros(w.feature_dim, w.hidden_dim)});
        return g;
    }

    void scale(double s) {
        for (auto& layer : layers) {
            for (DirectionGrads* d : {&layer.scene_to_cad, &layer.cad_to_scene}) {
                d->w_q *= s;
                d->w_k *= s;
                d->w_v *= s;
                d->w_emb *= s;
                d->b_emb *= s;
                d->ffn_w1 *= s;
                d->ffn_b1 *= s;
                d->ffn_w2 *= s;
                d->ffn_b2 *= s;
            }
            for (FineGrads* d : {&layer.fine_scene, &layer.fine_cad}) {
                d->w_emb *= s;
                d->b_emb *= s;
                d->ffn_w1 *= s;
                d->ffn_b1 *= s;
                d->ffn_w2 *= s;
                d->ffn_b2 *= s;
            }
        }
    }
};

/// Momentum SGD: v = m v - lr g; w += v.
inline void sgd_step(AttentionWeights& w, WeightGrads& velocity, const WeightGrads& grads,
                     double lr, double momentum) {
    auto upd = [&](Eigen::MatrixXd& param, Eigen::MatrixXd& vel, const Eigen::MatrixXd& g) {
        vel = momentum * vel - lr * g;
        param += vel;
    };
    auto updv = [&](Eigen::VectorXd& param, Eigen::VectorXd& vel, const Eigen::VectorXd& g) {
        vel = momentum * vel - lr * g;
        param += vel;
    };
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        auto dir = [&](DirectionParams& p, DirectionGrads& v, const DirectionGrads& g) {
            upd(p.w_q, v.w_q, g.w_q);
            upd(p.w_k, v.w_k, g.w_k);
            upd(p.w_v, v.w_v, g.w_v);
            upd(p.w_emb, v.w_emb, g.w_emb);
            updv(p.b_emb, v.b_emb, g.b_emb);
            upd(p.ffn.w1, v.ffn_w1, g.ffn_w1);
            updv(p.ffn.b1, v.ffn_b1, g.ffn_b1);
            upd(p.ffn.w2, v.ffn_w2, g.ffn_w2);
            updv(p.ffn.b2, v.ffn_b2, g.ffn_b2);
        };
        auto fine = [&](FineParams& p, FineGrads& v, const FineGrads& g) {
            upd(p.w_emb, v.w_emb, g.w_emb);
            updv(p.b_emb, v.b_emb, g.b_emb);
            upd(p.ffn.w1, v.ffn_w1, g.ffn_w1);
            updv(p.ffn.b1, v.ffn_b1, g.ffn_b1);
            upd(p.ffn.w2, v.ffn_w2, g.ffn_w2);
            updv(p.ffn.b2, v.ffn_b2, g.ffn_b2);
        };
        dir(w.layers[l].scene_to_cad, velocity.layers[l].scene_to_cad,
            grads.layers[l].scene_to_cad);
        dir(w.layers[l].cad_to_scene, velocity.layers[l].cad_to_scene,
            grads.layers[l].cad_to_scene);
        fine(w.layers[l].fine_scene, velocity.layers[l].fine_scene,
             grads.layers[l].fine_scene);
        fine(w.layers[l].fine_cad, velocity.layers[l].fine_cad, grads.layers[l].fine_cad);
    }
}

// ---------------------------------------------------------------------------
// Forward/backward through the refinement stack for one instance
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr double kFineTemperature = 0.1;

/// Row normalization with the cached data needed for its backward.
inline Eigen::MatrixXd normalize_rows_backward(const Eigen::MatrixXd& raw,
                                               const Eigen::MatrixXd& d_normed) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(raw.rows(), raw.cols());
    for (Eigen::Index i = 0; i < raw.rows(); ++i) {
        const double n = raw.row(i).norm();
        if (n <= 0.0) continue;
        const Eigen::RowVectorXd unit = raw.row(i) / n;
        out.row(i) = (d_normed.row(i) - unit * d_normed.row(i).dot(unit)) / n;
    }
    return out;
}

}  // namespace detail

// Positional encodings shared with the matcher; thin forwarding wrapper so the
// trainer stays in lockstep with inference.
inline std::pair<Eigen::MatrixX3d, Eigen::MatrixX3d> matcher_encodings(
    const PointCloud& scene_pts, const PointCloud& cad_pts, const Pose& pose,
    const MatcherConfig& cfg) {
    return pacr::detail::positional_encodings(scene_pts, cad_pts, pose, cfg);
}

/// Pose used for the step's positional encodings during training: the ground
/// truth perturbed by a seeded jitter that shrinks with the step index, so
/// each layer trains on the pose quality it will see at that stage of the
/// alternate refinement.
inline Pose jittered_teacher_pose(const Pose& gt, double diameter, int step, Rng& rng) {
    const double decay = std::pow(0.5, step - 1);
    const double angle = rng.uniform(0.0, 25.0 * M_PI / 180.0) * decay;
    const Eigen::Matrix3d wobble =
        Eigen::AngleAxisd(angle, rng.unit_vector()).toRotationMatrix();
    const Eigen::Vector3d shift = rng.unit_vector() * rng.uniform(0.0, 0.03 * diameter) * decay;
    return Pose(wobble * gt.rotation, wobble * gt.translation + shift);
}

/// Loss and gradients of one training instance under the current weights.
/// Teacher-forced forward: positional encodings come from the jittered ground
/// truth rather than the pipeline's own pose estimates, which keeps the
/// supervision signal consistent while matching the pose quality refinement
/// sees at inference. Poses and encodings are constants in the backward pass.
inline double instance_loss_and_grads(const TrainingInstance& inst, const TrainingObject& obj,
                                      const AttentionWeights& weights, const TrainConfig& tc,
                                      const MatcherConfig& cfg, WeightGrads& grads,
                                      Rng& jitter_rng) {
    const FeaturePyramid& sp = inst.scene_pyr;
    const FeaturePyramid& cp = obj.cad_pyr;
    const PointCloud& ps = sp.coarse_points;
    const PointCloud& po = cp.coarse_points;
    const int n_steps = cfg.refine_steps;
    require(weights.layer_count() >= n_steps, "not enough attention layers");

    struct StepCache {
        Eigen::MatrixX3d enc_s, enc_o;
        PacaCache s2c, c2s;
        Eigen::MatrixXd d_feat_s, d_feat_o;  // accumulated upstream gradients
        bool embedded = false;
    };
    std::vector<StepCache> steps(n_steps);

    Eigen::MatrixXd feat_s = sp.coarse_features;
    Eigen::MatrixXd feat_o = cp.coarse_features;
    double total_loss = 0.0;

    for (int step = 1; step <= n_steps; ++step) {
        StepCache& sc = steps[step - 1];
        const Pose enc_pose =
            jittered_teacher_pose(inst.gt_centered, obj.diameter, step, jitter_rng);
        auto [enc_s, enc_o] = matcher_encodings(ps, po, enc_pose, cfg);
        sc.enc_s = enc_s;
        sc.enc_o = enc_o;

        Eigen::MatrixXd align;
        const bool use_direction =
            cfg.pac_on_superpoints && cfg.positional == PositionalMode::directional;
        if (use_direction) {
            DirectionalEncoding a{enc_s}, b{enc_o};
            align = cosine_alignment(a, b);
        } else {
            align = Eigen::MatrixXd::Ones(ps.size(), po.size());
        }

        const AttentionLayer& layer = weights.layers[step - 1];
        sc.embedded = cfg.pac_on_superpoints && cfg.positional != PositionalMode::none;
        auto zero_like = [](const Eigen::MatrixXd& f) {
            return Eigen::MatrixXd::Zero(f.rows(), f.cols()).eval();
        };
        EmbeddedFeatures s2c_src{feat_s, sc.embedded
                                             ? embed_directions(sc.enc_s, layer.scene_to_cad)
                                             : zero_like(feat_s)};
        EmbeddedFeatures s2c_dst{feat_o, sc.embedded
                                             ? embed_directions(sc.enc_o, layer.scene_to_cad)
                                             : zero_like(feat_o)};
        EmbeddedFeatures c2s_src{feat_o, sc.embedded
                                             ? embed_directions(sc.enc_o, layer.cad_to_scene)
                                             : zero_like(feat_o)};
        EmbeddedFeatures c2s_dst{feat_s, sc.embedded
                                             ? embed_directions(sc.enc_s, layer.cad_to_scene)
                                             : zero_like(feat_s)};
        Eigen::MatrixXd out_s = paca_forward(s2c_src, s2c_dst, align, layer.scene_to_cad,
                                             cfg.reweight_mode, &sc.s2c);
        Eigen::MatrixXd out_o = paca_forward(c2s_src, c2s_dst, align.transpose().eval(),
                                             layer.cad_to_scene, cfg.reweight_mode, &sc.c2s);
        sc.d_feat_s = Eigen::MatrixXd::Zero(out_s.rows(), out_s.cols());
        sc.d_feat_o = Eigen::MatrixXd::Zero(out_o.rows(), out_o.cols());

        // Per-layer circle loss on normalized enhanced features.
        const Eigen::MatrixXd norm_s = pacr::detail::normalize_rows(out_s);
        const Eigen::MatrixXd norm_o = pacr::detail::normalize_rows(out_o);
        CircleLossResult cl = circle_loss(norm_s, norm_o, inst.overlap, tc);
        total_loss += tc.intermediate_loss_weight * cl.loss;
        sc.d_feat_s += tc.intermediate_loss_weight *
                       detail::normalize_rows_backward(out_s, cl.d_feat_s);
        sc.d_feat_o += tc.intermediate_loss_weight *
                       detail::normalize_rows_backward(out_o, cl.d_feat_o);

        feat_s = std::move(out_s);
        feat_o = std::move(out_o);
    }

    // --- Fine-level NLL on supervised pairs ------------------------------
    const bool fine_active = tc.fine_loss_weight > 0.0 && cfg.pac_on_points &&
                             cfg.positional != PositionalMode::none && n_steps > 0;
    if (fine_active) {
        // Supervised pairs: highest-overlap first, ties by flat index.
        struct PairPick {
            double overlap;
            int i, j;
        };
        std::vector<PairPick> picks;
        for (Eigen::Index i = 0; i < inst.overlap.rows(); ++i)
            for (Eigen::Index j = 0; j < inst.overlap.cols(); ++j)
                if (inst.overlap(i, j) > tc.overlap_threshold)
                    picks.push_back({inst.overlap(i, j), static_cast<int>(i),
                                     static_cast<int>(j)});
        std::sort(picks.begin(), picks.end(), [&](const PairPick& a, const PairPick& b) {
            if (a.overlap != b.overlap) return a.overlap > b.overlap;
            return a.i * inst.overlap.cols() + a.j < b.i * inst.overlap.cols() + b.j;
        });
        if (picks.size() > static_cast<std::size_t>(tc.max_fine_pairs))
            picks.resize(tc.max_fine_pairs);

        if (!picks.empty()) {
            // Gather the supervised fine rows (deduplicated, order-stable).
            std::vector<int> srows, orows;
            std::vector<int> srow_of(sp.fine_points.size(), -1), orow_of(cp.fine_points.size(), -1);
            auto take = [](std::vector<int>& rows, std::vector<int>& lookup, int idx) {
                if (lookup[idx] < 0) {
                    lookup[idx] = static_cast<int>(rows.size());
                    rows.push_back(idx);
                }
            };
            for (const auto& p : picks) {
                for (int idx : sp.grouping[p.i]) take(srows, srow_of, idx);
                for (int idx : cp.grouping[p.j]) take(orows, orow_of, idx);
            }

            PointCloud sub_ps, sub_po;
            for (int idx : srows) sub_ps.points.push_back(sp.fine_points.points[idx]);
            for (int idx : orows) sub_po.points.push_back(cp.fine_points.points[idx]);

            Eigen::MatrixXd fs(srows.size(), sp.fine_features.cols());
            Eigen::MatrixXd fo(orows.size(), cp.fine_features.cols());
            for (std::size_t r = 0; r < srows.size(); ++r) fs.row(r) = sp.fine_features.row(srows[r]);
            for (std::size_t r = 0; r < orows.size(); ++r) fo.row(r) = cp.fine_features.row(orows[r]);

            // N fine updates under a lightly jittered teacher pose.
            const Pose fine_pose =
                jittered_teacher_pose(inst.gt_centered, obj.diameter, n_steps + 1, jitter_rng);
            auto [enc_s, enc_o] = matcher_encodings(sub_ps, sub_po, fine_pose, cfg);
            std::vector<FineCache> fcache_s(n_steps), fcache_o(n_steps);
            std::vector<Eigen::MatrixXd> fs_hist{fs}, fo_hist{fo};
            for (int step = 1; step <= n_steps; ++step) {
                const AttentionLayer& layer = weights.layers[step - 1];
                fs = fine_forward(fs, embed_directions(enc_s, layer.fine_scene),
                                  layer.fine_scene, &fcache_s[step - 1]);
                fo = fine_forward(fo, embed_directions(enc_o, layer.fine_cad),
                                  layer.fine_cad, &fcache_o[step - 1]);
                fs_hist.push_back(fs);
                fo_hist.push_back(fo);
            }

            // Cosine scores with temperature, softmax per scene row over the
            // pair's CAD rows; NLL at the geometric ground-truth match.
            const Eigen::MatrixXd nfs = pacr::detail::normalize_rows(fs);
            const Eigen::MatrixXd nfo = pacr::detail::normalize_rows(fo);
            Eigen::MatrixXd d_nfs = Eigen::MatrixXd::Zero(nfs.rows(), nfs.cols());
            Eigen::MatrixXd d_nfo = Eigen::MatrixXd::Zero(nfo.rows(), nfo.cols());

            double fine_loss = 0.0;
            int supervised = 0;
            struct RowTask {
                int srow;
                std::vector<int> cand;  // rows into nfo
                int target;             // position within cand
            };
            std::vector<RowTask> tasks;
            for (const auto& p : picks) {
                for (int idx : sp.grouping[p.i]) {
                    const int gt = inst.fine_gt[idx];
                    if (gt < 0 || orow_of[gt] < 0) continue;
                    RowTask t;
                    t.srow = srow_of[idx];
                    for (int cidx : cp.grouping[p.j]) t.cand.push_back(orow_of[cidx]);
                    t.target = -1;
                    for (std::size_t v = 0; v < t.cand.size(); ++v)
                        if (t.cand[v] == orow_of[gt]) t.target = static_cast<int>(v);
                    if (t.target >= 0) {
                        tasks.push_back(std::move(t));
                        ++supervised;
                    }
                }
            }
            if (supervised > 0) {
                const double inv = 1.0 / static_cast<double>(supervised);
                for (const auto& t : tasks) {
                    Eigen::VectorXd logit(t.cand.size());
                    for (std::size_t v = 0; v < t.cand.size(); ++v)
                        logit(v) = nfs.row(t.srow).dot(nfo.row(t.cand[v])) /
                                   detail::kFineTemperature;
                    const double mx = logit.maxCoeff();
                    Eigen::VectorXd soft = (logit.array() - mx).exp();
                    soft /= soft.sum();
                    fine_loss -= std::log(std::max(soft(t.target), 1e-300)) * inv;
                    // softmax + NLL backward to the logits
                    Eigen::VectorXd d_logit = soft * inv;
                    d_logit(t.target) -= inv;
                    for (std::size_t v = 0; v < t.cand.size(); ++v) {
                        const double g = d_logit(v) / detail::kFineTemperature;
                        d_nfs.row(t.srow) += g * nfo.row(t.cand[v]);
                        d_nfo.row(t.cand[v]) += g * nfs.row(t.srow);
                    }
                }
                total_loss += tc.fine_loss_weight * fine_loss;

                Eigen::MatrixXd d_fs = tc.fine_loss_weight *
                                       detail::normalize_rows_backward(fs_hist[n_steps], d_nfs);
                Eigen::MatrixXd d_fo = tc.fine_loss_weight *
                                       detail::normalize_rows_backward(fo_hist[n_steps], d_nfo);
                for (int step = n_steps; step >= 1; --step) {
                    const AttentionLayer& layer = weights.layers[step - 1];
                    LayerGrads& lg = grads.layers[step - 1];
                    FineInputGrads g_s = fine_backward(fcache_s[step - 1], layer.fine_scene,
                                                       d_fs, lg.fine_scene);
                    embed_backward(enc_s, g_s.d_embeddings, lg.fine_scene);
                    FineInputGrads g_o = fine_backward(fcache_o[step - 1], layer.fine_cad,
                                                       d_fo, lg.fine_cad);
                    embed_backward(enc_o, g_o.d_embeddings, lg.fine_cad);
                    d_fs = std::move(g_s.d_features);
                    d_fo = std::move(g_o.d_features);
                }
            }
        }
    }

    // --- Coarse backward through the stacked layers ----------------------
    for (int step = n_steps; step >= 1; --step) {
        StepCache& sc = steps[step - 1];
        const AttentionLayer& layer = weights.layers[step - 1];
        LayerGrads& lg = grads.layers[step - 1];

        PacaInputGrads g_s2c =
            paca_backward(sc.s2c, layer.scene_to_cad, sc.d_feat_s, lg.scene_to_cad);
        PacaInputGrads g_c2s =
            paca_backward(sc.c2s, layer.cad_to_scene, sc.d_feat_o, lg.cad_to_scene);
        if (sc.embedded) {
            embed_backward(sc.enc_s, g_s2c.d_emb_src, lg.scene_to_cad);
            embed_backward(sc.enc_o, g_s2c.d_emb_dst, lg.scene_to_cad);
            embed_backward(sc.enc_o, g_c2s.d_emb_src, lg.cad_to_scene);
            embed_backward(sc.enc_s, g_c2s.d_emb_dst, lg.cad_to_scene);
        }
        const Eigen::MatrixXd d_prev_s = g_s2c.d_feat_src + g_c2s.d_feat_dst;
        const Eigen::MatrixXd d_prev_o = g_s2c.d_feat_dst + g_c2s.d_feat_src;
        if (step > 1) {
            steps[step - 2].d_feat_s += d_prev_s;
            steps[step - 2].d_feat_o += d_prev_o;
        }
    }
    return total_loss;
}

struct TrainResult {
    AttentionWeights weights;
    std::vector<double> loss_curve;
};

/// Momentum-SGD training over synthetic instances. Deterministic per seed:
/// batches come from a seeded shuffle, gradients accumulate in dataset order.
inline TrainResult train(const TrainingSet& dataset, const TrainConfig& tc,
                         const MatcherConfig& cfg) {
    tc.validate();
    require(!dataset.instances.empty(), "empty training set");

    TrainResult res;
    res.weights = AttentionWeights::init(cfg.refine_steps, kDescriptorDim, 64, tc.seed);
    WeightGrads velocity = WeightGrads::zeros(res.weights);

    Rng order_rng = Rng::stream(tc.seed, "train.order");
    Rng jitter_rng = Rng::stream(tc.seed, "train.teacher");
    std::vector<int> order(dataset.instances.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();  // trigger shuffle on first use

    res.loss_curve.reserve(tc.steps);
    for (int step = 0; step < tc.steps; ++step) {
        std::vector<int> batch;
        for (int b = 0; b < tc.batch_size; ++b) {
            if (cursor >= order.size()) {
                for (std::size_t i = order.size(); i > 1; --i)
                    std::swap(order[i - 1],
                              order[static_cast<std::size_t>(order_rng.uniform_int(
                                  0, static_cast<std::int64_t>(i) - 1))]);
                cursor = 0;
            }
            batch.push_back(order[cursor++]);
        }
        std::sort(batch.begin(), batch.end());  // order-invariant accumulation

        WeightGrads grads = WeightGrads::zeros(res.weights);
        double loss = 0.0;
        for (int idx : batch) {
            const TrainingInstance& inst = dataset.instances[idx];
            loss += instance_loss_and_grads(inst, dataset.objects[inst.object_index],
                                            res.weights, tc, cfg, grads, jitter_rng);
        }
        const double inv_batch = 1.0 / static_cast<double>(batch.size());
        loss *= inv_batch;
        grads.scale(inv_batch);
        require(std::isfinite(loss), "NaN loss at step " + std::to_string(step));

        sgd_step(res.weights, velocity, grads, tc.learning_rate, tc.momentum);
        require(res.weights.all_finite(), "weights diverged at step " + std::to_string(step));
        res.loss_curve.push_back(loss);
    }
    return res;
}

}  // namespace pacr
