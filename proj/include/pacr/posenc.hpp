#pragma once

#include <Eigen/Core>

#include "pacr/geometry.hpp"

namespace pacr {

/// Globally positional encoding of a point set: one unit direction per point,
/// or the zero vector for degenerate points at the reference origin.
struct DirectionalEncoding {
    Eigen::MatrixX3d vectors;  // one row per point

    Eigen::Index size() const { return vectors.rows(); }
};

/// Point positions relative to the estimated object centroid, before
/// normalization. Exposed separately because the raw-coordinate ablation
/// variant consumes these directly.
inline Eigen::MatrixX3d scene_offsets(const PointCloud& points, const Pose& align_pose) {
    Eigen::MatrixX3d out(points.size(), 3);
    for (std::size_t i = 0; i < points.size(); ++i)
        out.row(i) = (points.points[i] - align_pose.translation).transpose();
    return out;
}

inline Eigen::MatrixX3d cad_offsets(const PointCloud& points, const Pose& align_pose) {
    Eigen::MatrixX3d out(points.size(), 3);
    for (std::size_t i = 0; i < points.size(); ++i)
        out.row(i) = (align_pose.rotation * points.points[i]).transpose();
    return out;
}

namespace detail {

inline DirectionalEncoding normalize_offsets(const Eigen::MatrixX3d& offsets, double eps_deg,
                                             bool squared_norm) {
    DirectionalEncoding enc;
    enc.vectors.resize(offsets.rows(), 3);
    for (Eigen::Index i = 0; i < offsets.rows(); ++i) {
        const double n = offsets.row(i).norm();
        if (n < eps_deg) {
            enc.vectors.row(i).setZero();
        } else {
            enc.vectors.row(i) = offsets.row(i) / (squared_norm ? n * n : n);
        }
    }
    return enc;
}

}  // namespace detail

/// Directional vectors of scene points under the current alignment estimate.
/// `align_pose` maps CAD coordinates into the scene frame, so its translation
/// is the estimated object centroid seen in the scene. Points closer than
/// `eps_deg` to the centroid encode as the zero vector.
/// `squared_norm` selects the non-default 1/||.||^2 scaling variant.
inline DirectionalEncoding encode_scene(const PointCloud& points, const Pose& align_pose,
                                        double eps_deg = 1e-6, bool squared_norm = false) {
    return detail::normalize_offsets(scene_offsets(points, align_pose), eps_deg, squared_norm);
}

/// Directional vectors of CAD points (cloud recentered at the origin), rotated
/// into the scene frame by the alignment estimate.
inline DirectionalEncoding encode_cad(const PointCloud& points, const Pose& align_pose,
                                      double eps_deg = 1e-6, bool squared_norm = false) {
    return detail::normalize_offsets(cad_offsets(points, align_pose), eps_deg, squared_norm);
}

/// Pairwise direction agreement mapped to [0, 1]: (a_i . b_j + 1) / 2.
/// Zero (degenerate) rows land on the neutral value 0.5.
inline Eigen::MatrixXd cosine_alignment(const DirectionalEncoding& a,
                                        const DirectionalEncoding& b) {
    Eigen::MatrixXd m = (a.vectors * b.vectors.transpose()).array() * 0.5 + 0.5;
    return m.cwiseMax(0.0).cwiseMin(1.0);
}

}  // namespace pacr
