#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Dense>

#include "pacr/error.hpp"
#include "pacr/geometry.hpp"

namespace pacr {

enum class CorrLevel { coarse, fine };

/// One weighted point match: scene index, CAD index, non-negative weight.
struct Correspondence {
    int scene_index = 0;
    int cad_index = 0;
    double weight = 1.0;
};

struct CorrespondenceSet {
    std::vector<Correspondence> pairs;
    CorrLevel level = CorrLevel::coarse;

    std::size_t size() const { return pairs.size(); }
    bool empty() const { return pairs.empty(); }
};

/// Weighted least-squares rigid alignment: returns the pose (R, t) minimizing
/// sum_i w_i * || R p_i + t - q_i ||^2 over the correspondence set, solved by
/// weighted SVD of the cross-covariance. det(R) = +1 is guaranteed.
inline Pose wsvd_solve(const PointCloud& scene, const PointCloud& cad,
                       const CorrespondenceSet& corr) {
    int positive = 0;
    double total_w = 0.0;
    for (const auto& c : corr.pairs) {
        require(c.scene_index >= 0 && c.scene_index < static_cast<int>(scene.size()) &&
                    c.cad_index >= 0 && c.cad_index < static_cast<int>(cad.size()),
                "correspondence index out of range");
        require(std::isfinite(c.weight) && c.weight >= 0.0, "invalid correspondence weight");
        if (c.weight > 0.0) ++positive;
        total_w += c.weight;
    }
    require(positive >= 3, "underdetermined");

    Eigen::Vector3d p_bar = Eigen::Vector3d::Zero();
    Eigen::Vector3d q_bar = Eigen::Vector3d::Zero();
    for (const auto& c : corr.pairs) {
        p_bar += c.weight * scene.points[c.scene_index];
        q_bar += c.weight * cad.points[c.cad_index];
    }
    p_bar /= total_w;
    q_bar /= total_w;

    Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
    for (const auto& c : corr.pairs) {
        if (c.weight == 0.0) continue;
        const Eigen::Vector3d p = scene.points[c.scene_index] - p_bar;
        const Eigen::Vector3d q = cad.points[c.cad_index] - q_bar;
        h += c.weight * p * q.transpose();
    }
    h /= total_w;

    Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Vector3d sigma = svd.singularValues();
    require(sigma(0) > 0.0 && sigma(1) / sigma(0) >= 1e-9, "degenerate configuration");

    const Eigen::Matrix3d u = svd.matrixU();
    const Eigen::Matrix3d v = svd.matrixV();
    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    d(2, 2) = (v * u.transpose()).determinant();
    const Eigen::Matrix3d r = v * d * u.transpose();
    return Pose(r, q_bar - r * p_bar);
}

/// Weighted RMS residual of the Eq-style objective, weights normalized to sum 1.
inline double residual_rmse(const PointCloud& scene, const PointCloud& cad,
                            const CorrespondenceSet& corr, const Pose& pose) {
    require(!corr.empty(), "empty correspondence");
    double total_w = 0.0;
    double acc = 0.0;
    for (const auto& c : corr.pairs) {
        require(c.scene_index >= 0 && c.scene_index < static_cast<int>(scene.size()) &&
                    c.cad_index >= 0 && c.cad_index < static_cast<int>(cad.size()),
                "correspondence index out of range");
        total_w += c.weight;
        acc += c.weight *
               (pose.apply(scene.points[c.scene_index]) - cad.points[c.cad_index]).squaredNorm();
    }
    require(total_w > 0.0, "zero total weight");
    return std::sqrt(acc / total_w);
}

}  // namespace pacr
