#pragma once

#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Dense>

#include "pacr/error.hpp"

namespace pacr {

/// Rigid transform mapping scene (camera) coordinates into CAD (object)
/// coordinates: q = rotation * p + translation.
struct Pose {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    Pose() = default;
    Pose(const Eigen::Matrix3d& r, const Eigen::Vector3d& t) : rotation(r), translation(t) {}

    static Pose identity() { return Pose(); }

    Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
};

/// Point cloud with optional per-point RGB colors in [0, 1].
struct PointCloud {
    std::vector<Eigen::Vector3d> points;
    std::vector<Eigen::Vector3d> colors;  // empty, or same length as points

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
    bool has_colors() const { return !colors.empty() && colors.size() == points.size(); }
};

inline bool is_rotation(const Eigen::Matrix3d& r, double tol = 1e-9) {
    const Eigen::Matrix3d err = r.transpose() * r - Eigen::Matrix3d::Identity();
    return err.cwiseAbs().maxCoeff() <= tol && std::abs(r.determinant() - 1.0) <= tol;
}

/// Projects a near-rotation onto SO(3) via SVD (nearest orthonormal matrix
/// with determinant +1).
inline Eigen::Matrix3d project_to_so3(const Eigen::Matrix3d& m) {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0.0) {
        Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
        flip(2, 2) = -1.0;
        r = svd.matrixU() * flip * svd.matrixV().transpose();
    }
    return r;
}

inline PointCloud transform(const PointCloud& cloud, const Pose& pose) {
    PointCloud out;
    out.points.reserve(cloud.points.size());
    for (const auto& p : cloud.points) out.points.push_back(pose.apply(p));
    out.colors = cloud.colors;
    return out;
}

/// compose(a, b) applies b first, then a.
inline Pose compose(const Pose& a, const Pose& b) {
    return Pose(a.rotation * b.rotation, a.rotation * b.translation + a.translation);
}

inline Pose inverse(const Pose& p) {
    return Pose(p.rotation.transpose(), -(p.rotation.transpose() * p.translation));
}

inline Eigen::Vector3d centroid(const PointCloud& cloud) {
    require(!cloud.empty(), "empty cloud");
    Eigen::Vector3d c = Eigen::Vector3d::Zero();
    for (const auto& p : cloud.points) c += p;
    return c / static_cast<double>(cloud.size());
}

/// Moves the cloud's centroid to the origin. Returns the recentered cloud and
/// the offset that restores the original frame (original = recentered + offset).
inline std::pair<PointCloud, Eigen::Vector3d> recenter_cad(const PointCloud& cloud) {
    const Eigen::Vector3d offset = centroid(cloud);
    PointCloud out;
    out.points.reserve(cloud.size());
    for (const auto& p : cloud.points) out.points.push_back(p - offset);
    out.colors = cloud.colors;
    return {std::move(out), offset};
}

/// Angle of the relative rotation between two rotation matrices, in radians.
inline double rotation_angle(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
    const double c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    return std::acos(std::clamp(c, -1.0, 1.0));
}

/// Exact max pairwise distance for small clouds; deterministic strided
/// subsample above the cap to bound cost.
inline double cloud_diameter(const PointCloud& cloud, std::size_t cap = 4096) {
    require(!cloud.empty(), "empty cloud");
    const std::size_t n = cloud.size();
    const std::size_t stride = n <= cap ? 1 : (n + cap - 1) / cap;
    double best = 0.0;
    for (std::size_t i = 0; i < n; i += stride)
        for (std::size_t j = i + stride; j < n; j += stride)
            best = std::max(best, (cloud.points[i] - cloud.points[j]).norm());
    return best;
}

}  // namespace pacr
