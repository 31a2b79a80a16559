#pragma once

#include <cmath>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "pacr/geometry.hpp"
#include "pacr/rng.hpp"

namespace pacr::testing {

inline Eigen::Matrix3d rot_z(double radians) {
    return Eigen::AngleAxisd(radians, Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

inline Eigen::Matrix3d rot_axis(double radians, const Eigen::Vector3d& axis) {
    return Eigen::AngleAxisd(radians, axis.normalized()).toRotationMatrix();
}

inline PointCloud random_cloud(Rng& rng, int n, double extent = 1.0) {
    PointCloud c;
    c.points.reserve(n);
    for (int i = 0; i < n; ++i)
        c.points.emplace_back(rng.uniform(-extent, extent), rng.uniform(-extent, extent),
                              rng.uniform(-extent, extent));
    return c;
}

inline Pose random_pose(Rng& rng, double max_shift = 1.0) {
    return Pose(rng.rotation(), Eigen::Vector3d(rng.uniform(-max_shift, max_shift),
                                                rng.uniform(-max_shift, max_shift),
                                                rng.uniform(-max_shift, max_shift)));
}

inline double rel_err(double analytic, double numeric) {
    const double denom = std::max({1e-8, std::abs(analytic), std::abs(numeric)});
    return std::abs(analytic - numeric) / denom;
}

}  // namespace pacr::testing
