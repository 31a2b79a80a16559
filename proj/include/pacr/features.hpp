#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "pacr/error.hpp"
#include "pacr/geometry.hpp"
#include "pacr/kdtree.hpp"

namespace pacr {

// Descriptor layout: 3 angular histograms of kAngleBins bins each, then
// 3 covariance eigenvalue ratios (linearity, planarity, sphericity), mean
// neighbor color, a validity flag, and zero padding up to kDescriptorDim.
inline constexpr int kAngleBins = 8;
inline constexpr int kDescriptorDim = 33;
inline constexpr int kValidityDim = kAngleBins * 3 + 6;  // index 30

struct PyramidConfig {
    double fine_voxel = 0.0;
    double coarse_voxel = 0.0;
    double radius_factor = 2.0;  // descriptor radius = factor * level voxel size

    /// Scale-relative defaults: fine = diameter/64, coarse = diameter/16.
    static PyramidConfig for_diameter(double diameter) {
        PyramidConfig cfg;
        cfg.fine_voxel = diameter / 64.0;
        cfg.coarse_voxel = diameter / 16.0;
        return cfg;
    }
};

/// Two-level feature pyramid: coarse superpoints over fine points, with
/// unit-norm descriptors and the coarse -> fine membership grouping.
struct FeaturePyramid {
    PointCloud coarse_points;
    Eigen::MatrixXd coarse_features;  // |coarse| x d
    PointCloud fine_points;
    Eigen::MatrixXd fine_features;  // |fine| x d
    std::vector<std::vector<int>> grouping;  // coarse index -> fine indices
};

/// Voxel-grid downsampling: one output point per occupied voxel, placed at the
/// centroid of its members. The grid is anchored at the cloud's min corner, so
/// a cloud smaller than one voxel always collapses to a single point. Output
/// voxels are ordered by first appearance in the input scan, so the result is
/// deterministic given the input order.
inline std::pair<PointCloud, std::vector<std::vector<int>>> voxel_downsample(
    const PointCloud& cloud, double voxel_size) {
    require(voxel_size > 0.0, "voxel size must be positive");

    Eigen::Vector3d anchor = Eigen::Vector3d::Zero();
    if (!cloud.empty()) {
        anchor = cloud.points[0];
        for (const auto& p : cloud.points) anchor = anchor.cwiseMin(p);
    }

    struct Key {
        std::int64_t x, y, z;
        bool operator==(const Key&) const = default;
    };
    struct KeyHash {
        std::size_t operator()(const Key& k) const {
            std::uint64_t h = 1469598103934665603ull;
            for (std::int64_t v : {k.x, k.y, k.z}) {
                h ^= static_cast<std::uint64_t>(v);
                h *= 1099511628211ull;
            }
            return static_cast<std::size_t>(h);
        }
    };

    std::unordered_map<Key, int, KeyHash> slot;
    std::vector<std::vector<int>> groups;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Eigen::Vector3d p = cloud.points[i] - anchor;
        const Key key{static_cast<std::int64_t>(std::floor(p.x() / voxel_size)),
                      static_cast<std::int64_t>(std::floor(p.y() / voxel_size)),
                      static_cast<std::int64_t>(std::floor(p.z() / voxel_size))};
        auto [it, inserted] = slot.try_emplace(key, static_cast<int>(groups.size()));
        if (inserted) groups.emplace_back();
        groups[it->second].push_back(static_cast<int>(i));
    }

    PointCloud out;
    out.points.reserve(groups.size());
    const bool colored = cloud.has_colors();
    if (colored) out.colors.reserve(groups.size());
    for (const auto& members : groups) {
        Eigen::Vector3d c = Eigen::Vector3d::Zero();
        Eigen::Vector3d col = Eigen::Vector3d::Zero();
        for (int idx : members) {
            c += cloud.points[idx];
            if (colored) col += cloud.colors[idx];
        }
        out.points.push_back(c / static_cast<double>(members.size()));
        if (colored) out.colors.push_back(col / static_cast<double>(members.size()));
    }
    return {std::move(out), std::move(groups)};
}

/// Computes neighborhoods, normals and descriptors for one cloud. Builds the
/// KD-tree and per-point normals once, so batch descriptor extraction stays
/// O(n log n) instead of quadratic.
class DescriptorEngine {
public:
    DescriptorEngine(const PointCloud& cloud, double radius)
        : cloud_(cloud), radius_(radius), tree_(cloud) {
        require(radius > 0.0, "descriptor radius must be positive");
        normals_.resize(cloud.size(), Eigen::Vector3d::Zero());
        neighborhoods_.resize(cloud.size());
        for (std::size_t i = 0; i < cloud.size(); ++i) {
            neighborhoods_[i] = tree_.radius_search(cloud.points[i], radius);
            normals_[i] = estimate_normal(static_cast<int>(i));
        }
    }

    /// Unit-norm descriptor for one point; all-zero fallback (validity 0) when
    /// the point has fewer than 3 neighbors inside the radius.
    Eigen::VectorXd descriptor(int index) const {
        Eigen::VectorXd d = Eigen::VectorXd::Zero(kDescriptorDim);
        std::vector<int> others;
        for (int j : neighborhoods_[index])
            if (j != index) others.push_back(j);
        if (others.size() < 3) return d;  // fallback: zeros, validity stays 0

        angular_histograms(index, others, d);
        eigen_ratios(index, d);
        if (cloud_.has_colors()) {
            Eigen::Vector3d mean_color = cloud_.colors[index];
            for (int j : others) mean_color += cloud_.colors[j];
            d.segment<3>(kAngleBins * 3 + 3) = mean_color / static_cast<double>(others.size() + 1);
        }
        d(kValidityDim) = 1.0;
        d.normalize();
        return d;
    }

    Eigen::MatrixXd all_descriptors() const {
        Eigen::MatrixXd m(cloud_.size(), kDescriptorDim);
        for (std::size_t i = 0; i < cloud_.size(); ++i)
            m.row(i) = descriptor(static_cast<int>(i)).transpose();
        return m;
    }

    const Eigen::Vector3d& normal(int index) const { return normals_[index]; }

    /// Raw (linearity, planarity, sphericity) of the neighborhood covariance,
    /// before descriptor normalization.
    Eigen::Vector3d shape_ratios(int index) const {
        Eigen::VectorXd d = Eigen::VectorXd::Zero(kDescriptorDim);
        eigen_ratios(index, d);
        return d.segment<3>(kAngleBins * 3);
    }

private:
    Eigen::Vector3d estimate_normal(int index) const {
        const auto& nbhd = neighborhoods_[index];
        if (nbhd.size() < 3) return Eigen::Vector3d::Zero();
        Eigen::Vector3d mean = Eigen::Vector3d::Zero();
        for (int j : nbhd) mean += cloud_.points[j];
        mean /= static_cast<double>(nbhd.size());
        Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
        for (int j : nbhd) {
            const Eigen::Vector3d r = cloud_.points[j] - mean;
            cov += r * r.transpose();
        }
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
        Eigen::Vector3d n = eig.eigenvectors().col(0);  // smallest eigenvalue
        // Sign fixed from local geometry so it is covariant under rigid motion.
        if (n.dot(cloud_.points[index] - mean) < 0.0) n = -n;
        return n;
    }

    // Soft (linearly interpolated) binning keeps the histogram continuous in
    // the angles; hard bins would flip on grid-sampled surfaces where angles
    // land exactly on bin boundaries. Theta wraps circularly at +-pi.
    static void soft_bin(Eigen::VectorXd& d, int base, double x, double lo, double hi,
                         bool circular) {
        const double t = (x - lo) / (hi - lo) * kAngleBins - 0.5;
        const int i0 = static_cast<int>(std::floor(t));
        const double frac = t - i0;
        int a, b;
        if (circular) {
            a = ((i0 % kAngleBins) + kAngleBins) % kAngleBins;
            b = (a + 1) % kAngleBins;
        } else {
            a = std::clamp(i0, 0, kAngleBins - 1);
            b = std::clamp(i0 + 1, 0, kAngleBins - 1);
        }
        d(base + a) += 1.0 - frac;
        d(base + b) += frac;
    }

    void angular_histograms(int index, const std::vector<int>& others, Eigen::VectorXd& d) const {
        const Eigen::Vector3d& p = cloud_.points[index];
        const Eigen::Vector3d& u = normals_[index];
        int counted = 0;
        for (int j : others) {
            Eigen::Vector3d dir = cloud_.points[j] - p;
            const double len = dir.norm();
            if (len < 1e-12) continue;
            dir /= len;
            Eigen::Vector3d v = u.cross(dir);
            const double vn = v.norm();
            if (vn < 1e-9) continue;  // displacement parallel to the normal
            v /= vn;
            const Eigen::Vector3d w = u.cross(v);
            const Eigen::Vector3d& nj = normals_[j];
            const double alpha = v.dot(nj);                      // [-1, 1]
            const double phi = u.dot(dir);                       // [-1, 1]
            const double theta = std::atan2(w.dot(nj), u.dot(nj));  // [-pi, pi]
            soft_bin(d, 0, alpha, -1.0, 1.0, false);
            soft_bin(d, kAngleBins, phi, -1.0, 1.0, false);
            soft_bin(d, 2 * kAngleBins, theta, -M_PI, M_PI, true);
            ++counted;
        }
        if (counted > 0) d.head(kAngleBins * 3) /= static_cast<double>(counted);
    }

    void eigen_ratios(int index, Eigen::VectorXd& d) const {
        const auto& nbhd = neighborhoods_[index];
        if (nbhd.size() < 3) return;
        Eigen::Vector3d mean = Eigen::Vector3d::Zero();
        for (int j : nbhd) mean += cloud_.points[j];
        mean /= static_cast<double>(nbhd.size());
        Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
        for (int j : nbhd) {
            const Eigen::Vector3d r = cloud_.points[j] - mean;
            cov += r * r.transpose();
        }
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
        // Ascending order from Eigen; we want l1 >= l2 >= l3.
        const double l1 = eig.eigenvalues()(2);
        const double l2 = eig.eigenvalues()(1);
        const double l3 = eig.eigenvalues()(0);
        if (l1 <= 1e-18) return;
        d(kAngleBins * 3 + 0) = (l1 - l2) / l1;  // linearity
        d(kAngleBins * 3 + 1) = (l2 - l3) / l1;  // planarity
        d(kAngleBins * 3 + 2) = l3 / l1;         // sphericity
    }

    const PointCloud& cloud_;
    double radius_;
    KdTree tree_;
    std::vector<Eigen::Vector3d> normals_;
    std::vector<std::vector<int>> neighborhoods_;
};

/// Descriptor of one point against its radius neighborhood. Convenience
/// wrapper over DescriptorEngine for single queries.
inline Eigen::VectorXd local_descriptor(const PointCloud& cloud, int index, double radius) {
    require(!cloud.empty(), "empty cloud");
    require(index >= 0 && index < static_cast<int>(cloud.size()), "point index out of range");
    return DescriptorEngine(cloud, radius).descriptor(index);
}

/// Builds the two-level pyramid: fine level from the input cloud, coarse level
/// from the fine one, descriptors at each level, grouping coarse -> fine.
inline FeaturePyramid build_pyramid(const PointCloud& cloud, const PyramidConfig& cfg) {
    require(!cloud.empty(), "empty cloud");
    require(cfg.fine_voxel > 0.0 && cfg.coarse_voxel > 0.0, "voxel size must be positive");

    FeaturePyramid pyr;
    auto [fine, fine_groups] = voxel_downsample(cloud, cfg.fine_voxel);
    auto [coarse, coarse_groups] = voxel_downsample(fine, cfg.coarse_voxel);
    pyr.fine_points = std::move(fine);
    pyr.coarse_points = std::move(coarse);
    pyr.grouping = std::move(coarse_groups);
    pyr.fine_features =
        DescriptorEngine(pyr.fine_points, cfg.radius_factor * cfg.fine_voxel).all_descriptors();
    pyr.coarse_features =
        DescriptorEngine(pyr.coarse_points, cfg.radius_factor * cfg.coarse_voxel)
            .all_descriptors();
    return pyr;
}

}  // namespace pacr
