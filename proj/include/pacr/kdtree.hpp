#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "pacr/error.hpp"
#include "pacr/geometry.hpp"

namespace pacr {

/// Exact 3D KD-tree over a point cloud, built once per cloud. Search is exact
/// (no approximation); nearest-neighbor ties resolve to the lowest point index.
class KdTree {
public:
    KdTree() = default;

    explicit KdTree(const std::vector<Eigen::Vector3d>& points) : points_(points) {
        require(!points_.empty(), "empty cloud");
        order_.resize(points_.size());
        std::iota(order_.begin(), order_.end(), 0);
        nodes_.reserve(points_.size());
        root_ = build(0, static_cast<int>(order_.size()), 0);
    }

    explicit KdTree(const PointCloud& cloud) : KdTree(cloud.points) {}

    std::size_t size() const { return points_.size(); }

    /// Index and Euclidean distance of the nearest point; equal distances
    /// resolve to the lowest index.
    std::pair<int, double> nearest(const Eigen::Vector3d& query) const {
        int best_idx = -1;
        double best_d2 = std::numeric_limits<double>::infinity();
        search_nearest(root_, query, best_idx, best_d2);
        return {best_idx, std::sqrt(best_d2)};
    }

    /// All indices within `radius` (inclusive), sorted ascending.
    std::vector<int> radius_search(const Eigen::Vector3d& query, double radius) const {
        std::vector<int> hits;
        search_radius(root_, query, radius * radius, hits);
        std::sort(hits.begin(), hits.end());
        return hits;
    }

private:
    struct Node {
        int point = -1;
        int axis = 0;
        int left = -1;
        int right = -1;
    };

    int build(int lo, int hi, int depth) {
        if (lo >= hi) return -1;
        const int axis = depth % 3;
        const int mid = lo + (hi - lo) / 2;
        // Deterministic ordering: split by coordinate, ties by index.
        std::nth_element(order_.begin() + lo, order_.begin() + mid, order_.begin() + hi,
                         [&](int a, int b) {
                             const double ca = points_[a](axis), cb = points_[b](axis);
                             return ca < cb || (ca == cb && a < b);
                         });
        Node node;
        node.point = order_[mid];
        node.axis = axis;
        const int self = static_cast<int>(nodes_.size());
        nodes_.push_back(node);
        const int left = build(lo, mid, depth + 1);
        const int right = build(mid + 1, hi, depth + 1);
        nodes_[self].left = left;
        nodes_[self].right = right;
        return self;
    }

    void consider(int idx, const Eigen::Vector3d& query, int& best_idx, double& best_d2) const {
        const double d2 = (points_[idx] - query).squaredNorm();
        if (d2 < best_d2 || (d2 == best_d2 && idx < best_idx)) {
            best_d2 = d2;
            best_idx = idx;
        }
    }

    void search_nearest(int node_id, const Eigen::Vector3d& query, int& best_idx,
                        double& best_d2) const {
        if (node_id < 0) return;
        const Node& node = nodes_[node_id];
        consider(node.point, query, best_idx, best_d2);
        const double delta = query(node.axis) - points_[node.point](node.axis);
        const int near_side = delta < 0.0 ? node.left : node.right;
        const int far_side = delta < 0.0 ? node.right : node.left;
        search_nearest(near_side, query, best_idx, best_d2);
        // Strict inequality keeps equal-distance candidates reachable, which
        // the lowest-index tie-break relies on.
        if (delta * delta <= best_d2) search_nearest(far_side, query, best_idx, best_d2);
    }

    void search_radius(int node_id, const Eigen::Vector3d& query, double r2,
                       std::vector<int>& hits) const {
        if (node_id < 0) return;
        const Node& node = nodes_[node_id];
        if ((points_[node.point] - query).squaredNorm() <= r2) hits.push_back(node.point);
        const double delta = query(node.axis) - points_[node.point](node.axis);
        const int near_side = delta < 0.0 ? node.left : node.right;
        const int far_side = delta < 0.0 ? node.right : node.left;
        search_radius(near_side, query, r2, hits);
        if (delta * delta <= r2) search_radius(far_side, query, r2, hits);
    }

    std::vector<Eigen::Vector3d> points_;
    std::vector<int> order_;
    std::vector<Node> nodes_;
    int root_ = -1;
};

/// Nearest point in `cloud` to `query`: (index, distance), ties to the lowest
/// index. Builds a KD-tree per call; use KdTree directly for repeated queries.
inline std::pair<int, double> nearest_neighbor(const Eigen::Vector3d& query,
                                               const PointCloud& cloud) {
    require(!cloud.empty(), "empty cloud");
    return KdTree(cloud).nearest(query);
}

}  // namespace pacr
