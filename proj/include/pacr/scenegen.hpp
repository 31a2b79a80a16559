#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "pacr/error.hpp"
#include "pacr/geometry.hpp"
#include "pacr/kdtree.hpp"
#include "pacr/rng.hpp"

namespace pacr {

enum class Symmetry { none, discrete, continuous };

/// Procedurally sampled workpiece: centered CAD point cloud plus the metadata
/// the evaluation harness needs.
struct SyntheticObject {
    std::string name;
    PointCloud cloud;       // centroid at the origin
    double diameter = 0.0;  // max pairwise distance
    double spacing = 0.0;   // surface sampling pitch
    Symmetry symmetry = Symmetry::none;
};

/// One placed instance of an object in a generated scene.
struct SceneInstance {
    int id = 0;
    Pose gt_pose;        // scene (camera) -> CAD, the solver's convention
    PointCloud visible;  // camera-frame points that survived occlusion
    double visibility = 0.0;
};

enum class OcclusionMode { none, depth, half };

inline std::string to_string(OcclusionMode m) {
    switch (m) {
        case OcclusionMode::none: return "none";
        case OcclusionMode::depth: return "depth";
        case OcclusionMode::half: return "half";
    }
    return "depth";
}

inline std::string to_string(Symmetry s) {
    switch (s) {
        case Symmetry::none: return "none";
        case Symmetry::discrete: return "discrete";
        case Symmetry::continuous: return "continuous";
    }
    return "none";
}

namespace detail {

inline constexpr double kDefaultSpacing = 0.0025;

inline void add_rect_grid(PointCloud& c, const Eigen::Vector3d& origin,
                          const Eigen::Vector3d& du, const Eigen::Vector3d& dv, int nu, int nv) {
    for (int i = 0; i < nu; ++i)
        for (int j = 0; j < nv; ++j) c.points.push_back(origin + du * i + dv * j);
}

/// Axis-aligned box surface sampled on a grid of the given pitch.
inline void add_box(PointCloud& c, const Eigen::Vector3d& lo, const Eigen::Vector3d& hi,
                    double s) {
    const int nx = static_cast<int>(std::round((hi.x() - lo.x()) / s)) + 1;
    const int ny = static_cast<int>(std::round((hi.y() - lo.y()) / s)) + 1;
    const int nz = static_cast<int>(std::round((hi.z() - lo.z()) / s)) + 1;
    const Eigen::Vector3d ex(s, 0, 0), ey(0, s, 0), ez(0, 0, s);
    // top and bottom
    add_rect_grid(c, {lo.x(), lo.y(), hi.z()}, ex, ey, nx, ny);
    add_rect_grid(c, {lo.x(), lo.y(), lo.z()}, ex, ey, nx, ny);
    // side walls, skipping the rim rows already covered by top/bottom
    for (int k = 1; k + 1 < nz; ++k) {
        const double z = lo.z() + k * s;
        add_rect_grid(c, {lo.x(), lo.y(), z}, ex, Eigen::Vector3d::Zero(), nx, 1);
        add_rect_grid(c, {lo.x(), hi.y(), z}, ex, Eigen::Vector3d::Zero(), nx, 1);
        add_rect_grid(c, {lo.x(), lo.y() + s, z}, ey, Eigen::Vector3d::Zero(), ny - 2, 1);
        add_rect_grid(c, {hi.x(), lo.y() + s, z}, ey, Eigen::Vector3d::Zero(), ny - 2, 1);
    }
}

/// Concentric-circle sampling of a flat annulus at height z.
inline void add_annulus(PointCloud& c, double r_inner, double r_outer, double z, double s) {
    for (double rho = r_inner; rho <= r_outer + 1e-12; rho += s) {
        const double radius = std::min(rho, r_outer);
        const int n = std::max(1, static_cast<int>(std::round(2.0 * M_PI * radius / s)));
        for (int i = 0; i < n; ++i) {
            const double a = 2.0 * M_PI * i / n;
            c.points.emplace_back(radius * std::cos(a), radius * std::sin(a), z);
        }
        if (radius >= r_outer) break;
    }
}

inline void add_cylinder_wall(PointCloud& c, double radius, double z0, double z1, double s,
                              bool include_ends = false) {
    const int n = std::max(3, static_cast<int>(std::round(2.0 * M_PI * radius / s)));
    const int rows = static_cast<int>(std::round((z1 - z0) / s)) + 1;
    for (int k = 0; k < rows; ++k) {
        if (!include_ends && (k == 0 || k == rows - 1)) continue;
        const double z = z0 + (z1 - z0) * (rows == 1 ? 0.0 : static_cast<double>(k) / (rows - 1));
        for (int i = 0; i < n; ++i) {
            const double a = 2.0 * M_PI * i / n;
            c.points.emplace_back(radius * std::cos(a), radius * std::sin(a), z);
        }
    }
}

/// Boss template: cylinder wall plus top cap, sampled once in local frame so
/// every translated copy is point-for-point identical.
inline PointCloud boss_template(double radius, double height, double s) {
    PointCloud c;
    add_cylinder_wall(c, radius, 0.0, height, s, /*include_ends=*/true);
    // top cap rings, aligned to the same grid as the plate for reproducibility
    for (double rho = 0.0; rho < radius - 1e-12; rho += s) {
        const int n = std::max(1, static_cast<int>(std::round(2.0 * M_PI * rho / s)));
        for (int i = 0; i < n; ++i) {
            const double a = 2.0 * M_PI * i / n;
            c.points.emplace_back(rho * std::cos(a), rho * std::sin(a), height);
        }
    }
    return c;
}

inline void finalize(SyntheticObject& obj) {
    const Eigen::Vector3d c = centroid(obj.cloud);
    for (auto& p : obj.cloud.points) p -= c;
    obj.diameter = cloud_diameter(obj.cloud);
}

}  // namespace detail

/// Twin-boss plate with the provenance of its ambiguous regions: the two boss
/// centers (in the centered object frame) and the boss radius.
struct TwinBossPlate {
    SyntheticObject object;
    Eigen::Vector3d boss_a = Eigen::Vector3d::Zero();
    Eigen::Vector3d boss_b = Eigen::Vector3d::Zero();
    double boss_radius = 0.0;
    double boss_height = 0.0;
};

/// Plate with two identical cylindrical bosses at well-separated positions
/// plus a corner notch that breaks global symmetry. The bosses are translated
/// copies of one sampled template, so their local geometry is bit-identical.
inline TwinBossPlate make_twin_boss_plate(double s = detail::kDefaultSpacing) {
    const double lx = 0.12, ly = 0.08, thick = 0.012;
    const double boss_r = 0.012, boss_h = 0.015;
    // Boss centers on exact grid multiples of the sampling pitch.
    const Eigen::Vector3d center_a(-14.0 * s, 0.0, 0.0);
    const Eigen::Vector3d center_b(14.0 * s, 4.0 * s, 0.0);

    PointCloud c;
    const int nx = static_cast<int>(std::round(lx / s)) + 1;
    const int ny = static_cast<int>(std::round(ly / s)) + 1;
    const double x0 = -lx / 2.0, y0 = -ly / 2.0;
    auto in_notch = [&](double x, double y) {
        return x > lx / 2.0 - 0.018 && y < -ly / 2.0 + 0.018;
    };
    auto in_boss = [&](double x, double y) {
        const double da = std::hypot(x - center_a.x(), y - center_a.y());
        const double db = std::hypot(x - center_b.x(), y - center_b.y());
        return da < boss_r - 1e-12 || db < boss_r - 1e-12;
    };
    for (int i = 0; i < nx; ++i)
        for (int j = 0; j < ny; ++j) {
            const double x = x0 + i * s, y = y0 + j * s;
            if (in_notch(x, y)) continue;
            if (!in_boss(x, y)) c.points.emplace_back(x, y, thick);  // top face
            c.points.emplace_back(x, y, 0.0);                        // bottom face
        }
    // side walls
    for (int k = 1; k < static_cast<int>(std::round(thick / s)); ++k) {
        const double z = k * s;
        for (int i = 0; i < nx; ++i) {
            const double x = x0 + i * s;
            c.points.emplace_back(x, y0, z);
            c.points.emplace_back(x, -y0, z);
        }
        for (int j = 1; j + 1 < ny; ++j) {
            const double y = y0 + j * s;
            c.points.emplace_back(x0, y, z);
            c.points.emplace_back(-x0, y, z);
        }
    }
    // identical bosses on the top face
    const PointCloud boss = detail::boss_template(boss_r, boss_h, s);
    for (const auto& center : {center_a, center_b}) {
        const Eigen::Vector3d base(center.x(), center.y(), thick);
        for (const auto& p : boss.points) c.points.push_back(base + p);
    }

    TwinBossPlate out;
    out.object.name = "twin-boss";
    out.object.cloud = std::move(c);
    out.object.spacing = s;
    out.object.symmetry = Symmetry::none;
    const Eigen::Vector3d pre_center = centroid(out.object.cloud);
    detail::finalize(out.object);
    out.boss_a = Eigen::Vector3d(center_a.x(), center_a.y(), thick) - pre_center;
    out.boss_b = Eigen::Vector3d(center_b.x(), center_b.y(), thick) - pre_center;
    out.boss_radius = boss_r;
    out.boss_height = boss_h;
    return out;
}

inline SyntheticObject make_l_bracket(double s = detail::kDefaultSpacing) {
    SyntheticObject obj;
    obj.name = "l-bracket";
    obj.spacing = s;
    obj.symmetry = Symmetry::none;
    detail::add_box(obj.cloud, {-0.05, -0.025, 0.0}, {0.05, 0.025, 0.008}, s);
    detail::add_box(obj.cloud, {-0.05, -0.025, 0.008}, {-0.042, 0.025, 0.05}, s);
    detail::finalize(obj);
    return obj;
}

/// Flat washer: continuous rotational symmetry, diameter = 2 x outer radius
/// within 1%.
inline SyntheticObject make_ring(double s = detail::kDefaultSpacing) {
    const double r_out = 0.05, r_in = 0.035, h = 0.004;
    SyntheticObject obj;
    obj.name = "ring";
    obj.spacing = s;
    obj.symmetry = Symmetry::continuous;
    detail::add_annulus(obj.cloud, r_in, r_out, 0.0, s);
    detail::add_annulus(obj.cloud, r_in, r_out, h, s);
    detail::add_cylinder_wall(obj.cloud, r_out, 0.0, h, s);
    detail::add_cylinder_wall(obj.cloud, r_in, 0.0, h, s);
    detail::finalize(obj);
    return obj;
}

inline SyntheticObject make_hex_nut(double s = detail::kDefaultSpacing) {
    const double across_flats = 0.045, height = 0.015, hole_r = 0.013;
    SyntheticObject obj;
    obj.name = "hex-nut";
    obj.spacing = s;
    obj.symmetry = Symmetry::discrete;

    auto inside_hex = [&](double x, double y) {
        for (int k = 0; k < 3; ++k) {
            const double a = k * M_PI / 3.0;
            if (std::abs(x * std::cos(a) + y * std::sin(a)) > across_flats / 2.0 + 1e-12)
                return false;
        }
        return true;
    };
    const double r_corner = across_flats / std::sqrt(3.0);
    const int n = static_cast<int>(std::ceil(2.0 * r_corner / s)) + 1;
    for (double z : {0.0, height}) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                const double x = -r_corner + i * s, y = -r_corner + j * s;
                if (inside_hex(x, y) && std::hypot(x, y) > hole_r) obj.cloud.points.emplace_back(x, y, z);
            }
    }
    // six flat side walls
    const int rows = static_cast<int>(std::round(height / s)) + 1;
    for (int f = 0; f < 6; ++f) {
        const double a = f * M_PI / 3.0 + M_PI / 6.0;
        const Eigen::Vector3d normal(std::cos(a), std::sin(a), 0.0);
        const Eigen::Vector3d tangent(-std::sin(a), std::cos(a), 0.0);
        const double half_edge = across_flats / (2.0 * std::sqrt(3.0));
        const int cols = static_cast<int>(std::round(2.0 * half_edge / s)) + 1;
        for (int k = 1; k + 1 < rows; ++k)
            for (int t = 0; t < cols; ++t) {
                const Eigen::Vector3d p = normal * (across_flats / 2.0) +
                                          tangent * (-half_edge + t * s) +
                                          Eigen::Vector3d(0, 0, k * s);
                obj.cloud.points.push_back(p);
            }
    }
    detail::add_cylinder_wall(obj.cloud, hole_r, 0.0, height, s, /*include_ends=*/true);
    detail::finalize(obj);
    return obj;
}

/// The built-in desk-scale object set. Deterministic geometry.
inline std::vector<SyntheticObject> builtin_objects(double s = detail::kDefaultSpacing) {
    return {make_twin_boss_plate(s).object, make_l_bracket(s), make_ring(s), make_hex_nut(s)};
}

inline const SyntheticObject* find_object(const std::vector<SyntheticObject>& objects,
                                          const std::string& name) {
    for (const auto& o : objects)
        if (o.name == name) return &o;
    return nullptr;
}

/// Synthetic bin scene: seeded SE(3) placements with interpenetration
/// rejection, top-down orthographic visibility, view-axis Gaussian noise and
/// textureless gray colors. Deterministic per seed.
inline std::vector<SceneInstance> generate_scene(const SyntheticObject& object, int n_instances,
                                                 std::uint64_t seed, double noise_sigma,
                                                 OcclusionMode mode = OcclusionMode::depth,
                                                 double bin_scale = 1.6,
                                                 double half_fraction = 0.6) {
    require(n_instances >= 1, "need at least one instance");
    require(!object.cloud.empty(), "empty cloud");

    Rng place_rng = Rng::stream(seed, "scene.place");
    Rng noise_rng = Rng::stream(seed, "scene.noise");
    Rng color_rng = Rng::stream(seed, "scene.color");
    Rng crop_rng = Rng::stream(seed, "scene.crop");

    const double d = object.diameter;
    const double margin = std::max(object.spacing * 0.5, 1e-4);
    const double bin_half = bin_scale * d / 2.0;

    struct Placed {
        Pose cad_to_scene;
        PointCloud cloud;  // full transformed cloud, pre-visibility
        KdTree tree;
    };
    std::vector<Placed> placed;
    for (int i = 0; i < n_instances; ++i) {
        bool ok = false;
        for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
            Pose pose(place_rng.rotation(),
                      Eigen::Vector3d(place_rng.uniform(-bin_half, bin_half),
                                      place_rng.uniform(-bin_half, bin_half),
                                      place_rng.uniform(0.6 * d, 1.8 * d)));
            PointCloud moved = transform(object.cloud, pose);
            bool clash = false;
            for (const auto& other : placed) {
                for (const auto& p : moved.points) {
                    if (other.tree.nearest(p).second < margin) {
                        clash = true;
                        break;
                    }
                }
                if (clash) break;
            }
            if (!clash) {
                placed.push_back({pose, moved, KdTree(moved)});
                ok = true;
            }
        }
        require(ok, "placement failed");
    }

    // Visibility flags per instance point.
    std::vector<std::vector<char>> keep(placed.size());
    for (std::size_t i = 0; i < placed.size(); ++i)
        keep[i].assign(placed[i].cloud.size(), 1);

    if (mode == OcclusionMode::depth) {
        // Orthographic depth buffer looking down -z: within each pixel only
        // points near the top surface survive.
        const double px = object.spacing;
        const double band = object.spacing;
        struct Cell {
            double max_z = -1e300;
        };
        std::unordered_map<std::uint64_t, Cell> buffer;
        auto cell_key = [&](const Eigen::Vector3d& p) {
            // Exact packed key; pixel indices comfortably fit 32 bits here.
            const auto cx = static_cast<std::int32_t>(std::floor(p.x() / px));
            const auto cy = static_cast<std::int32_t>(std::floor(p.y() / px));
            return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(cx)) << 32) |
                   static_cast<std::uint64_t>(static_cast<std::uint32_t>(cy));
        };
        for (const auto& inst : placed)
            for (const auto& p : inst.cloud.points) {
                Cell& c = buffer[cell_key(p)];
                c.max_z = std::max(c.max_z, p.z());
            }
        for (std::size_t i = 0; i < placed.size(); ++i)
            for (std::size_t k = 0; k < placed[i].cloud.size(); ++k) {
                const Eigen::Vector3d& p = placed[i].cloud.points[k];
                if (p.z() < buffer[cell_key(p)].max_z - band) keep[i][k] = 0;
            }
    } else if (mode == OcclusionMode::half) {
        // Remove a fixed fraction of each instance along a random direction.
        for (std::size_t i = 0; i < placed.size(); ++i) {
            const Eigen::Vector3d dir = crop_rng.unit_vector();
            std::vector<double> proj(placed[i].cloud.size());
            for (std::size_t k = 0; k < placed[i].cloud.size(); ++k)
                proj[k] = dir.dot(placed[i].cloud.points[k]);
            std::vector<double> sorted = proj;
            const auto cut_idx =
                static_cast<std::size_t>(half_fraction * static_cast<double>(sorted.size()));
            std::nth_element(sorted.begin(), sorted.begin() + cut_idx, sorted.end());
            const double cut = sorted[std::min(cut_idx, sorted.size() - 1)];
            for (std::size_t k = 0; k < proj.size(); ++k)
                if (proj[k] < cut) keep[i][k] = 0;
        }
    }

    std::vector<SceneInstance> out;
    out.reserve(placed.size());
    for (std::size_t i = 0; i < placed.size(); ++i) {
        SceneInstance inst;
        inst.id = static_cast<int>(i);
        inst.gt_pose = inverse(placed[i].cad_to_scene);
        std::size_t kept = 0;
        for (std::size_t k = 0; k < placed[i].cloud.size(); ++k) {
            if (!keep[i][k]) continue;
            Eigen::Vector3d p = placed[i].cloud.points[k];
            if (noise_sigma > 0.0) p.z() += noise_sigma * noise_rng.normal();
            inst.visible.points.push_back(p);
            const double gray = std::clamp(0.5 + 0.02 * color_rng.normal(), 0.0, 1.0);
            inst.visible.colors.emplace_back(gray, gray, gray);
            ++kept;
        }
        inst.visibility = static_cast<double>(kept) / static_cast<double>(placed[i].cloud.size());
        out.push_back(std::move(inst));
    }
    return out;
}

}  // namespace pacr
