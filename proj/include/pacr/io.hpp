#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "pacr/attention.hpp"
#include "pacr/error.hpp"
#include "pacr/geometry.hpp"
#include "pacr/scenegen.hpp"

namespace pacr {

using json = nlohmann::json;

namespace detail {

// Little-endian scalar encoding, independent of host width assumptions.
inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put_le(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(std::begin(buf), std::end(buf));
    put_bytes(os, buf, sizeof(T));
}

template <typename T>
T get_le(std::istream& is, const char* context) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    require(static_cast<std::size_t>(is.gcount()) == sizeof(T), std::string(context));
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(std::begin(buf), std::end(buf));
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Point cloud binary format: magic "PACR", u32 version, u32 flags (bit 0:
// colors present), u64 point count, xyz as f64 LE triplets, then optional rgb
// as f32 LE triplets.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kPointCloudVersion = 1;

inline void write_point_cloud(std::ostream& os, const PointCloud& cloud) {
    os.write("PACR", 4);
    detail::put_le<std::uint32_t>(os, kPointCloudVersion);
    detail::put_le<std::uint32_t>(os, cloud.has_colors() ? 1u : 0u);
    detail::put_le<std::uint64_t>(os, cloud.size());
    for (const auto& p : cloud.points) {
        detail::put_le<double>(os, p.x());
        detail::put_le<double>(os, p.y());
        detail::put_le<double>(os, p.z());
    }
    if (cloud.has_colors())
        for (const auto& c : cloud.colors) {
            detail::put_le<float>(os, static_cast<float>(c.x()));
            detail::put_le<float>(os, static_cast<float>(c.y()));
            detail::put_le<float>(os, static_cast<float>(c.z()));
        }
}

inline PointCloud read_point_cloud(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    require(is.gcount() == 4 && std::memcmp(magic, "PACR", 4) == 0,
            "corrupt point cloud: bad magic");
    const auto version = detail::get_le<std::uint32_t>(is, "corrupt point cloud: truncated");
    require(version == kPointCloudVersion, "corrupt point cloud: unsupported version");
    const auto flags = detail::get_le<std::uint32_t>(is, "corrupt point cloud: truncated");
    const auto count = detail::get_le<std::uint64_t>(is, "corrupt point cloud: truncated");
    PointCloud cloud;
    cloud.points.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const double x = detail::get_le<double>(is, "corrupt point cloud: truncated");
        const double y = detail::get_le<double>(is, "corrupt point cloud: truncated");
        const double z = detail::get_le<double>(is, "corrupt point cloud: truncated");
        cloud.points.emplace_back(x, y, z);
    }
    if (flags & 1u) {
        cloud.colors.reserve(count);
        for (std::uint64_t i = 0; i < count; ++i) {
            const float r = detail::get_le<float>(is, "corrupt point cloud: truncated");
            const float g = detail::get_le<float>(is, "corrupt point cloud: truncated");
            const float b = detail::get_le<float>(is, "corrupt point cloud: truncated");
            cloud.colors.emplace_back(r, g, b);
        }
    }
    return cloud;
}

/// A scene file is a sequence of point-cloud records, one per instance.
inline void write_scene_file(const std::filesystem::path& path,
                             const std::vector<PointCloud>& clouds) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), "cannot write " + path.string());
    for (const auto& c : clouds) write_point_cloud(os, c);
    require(os.good(), "cannot write " + path.string());
}

inline std::vector<PointCloud> read_scene_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "cannot read " + path.string());
    std::vector<PointCloud> clouds;
    while (is.peek() != std::char_traits<char>::eof()) {
        try {
            clouds.push_back(read_point_cloud(is));
        } catch (const Error& e) {
            throw Error(std::string(e.what()) + " in " + path.string());
        }
    }
    return clouds;
}

// ---------------------------------------------------------------------------
// Weight file: magic "PACW", u32 version, u32 layer count, u32 feature dim,
// u32 hidden dim, then all parameters as f64 LE in a fixed traversal order
// (per layer: scene->CAD, CAD->scene, fine-scene, fine-CAD; matrices
// row-major).
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kWeightsVersion = 1;

namespace detail {

template <typename W, typename Fn>
void walk_weights(W& w, Fn&& f) {
    for (auto& layer : w.layers) {
        for (auto* p : {&layer.scene_to_cad, &layer.cad_to_scene}) {
            f(p->w_q);
            f(p->w_k);
            f(p->w_v);
            f(p->w_emb);
            f(p->b_emb);
            f(p->ffn.w1);
            f(p->ffn.b1);
            f(p->ffn.w2);
            f(p->ffn.b2);
        }
        for (auto* p : {&layer.fine_scene, &layer.fine_cad}) {
            f(p->w_emb);
            f(p->b_emb);
            f(p->ffn.w1);
            f(p->ffn.b1);
            f(p->ffn.w2);
            f(p->ffn.b2);
        }
    }
}

}  // namespace detail

inline void save_weights(const std::filesystem::path& path, const AttentionWeights& weights) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), "cannot write " + path.string());
    os.write("PACW", 4);
    detail::put_le<std::uint32_t>(os, kWeightsVersion);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(weights.layer_count()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(weights.feature_dim));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(weights.hidden_dim));
    detail::walk_weights(weights, [&](const auto& tensor) {
        for (Eigen::Index r = 0; r < tensor.rows(); ++r)
            for (Eigen::Index c = 0; c < tensor.cols(); ++c)
                detail::put_le<double>(os, tensor(r, c));
    });
    require(os.good(), "cannot write " + path.string());
}

inline AttentionWeights load_weights(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "cannot read " + path.string());
    try {
        char magic[4];
        is.read(magic, 4);
        require(is.gcount() == 4 && std::memcmp(magic, "PACW", 4) == 0, "corrupt weights");
        const auto version = detail::get_le<std::uint32_t>(is, "corrupt weights");
        require(version == kWeightsVersion, "corrupt weights");
        const auto layers = detail::get_le<std::uint32_t>(is, "corrupt weights");
        const auto d = detail::get_le<std::uint32_t>(is, "corrupt weights");
        const auto h = detail::get_le<std::uint32_t>(is, "corrupt weights");
        require(layers <= 64 && d >= 1 && d <= 4096 && h >= 1 && h <= 4096, "corrupt weights");
        AttentionWeights w = AttentionWeights::init(static_cast<int>(layers),
                                                    static_cast<int>(d), static_cast<int>(h), 0);
        detail::walk_weights(w, [&](auto& tensor) {
            for (Eigen::Index r = 0; r < tensor.rows(); ++r)
                for (Eigen::Index c = 0; c < tensor.cols(); ++c)
                    tensor(r, c) = detail::get_le<double>(is, "corrupt weights");
        });
        // Trailing garbage also counts as corruption.
        require(is.peek() == std::char_traits<char>::eof(), "corrupt weights");
        return w;
    } catch (const Error& e) {
        throw Error(std::string(e.what()) + ": " + path.string());
    }
}

// ---------------------------------------------------------------------------
// JSON bridges
// ---------------------------------------------------------------------------

inline json pose_to_json(const Pose& p) {
    json rot = json::array();
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) rot.push_back(p.rotation(r, c));
    return json{{"rotation", rot},
                {"translation", {p.translation.x(), p.translation.y(), p.translation.z()}}};
}

inline Pose pose_from_json(const json& j) {
    Pose p;
    const auto& rot = j.at("rotation");
    require(rot.size() == 9, "pose: rotation must have 9 entries");
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) p.rotation(r, c) = rot.at(r * 3 + c).get<double>();
    const auto& t = j.at("translation");
    require(t.size() == 3, "pose: translation must have 3 entries");
    for (int i = 0; i < 3; ++i) p.translation(i) = t.at(i).get<double>();
    return p;
}

/// Ground-truth sidecar for one generated scene file.
inline json scene_sidecar(const SyntheticObject& object, std::uint64_t seed, double noise,
                          OcclusionMode mode, const std::vector<SceneInstance>& instances) {
    json inst_list = json::array();
    for (const auto& inst : instances)
        inst_list.push_back({{"id", inst.id},
                             {"pose", pose_to_json(inst.gt_pose)},
                             {"visibility", inst.visibility}});
    return json{{"object", object.name},       {"diameter", object.diameter},
                {"symmetry", to_string(object.symmetry)}, {"spacing", object.spacing},
                {"seed", seed},                {"noise", noise},
                {"occlusion", to_string(mode)}, {"instances", inst_list}};
}

inline void write_json(const std::filesystem::path& path, const json& j) {
    std::ofstream os(path);
    require(os.good(), "cannot write " + path.string());
    os << j.dump(2) << "\n";
    require(os.good(), "cannot write " + path.string());
}

inline json read_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    require(is.good(), "cannot read " + path.string());
    json j = json::parse(is, nullptr, /*allow_exceptions=*/false);
    require(!j.is_discarded(), "invalid JSON in " + path.string());
    return j;
}

inline void write_loss_csv(const std::filesystem::path& path,
                           const std::vector<double>& curve) {
    std::ofstream os(path);
    require(os.good(), "cannot write " + path.string());
    os << "step,loss\n";
    for (std::size_t i = 0; i < curve.size(); ++i) {
        os << i << "," << json(curve[i]).dump() << "\n";  // shortest round-trip repr
    }
    require(os.good(), "cannot write " + path.string());
}

}  // namespace pacr
