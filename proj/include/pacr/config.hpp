#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "pacr/error.hpp"
#include "pacr/matcher.hpp"
#include "pacr/scenegen.hpp"
#include "pacr/trainer.hpp"

namespace pacr {

inline OcclusionMode occlusion_from_string(const std::string& s) {
    if (s == "none") return OcclusionMode::none;
    if (s == "depth") return OcclusionMode::depth;
    if (s == "half") return OcclusionMode::half;
    throw Error("unknown occlusion mode: " + s);
}

inline PositionalMode positional_from_string(const std::string& s) {
    if (s == "none") return PositionalMode::none;
    if (s == "coords") return PositionalMode::coords;
    if (s == "directional") return PositionalMode::directional;
    throw Error("unknown positional mode: " + s);
}

/// Full run configuration: scene generation, pipeline and training parameters,
/// all defaulted to the project's canonical values. Serializes losslessly.
struct RunConfig {
    std::string object = "twin-boss";
    int instances = 1;
    int scenes = 1;
    double noise = 0.0;  // meters, applied along the view axis
    OcclusionMode occlusion = OcclusionMode::depth;
    double bin_scale = 1.6;
    double half_fraction = 0.6;
    std::uint64_t seed = 7;
    std::string output_dir = "out";
    MatcherConfig pipeline;
    TrainConfig training;
};

inline nlohmann::json to_json(const MatcherConfig& c) {
    return nlohmann::json{
        {"top_k", c.top_k},
        {"refine_steps", c.refine_steps},
        {"gate_threshold", c.gate_threshold},
        {"use_position_gate", c.use_position_gate},
        {"inlier_tau_factor", c.inlier_tau_factor},
        {"eps_degenerate", c.eps_degenerate},
        {"squared_norm_encoding", c.squared_norm_encoding},
        {"reweight_mode", c.reweight_mode == ReweightMode::logits ? "logits" : "probabilities"},
        {"positional", to_string(c.positional)},
        {"alternate_refinement", c.alternate_refinement},
        {"pac_on_superpoints", c.pac_on_superpoints},
        {"pac_on_points", c.pac_on_points},
        {"oracle_features", c.oracle_features},
        {"fine_voxel_divisor", c.fine_voxel_divisor},
        {"coarse_voxel_divisor", c.coarse_voxel_divisor}};
}

inline MatcherConfig matcher_from_json(const nlohmann::json& j) {
    MatcherConfig c;
    c.top_k = j.at("top_k").get<int>();
    c.refine_steps = j.at("refine_steps").get<int>();
    c.gate_threshold = j.at("gate_threshold").get<double>();
    c.use_position_gate = j.at("use_position_gate").get<bool>();
    c.inlier_tau_factor = j.at("inlier_tau_factor").get<double>();
    c.eps_degenerate = j.at("eps_degenerate").get<double>();
    c.squared_norm_encoding = j.at("squared_norm_encoding").get<bool>();
    c.reweight_mode = j.at("reweight_mode").get<std::string>() == "logits"
                          ? ReweightMode::logits
                          : ReweightMode::probabilities;
    c.positional = positional_from_string(j.at("positional").get<std::string>());
    c.alternate_refinement = j.at("alternate_refinement").get<bool>();
    c.pac_on_superpoints = j.at("pac_on_superpoints").get<bool>();
    c.pac_on_points = j.at("pac_on_points").get<bool>();
    c.oracle_features = j.at("oracle_features").get<bool>();
    c.fine_voxel_divisor = j.at("fine_voxel_divisor").get<double>();
    c.coarse_voxel_divisor = j.at("coarse_voxel_divisor").get<double>();
    return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return nlohmann::json{{"seed", c.seed},
                          {"learning_rate", c.learning_rate},
                          {"steps", c.steps},
                          {"batch_size", c.batch_size},
                          {"momentum", c.momentum},
                          {"delta_pos", c.delta_pos},
                          {"delta_neg", c.delta_neg},
                          {"gamma_circle", c.gamma_circle},
                          {"overlap_threshold", c.overlap_threshold},
                          {"intermediate_loss_weight", c.intermediate_loss_weight},
                          {"fine_loss_weight", c.fine_loss_weight},
                          {"max_fine_pairs", c.max_fine_pairs}};
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.steps = j.at("steps").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.momentum = j.at("momentum").get<double>();
    c.delta_pos = j.at("delta_pos").get<double>();
    c.delta_neg = j.at("delta_neg").get<double>();
    c.gamma_circle = j.at("gamma_circle").get<double>();
    c.overlap_threshold = j.at("overlap_threshold").get<double>();
    c.intermediate_loss_weight = j.at("intermediate_loss_weight").get<double>();
    c.fine_loss_weight = j.at("fine_loss_weight").get<double>();
    c.max_fine_pairs = j.at("max_fine_pairs").get<int>();
    return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
    return nlohmann::json{{"object", c.object},
                          {"instances", c.instances},
                          {"scenes", c.scenes},
                          {"noise", c.noise},
                          {"occlusion", to_string(c.occlusion)},
                          {"bin_scale", c.bin_scale},
                          {"half_fraction", c.half_fraction},
                          {"seed", c.seed},
                          {"output_dir", c.output_dir},
                          {"pipeline", to_json(c.pipeline)},
                          {"training", to_json(c.training)}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    c.object = j.at("object").get<std::string>();
    c.instances = j.at("instances").get<int>();
    c.scenes = j.at("scenes").get<int>();
    c.noise = j.at("noise").get<double>();
    c.occlusion = occlusion_from_string(j.at("occlusion").get<std::string>());
    c.bin_scale = j.at("bin_scale").get<double>();
    c.half_fraction = j.at("half_fraction").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();
    c.pipeline = matcher_from_json(j.at("pipeline"));
    c.training = train_from_json(j.at("training"));
    return c;
}

inline bool operator==(const MatcherConfig& a, const MatcherConfig& b) {
    return to_json(a) == to_json(b);
}

inline bool operator==(const TrainConfig& a, const TrainConfig& b) {
    return to_json(a) == to_json(b);
}

inline bool operator==(const RunConfig& a, const RunConfig& b) {
    return to_json(a) == to_json(b);
}

}  // namespace pacr
