// Command-line front end: scene generation, training, estimation, evaluation
// and the ablation harness, all reproducible from a config plus a seed.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pacr/ablation.hpp"
#include "pacr/pacr.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string scene_filename(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%03d.pacr", index);
    return buf;
}

std::string sidecar_filename(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%03d.json", index);
    return buf;
}

const pacr::SyntheticObject* require_object(const std::vector<pacr::SyntheticObject>& objects,
                                            const std::string& name) {
    const pacr::SyntheticObject* obj = pacr::find_object(objects, name);
    if (!obj) {
        std::cerr << "unknown object '" << name << "'; valid names:";
        for (const auto& o : objects) std::cerr << " " << o.name;
        std::cerr << "\n";
    }
    return obj;
}

struct LoadedScene {
    std::vector<pacr::SceneInstance> instances;
    json sidecar;
};

LoadedScene load_scene(const fs::path& scene_path, const fs::path& sidecar_path) {
    LoadedScene out;
    const std::vector<pacr::PointCloud> clouds = pacr::read_scene_file(scene_path);
    out.sidecar = pacr::read_json(sidecar_path);
    const auto& inst_json = out.sidecar.at("instances");
    pacr::require(clouds.size() == inst_json.size(),
                  "instance count mismatch between " + scene_path.string() + " and sidecar");
    for (std::size_t k = 0; k < clouds.size(); ++k) {
        pacr::SceneInstance inst;
        inst.id = inst_json.at(k).at("id").get<int>();
        inst.gt_pose = pacr::pose_from_json(inst_json.at(k).at("pose"));
        inst.visibility = inst_json.at(k).at("visibility").get<double>();
        inst.visible = clouds[k];
        out.instances.push_back(std::move(inst));
    }
    return out;
}

/// Loads every scene listed in a data directory's manifest.
std::vector<LoadedScene> load_data_dir(const fs::path& dir, std::string& object_name) {
    const json manifest = pacr::read_json(dir / "manifest.json");
    object_name = manifest.at("object").get<std::string>();
    std::vector<LoadedScene> scenes;
    for (const auto& entry : manifest.at("scenes"))
        scenes.push_back(load_scene(dir / entry.at("file").get<std::string>(),
                                    dir / entry.at("sidecar").get<std::string>()));
    return scenes;
}

int cmd_generate(const pacr::RunConfig& cfg) {
    auto objects = pacr::builtin_objects();
    const pacr::SyntheticObject* obj = require_object(objects, cfg.object);
    if (!obj) return 2;

    const fs::path out(cfg.output_dir);
    fs::create_directories(out);
    json manifest;
    manifest["object"] = obj->name;
    manifest["config"] = pacr::to_json(cfg);
    manifest["scenes"] = json::array();
    for (int s = 0; s < cfg.scenes; ++s) {
        const std::uint64_t scene_seed = cfg.seed + static_cast<std::uint64_t>(s);
        auto instances = pacr::generate_scene(*obj, cfg.instances, scene_seed, cfg.noise,
                                              cfg.occlusion, cfg.bin_scale, cfg.half_fraction);
        std::vector<pacr::PointCloud> clouds;
        for (const auto& inst : instances) clouds.push_back(inst.visible);
        pacr::write_scene_file(out / scene_filename(s), clouds);
        pacr::write_json(out / sidecar_filename(s),
                         pacr::scene_sidecar(*obj, scene_seed, cfg.noise, cfg.occlusion,
                                             instances));
        manifest["scenes"].push_back({{"file", scene_filename(s)},
                                      {"sidecar", sidecar_filename(s)},
                                      {"seed", scene_seed}});
        std::cout << scene_filename(s) << " seed=" << scene_seed
                  << " instances=" << instances.size() << "\n";
    }
    pacr::write_json(out / "manifest.json", manifest);
    std::cout << "manifest: " << (out / "manifest.json").string() << "\n";
    return 0;
}

int cmd_train(const pacr::RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir) {
    std::string object_name;
    auto scenes = load_data_dir(data_dir, object_name);
    auto objects = pacr::builtin_objects();
    const pacr::SyntheticObject* obj = require_object(objects, object_name);
    if (!obj) return 2;

    std::vector<pacr::SceneInstance> all;
    for (auto& s : scenes)
        for (auto& inst : s.instances) all.push_back(std::move(inst));
    pacr::TrainingSet set = pacr::prepare_training_set({{obj, all}}, cfg.pipeline);
    pacr::TrainResult result = pacr::train(set, cfg.training, cfg.pipeline);

    fs::create_directories(out_dir);
    pacr::save_weights(out_dir / "weights.pacw", result.weights);
    pacr::write_loss_csv(out_dir / "loss.csv", result.loss_curve);
    std::cout << "trained " << cfg.training.steps << " steps on " << set.instances.size()
              << " instances; final loss "
              << (result.loss_curve.empty() ? 0.0 : result.loss_curve.back()) << "\n";
    std::cout << "weights: " << (out_dir / "weights.pacw").string() << "\n";
    return 0;
}

json trace_to_json(const pacr::RefinementTrace& trace) {
    json arr = json::array();
    for (const auto& step : trace.steps) {
        json s;
        s["pose"] = pacr::pose_to_json(step.pose);
        s["corr_size"] = step.corr.size();
        if (std::isfinite(step.residual)) s["residual"] = step.residual;
        if (std::isfinite(step.inlier_precision)) s["inlier_precision"] = step.inlier_precision;
        arr.push_back(std::move(s));
    }
    return arr;
}

int cmd_estimate(const pacr::RunConfig& cfg, const fs::path& scene_path,
                 const fs::path& weights_path, const fs::path& out_path, bool with_trace,
                 bool oracle) {
    if (!fs::exists(weights_path) && !(oracle || cfg.pipeline.oracle_features)) {
        std::cerr << "missing weights file: " << weights_path.string() << "\n";
        return 1;
    }
    pacr::AttentionWeights weights;
    if (fs::exists(weights_path)) weights = pacr::load_weights(weights_path);

    fs::path sidecar_path = scene_path;
    sidecar_path.replace_extension(".json");
    LoadedScene scene = load_scene(scene_path, sidecar_path);
    auto objects = pacr::builtin_objects();
    const pacr::SyntheticObject* obj =
        require_object(objects, scene.sidecar.at("object").get<std::string>());
    if (!obj) return 2;

    pacr::MatcherConfig pipeline = cfg.pipeline;
    if (oracle) pipeline.oracle_features = true;

    json result;
    result["scene"] = scene_path.filename().string();
    result["object"] = obj->name;
    result["instances"] = json::array();
    json timing = json::array();
    for (const auto& inst : scene.instances) {
        json entry;
        entry["id"] = inst.id;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            std::optional<pacr::Pose> gt;
            if (pipeline.oracle_features) gt = inst.gt_pose;
            pacr::EstimationResult est =
                pacr::estimate(inst.visible, obj->cloud, weights, pipeline, gt);
            entry["pose"] = pacr::pose_to_json(est.pose);
            entry["warnings"] = est.diagnostics.warnings;
            entry["diagnostics"] = {{"scene_coarse", est.diagnostics.scene_coarse},
                                    {"cad_coarse", est.diagnostics.cad_coarse},
                                    {"scene_fine", est.diagnostics.scene_fine},
                                    {"cad_fine", est.diagnostics.cad_fine}};
            if (with_trace) {
                entry["trace"] = trace_to_json(est.coarse_trace);
                entry["fine_trace"] = trace_to_json(est.fine_trace);
            }
        } catch (const pacr::Error& e) {
            entry["failed"] = e.what();
        }
        timing.push_back(
            {{"id", inst.id},
             {"seconds",
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}});
        result["instances"].push_back(std::move(entry));
    }
    result["timing"] = std::move(timing);
    if (out_path.empty())
        std::cout << result.dump(2) << "\n";
    else
        pacr::write_json(out_path, result);
    return 0;
}

int cmd_evaluate(const fs::path& results_path, const fs::path& gt_path,
                 const fs::path& out_path) {
    const json results = pacr::read_json(results_path);
    const json gt = pacr::read_json(gt_path);
    if (!results.contains("instances") || results.at("instances").empty()) {
        std::cerr << "empty results file: " << results_path.string() << "\n";
        return 1;
    }

    auto objects = pacr::builtin_objects();
    const pacr::SyntheticObject* obj =
        require_object(objects, gt.at("object").get<std::string>());
    if (!obj) return 2;
    const bool symmetric = obj->symmetry != pacr::Symmetry::none;
    const pacr::PointCloud eval_cloud = pacr::subsample_cloud(obj->cloud, pacr::kEvalCloudCap, 91);

    std::map<int, pacr::Pose> gt_poses;
    for (const auto& inst : gt.at("instances"))
        gt_poses[inst.at("id").get<int>()] = pacr::pose_from_json(inst.at("pose"));

    std::map<int, const json*> result_map;
    for (const auto& inst : results.at("instances"))
        result_map[inst.at("id").get<int>()] = &inst;

    std::vector<int> unmatched;
    for (const auto& [id, _] : gt_poses)
        if (!result_map.count(id)) unmatched.push_back(id);
    for (const auto& [id, _] : result_map)
        if (!gt_poses.count(id)) unmatched.push_back(id);
    if (!unmatched.empty()) {
        std::cerr << "unmatched instance ids:";
        for (int id : unmatched) std::cerr << " " << id;
        std::cerr << "\n";
        return 1;
    }

    pacr::EvalReport report;
    report.variant = "default";
    for (const auto& [id, entry] : result_map) {
        pacr::InstanceScore score;
        score.object = obj->name;
        score.instance_id = id;
        score.diameter = obj->diameter;
        score.symmetric = symmetric;
        if (entry->contains("failed")) {
            score.failed = true;
        } else {
            score.error = pacr::pose_error(eval_cloud, pacr::pose_from_json(entry->at("pose")),
                                           gt_poses.at(id), symmetric);
            score.correct = score.error < pacr::kRecallThreshold * score.diameter;
        }
        report.instances.push_back(std::move(score));
    }

    const pacr::RecallSummary summary = pacr::average_recall(report);
    std::cout << pacr::render_ar_table({report});

    if (!out_path.empty()) {
        json out;
        out["per_object"] = summary.per_object;
        out["mean"] = summary.mean;
        out["instances"] = json::array();
        for (const auto& s : report.instances)
            out["instances"].push_back({{"id", s.instance_id},
                                        {"object", s.object},
                                        {"error", s.failed ? json() : json(s.error)},
                                        {"correct", s.correct},
                                        {"symmetric", s.symmetric},
                                        {"diameter", s.diameter},
                                        {"failed", s.failed}});
        pacr::write_json(out_path, out);
    }
    return 0;
}

int cmd_ablate(const pacr::RunConfig& cfg, const fs::path& train_dir, const fs::path& test_dir,
               const fs::path& out_dir) {
    std::string train_object, test_object;
    auto train_scenes = load_data_dir(train_dir, train_object);
    auto test_scenes = load_data_dir(test_dir, test_object);
    pacr::require(train_object == test_object, "train/test object mismatch");
    auto objects = pacr::builtin_objects();
    const pacr::SyntheticObject* obj = require_object(objects, train_object);
    if (!obj) return 2;

    std::vector<pacr::SceneInstance> train_insts;
    for (auto& s : train_scenes)
        for (auto& inst : s.instances) train_insts.push_back(std::move(inst));

    std::vector<pacr::EvalCase> suite;
    for (std::size_t s = 0; s < test_scenes.size(); ++s)
        for (const auto& inst : test_scenes[s].instances)
            suite.push_back({obj->name, static_cast<int>(s) * 1000 + inst.id, inst.visible,
                             inst.gt_pose});

    // Train each distinct pipeline configuration once.
    std::vector<pacr::VariantSpec> specs = pacr::positional_encoding_variants(cfg.pipeline);
    for (auto& extra : pacr::stage_variants(cfg.pipeline)) {
        bool dup = false;
        for (const auto& s : specs) dup |= (pacr::to_json(s.config) == pacr::to_json(extra.config));
        if (!dup) specs.push_back(extra);
    }
    // Pyramids, overlap matrices and fine matches depend only on the shared
    // geometry, so the prepared set is reused across every variant.
    pacr::TrainingSet set = pacr::prepare_training_set({{obj, train_insts}}, cfg.pipeline);
    std::map<std::string, pacr::AttentionWeights> trained;
    for (const auto& spec : specs) {
        const std::string key = pacr::to_json(spec.config).dump();
        if (trained.count(key)) continue;
        std::cout << "training variant " << spec.label << " (" << cfg.training.steps
                  << " steps)...\n";
        trained[key] = pacr::train(set, cfg.training, spec.config).weights;
    }
    auto variants_for = [&](const std::vector<pacr::VariantSpec>& list) {
        std::vector<pacr::AblationVariant> vs;
        for (const auto& spec : list)
            vs.push_back({spec.label, spec.config, trained.at(pacr::to_json(spec.config).dump())});
        return vs;
    };

    const auto pe_reports =
        pacr::run_ablation({*obj}, suite, variants_for(pacr::positional_encoding_variants(cfg.pipeline)));
    const auto stage_reports =
        pacr::run_ablation({*obj}, suite, variants_for(pacr::stage_variants(cfg.pipeline)));

    std::cout << "\npositional encoding comparison\n"
              << pacr::render_ar_table(pe_reports) << "\nmatching-stage comparison\n"
              << pacr::render_ar_table(stage_reports);

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        json out;
        auto table_json = [](const std::vector<pacr::EvalReport>& reports) {
            json rows = json::array();
            for (const auto& rep : reports) {
                if (rep.instances.empty()) {
                    rows.push_back({{"variant", rep.variant}, {"absent", true}});
                    continue;
                }
                const pacr::RecallSummary s = pacr::average_recall(rep);
                rows.push_back({{"variant", rep.variant},
                                {"per_object", s.per_object},
                                {"mean", s.mean}});
            }
            return rows;
        };
        out["positional_encoding"] = table_json(pe_reports);
        out["matching_stage"] = table_json(stage_reports);
        pacr::write_json(out_dir / "ablation.json", out);
        std::cout << "report: " << (out_dir / "ablation.json").string() << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"position-aware correspondence pose estimation"};
    app.require_subcommand(1);

    pacr::RunConfig cfg;
    // A config file, when present, provides the baseline the flags override.
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") {
            try {
                cfg = pacr::run_config_from_json(pacr::read_json(argv[i + 1]));
            } catch (const std::exception& e) {
                std::cerr << e.what() << "\n";
                return 1;
            }
        }
    }
    std::string config_path;  // consumed above; registered so CLI11 accepts it

    std::string occlusion = to_string(cfg.occlusion);
    std::string positional = to_string(cfg.pipeline.positional);

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--seed", cfg.seed, "root seed");
        sub->add_option("--top-k", cfg.pipeline.top_k, "top-K correspondences");
        sub->add_option("--refine-steps", cfg.pipeline.refine_steps, "refinement steps N");
        sub->add_option("--gate-threshold", cfg.pipeline.gate_threshold, "position gate");
        sub->add_flag("--no-gate{false}", cfg.pipeline.use_position_gate,
                      "disable the position gate");
        sub->add_option("--positional", positional, "none|coords|directional");
        sub->add_flag("--eq2-squared", cfg.pipeline.squared_norm_encoding,
                      "squared-norm encoding variant");
        sub->add_flag_callback(
            "--eq3-probabilities",
            [&] { cfg.pipeline.reweight_mode = pacr::ReweightMode::probabilities; },
            "reweight probabilities instead of logits");
    };

    // generate
    auto* gen = app.add_subcommand("generate", "generate synthetic bin scenes");
    gen->add_option("--object", cfg.object, "object name");
    gen->add_option("--instances", cfg.instances, "instances per scene");
    gen->add_option("--scenes", cfg.scenes, "number of scenes");
    gen->add_option("--noise", cfg.noise, "depth noise sigma in meters");
    gen->add_option("--occlusion", occlusion, "none|depth|half");
    gen->add_option("--bin-scale", cfg.bin_scale, "bin side as a diameter multiple");
    gen->add_option("--half-fraction", cfg.half_fraction, "fraction removed in half mode");
    gen->add_option("--out", cfg.output_dir, "output directory");
    add_common(gen);

    // train
    std::string data_dir, out_dir = "out";
    auto* tr = app.add_subcommand("train", "train attention weights on generated scenes");
    tr->add_option("--data", data_dir, "directory with manifest.json")->required();
    tr->add_option("--out", out_dir, "output directory");
    tr->add_option("--steps", cfg.training.steps, "training steps");
    tr->add_option("--batch-size", cfg.training.batch_size, "batch size");
    tr->add_option("--learning-rate", cfg.training.learning_rate, "learning rate");
    tr->add_option("--train-seed", cfg.training.seed, "training seed");
    add_common(tr);

    // estimate
    std::string scene_file, weights_file, result_file;
    bool with_trace = false, oracle = false;
    auto* est = app.add_subcommand("estimate", "estimate poses for a scene file");
    est->add_option("--scene", scene_file, "scene .pacr file")->required();
    est->add_option("--weights", weights_file, "weights .pacw file");
    est->add_option("--out", result_file, "result JSON (stdout when omitted)");
    est->add_flag("--trace", with_trace, "include per-step poses");
    est->add_flag("--oracle", oracle, "ground-truth indicator features (diagnostic)");
    add_common(est);

    // evaluate
    std::string results_file, gt_file, report_file;
    auto* ev = app.add_subcommand("evaluate", "score results against ground truth");
    ev->add_option("--results", results_file, "estimation result JSON")->required();
    ev->add_option("--gt", gt_file, "ground-truth sidecar JSON")->required();
    ev->add_option("--out", report_file, "report JSON");

    // ablate
    std::string train_data, test_data, ablate_out;
    auto* ab = app.add_subcommand("ablate", "train and compare pipeline variants");
    ab->add_option("--train-data", train_data, "training data directory")->required();
    ab->add_option("--test-data", test_data, "test data directory")->required();
    ab->add_option("--out", ablate_out, "output directory");
    ab->add_option("--steps", cfg.training.steps, "training steps per variant");
    ab->add_option("--batch-size", cfg.training.batch_size, "batch size");
    ab->add_option("--train-seed", cfg.training.seed, "training seed");
    add_common(ab);

    CLI11_PARSE(app, argc, argv);

    try {
        cfg.occlusion = pacr::occlusion_from_string(occlusion);
        cfg.pipeline.positional = pacr::positional_from_string(positional);
        if (const char* env = std::getenv("PACR_SEED"))
            cfg.seed = std::strtoull(env, nullptr, 10);

        if (gen->parsed()) return cmd_generate(cfg);
        if (tr->parsed()) return cmd_train(cfg, data_dir, out_dir);
        if (est->parsed())
            return cmd_estimate(cfg, scene_file, weights_file, result_file, with_trace, oracle);
        if (ev->parsed()) return cmd_evaluate(results_file, gt_file, report_file);
        if (ab->parsed()) return cmd_ablate(cfg, train_data, test_data, ablate_out);
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 0;
}
