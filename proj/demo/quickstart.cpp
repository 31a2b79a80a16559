// Minimal end-to-end walkthrough: generate a one-instance bin scene, register
// it against the CAD cloud with ground-truth indicator features (no training
// required), and report the resulting ADD error.

#include <iostream>

#include "pacr/pacr.hpp"

int main() {
    const auto objects = pacr::builtin_objects();
    const pacr::SyntheticObject& object = *pacr::find_object(objects, "twin-boss");

    const auto scene = pacr::generate_scene(object, /*n_instances=*/1, /*seed=*/42,
                                            /*noise_sigma=*/0.0);
    std::cout << "object: " << object.name << " (diameter " << object.diameter << " m)\n";
    std::cout << "visible points: " << scene[0].visible.size() << " (visibility "
              << scene[0].visibility << ")\n";

    pacr::MatcherConfig config;
    config.oracle_features = true;  // geometric pipeline check, no learned weights
    pacr::AttentionWeights no_weights;
    const pacr::EstimationResult result =
        pacr::estimate(scene[0].visible, object.cloud, no_weights, config, scene[0].gt_pose);

    const pacr::PointCloud eval = pacr::subsample_cloud(object.cloud, 2048, 1);
    const double add = pacr::add_error(eval, result.pose, scene[0].gt_pose);
    std::cout << "ADD error: " << add << " m (" << 100.0 * add / object.diameter
              << "% of diameter)\n";
    std::cout << "refinement steps: " << result.coarse_trace.size() - 1 << " coarse, "
              << result.fine_trace.size() - 1 << " fine\n";
    return add < 0.1 * object.diameter ? 0 : 1;
}
