#include <catch2/catch_amalgamated.hpp>

#include "pacr/features.hpp"
#include "pacr/scenegen.hpp"
#include "test_helpers.hpp"

using namespace pacr;
using namespace pacr::testing;

TEST_CASE("builtin objects are well formed") {
    auto objects = builtin_objects();
    REQUIRE(objects.size() >= 4);

    for (const auto& obj : objects) {
        INFO("object " << obj.name);
        REQUIRE(!obj.cloud.empty());
        REQUIRE(centroid(obj.cloud).norm() < 1e-9);  // centered by construction
        const double d = cloud_diameter(obj.cloud);
        REQUIRE(std::abs(d - obj.diameter) <= 0.01 * obj.diameter);
    }

    SECTION("the expected names exist") {
        for (const char* name : {"twin-boss", "l-bracket", "ring", "hex-nut"})
            REQUIRE(find_object(objects, name) != nullptr);
    }
    SECTION("ring diameter equals twice its outer radius within 1%") {
        const SyntheticObject* ring = find_object(objects, "ring");
        double r_out = 0.0;
        for (const auto& p : ring->cloud.points) r_out = std::max(r_out, p.head<2>().norm());
        REQUIRE(std::abs(ring->diameter - 2.0 * r_out) <= 0.01 * ring->diameter);
        REQUIRE(ring->symmetry == Symmetry::continuous);
    }
    SECTION("ring stays under the evaluation cloud cap") {
        REQUIRE(find_object(objects, "ring")->cloud.size() <= 2048);
    }
}

TEST_CASE("twin-boss plate has identical, well separated boss patches") {
    TwinBossPlate plate = make_twin_boss_plate();
    const SyntheticObject& obj = plate.object;
    const Eigen::Vector3d delta = plate.boss_b - plate.boss_a;

    SECTION("boss centers are at least 0.4 diameters apart") {
        REQUIRE(delta.norm() >= 0.4 * obj.diameter);
    }

    // Points on boss A (cylinder + cap above the plate face).
    std::vector<int> boss_a_points;
    for (std::size_t i = 0; i < obj.cloud.size(); ++i) {
        const Eigen::Vector3d rel = obj.cloud.points[i] - plate.boss_a;
        if (rel.z() > 1e-6 && rel.head<2>().norm() < plate.boss_radius + 1e-9)
            boss_a_points.push_back(static_cast<int>(i));
    }
    REQUIRE(boss_a_points.size() > 50);

    SECTION("every boss-A point has an exact twin on boss B") {
        KdTree tree(obj.cloud);
        for (int idx : boss_a_points) {
            const auto [j, dist] = tree.nearest(obj.cloud.points[idx] + delta);
            REQUIRE(dist < 1e-9);
        }
    }
    SECTION("matched boss points have near-identical local descriptors") {
        KdTree tree(obj.cloud);
        DescriptorEngine engine(obj.cloud, 2.0 * obj.diameter / 64.0);
        double worst = 0.0;
        for (std::size_t k = 0; k < boss_a_points.size(); k += 7) {
            const int a = boss_a_points[k];
            const int b = tree.nearest(obj.cloud.points[a] + delta).first;
            worst = std::max(worst,
                             (engine.descriptor(a) - engine.descriptor(b)).cwiseAbs().maxCoeff());
        }
        REQUIRE(worst < 1e-3);
    }
    SECTION("the twin-boss pyramid has at least 8 superpoints at defaults") {
        FeaturePyramid pyr =
            build_pyramid(obj.cloud, PyramidConfig::for_diameter(obj.diameter));
        REQUIRE(pyr.coarse_points.size() >= 8);
    }
}

TEST_CASE("generate_scene basic contracts") {
    auto objects = builtin_objects();
    const SyntheticObject& nut = *find_object(objects, "hex-nut");

    SECTION("single instance, no occlusion, no noise is the transformed CAD") {
        auto scene = generate_scene(nut, 1, 5, 0.0, OcclusionMode::none);
        REQUIRE(scene.size() == 1);
        REQUIRE(scene[0].visibility == 1.0);
        // Ground-truth consistency: gt maps every visible point onto the CAD.
        KdTree cad_tree(nut.cloud);
        for (const auto& p : scene[0].visible.points)
            REQUIRE(cad_tree.nearest(scene[0].gt_pose.apply(p)).second < 1e-9);
    }
    SECTION("same seed reproduces the scene bit for bit") {
        auto a = generate_scene(nut, 3, 77, 0.001);
        auto b = generate_scene(nut, 3, 77, 0.001);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            REQUIRE(a[i].visible.size() == b[i].visible.size());
            REQUIRE(a[i].gt_pose.rotation == b[i].gt_pose.rotation);
            for (std::size_t k = 0; k < a[i].visible.size(); ++k)
                REQUIRE(a[i].visible.points[k] == b[i].visible.points[k]);
        }
    }
    SECTION("stacked instances occlude each other") {
        auto scene = generate_scene(nut, 5, 11, 0.0, OcclusionMode::depth, 1.2);
        double lo_z = 1e300, hi_z = -1e300;
        double lo_vis = 0.0, hi_vis = 0.0;
        for (const auto& inst : scene) {
            REQUIRE(inst.visibility > 0.0);
            REQUIRE(inst.visibility <= 1.0);
            // mean height of the full instance, recovered from the gt pose
            const Eigen::Vector3d center = inverse(inst.gt_pose).translation;
            if (center.z() < lo_z) {
                lo_z = center.z();
                lo_vis = inst.visibility;
            }
            if (center.z() > hi_z) {
                hi_z = center.z();
                hi_vis = inst.visibility;
            }
        }
        REQUIRE(lo_vis <= hi_vis);  // the lowest instance sees no more than the top one
    }
    SECTION("no interpenetration between visible clouds") {
        auto scene = generate_scene(nut, 4, 23, 0.0, OcclusionMode::depth, 1.4);
        for (std::size_t i = 0; i < scene.size(); ++i) {
            if (scene[i].visible.empty()) continue;
            KdTree tree(scene[i].visible);
            for (std::size_t j = i + 1; j < scene.size(); ++j)
                for (const auto& p : scene[j].visible.points)
                    REQUIRE(tree.nearest(p).second > 0.0);
        }
    }
    SECTION("half-space crop removes the requested fraction") {
        auto scene = generate_scene(nut, 1, 3, 0.0, OcclusionMode::half, 1.6, 0.6);
        REQUIRE(scene[0].visibility == Catch::Approx(0.4).margin(0.02));
    }
    SECTION("noisy points stay near the model surface") {
        const double sigma = 0.2 * nut.spacing;
        auto scene = generate_scene(nut, 1, 9, sigma, OcclusionMode::none);
        KdTree cad_tree(nut.cloud);
        for (const auto& p : scene[0].visible.points)
            REQUIRE(cad_tree.nearest(scene[0].gt_pose.apply(p)).second <
                    sigma + nut.spacing);
    }
    SECTION("impossible packing reports placement failure") {
        REQUIRE_THROWS_WITH(generate_scene(nut, 40, 1, 0.0, OcclusionMode::depth, 0.3),
                            Catch::Matchers::ContainsSubstring("placement failed"));
    }
}
