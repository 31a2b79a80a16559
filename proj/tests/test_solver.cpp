#include <catch2/catch_amalgamated.hpp>

#include "pacr/solver.hpp"
#include "test_helpers.hpp"

using namespace pacr;
using namespace pacr::testing;

namespace {

CorrespondenceSet one_to_one(int n, double weight = 1.0) {
    CorrespondenceSet corr;
    for (int i = 0; i < n; ++i) corr.pairs.push_back({i, i, weight});
    return corr;
}

double objective(const PointCloud& scene, const PointCloud& cad, const CorrespondenceSet& corr,
                 const Pose& pose) {
    double acc = 0.0;
    for (const auto& c : corr.pairs)
        acc += c.weight *
               (pose.apply(scene.points[c.scene_index]) - cad.points[c.cad_index]).squaredNorm();
    return acc;
}

}  // namespace

TEST_CASE("wsvd_solve recovers exact poses") {
    Rng rng(101);

    SECTION("identical clouds give the identity") {
        PointCloud p = random_cloud(rng, 10);
        Pose pose = wsvd_solve(p, p, one_to_one(10));
        REQUIRE((pose.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
        REQUIRE(pose.translation.norm() < 1e-12);
    }
    SECTION("pure translation") {
        PointCloud p = random_cloud(rng, 10);
        PointCloud q = transform(p, Pose(Eigen::Matrix3d::Identity(), {1, 2, 3}));
        Pose pose = wsvd_solve(p, q, one_to_one(10));
        REQUIRE((pose.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
        REQUIRE((pose.translation - Eigen::Vector3d(1, 2, 3)).norm() < 1e-12);
    }
    SECTION("construct-and-recover with random positive weights") {
        Pose truth(rot_z(M_PI / 2), Eigen::Vector3d(0.3, -0.2, 0.9));
        PointCloud p = random_cloud(rng, 50);
        PointCloud q = transform(p, truth);
        CorrespondenceSet corr;
        for (int i = 0; i < 50; ++i) corr.pairs.push_back({i, i, rng.uniform(0.1, 2.0)});
        Pose pose = wsvd_solve(p, q, corr);
        REQUIRE((pose.rotation - truth.rotation).cwiseAbs().maxCoeff() < 1e-9);
        REQUIRE((pose.translation - truth.translation).norm() < 1e-9);
    }
    SECTION("reflection trap keeps det(R) = +1") {
        // Genuinely mirrored targets: no proper rotation reaches them.
        PointCloud p = random_cloud(rng, 40);
        PointCloud q = p;
        for (auto& pt : q.points) pt.z() = -pt.z();
        Pose pose = wsvd_solve(p, q, one_to_one(40));
        REQUIRE(pose.rotation.determinant() == Catch::Approx(1.0).margin(1e-9));

        // Planar points with in-plane mirrored targets: solvable by a proper
        // 180-degree rotation, still det +1.
        PointCloud flat;
        CorrespondenceSet corr;
        for (int i = 0; i < 30; ++i) {
            flat.points.emplace_back(rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0);
            corr.pairs.push_back({i, i, 1.0});
        }
        PointCloud mirrored = flat;
        for (auto& pt : mirrored.points) pt.y() = -pt.y();
        Pose planar = wsvd_solve(flat, mirrored, corr);
        REQUIRE(planar.rotation.determinant() == Catch::Approx(1.0).margin(1e-9));
        REQUIRE(objective(flat, mirrored, corr, planar) < 1e-18);
    }
}

TEST_CASE("wsvd_solve error paths") {
    Rng rng(7);
    PointCloud p = random_cloud(rng, 10);

    SECTION("fewer than 3 positive weights") {
        CorrespondenceSet corr;
        corr.pairs = {{0, 0, 1.0}, {1, 1, 1.0}, {2, 2, 0.0}};
        REQUIRE_THROWS_WITH(wsvd_solve(p, p, corr),
                            Catch::Matchers::ContainsSubstring("underdetermined"));
    }
    SECTION("collinear points are degenerate") {
        PointCloud line;
        for (int i = 0; i < 10; ++i) line.points.emplace_back(i * 0.1, 0, 0);
        REQUIRE_THROWS_WITH(wsvd_solve(line, line, one_to_one(10)),
                            Catch::Matchers::ContainsSubstring("degenerate configuration"));
    }
    SECTION("out of range index") {
        CorrespondenceSet corr;
        corr.pairs = {{0, 0, 1.0}, {1, 1, 1.0}, {99, 2, 1.0}};
        REQUIRE_THROWS_AS(wsvd_solve(p, p, corr), Error);
    }
}

TEST_CASE("wsvd_solve optimality and weight behavior") {
    Rng rng(404);
    PointCloud p = random_cloud(rng, 60);
    Pose truth = random_pose(rng);
    PointCloud q = transform(p, truth);
    // Perturb targets so the optimum is not exactly the constructor pose.
    for (auto& pt : q.points)
        pt += Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * 0.01;
    CorrespondenceSet corr;
    for (int i = 0; i < 60; ++i) corr.pairs.push_back({i, i, rng.uniform(0.2, 1.0)});
    Pose best = wsvd_solve(p, q, corr);
    const double f0 = objective(p, q, corr, best);

    SECTION("random small perturbations never improve the objective") {
        const double diameter = cloud_diameter(p);
        for (int trial = 0; trial < 200; ++trial) {
            const double angle = rng.uniform(0.0, 5.0 * M_PI / 180.0);
            Eigen::Matrix3d dr = rot_axis(angle, rng.unit_vector());
            Eigen::Vector3d dt = rng.unit_vector() * rng.uniform(0.0, 0.05 * diameter);
            Pose perturbed(dr * best.rotation, dr * best.translation + dt);
            REQUIRE(objective(p, q, corr, perturbed) >= f0 - 1e-12);
        }
    }
    SECTION("weight scale invariance") {
        for (double c : {1e-3, 0.5, 7.0, 1e4}) {
            CorrespondenceSet scaled = corr;
            for (auto& pr : scaled.pairs) pr.weight *= c;
            Pose pose = wsvd_solve(p, q, scaled);
            REQUIRE((pose.rotation - best.rotation).cwiseAbs().maxCoeff() < 1e-12);
            REQUIRE((pose.translation - best.translation).norm() < 1e-12);
        }
    }
    SECTION("zero-weight pairs have no effect") {
        CorrespondenceSet padded = corr;
        for (int i = 0; i < 20; ++i)
            padded.pairs.push_back({static_cast<int>(rng.uniform_int(0, 59)),
                                    static_cast<int>(rng.uniform_int(0, 59)), 0.0});
        Pose pose = wsvd_solve(p, q, padded);
        REQUIRE((pose.rotation - best.rotation).cwiseAbs().maxCoeff() < 1e-12);
        REQUIRE((pose.translation - best.translation).norm() < 1e-12);
    }
}

TEST_CASE("residual_rmse") {
    Rng rng(55);
    PointCloud p = random_cloud(rng, 20);

    SECTION("exact correspondence under the true pose") {
        Pose truth = random_pose(rng);
        PointCloud q = transform(p, truth);
        REQUIRE(residual_rmse(p, q, one_to_one(20), truth) < 1e-12);
    }
    SECTION("uniform unit offset") {
        PointCloud q = p;
        for (auto& pt : q.points) pt.x() += 1.0;
        REQUIRE(residual_rmse(p, q, one_to_one(20), Pose::identity()) == Catch::Approx(1.0));
    }
    SECTION("matches the direct formula on noisy data") {
        PointCloud q = p;
        CorrespondenceSet corr;
        for (int i = 0; i < 20; ++i) {
            q.points[i] += 0.05 * Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
            corr.pairs.push_back({i, i, rng.uniform(0.1, 1.0)});
        }
        Pose pose = random_pose(rng);
        double total_w = 0.0, acc = 0.0;
        for (const auto& c : corr.pairs) {
            total_w += c.weight;
            acc += c.weight * (pose.apply(p.points[c.scene_index]) - q.points[c.cad_index])
                                  .squaredNorm();
        }
        REQUIRE(residual_rmse(p, q, corr, pose) == Catch::Approx(std::sqrt(acc / total_w)));
    }
    SECTION("empty correspondence raises") {
        REQUIRE_THROWS_WITH(residual_rmse(p, p, CorrespondenceSet{}, Pose::identity()),
                            Catch::Matchers::ContainsSubstring("empty correspondence"));
    }
}
