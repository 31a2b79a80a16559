#include <catch2/catch_amalgamated.hpp>

#include "pacr/posenc.hpp"
#include "test_helpers.hpp"

using namespace pacr;
using namespace pacr::testing;

TEST_CASE("encode_scene directional vectors") {
    Pose align(rot_z(0.3), Eigen::Vector3d(1, -2, 0.5));
    PointCloud pts;
    pts.points = {align.translation + Eigen::Vector3d(3, 0, 0),   // unit x
                  align.translation,                              // degenerate
                  align.translation + Eigen::Vector3d(1, 1, 0)};  // diagonal
    DirectionalEncoding enc = encode_scene(pts, align);
    REQUIRE(enc.vectors.row(0).isApprox(Eigen::RowVector3d(1, 0, 0), 1e-12));
    REQUIRE(enc.vectors.row(1).norm() == 0.0);
    REQUIRE(enc.vectors.row(2).isApprox(Eigen::RowVector3d(M_SQRT2 / 2, M_SQRT2 / 2, 0), 1e-12));
}

TEST_CASE("encode_cad directional vectors") {
    PointCloud pts;
    pts.points = {{0, 2, 0}, {1, 0, 0}, {0, 0, 0}};

    SECTION("identity rotation") {
        DirectionalEncoding enc = encode_cad(pts, Pose::identity());
        REQUIRE(enc.vectors.row(0).isApprox(Eigen::RowVector3d(0, 1, 0), 1e-12));
    }
    SECTION("rotation by 90 degrees about z") {
        Pose align(rot_z(M_PI / 2), Eigen::Vector3d(5, 5, 5));  // translation is irrelevant
        DirectionalEncoding enc = encode_cad(pts, align);
        REQUIRE(enc.vectors.row(1).isApprox(Eigen::RowVector3d(0, 1, 0), 1e-12));
        REQUIRE(enc.vectors.row(2).norm() == 0.0);  // origin point is degenerate
    }
}

TEST_CASE("cosine_alignment endpoint values") {
    DirectionalEncoding a, b;
    a.vectors.resize(3, 3);
    a.vectors << 1, 0, 0, 1, 0, 0, 1, 0, 0;
    b.vectors.resize(3, 3);
    b.vectors << 1, 0, 0, -1, 0, 0, 0, 1, 0;
    Eigen::MatrixXd m = cosine_alignment(a, b);
    REQUIRE(m(0, 0) == Catch::Approx(1.0));   // identical
    REQUIRE(m(0, 1) == Catch::Approx(0.0));   // opposite
    REQUIRE(m(0, 2) == Catch::Approx(0.5));   // orthogonal
}

TEST_CASE("zero rows give the neutral alignment value") {
    DirectionalEncoding a, b;
    a.vectors = Eigen::MatrixX3d::Zero(1, 3);
    b.vectors.resize(2, 3);
    b.vectors << 1, 0, 0, 0, 0, 1;
    Eigen::MatrixXd m = cosine_alignment(a, b);
    REQUIRE(m(0, 0) == 0.5);
    REQUIRE(m(0, 1) == 0.5);
}

TEST_CASE("ground-truth consistency of the two encodings") {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        Pose align = random_pose(rng);  // maps CAD into the scene frame
        PointCloud cad = random_cloud(rng, 40);
        PointCloud scene = transform(cad, align);
        DirectionalEncoding es = encode_scene(scene, align);
        DirectionalEncoding eo = encode_cad(cad, align);
        REQUIRE((es.vectors - eo.vectors).cwiseAbs().maxCoeff() < 1e-9);

        Eigen::MatrixXd m = cosine_alignment(es, eo);
        REQUIRE(m.minCoeff() >= 0.0);
        REQUIRE(m.maxCoeff() <= 1.0);
        for (int i = 0; i < 40; ++i) REQUIRE(m(i, i) == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("alignment matrix is invariant under a joint rotation") {
    Rng rng(31);
    Pose align = random_pose(rng);
    PointCloud cad = random_cloud(rng, 25);
    PointCloud scene = transform(random_cloud(rng, 30), align);  // arbitrary scene content

    Eigen::MatrixXd base = cosine_alignment(encode_scene(scene, align), encode_cad(cad, align));

    for (int trial = 0; trial < 20; ++trial) {
        Eigen::Matrix3d s = rng.rotation();
        Pose align2(s * align.rotation, align.translation);
        PointCloud scene2 = scene;
        for (auto& p : scene2.points) p = s * (p - align.translation) + align.translation;
        Eigen::MatrixXd rotated =
            cosine_alignment(encode_scene(scene2, align2), encode_cad(cad, align2));
        REQUIRE((rotated - base).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("squared-norm encoding variant") {
    Pose align = Pose::identity();
    PointCloud pts;
    pts.points = {{2, 0, 0}};
    DirectionalEncoding enc = encode_scene(pts, align, 1e-6, /*squared_norm=*/true);
    REQUIRE(enc.vectors.row(0).isApprox(Eigen::RowVector3d(0.5, 0, 0), 1e-12));
    // cosine_alignment remains clamped to [0,1] even for non-unit inputs
    Eigen::MatrixXd m = cosine_alignment(enc, enc);
    REQUIRE(m.maxCoeff() <= 1.0);
    REQUIRE(m.minCoeff() >= 0.0);
}
