#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "compose/motion.hpp"
#include "compose/rng.hpp"

using namespace compose;

namespace {

Motion blank_motion(int frames) {
    Motion m;
    m.layout = FeatureLayout::standard();
    m.frames = Mat::Zero(frames, m.layout.total_channels);
    m.frames.col(m.layout.span("root_height").offset).setConstant(0.9);
    return m;
}

std::string temp_path(const std::string& name) {
    return std::string("/tmp/compose_test_") + name;
}

}  // namespace

TEST_CASE("zero velocities give a repeated global pose") {
    Motion m = blank_motion(5);
    const auto& pos = m.layout.span("joint_local_positions");
    for (int c = 0; c < pos.len; ++c) m.frames.col(pos.offset + c).setConstant(0.1 * (c % 3));
    Mat g = to_global_positions(m);
    for (int f = 1; f < 5; ++f) CHECK(g.row(f) == g.row(0));
    CHECK(g(0, 0) == 0);
    CHECK(g(0, 2) == 0);
    CHECK(g(0, 1) == doctest::Approx(0.9));
}

TEST_CASE("straight-line integration accumulates 0.04 m per frame") {
    Motion m = blank_motion(61);
    m.frames.col(m.layout.span("root_linear_velocity_xz").offset + 1).setConstant(0.04);
    Mat g = to_global_positions(m);
    CHECK(g(60, 0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(g(60, 2) == doctest::Approx(0.04 * 60).epsilon(1e-12));
}

TEST_CASE("circular path closes after a full revolution") {
    const int F = 61;
    Motion m = blank_motion(F);
    m.frames.col(m.layout.span("root_angular_velocity").offset).setConstant(2 * M_PI / 60);
    m.frames.col(m.layout.span("root_linear_velocity_xz").offset + 1).setConstant(0.1);
    Mat g = to_global_positions(m);
    Scalar dx = g(60, 0) - g(0, 0), dz = g(60, 2) - g(0, 2);
    CHECK(std::sqrt(dx * dx + dz * dz) < 1e-6);
}

TEST_CASE("concatenation equals rigid transform by the terminal pose") {
    auto rand_motion = [](int frames, uint32_t idx) {
        Motion m = blank_motion(frames);
        NoiseStream s{31, 99, idx};
        Mat noise(frames, m.layout.total_channels);
        s.fill_normal(0, noise);
        m.frames += 0.05 * noise;
        return m;
    };
    Motion a = rand_motion(7, 0), b = rand_motion(9, 1);
    Motion cat = a;
    cat.frames.conservativeResize(16, Eigen::NoChange);
    cat.frames.bottomRows(9) = b.frames;
    Mat g_cat = to_global_positions(cat);
    Mat g_b = apply_planar_pose(to_global_positions(b), terminal_pose(a));
    CHECK((g_cat.bottomRows(9) - g_b).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("motion JSON round-trip is bit-exact") {
    Motion m = blank_motion(4);
    NoiseStream s{77, 99, 0};
    Mat noise(4, m.layout.total_channels);
    s.fill_normal(0, noise);
    m.frames += noise;
    m.label = 3;
    m.meta["origin"] = "test";
    std::string path = temp_path("roundtrip.json");
    save_motion(m, path);
    Motion r = load_motion(path);
    CHECK(r.frames == m.frames);
    CHECK(r.label == m.label);
    CHECK(r.meta.at("origin") == "test");
    CHECK(r.layout == m.layout);
    std::remove(path.c_str());
}

TEST_CASE("load errors name the offending field") {
    std::string path = temp_path("broken.json");
    {
        Motion m = blank_motion(2);
        save_motion(m, path);
        std::ifstream in(path);
        std::string text((std::istreambuf_iterator<char>(in)), {});
        auto pos = text.find("\"fps\"");
        REQUIRE(pos != std::string::npos);
        text.replace(pos, 5, "\"fqs\"");
        std::ofstream out(path);
        out << text;
    }
    CHECK_THROWS_WITH_AS(load_motion(path), doctest::Contains("fps"), IoError);
    std::remove(path.c_str());
}

TEST_CASE("validation names the first non-finite frame and channel") {
    Motion m = blank_motion(3);
    m.frames(1, 4) = std::numeric_limits<Scalar>::quiet_NaN();
    CHECK_THROWS_WITH_AS(validate_motion(m), doctest::Contains("frame 1"), ValidationError);
    CHECK_THROWS_WITH_AS(validate_motion(m), doctest::Contains("channel 4"), ValidationError);
}

TEST_CASE("csv export has one header plus one row per frame and reparses") {
    Motion m = blank_motion(2);
    m.frames(1, m.layout.span("root_linear_velocity_xz").offset) = 0.123456789;
    std::string path = temp_path("export.csv");
    export_csv(m, path);
    std::ifstream in(path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    REQUIRE(lines.size() == 3);
    Mat g = to_global_positions(m);
    // count columns and reparse the last row
    std::stringstream row(lines[2]);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(row, cell, ',')) vals.push_back(std::stod(cell));
    REQUIRE(vals.size() == 1 + 6 * 3);
    CHECK(vals[0] == 1);
    for (int j = 0; j < 18; ++j)
        CHECK(vals[1 + j] == doctest::Approx(g(1, j)).epsilon(1e-8));
    std::remove(path.c_str());
}
