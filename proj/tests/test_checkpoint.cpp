#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "compose/checkpoint.hpp"

using namespace compose;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), {});
}

DenoiserConfig tiny_config() {
    DenoiserConfig cfg;
    cfg.latent = 8;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.ff = 16;
    cfg.channels = 5;
    cfg.max_frames = 8;
    cfg.classes = 3;
    return cfg;
}

}  // namespace

TEST_CASE("denoiser checkpoints stabilize after one save/load cycle") {
    DenoiserParams p = init_params(tiny_config(), 12);
    std::string p1 = "/tmp/compose_ckpt_a.bin", p2 = "/tmp/compose_ckpt_b.bin";
    save_denoiser(p, p1);
    DenoiserParams r = load_denoiser(p1);
    CHECK(r.cfg == p.cfg);
    save_denoiser(r, p2);
    CHECK(slurp(p1) == slurp(p2));
    // float32 storage: loaded values within rounding of the originals
    Scalar max_err = 0;
    size_t i = 0;
    std::vector<const Mat*> orig;
    p.for_each([&](const std::string&, const Mat& m) { orig.push_back(&m); });
    r.for_each([&](const std::string&, const Mat& m) {
        max_err = std::max(max_err, (m - *orig[i++]).cwiseAbs().maxCoeff());
    });
    CHECK(max_err < 1e-6);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("tensor container round-trips names, shapes, and payload") {
    TensorFile f;
    f.kind = "test";
    f.config_json = "{\"a\":1}";
    Mat m(2, 3);
    m << 1, 2, 3, 4, 5, 6;
    f.tensors.emplace_back("alpha", m);
    f.tensors.emplace_back("beta", Mat::Zero(1, 4));
    std::string path = "/tmp/compose_tensorfile.bin";
    save_tensor_file(f, path);
    TensorFile r = load_tensor_file(path);
    CHECK(r.kind == "test");
    REQUIRE(r.tensors.size() == 2);
    CHECK(r.tensors[0].first == "alpha");
    CHECK(r.tensors[0].second == m);
    CHECK(r.tensors[1].second.cols() == 4);
    std::remove(path.c_str());
}

TEST_CASE("loading the wrong kind fails with a named error") {
    TensorFile f;
    f.kind = "other";
    f.tensors.emplace_back("x", Mat::Zero(1, 1));
    std::string path = "/tmp/compose_wrongkind.bin";
    save_tensor_file(f, path);
    CHECK_THROWS_AS(load_denoiser(path), IoError);
    std::remove(path.c_str());
}

TEST_CASE("truncated files are rejected") {
    DenoiserParams p = init_params(tiny_config(), 1);
    std::string path = "/tmp/compose_trunc.bin";
    save_denoiser(p, path);
    std::string bytes = slurp(path);
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), long(bytes.size() / 2));
    out.close();
    CHECK_THROWS_AS(load_denoiser(path), IoError);
    std::remove(path.c_str());
}

TEST_CASE("config JSON round-trip") {
    DenoiserConfig cfg = tiny_config();
    DenoiserConfig back = denoiser_config_from_json(denoiser_config_to_json(cfg));
    CHECK(back == cfg);
}
