#include "compose/checkpoint.hpp"

#include "compose/motion.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace compose {

using nlohmann::json;

void save_tensor_file(const TensorFile& f, const std::string& path) {
    json header;
    header["version"] = 1;
    header["kind"] = f.kind;
    header["config"] = json::parse(f.config_json.empty() ? "{}" : f.config_json);
    json tensors = json::array();
    uint64_t offset = 0;
    for (const auto& [name, m] : f.tensors) {
        tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
        offset += uint64_t(m.rows()) * m.cols();
    }
    header["tensors"] = std::move(tensors);
    std::string hs = header.dump();

    std::string out;
    out.reserve(8 + hs.size() + offset * 4);
    uint64_t hlen = hs.size();
    for (int i = 0; i < 8; ++i) out.push_back(char((hlen >> (8 * i)) & 0xff));
    out += hs;
    for (const auto& [name, m] : f.tensors)
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                float v = float(m(r, c));
                uint32_t bits;
                std::memcpy(&bits, &v, 4);
                for (int i = 0; i < 4; ++i) out.push_back(char((bits >> (8 * i)) & 0xff));
            }
    atomic_write(path, out);
}

TensorFile load_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (data.size() < 8) throw IoError("checkpoint " + path + ": truncated header length");
    uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= uint64_t(uint8_t(data[i])) << (8 * i);
    if (8 + hlen > data.size()) throw IoError("checkpoint " + path + ": truncated header");
    json header;
    try {
        header = json::parse(data.substr(8, hlen));
    } catch (const json::exception& e) {
        throw IoError("checkpoint " + path + ": bad header: " + e.what());
    }
    if (header.value("version", 0) != 1) throw IoError("checkpoint " + path + ": unsupported version");
    TensorFile f;
    f.kind = header.value("kind", "");
    f.config_json = header.value("config", json::object()).dump();
    const char* base = data.data() + 8 + hlen;
    uint64_t avail = (data.size() - 8 - hlen) / 4;
    for (const auto& t : header.at("tensors")) {
        uint64_t rows = t.at("rows").get<uint64_t>();
        uint64_t cols = t.at("cols").get<uint64_t>();
        uint64_t offset = t.at("offset").get<uint64_t>();
        if (offset + rows * cols > avail)
            throw IoError("checkpoint " + path + ": tensor '" + t.at("name").get<std::string>() +
                          "' extends past end of file");
        Mat m(rows, cols);
        const char* src = base + offset * 4;
        for (uint64_t r = 0; r < rows; ++r)
            for (uint64_t c = 0; c < cols; ++c) {
                uint32_t bits = 0;
                for (int i = 0; i < 4; ++i)
                    bits |= uint32_t(uint8_t(src[(r * cols + c) * 4 + i])) << (8 * i);
                float v;
                std::memcpy(&v, &bits, 4);
                m(r, c) = Scalar(v);
            }
        f.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
    }
    return f;
}

std::string denoiser_config_to_json(const DenoiserConfig& cfg) {
    json j = {{"latent", cfg.latent},     {"heads", cfg.heads},
              {"layers", cfg.layers},     {"ff", cfg.ff},
              {"channels", cfg.channels}, {"max_frames", cfg.max_frames},
              {"classes", cfg.classes},   {"max_timesteps", cfg.max_timesteps}};
    return j.dump();
}

DenoiserConfig denoiser_config_from_json(const std::string& s) {
    json j = json::parse(s);
    DenoiserConfig cfg;
    cfg.latent = j.at("latent").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.layers = j.at("layers").get<int>();
    cfg.ff = j.at("ff").get<int>();
    cfg.channels = j.at("channels").get<int>();
    cfg.max_frames = j.at("max_frames").get<int>();
    cfg.classes = j.at("classes").get<int>();
    cfg.max_timesteps = j.at("max_timesteps").get<int>();
    cfg.validate();
    return cfg;
}

void save_denoiser(const DenoiserParams& p, const std::string& path) {
    TensorFile f;
    f.kind = "denoiser";
    f.config_json = denoiser_config_to_json(p.cfg);
    p.for_each([&](const std::string& name, const Mat& m) { f.tensors.emplace_back(name, m); });
    save_tensor_file(f, path);
}

DenoiserParams load_denoiser(const std::string& path) {
    TensorFile f = load_tensor_file(path);
    if (f.kind != "denoiser") throw IoError("checkpoint " + path + ": kind '" + f.kind + "' is not a denoiser");
    DenoiserConfig cfg = denoiser_config_from_json(f.config_json);
    DenoiserParams shape;
    shape.cfg = cfg;
    DenoiserParams p = zeros_like(shape);
    size_t i = 0;
    p.for_each([&](const std::string& name, Mat& m) {
        if (i >= f.tensors.size() || f.tensors[i].first != name)
            throw IoError("checkpoint " + path + ": missing or misordered tensor '" + name + "'");
        const Mat& src = f.tensors[i].second;
        if (src.rows() != m.rows() || src.cols() != m.cols())
            throw IoError("checkpoint " + path + ": tensor '" + name + "' shape mismatch");
        m = src;
        ++i;
    });
    if (i != f.tensors.size()) throw IoError("checkpoint " + path + ": unexpected extra tensors");
    for (int pos = 0; pos <= cfg.max_frames; ++pos)
        p.pos_enc.row(pos) = sinusoidal_embedding(pos, cfg.latent);
    return p;
}

}  // namespace compose
