#pragma once

#include <string>
#include <utility>
#include <vector>

#include "compose/network.hpp"

namespace compose {

// Generic tensor container: an 8-byte little-endian header length, a JSON
// header {"version", "kind", "config", "tensors":[{name,rows,cols,offset}]},
// then row-major little-endian float32 tensor data. Offsets are element
// counts into the data section.
struct TensorFile {
    std::string kind;
    std::string config_json;
    std::vector<std::pair<std::string, Mat>> tensors;
};

void save_tensor_file(const TensorFile& f, const std::string& path);
TensorFile load_tensor_file(const std::string& path);

void save_denoiser(const DenoiserParams& p, const std::string& path);
DenoiserParams load_denoiser(const std::string& path);

std::string denoiser_config_to_json(const DenoiserConfig& cfg);
DenoiserConfig denoiser_config_from_json(const std::string& s);

}  // namespace compose
