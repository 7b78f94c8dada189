#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <torch/torch.h>

#include "difl/model_bank.hpp"

namespace testing {

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("difl_unit_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline difl::NetworkConfig micro_config(int64_t size = 16) {
    difl::NetworkConfig c;
    c.input_height = size;
    c.input_width = size;
    c.base_channels = 2;
    c.downsample_stages = 2;
    c.encoder_res_blocks = 1;
    c.decoder_res_blocks = 1;
    c.discriminator_layers = 2;
    c.discriminator_channels = 4;
    return c;
}

inline torch::Tensor random_image(int64_t h, int64_t w, uint64_t seed, int64_t n = 1) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    return torch::rand({n, 3, h, w}, gen) * 2 - 1;
}

}  // namespace testing
