#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "difl/kv.hpp"

namespace difl {

// Images are NCHW tensors with three channels and values in [-1, 1].
using ImageTensor = torch::Tensor;
// Patch-level discriminator scores, N x 1 x h x w.
using RealMap = torch::Tensor;

struct DomainId {
    int index = 0;      // 1-based
    std::string name;

    friend bool operator==(const DomainId& a, const DomainId& b) {
        return a.index == b.index && a.name == b.name;
    }
    friend auto operator<=>(const DomainId& a, const DomainId& b) { return a.index <=> b.index; }
};

// One DomainId per name, numbered 1..N in order.
std::vector<DomainId> make_domains(const std::vector<std::string>& names);

std::string format_domains(const std::vector<DomainId>& domains);
std::vector<DomainId> parse_domains(const std::string& text);

struct LatentShape {
    int64_t channels = 0;
    int64_t height = 0;
    int64_t width = 0;

    int64_t numel() const { return channels * height * width; }
    friend bool operator==(const LatentShape&, const LatentShape&) = default;
};

struct NetworkConfig {
    // Nominal inference size. The networks are fully convolutional, so any
    // size divisible by 2^downsample_stages is accepted at run time.
    int64_t input_height = 288;
    int64_t input_width = 384;
    int64_t base_channels = 64;
    int64_t downsample_stages = 2;
    int64_t encoder_res_blocks = 4;
    int64_t decoder_res_blocks = 4;
    int64_t discriminator_layers = 3;
    int64_t discriminator_channels = 64;

    void validate() const;
    int64_t latent_channels() const { return base_channels << downsample_stages; }
    LatentShape latent_shape() const { return latent_shape_for(input_height, input_width); }
    LatentShape latent_shape_for(int64_t height, int64_t width) const;
    // Spatial size of the discriminator score map for an input of the given size.
    std::pair<int64_t, int64_t> score_map_size(int64_t height, int64_t width) const;

    KeyValues to_key_values() const;
    static NetworkConfig from_key_values(const KeyValues& kv);

    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

struct ResidualBlockImpl : torch::nn::Module {
    explicit ResidualBlockImpl(int64_t channels);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(ResidualBlock);

// 7x7 conv -> stride-2 downsampling convs -> residual blocks.
struct EncoderImpl : torch::nn::Module {
    explicit EncoderImpl(const NetworkConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Sequential net{nullptr};
};
TORCH_MODULE(Encoder);

// Residual blocks -> stride-2 transposed convs -> 7x7 conv -> tanh.
struct DecoderImpl : torch::nn::Module {
    explicit DecoderImpl(const NetworkConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Sequential net{nullptr};
};
TORCH_MODULE(Decoder);

// PatchGAN-style scorer without a terminal sigmoid.
struct DiscriminatorImpl : torch::nn::Module {
    explicit DiscriminatorImpl(const NetworkConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Sequential net{nullptr};
};
TORCH_MODULE(Discriminator);

struct LatentFeature {
    torch::Tensor values;  // N x C x h x w
    DomainId source_domain;
};

class GeneratorBank {
public:
    GeneratorBank() = default;
    GeneratorBank(NetworkConfig config, std::vector<DomainId> domains);

    const NetworkConfig& config() const { return config_; }
    const std::vector<DomainId>& domains() const { return domains_; }
    const DomainId& domain(int index) const;
    const DomainId& domain(const std::string& name) const;
    bool contains(const DomainId& d) const { return encoders_.count(d.index) > 0; }

    Encoder& encoder(const DomainId& d);
    const Encoder& encoder(const DomainId& d) const;
    Decoder& decoder(const DomainId& d);
    const Decoder& decoder(const DomainId& d) const;

    // Encoder and decoder parameters of one domain.
    std::vector<torch::Tensor> parameters(const DomainId& d) const;
    void to(torch::Dtype dtype);

private:
    NetworkConfig config_;
    std::vector<DomainId> domains_;
    std::map<int, Encoder> encoders_;
    std::map<int, Decoder> decoders_;
};

class DiscriminatorBank {
public:
    DiscriminatorBank() = default;
    DiscriminatorBank(const NetworkConfig& config, std::vector<DomainId> domains);

    const std::vector<DomainId>& domains() const { return domains_; }
    bool contains(const DomainId& d) const { return discriminators_.count(d.index) > 0; }
    Discriminator& discriminator(const DomainId& d);
    const Discriminator& discriminator(const DomainId& d) const;
    std::vector<torch::Tensor> parameters(const DomainId& d) const;
    void to(torch::Dtype dtype);

private:
    std::vector<DomainId> domains_;
    std::map<int, Discriminator> discriminators_;
};

LatentFeature encode(const GeneratorBank& bank, const DomainId& domain, const ImageTensor& image);
ImageTensor decode(const GeneratorBank& bank, const DomainId& domain, const LatentFeature& feature);
ImageTensor translate(const GeneratorBank& bank, const DomainId& src, const DomainId& dst,
                      const ImageTensor& image);
RealMap discriminate(const DiscriminatorBank& bank, const DomainId& domain, const ImageTensor& image);

struct Banks {
    GeneratorBank generators;
    DiscriminatorBank discriminators;
};

// Weights ~ N(0, 0.02) drawn from a generator seeded with `seed`.
Banks init_bank(const NetworkConfig& config, const std::vector<DomainId>& domains, uint64_t seed);

// CRC-32 over the raw bytes of a module's parameters, in registration order.
uint32_t parameter_checksum(const torch::nn::Module& module);
uint32_t parameter_checksum(const std::vector<torch::Tensor>& params);
int64_t parameter_count(const std::vector<torch::Tensor>& params);

struct CheckpointMeta {
    int64_t epoch = 0;
    NetworkConfig network;
    std::vector<DomainId> domains;
    std::string train_config;  // key/value text of the training run, may be empty
};

using ArchiveWriter = std::function<void(torch::serialize::OutputArchive&)>;
using ArchiveReader = std::function<void(torch::serialize::InputArchive&)>;

// Archive keys: "enc/<domain>", "dec/<domain>", "dis/<domain>", "meta/*".
// The file is written to a temporary sibling and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Banks& banks, const CheckpointMeta& meta,
                     const ArchiveWriter& extra = {});
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);
struct LoadedCheckpoint {
    Banks banks;
    CheckpointMeta meta;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ArchiveReader& extra = {});

}  // namespace difl
