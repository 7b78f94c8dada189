#include "difl/model_bank.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>

#include "difl/checksum.hpp"
#include "difl/errors.hpp"

namespace difl {

namespace nn = torch::nn;

std::vector<DomainId> make_domains(const std::vector<std::string>& names) {
    std::vector<DomainId> out;
    out.reserve(names.size());
    for (size_t i = 0; i < names.size(); ++i) out.push_back({static_cast<int>(i) + 1, names[i]});
    return out;
}

std::string format_domains(const std::vector<DomainId>& domains) {
    std::string out;
    for (const auto& d : domains) {
        if (!out.empty()) out += ",";
        out += std::to_string(d.index) + ":" + d.name;
    }
    return out;
}

std::vector<DomainId> parse_domains(const std::string& text) {
    std::vector<DomainId> out;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError("malformed domain entry '" + item + "'");
        out.push_back({std::stoi(item.substr(0, colon)), item.substr(colon + 1)});
    }
    return out;
}

void NetworkConfig::validate() const {
    if (base_channels < 1 || downsample_stages < 1 || encoder_res_blocks < 1 || decoder_res_blocks < 1 ||
        discriminator_layers < 1 || discriminator_channels < 1)
        throw ConfigError("network counts must all be >= 1");
    const int64_t factor = int64_t{1} << downsample_stages;
    if (input_height <= 0 || input_width <= 0 || input_height % factor != 0 || input_width % factor != 0)
        throw ConfigError("input size " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                          " is not divisible by 2^" + std::to_string(downsample_stages));
}

LatentShape NetworkConfig::latent_shape_for(int64_t height, int64_t width) const {
    return {latent_channels(), height >> downsample_stages, width >> downsample_stages};
}

std::pair<int64_t, int64_t> NetworkConfig::score_map_size(int64_t height, int64_t width) const {
    auto conv = [](int64_t n, int64_t stride) { return (n + 2 - 4) / stride + 1; };
    for (int64_t i = 0; i < discriminator_layers; ++i) {
        height = conv(height, 2);
        width = conv(width, 2);
    }
    for (int i = 0; i < 2; ++i) {
        height = conv(height, 1);
        width = conv(width, 1);
    }
    return {height, width};
}

KeyValues NetworkConfig::to_key_values() const {
    return {
        {"net.input_height", std::to_string(input_height)},
        {"net.input_width", std::to_string(input_width)},
        {"net.base_channels", std::to_string(base_channels)},
        {"net.downsample_stages", std::to_string(downsample_stages)},
        {"net.encoder_res_blocks", std::to_string(encoder_res_blocks)},
        {"net.decoder_res_blocks", std::to_string(decoder_res_blocks)},
        {"net.discriminator_layers", std::to_string(discriminator_layers)},
        {"net.discriminator_channels", std::to_string(discriminator_channels)},
    };
}

NetworkConfig NetworkConfig::from_key_values(const KeyValues& kv) {
    NetworkConfig c;
    c.input_height = kv_int(kv, "net.input_height", c.input_height);
    c.input_width = kv_int(kv, "net.input_width", c.input_width);
    c.base_channels = kv_int(kv, "net.base_channels", c.base_channels);
    c.downsample_stages = kv_int(kv, "net.downsample_stages", c.downsample_stages);
    c.encoder_res_blocks = kv_int(kv, "net.encoder_res_blocks", c.encoder_res_blocks);
    c.decoder_res_blocks = kv_int(kv, "net.decoder_res_blocks", c.decoder_res_blocks);
    c.discriminator_layers = kv_int(kv, "net.discriminator_layers", c.discriminator_layers);
    c.discriminator_channels = kv_int(kv, "net.discriminator_channels", c.discriminator_channels);
    return c;
}

namespace {

nn::InstanceNorm2d instance_norm(int64_t channels) {
    return nn::InstanceNorm2d(nn::InstanceNorm2dOptions(channels).affine(false).track_running_stats(false));
}

}  // namespace

ResidualBlockImpl::ResidualBlockImpl(int64_t channels) {
    body = register_module(
        "body", nn::Sequential(nn::ReflectionPad2d(1), nn::Conv2d(nn::Conv2dOptions(channels, channels, 3)),
                               instance_norm(channels), nn::ReLU(), nn::ReflectionPad2d(1),
                               nn::Conv2d(nn::Conv2dOptions(channels, channels, 3)), instance_norm(channels)));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) { return x + body->forward(x); }

EncoderImpl::EncoderImpl(const NetworkConfig& cfg) {
    nn::Sequential seq;
    seq->push_back(nn::ReflectionPad2d(3));
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(3, cfg.base_channels, 7)));
    seq->push_back(instance_norm(cfg.base_channels));
    seq->push_back(nn::ReLU());
    int64_t ch = cfg.base_channels;
    for (int64_t i = 0; i < cfg.downsample_stages; ++i) {
        seq->push_back(nn::Conv2d(nn::Conv2dOptions(ch, ch * 2, 3).stride(2).padding(1)));
        seq->push_back(instance_norm(ch * 2));
        seq->push_back(nn::ReLU());
        ch *= 2;
    }
    for (int64_t i = 0; i < cfg.encoder_res_blocks; ++i) seq->push_back(ResidualBlock(ch));
    net = register_module("net", seq);
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& x) { return net->forward(x); }

DecoderImpl::DecoderImpl(const NetworkConfig& cfg) {
    nn::Sequential seq;
    int64_t ch = cfg.latent_channels();
    for (int64_t i = 0; i < cfg.decoder_res_blocks; ++i) seq->push_back(ResidualBlock(ch));
    for (int64_t i = 0; i < cfg.downsample_stages; ++i) {
        seq->push_back(nn::ConvTranspose2d(
            nn::ConvTranspose2dOptions(ch, ch / 2, 3).stride(2).padding(1).output_padding(1)));
        seq->push_back(instance_norm(ch / 2));
        seq->push_back(nn::ReLU());
        ch /= 2;
    }
    seq->push_back(nn::ReflectionPad2d(3));
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(ch, 3, 7)));
    seq->push_back(nn::Tanh());
    net = register_module("net", seq);
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& x) { return net->forward(x); }

DiscriminatorImpl::DiscriminatorImpl(const NetworkConfig& cfg) {
    const int64_t ndf = cfg.discriminator_channels;
    auto leaky = [] { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); };
    nn::Sequential seq;
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(3, ndf, 4).stride(2).padding(1)));
    seq->push_back(leaky());
    int64_t mult = 1;
    for (int64_t i = 1; i < cfg.discriminator_layers; ++i) {
        const int64_t prev = mult;
        mult = std::min<int64_t>(int64_t{1} << i, 8);
        seq->push_back(nn::Conv2d(nn::Conv2dOptions(ndf * prev, ndf * mult, 4).stride(2).padding(1)));
        seq->push_back(instance_norm(ndf * mult));
        seq->push_back(leaky());
    }
    const int64_t prev = mult;
    mult = std::min<int64_t>(int64_t{1} << cfg.discriminator_layers, 8);
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(ndf * prev, ndf * mult, 4).stride(1).padding(1)));
    seq->push_back(instance_norm(ndf * mult));
    seq->push_back(leaky());
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(ndf * mult, 1, 4).stride(1).padding(1)));
    net = register_module("net", seq);
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) { return net->forward(x); }

namespace {

void check_unique(const std::vector<DomainId>& domains) {
    if (domains.size() < 2) throw ConfigError("a bank needs at least 2 domains, got " + std::to_string(domains.size()));
    std::set<int> indices;
    std::set<std::string> names;
    for (const auto& d : domains) {
        if (!indices.insert(d.index).second) throw ConfigError("duplicate domain index " + std::to_string(d.index));
        if (!names.insert(d.name).second) throw ConfigError("duplicate domain name '" + d.name + "'");
    }
}

template <typename Map>
auto& lookup(Map& map, const DomainId& d, const char* what) {
    auto it = map.find(d.index);
    if (it == map.end()) throw KeyNotFound(std::string("no ") + what + " for domain " + std::to_string(d.index));
    return it->second;
}

std::vector<torch::Tensor> collect(std::initializer_list<const nn::Module*> modules) {
    std::vector<torch::Tensor> out;
    for (const auto* m : modules)
        for (const auto& p : m->parameters()) out.push_back(p);
    return out;
}

void check_image(const NetworkConfig& cfg, const torch::Tensor& image) {
    if (image.dim() != 4 || image.size(1) != 3)
        throw ShapeError("expected an N x 3 x H x W image tensor, got " + std::string(c10::str(image.sizes())));
    const int64_t factor = int64_t{1} << cfg.downsample_stages;
    if (image.size(2) % factor != 0 || image.size(3) % factor != 0)
        throw ShapeError("image size " + std::string(c10::str(image.sizes())) + " not divisible by " +
                         std::to_string(factor));
}

}  // namespace

GeneratorBank::GeneratorBank(NetworkConfig config, std::vector<DomainId> domains)
    : config_(std::move(config)), domains_(std::move(domains)) {
    config_.validate();
    check_unique(domains_);
    for (const auto& d : domains_) {
        encoders_.emplace(d.index, Encoder(config_));
        decoders_.emplace(d.index, Decoder(config_));
    }
}

const DomainId& GeneratorBank::domain(int index) const {
    for (const auto& d : domains_)
        if (d.index == index) return d;
    throw KeyNotFound("unknown domain index " + std::to_string(index));
}

const DomainId& GeneratorBank::domain(const std::string& name) const {
    for (const auto& d : domains_)
        if (d.name == name) return d;
    throw KeyNotFound("unknown domain '" + name + "'");
}

Encoder& GeneratorBank::encoder(const DomainId& d) { return lookup(encoders_, d, "encoder"); }
const Encoder& GeneratorBank::encoder(const DomainId& d) const { return lookup(encoders_, d, "encoder"); }
Decoder& GeneratorBank::decoder(const DomainId& d) { return lookup(decoders_, d, "decoder"); }
const Decoder& GeneratorBank::decoder(const DomainId& d) const { return lookup(decoders_, d, "decoder"); }

std::vector<torch::Tensor> GeneratorBank::parameters(const DomainId& d) const {
    return collect({encoder(d).get(), decoder(d).get()});
}

void GeneratorBank::to(torch::Dtype dtype) {
    for (auto& [_, e] : encoders_) e->to(dtype);
    for (auto& [_, dec] : decoders_) dec->to(dtype);
}

DiscriminatorBank::DiscriminatorBank(const NetworkConfig& config, std::vector<DomainId> domains)
    : domains_(std::move(domains)) {
    config.validate();
    check_unique(domains_);
    for (const auto& d : domains_) discriminators_.emplace(d.index, Discriminator(config));
}

Discriminator& DiscriminatorBank::discriminator(const DomainId& d) {
    return lookup(discriminators_, d, "discriminator");
}
const Discriminator& DiscriminatorBank::discriminator(const DomainId& d) const {
    return lookup(discriminators_, d, "discriminator");
}

std::vector<torch::Tensor> DiscriminatorBank::parameters(const DomainId& d) const {
    return collect({discriminator(d).get()});
}

void DiscriminatorBank::to(torch::Dtype dtype) {
    for (auto& [_, m] : discriminators_) m->to(dtype);
}

LatentFeature encode(const GeneratorBank& bank, const DomainId& domain, const ImageTensor& image) {
    auto enc = bank.encoder(domain);
    check_image(bank.config(), image);
    return {enc->forward(image), domain};
}

ImageTensor decode(const GeneratorBank& bank, const DomainId& domain, const LatentFeature& feature) {
    auto dec = bank.decoder(domain);
    const auto& v = feature.values;
    if (v.dim() != 4 || v.size(1) != bank.config().latent_channels())
        throw ShapeError("latent feature " + std::string(c10::str(v.sizes())) + " does not have " +
                         std::to_string(bank.config().latent_channels()) + " channels");
    return dec->forward(v);
}

ImageTensor translate(const GeneratorBank& bank, const DomainId& src, const DomainId& dst, const ImageTensor& image) {
    return decode(bank, dst, encode(bank, src, image));
}

RealMap discriminate(const DiscriminatorBank& bank, const DomainId& domain, const ImageTensor& image) {
    auto dis = bank.discriminator(domain);
    if (image.dim() != 4 || image.size(1) != 3)
        throw ShapeError("expected an N x 3 x H x W image tensor, got " + std::string(c10::str(image.sizes())));
    return dis->forward(image);
}

Banks init_bank(const NetworkConfig& config, const std::vector<DomainId>& domains, uint64_t seed) {
    Banks banks{GeneratorBank(config, domains), DiscriminatorBank(config, domains)};
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    torch::NoGradGuard no_grad;
    auto reinit = [&](const std::vector<torch::Tensor>& params) {
        for (auto p : params) {
            if (p.dim() > 1)
                p.normal_(0.0, 0.02, gen);
            else
                p.zero_();
        }
    };
    for (const auto& d : domains) {
        reinit(banks.generators.parameters(d));
        reinit(banks.discriminators.parameters(d));
    }
    return banks;
}

uint32_t parameter_checksum(const std::vector<torch::Tensor>& params) {
    uint32_t crc = 0;
    for (const auto& p : params) {
        auto c = p.detach().contiguous();
        crc = crc32(std::span(static_cast<const unsigned char*>(c.data_ptr()), c.nbytes()), crc);
    }
    return crc;
}

uint32_t parameter_checksum(const torch::nn::Module& module) { return parameter_checksum(module.parameters()); }

int64_t parameter_count(const std::vector<torch::Tensor>& params) {
    int64_t n = 0;
    for (const auto& p : params) n += p.numel();
    return n;
}

void save_checkpoint(const std::filesystem::path& path, const Banks& banks, const CheckpointMeta& meta,
                     const ArchiveWriter& extra) {
    torch::serialize::OutputArchive archive;
    for (const auto& d : banks.generators.domains()) {
        torch::serialize::OutputArchive enc, dec, dis;
        banks.generators.encoder(d)->save(enc);
        banks.generators.decoder(d)->save(dec);
        banks.discriminators.discriminator(d)->save(dis);
        archive.write("enc/" + d.name, enc);
        archive.write("dec/" + d.name, dec);
        archive.write("dis/" + d.name, dis);
    }
    archive.write("meta/epoch", c10::IValue(meta.epoch));
    archive.write("meta/network", c10::IValue(format_key_values(meta.network.to_key_values())));
    archive.write("meta/domains", c10::IValue(format_domains(meta.domains)));
    archive.write("meta/train_config", c10::IValue(meta.train_config));
    if (extra) extra(archive);

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    try {
        archive.save_to(tmp.string());
    } catch (const c10::Error& e) {
        throw IoError("cannot write checkpoint " + tmp.string() + ": " + e.what_without_backtrace());
    }
    std::filesystem::rename(tmp, path);
}

namespace {

torch::serialize::InputArchive open_archive(const std::filesystem::path& path) {
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error& e) {
        throw CheckpointError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
    }
    return archive;
}

CheckpointMeta read_meta(torch::serialize::InputArchive& archive) {
    CheckpointMeta meta;
    try {
        c10::IValue v;
        archive.read("meta/epoch", v);
        meta.epoch = v.toInt();
        archive.read("meta/network", v);
        meta.network = NetworkConfig::from_key_values(parse_key_values(v.toStringRef()));
        archive.read("meta/domains", v);
        meta.domains = parse_domains(v.toStringRef());
        archive.read("meta/train_config", v);
        meta.train_config = v.toStringRef();
    } catch (const c10::Error& e) {
        throw CheckpointError(std::string("checkpoint metadata missing: ") + e.what_without_backtrace());
    }
    return meta;
}

}  // namespace

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
    auto archive = open_archive(path);
    return read_meta(archive);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ArchiveReader& extra) {
    auto archive = open_archive(path);
    auto meta = read_meta(archive);
    LoadedCheckpoint out{{GeneratorBank(meta.network, meta.domains), DiscriminatorBank(meta.network, meta.domains)},
                         meta};
    try {
        for (const auto& d : meta.domains) {
            torch::serialize::InputArchive enc, dec, dis;
            archive.read("enc/" + d.name, enc);
            archive.read("dec/" + d.name, dec);
            archive.read("dis/" + d.name, dis);
            out.banks.generators.encoder(d)->load(enc);
            out.banks.generators.decoder(d)->load(dec);
            out.banks.discriminators.discriminator(d)->load(dis);
        }
        if (extra) extra(archive);
    } catch (const c10::Error& e) {
        throw CheckpointError("corrupt checkpoint " + path.string() + ": " + e.what_without_backtrace());
    }
    return out;
}

}  // namespace difl
