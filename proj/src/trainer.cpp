#include "difl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "difl/checksum.hpp"
#include "difl/errors.hpp"

namespace difl {

namespace F = torch::nn::functional;

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
    network.validate();
    weights.validate();
    if (epochs_constant < 0 || epochs_decay < 0) throw ConfigError("epoch counts must be >= 0");
    if (total_epochs() < 1) throw ConfigError("at least one epoch is required");
    if (!(base_lr > 0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be positive");
    if (lambda2_start < 0 || lambda2_end < lambda2_start)
        throw ConfigError("lambda2 ramp must satisfy 0 <= lambda2_start <= lambda2_end");
    if (scale_size < crop_size) throw ConfigError("scale_size must be >= crop_size");
    const int64_t factor = int64_t{1} << network.downsample_stages;
    if (crop_size <= 0 || crop_size % factor != 0)
        throw ConfigError("crop_size must be a positive multiple of " + std::to_string(factor));
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (pool_size < 0) throw ConfigError("pool_size must be >= 0");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    if (fcl_start_epoch && (*fcl_start_epoch < 0 || *fcl_start_epoch >= total_epochs()))
        throw ConfigError("fcl_start_epoch must lie inside the schedule");
}

KeyValues TrainConfig::to_key_values() const {
    auto real = [](double v) {
        std::ostringstream s;
        s.precision(17);
        s << v;
        return s.str();
    };
    KeyValues kv = network.to_key_values();
    kv["epochs_constant"] = std::to_string(epochs_constant);
    kv["epochs_decay"] = std::to_string(epochs_decay);
    kv["base_lr"] = real(base_lr);
    kv["beta1"] = real(beta1);
    kv["beta2"] = real(beta2);
    kv["lambda1"] = real(weights.lambda1);
    kv["lambda2"] = real(weights.lambda2);
    kv["lambda2_start"] = real(lambda2_start);
    kv["lambda2_end"] = real(lambda2_end);
    kv["fcl_start_epoch"] = fcl_start_epoch ? std::to_string(*fcl_start_epoch) : "none";
    kv["fcl_metric"] = fcl_metric == FeatureMetric::L2 ? "l2" : "cosine";
    kv["fcl_reduction"] = fcl_reduction == FeatureReduction::Rms ? "rms" : "norm";
    kv["batch_size"] = std::to_string(batch_size);
    kv["crop_size"] = std::to_string(crop_size);
    kv["scale_size"] = std::to_string(scale_size);
    kv["seed"] = std::to_string(seed);
    kv["pool_size"] = std::to_string(pool_size);
    kv["checkpoint_every"] = std::to_string(checkpoint_every);
    kv["iterations_per_epoch"] = std::to_string(iterations_per_epoch);
    kv["manifest"] = manifest;
    kv["output_dir"] = output_dir;
    return kv;
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv) {
    static const std::set<std::string> known = [] {
        std::set<std::string> k;
        for (const auto& [key, _] : TrainConfig{}.to_key_values()) k.insert(key);
        return k;
    }();
    for (const auto& [key, _] : kv)
        if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");

    TrainConfig c;
    c.network = NetworkConfig::from_key_values(kv);
    c.epochs_constant = kv_int(kv, "epochs_constant", c.epochs_constant);
    c.epochs_decay = kv_int(kv, "epochs_decay", c.epochs_decay);
    c.base_lr = kv_real(kv, "base_lr", c.base_lr);
    c.beta1 = kv_real(kv, "beta1", c.beta1);
    c.beta2 = kv_real(kv, "beta2", c.beta2);
    c.weights.lambda1 = kv_real(kv, "lambda1", c.weights.lambda1);
    c.weights.lambda2 = kv_real(kv, "lambda2", c.weights.lambda2);
    c.lambda2_start = kv_real(kv, "lambda2_start", c.lambda2_start);
    c.lambda2_end = kv_real(kv, "lambda2_end", c.lambda2_end);
    const auto fcl = kv_string(kv, "fcl_start_epoch", "none");
    if (fcl != "none") c.fcl_start_epoch = kv_int(kv, "fcl_start_epoch", 0);
    const auto metric = kv_string(kv, "fcl_metric", "l2");
    if (metric == "l2")
        c.fcl_metric = FeatureMetric::L2;
    else if (metric == "cosine")
        c.fcl_metric = FeatureMetric::Cosine;
    else
        throw ConfigError("fcl_metric must be l2 or cosine");
    const auto red = kv_string(kv, "fcl_reduction", "rms");
    if (red == "rms")
        c.fcl_reduction = FeatureReduction::Rms;
    else if (red == "norm")
        c.fcl_reduction = FeatureReduction::Norm;
    else
        throw ConfigError("fcl_reduction must be rms or norm");
    c.batch_size = kv_int(kv, "batch_size", c.batch_size);
    c.crop_size = kv_int(kv, "crop_size", c.crop_size);
    c.scale_size = kv_int(kv, "scale_size", c.scale_size);
    c.seed = static_cast<uint64_t>(kv_int(kv, "seed", static_cast<int64_t>(c.seed)));
    c.pool_size = kv_int(kv, "pool_size", c.pool_size);
    c.checkpoint_every = kv_int(kv, "checkpoint_every", c.checkpoint_every);
    c.iterations_per_epoch = kv_int(kv, "iterations_per_epoch", c.iterations_per_epoch);
    c.manifest = kv_string(kv, "manifest", c.manifest);
    c.output_dir = kv_string(kv, "output_dir", c.output_dir);
    return c;
}

uint32_t TrainConfig::hash() const {
    auto kv = to_key_values();
    kv.erase("output_dir");
    return crc32(format_key_values(kv));
}

// ---------------------------------------------------------------------------
// Schedules and sampling

std::pair<int, int> sample_domain_pair(int n_domains, std::mt19937_64& rng) {
    if (n_domains < 2) throw ConfigError("need at least 2 domains to sample a pair");
    std::uniform_int_distribution<int> first(1, n_domains);
    std::uniform_int_distribution<int> second(1, n_domains - 1);
    const int a = first(rng);
    int b = second(rng);
    if (b >= a) ++b;
    return {a, b};
}

double lr_schedule(int64_t epoch, const TrainConfig& cfg) {
    if (epoch < 0 || epoch >= cfg.total_epochs())
        throw RangeError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.total_epochs()) +
                         ")");
    if (epoch < cfg.epochs_constant) return cfg.base_lr;
    const double progress =
        static_cast<double>(epoch - cfg.epochs_constant + 1) / static_cast<double>(cfg.epochs_decay);
    return std::max(0.0, cfg.base_lr * (1.0 - progress));
}

double lambda2_schedule(int64_t epoch, const TrainConfig& cfg) {
    if (!cfg.fcl_start_epoch) return cfg.weights.lambda2;
    const int64_t start = *cfg.fcl_start_epoch;
    if (epoch < start) return 0.0;
    const double span = static_cast<double>(cfg.total_epochs() - start);
    const double t = std::clamp(static_cast<double>(epoch - start) / span, 0.0, 1.0);
    return cfg.lambda2_start + (cfg.lambda2_end - cfg.lambda2_start) * t;
}

// ---------------------------------------------------------------------------
// Preprocessing

ImageTensor to_tensor(const RawImage& image) {
    if (image.width <= 0 || image.height <= 0 ||
        image.rgb.size() != static_cast<size_t>(image.width) * image.height * 3)
        throw IoError("malformed raw image");
    auto t = torch::from_blob(const_cast<uint8_t*>(image.rgb.data()), {image.height, image.width, 3}, torch::kUInt8)
                 .permute({2, 0, 1})
                 .to(torch::kFloat)
                 .unsqueeze(0);
    return t / 127.5 - 1.0;
}

ImageTensor resize(const ImageTensor& image, int64_t height, int64_t width) {
    if (image.size(2) == height && image.size(3) == width) return image;
    return F::interpolate(image, F::InterpolateFuncOptions()
                                     .size(std::vector<int64_t>{height, width})
                                     .mode(torch::kBilinear)
                                     .align_corners(false)
                                     .antialias(true))
        .clamp(-1.0, 1.0);
}

ImageTensor random_crop(const ImageTensor& image, int64_t size, std::mt19937_64& rng) {
    const int64_t h = image.size(2), w = image.size(3);
    if (h < size || w < size) throw ShapeError("crop larger than image");
    std::uniform_int_distribution<int64_t> dy(0, h - size), dx(0, w - size);
    const int64_t y = dy(rng), x = dx(rng);
    return image.slice(2, y, y + size).slice(3, x, x + size);
}

ImageTensor preprocess(const RawImage& image, const TrainConfig& cfg, std::mt19937_64& rng, bool training) {
    auto t = to_tensor(image);
    if (training) return random_crop(resize(t, cfg.scale_size, cfg.scale_size), cfg.crop_size, rng).contiguous();
    return resize(t, cfg.network.input_height, cfg.network.input_width).contiguous();
}

torch::Tensor ImagePool::query(const torch::Tensor& images, std::mt19937_64& rng) {
    if (capacity_ == 0) return images;
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::vector<torch::Tensor> out;
    for (int64_t i = 0; i < images.size(0); ++i) {
        auto img = images.slice(0, i, i + 1).detach().clone();
        if (static_cast<int64_t>(images_.size()) < capacity_) {
            images_.push_back(img);
            out.push_back(img);
        } else if (coin(rng) > 0.5) {
            std::uniform_int_distribution<size_t> pick(0, images_.size() - 1);
            const size_t k = pick(rng);
            out.push_back(images_[k]);
            images_[k] = img;
        } else {
            out.push_back(img);
        }
    }
    return torch::cat(out, 0);
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

void set_requires_grad(const std::vector<torch::Tensor>& params, bool flag) {
    for (auto p : params) p.set_requires_grad(flag);
}

void check_finite(const torch::Tensor& t, const std::string& what) {
    if (!std::isfinite(t.item<double>()))
        throw TrainingDiverged(what + " is not finite (" + std::to_string(t.item<double>()) + ")");
}

std::string rng_state_string(const std::mt19937_64& rng) {
    std::ostringstream s;
    s << rng;
    return s.str();
}

}  // namespace

Trainer::Trainer(Banks banks, TrainConfig cfg) : banks_(std::move(banks)), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (!(banks_.generators.config() == cfg_.network))
        throw ConfigError("bank network config does not match the training config");
    state_.rng.seed(cfg_.seed);
    state_.current_lr = cfg_.base_lr;
    for (const auto& d : banks_.generators.domains()) {
        auto options = torch::optim::AdamOptions(cfg_.base_lr).betas({cfg_.beta1, cfg_.beta2});
        gen_opt_.emplace(d.index, std::make_unique<torch::optim::Adam>(banks_.generators.parameters(d), options));
        dis_opt_.emplace(d.index,
                         std::make_unique<torch::optim::Adam>(banks_.discriminators.parameters(d), options));
        pools_.emplace(d.index, ImagePool(cfg_.pool_size));
    }
}

void Trainer::set_learning_rate(double lr) {
    auto apply = [lr](torch::optim::Adam& opt) {
        for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    };
    for (auto& [_, o] : gen_opt_) apply(*o);
    for (auto& [_, o] : dis_opt_) apply(*o);
    state_.current_lr = lr;
}

void Trainer::begin_epoch(int64_t epoch) {
    set_learning_rate(lr_schedule(epoch, cfg_));
    state_.current_lambda2 = lambda2_schedule(epoch, cfg_);
    state_.epoch = epoch;
}

LossTerms Trainer::forward_terms(const DomainId& a_domain, const ImageTensor& a, const DomainId& b_domain,
                                 const ImageTensor& b, bool with_feature) {
    const auto& gen = banks_.generators;
    const auto& dis = banks_.discriminators;
    auto f_a = encode(gen, a_domain, a);
    auto fake_b = decode(gen, b_domain, f_a);
    auto f_ab = encode(gen, b_domain, fake_b);
    auto rec_a = decode(gen, a_domain, f_ab);

    auto f_b = encode(gen, b_domain, b);
    auto fake_a = decode(gen, a_domain, f_b);
    auto f_ba = encode(gen, a_domain, fake_a);
    auto rec_b = decode(gen, b_domain, f_ba);

    LossTerms t;
    t.gan_ab = gan_loss_generator(discriminate(dis, b_domain, fake_b));
    t.gan_ba = gan_loss_generator(discriminate(dis, a_domain, fake_a));
    t.cycle = cycle_loss(a, rec_a, b, rec_b);
    if (with_feature) {
        t.feature = feature_consistency_loss(f_a.values, f_ab.values, f_b.values, f_ba.values, cfg_.fcl_metric,
                                             cfg_.fcl_reduction);
    } else {
        torch::NoGradGuard no_grad;
        t.feature = feature_consistency_loss(f_a.values.detach(), f_ab.values.detach(), f_b.values.detach(),
                                             f_ba.values.detach(), cfg_.fcl_metric, cfg_.fcl_reduction);
    }
    // Kept for the discriminator update.
    fake_cache_a_ = fake_a.detach();
    fake_cache_b_ = fake_b.detach();
    return t;
}

LossBreakdown Trainer::train_step(const DomainId& a_domain, const ImageTensor& a, const DomainId& b_domain,
                                  const ImageTensor& b, const StepOptions& opts) {
    if (a_domain.index == b_domain.index) throw ConfigError("train_step needs two distinct domains");
    auto& dis = banks_.discriminators;
    const auto dis_params_a = dis.parameters(a_domain);
    const auto dis_params_b = dis.parameters(b_domain);

    // Generator update.
    set_requires_grad(dis_params_a, false);
    set_requires_grad(dis_params_b, false);
    auto& opt_a = *gen_opt_.at(a_domain.index);
    auto& opt_b = *gen_opt_.at(b_domain.index);
    opt_a.zero_grad();
    opt_b.zero_grad();

    LossWeights w{cfg_.weights.lambda1, state_.current_lambda2};
    const bool with_feature = w.lambda2 > 0.0;
    auto terms = forward_terms(a_domain, a, b_domain, b, with_feature);
    auto total = total_loss_tensor(terms, w);
    check_finite(total, "generator loss");
    total.backward();
    opt_a.step();
    opt_b.step();
    set_requires_grad(dis_params_a, true);
    set_requires_grad(dis_params_b, true);

    if (opts.update_discriminators) {
        auto& dopt_a = *dis_opt_.at(a_domain.index);
        auto& dopt_b = *dis_opt_.at(b_domain.index);
        dopt_a.zero_grad();
        dopt_b.zero_grad();
        auto pooled_b = pools_.at(b_domain.index).query(fake_cache_b_, state_.rng);
        auto pooled_a = pools_.at(a_domain.index).query(fake_cache_a_, state_.rng);
        auto loss_b = gan_loss_discriminator(discriminate(dis, b_domain, b), discriminate(dis, b_domain, pooled_b));
        auto loss_a = gan_loss_discriminator(discriminate(dis, a_domain, a), discriminate(dis, a_domain, pooled_a));
        auto d_total = loss_a + loss_b;
        check_finite(d_total, "discriminator loss");
        d_total.backward();
        dopt_a.step();
        dopt_b.step();
    }
    fake_cache_a_ = torch::Tensor();
    fake_cache_b_ = torch::Tensor();

    auto breakdown = total_loss(terms, w);
    state_.loss_history.push_back({state_.epoch, breakdown});
    return breakdown;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
    CheckpointMeta meta{state_.epoch, cfg_.network, banks_.generators.domains(),
                        format_key_values(cfg_.to_key_values())};
    difl::save_checkpoint(path, banks_, meta, [this](torch::serialize::OutputArchive& archive) {
        for (const auto& d : banks_.generators.domains()) {
            torch::serialize::OutputArchive g, dsc;
            gen_opt_.at(d.index)->save(g);
            dis_opt_.at(d.index)->save(dsc);
            archive.write("opt_gen/" + d.name, g);
            archive.write("opt_dis/" + d.name, dsc);
        }
        archive.write("state/rng", c10::IValue(rng_state_string(state_.rng)));
        archive.write("state/config_hash", c10::IValue(static_cast<int64_t>(cfg_.hash())));
    });
}

Trainer Trainer::resume(const std::filesystem::path& path, TrainConfig cfg,
                        const std::vector<DomainId>& expected_domains) {
    const auto meta = read_checkpoint_meta(path);
    if (!(meta.network == cfg.network))
        throw CheckpointError("checkpoint network (" + format_key_values(meta.network.to_key_values()) +
                              ") differs from the configured network");
    if (meta.domains != expected_domains)
        throw CheckpointError("checkpoint domains [" + format_domains(meta.domains) + "] differ from [" +
                              format_domains(expected_domains) + "]");
    if (meta.epoch >= cfg.total_epochs())
        throw CheckpointError("checkpoint epoch " + std::to_string(meta.epoch) + " is past the schedule end");

    std::string rng_text;
    std::map<std::string, std::pair<torch::serialize::InputArchive, torch::serialize::InputArchive>> opt_archives;
    auto loaded = load_checkpoint(path, [&](torch::serialize::InputArchive& archive) {
        for (const auto& d : meta.domains) {
            auto& slot = opt_archives[d.name];
            if (archive.try_read("opt_gen/" + d.name, slot.first)) archive.read("opt_dis/" + d.name, slot.second);
            else opt_archives.erase(d.name);
        }
        c10::IValue v;
        if (archive.try_read("state/rng", v)) rng_text = v.toStringRef();
    });

    Trainer t(std::move(loaded.banks), std::move(cfg));
    for (const auto& d : meta.domains) {
        auto it = opt_archives.find(d.name);
        if (it == opt_archives.end()) continue;
        try {
            t.gen_opt_.at(d.index)->load(it->second.first);
            t.dis_opt_.at(d.index)->load(it->second.second);
        } catch (const c10::Error& e) {
            throw CheckpointError("optimizer state for domain '" + d.name + "' is unreadable: " +
                                  e.what_without_backtrace());
        }
    }
    if (!rng_text.empty()) {
        std::istringstream s(rng_text);
        s >> t.state_.rng;
    }
    t.state_.epoch = meta.epoch;
    return t;
}

// ---------------------------------------------------------------------------
// Epoch loop

TrainingData load_training_data(const DatasetManifest& manifest, const TrainConfig& cfg) {
    TrainingData data;
    data.domains = make_domains(manifest.domains);
    for (const auto& d : data.domains) data.images[d.index];
    for (const auto& r : manifest.records) {
        const auto it = std::find(manifest.domains.begin(), manifest.domains.end(), r.domain);
        const int index = static_cast<int>(it - manifest.domains.begin()) + 1;
        auto t = resize(to_tensor(read_png(manifest.resolve(r))), cfg.scale_size, cfg.scale_size).contiguous();
        data.images[index].push_back(t);
    }
    return data;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int64_t epoch) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "ckpt_epoch_%04lld.pt", static_cast<long long>(epoch));
    return dir / buf;
}

FitResult fit(const DatasetManifest& manifest, const TrainConfig& cfg, const FitOptions& opts) {
    return fit(load_training_data(manifest, cfg), cfg, opts);
}

FitResult fit(const TrainingData& data, const TrainConfig& cfg, const FitOptions& opts) {
    cfg.validate();
    for (const auto& d : data.domains)
        if (data.images.at(d.index).empty()) throw ConfigError("domain '" + d.name + "' has no images");

    auto trainer = [&] {
        if (opts.resume_from) return Trainer::resume(*opts.resume_from, cfg, data.domains);
        return Trainer(init_bank(cfg.network, data.domains, cfg.seed), cfg);
    }();

    const std::filesystem::path out_dir(cfg.output_dir);
    if (opts.write_checkpoints || opts.write_log) std::filesystem::create_directories(out_dir);
    std::ofstream log;
    if (opts.write_log) {
        const auto log_path = out_dir / "train_log.csv";
        const bool fresh = !std::filesystem::exists(log_path);
        log.open(log_path, std::ios::app);
        if (!log) throw IoError("cannot open training log " + log_path.string());
        if (fresh) log << "epoch,iter,pair,gan_ab,gan_ba,cycle,feature,total,lr,lambda2\n";
    }

    int64_t max_size = 0;
    for (const auto& [_, imgs] : data.images) max_size = std::max<int64_t>(max_size, imgs.size());
    const int64_t iters = cfg.iterations_per_epoch > 0 ? cfg.iterations_per_epoch : max_size;
    const int n = static_cast<int>(data.domains.size());

    // Per-domain shuffled visiting order; reshuffled when exhausted.
    std::map<int, std::vector<size_t>> order;
    std::map<int, size_t> cursor;
    auto& rng = trainer.state().rng;
    auto next_batch = [&](int domain) {
        auto& ord = order[domain];
        auto& cur = cursor[domain];
        const auto& imgs = data.images.at(domain);
        std::vector<torch::Tensor> batch;
        for (int64_t k = 0; k < cfg.batch_size; ++k) {
            if (cur >= ord.size()) {
                ord.resize(imgs.size());
                std::iota(ord.begin(), ord.end(), size_t{0});
                std::shuffle(ord.begin(), ord.end(), rng);
                cur = 0;
            }
            batch.push_back(random_crop(imgs[ord[cur++]], cfg.crop_size, rng));
        }
        return torch::cat(batch, 0).contiguous();
    };

    FitResult result;
    const auto dtype = trainer.banks().generators.parameters(data.domains.front()).front().scalar_type();
    for (int64_t epoch = trainer.state().epoch; epoch < cfg.total_epochs(); ++epoch) {
        trainer.begin_epoch(epoch);
        for (int64_t it = 0; it < iters; ++it) {
            const auto [ai, bi] = sample_domain_pair(n, rng);
            const auto& da = data.domains[ai - 1];
            const auto& db = data.domains[bi - 1];
            const auto a = next_batch(ai).to(dtype);
            const auto b = next_batch(bi).to(dtype);
            const auto loss = trainer.train_step(da, a, db, b);
            if (log.is_open()) {
                log << epoch << ',' << it << ',' << da.name << '>' << db.name << ',' << loss.gan_ab << ','
                    << loss.gan_ba << ',' << loss.cycle << ',' << loss.feature << ',' << loss.total << ','
                    << trainer.state().current_lr << ',' << trainer.state().current_lambda2 << '\n';
            }
        }
        trainer.state().epoch = epoch + 1;
        if (log.is_open()) log.flush();
        if (opts.verbose) {
            const auto& h = trainer.state().loss_history.back().loss;
            std::cerr << "epoch " << epoch + 1 << "/" << cfg.total_epochs() << " lr=" << trainer.state().current_lr
                      << " lambda2=" << trainer.state().current_lambda2 << " last total=" << h.total << "\n";
        }
        if (opts.write_checkpoints &&
            ((epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.total_epochs())) {
            const auto path = checkpoint_path(out_dir, epoch + 1);
            trainer.save_checkpoint(path);
            result.checkpoints.push_back(path);
        }
        if (opts.on_epoch_end) opts.on_epoch_end(epoch + 1, trainer);
    }
    result.banks = trainer.banks();
    result.state = trainer.state();
    return result;
}

}  // namespace difl
