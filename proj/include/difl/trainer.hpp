#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "difl/data.hpp"
#include "difl/losses.hpp"
#include "difl/model_bank.hpp"

namespace difl {

struct TrainConfig {
    NetworkConfig network;
    int64_t epochs_constant = 300;
    int64_t epochs_decay = 300;
    double base_lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    // weights.lambda2 applies only when fcl_start_epoch is unset; otherwise the
    // ramp lambda2_start -> lambda2_end from fcl_start_epoch to the last epoch does.
    LossWeights weights{10.0, 0.0};
    double lambda2_start = 0.05;
    double lambda2_end = 0.1;
    std::optional<int64_t> fcl_start_epoch;
    FeatureMetric fcl_metric = FeatureMetric::L2;
    FeatureReduction fcl_reduction = FeatureReduction::Rms;
    int64_t batch_size = 1;
    int64_t crop_size = 256;
    int64_t scale_size = 286;
    uint64_t seed = 1;
    int64_t pool_size = 50;
    int64_t checkpoint_every = 10;
    int64_t iterations_per_epoch = 0;  // 0: size of the largest domain
    std::string manifest;
    std::string output_dir = "run";

    int64_t total_epochs() const { return epochs_constant + epochs_decay; }
    void validate() const;
    KeyValues to_key_values() const;
    static TrainConfig from_key_values(const KeyValues& kv);
    // CRC-32 of the canonical key/value text; output_dir is excluded.
    uint32_t hash() const;
};

struct HistoryEntry {
    int64_t epoch = 0;
    LossBreakdown loss;
};

struct TrainState {
    int64_t epoch = 0;  // next epoch to run
    double current_lr = 0.0;
    double current_lambda2 = 0.0;
    std::mt19937_64 rng;
    std::vector<HistoryEntry> loss_history;
};

// Uniform over ordered pairs (A, B) with A != B; 1-based domain indices.
std::pair<int, int> sample_domain_pair(int n_domains, std::mt19937_64& rng);

double lr_schedule(int64_t epoch, const TrainConfig& cfg);
double lambda2_schedule(int64_t epoch, const TrainConfig& cfg);

// Raw 8-bit RGB -> 1 x 3 x H x W float tensor in [-1, 1]. Training: resize to
// scale_size and crop crop_size at a random offset; inference: resize to the
// network's input size.
ImageTensor preprocess(const RawImage& image, const TrainConfig& cfg, std::mt19937_64& rng, bool training);
ImageTensor to_tensor(const RawImage& image);
ImageTensor resize(const ImageTensor& image, int64_t height, int64_t width);
ImageTensor random_crop(const ImageTensor& image, int64_t size, std::mt19937_64& rng);

// History of generated images shown to a discriminator.
class ImagePool {
public:
    explicit ImagePool(int64_t capacity) : capacity_(capacity) {}
    // Returns a batch the same size as `images`, mixing in stored fakes once full.
    torch::Tensor query(const torch::Tensor& images, std::mt19937_64& rng);
    size_t size() const { return images_.size(); }

private:
    int64_t capacity_;
    std::vector<torch::Tensor> images_;
};

struct StepOptions {
    bool update_discriminators = true;
};

// Owns the banks and per-domain optimizers for the duration of training.
class Trainer {
public:
    Trainer(Banks banks, TrainConfig cfg);

    // Generator pass for A->B and B->A, one Adam step for the generators of A
    // and B on the weighted total, then one step for the discriminators of A
    // and B on pooled fakes. Other domains are untouched.
    LossBreakdown train_step(const DomainId& a_domain, const ImageTensor& a, const DomainId& b_domain,
                             const ImageTensor& b, const StepOptions& opts = {});

    // Loss terms of one forward pass without any update.
    LossTerms forward_terms(const DomainId& a_domain, const ImageTensor& a, const DomainId& b_domain,
                            const ImageTensor& b, bool with_feature);

    // Applies the lr and lambda2 schedules for `epoch`.
    void begin_epoch(int64_t epoch);

    Banks& banks() { return banks_; }
    const Banks& banks() const { return banks_; }
    TrainState& state() { return state_; }
    const TrainState& state() const { return state_; }
    const TrainConfig& config() const { return cfg_; }

    void save_checkpoint(const std::filesystem::path& path) const;
    // Restores weights, optimizer moments, epoch and RNG state. Throws
    // CheckpointError if the domain set or network differs from `cfg`.
    static Trainer resume(const std::filesystem::path& path, TrainConfig cfg,
                          const std::vector<DomainId>& expected_domains);

private:
    void set_learning_rate(double lr);

    Banks banks_;
    TrainConfig cfg_;
    TrainState state_;
    std::map<int, std::unique_ptr<torch::optim::Adam>> gen_opt_;
    std::map<int, std::unique_ptr<torch::optim::Adam>> dis_opt_;
    std::map<int, ImagePool> pools_;
    torch::Tensor fake_cache_a_;
    torch::Tensor fake_cache_b_;
};

// All manifest images, decoded and resized to scale_size, grouped by domain.
struct TrainingData {
    std::vector<DomainId> domains;
    std::map<int, std::vector<ImageTensor>> images;
};
TrainingData load_training_data(const DatasetManifest& manifest, const TrainConfig& cfg);

struct FitOptions {
    std::optional<std::filesystem::path> resume_from;
    // Called after each epoch with the epoch count completed so far.
    std::function<void(int64_t epochs_done, Trainer&)> on_epoch_end;
    bool write_checkpoints = true;
    bool write_log = true;
    bool verbose = false;
};

struct FitResult {
    Banks banks;
    TrainState state;
    std::vector<std::filesystem::path> checkpoints;
};

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int64_t epoch);

FitResult fit(const DatasetManifest& manifest, const TrainConfig& cfg, const FitOptions& opts = {});
FitResult fit(const TrainingData& data, const TrainConfig& cfg, const FitOptions& opts = {});

}  // namespace difl
