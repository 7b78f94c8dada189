#pragma once

#include <torch/torch.h>

#include "difl/model_bank.hpp"

namespace difl {

struct LossWeights {
    double lambda1 = 10.0;  // cycle consistency
    double lambda2 = 0.0;   // feature consistency

    void validate() const;
};

// Scalar values of one generator pass. total is recomputable from the parts.
struct LossBreakdown {
    double gan_ab = 0.0;
    double gan_ba = 0.0;
    double cycle = 0.0;
    double feature = 0.0;
    double total = 0.0;
};

// Differentiable counterparts of LossBreakdown, as 0-dim tensors.
struct LossTerms {
    torch::Tensor gan_ab;
    torch::Tensor gan_ba;
    torch::Tensor cycle;
    torch::Tensor feature;
};

// Distance used inside the feature consistency term.
enum class FeatureMetric { L2, Cosine };

// How the L2 feature distance is reduced per sample:
//   Rms  -> ||d||_2 / sqrt(numel)   (default)
//   Norm -> ||d||_2
enum class FeatureReduction { Rms, Norm };

// mean((real - 1)^2) + mean(fake^2). `fake_scores` must come from detached fakes.
torch::Tensor gan_loss_discriminator(const torch::Tensor& real_scores, const torch::Tensor& fake_scores);

// mean((fake - 1)^2)
torch::Tensor gan_loss_generator(const torch::Tensor& fake_scores);

// mean|a - a_rec| + mean|b - b_rec|
torch::Tensor cycle_loss(const torch::Tensor& a, const torch::Tensor& a_rec, const torch::Tensor& b,
                         const torch::Tensor& b_rec);

// Per-sample distance between (f_ab, f_a) plus between (f_ba, f_b), averaged over the batch.
torch::Tensor feature_consistency_loss(const torch::Tensor& f_a, const torch::Tensor& f_ab, const torch::Tensor& f_b,
                                       const torch::Tensor& f_ba, FeatureMetric metric = FeatureMetric::L2,
                                       FeatureReduction reduction = FeatureReduction::Rms);

torch::Tensor total_loss_tensor(const LossTerms& parts, const LossWeights& w);
LossBreakdown total_loss(const LossTerms& parts, const LossWeights& w);
LossBreakdown total_loss(double gan_ab, double gan_ba, double cycle, double feature, const LossWeights& w);

}  // namespace difl
