#include "difl/losses.hpp"

#include <cmath>

#include "difl/errors.hpp"

namespace difl {

namespace {

void same_shape(const torch::Tensor& x, const torch::Tensor& y, const char* what) {
    if (x.sizes() != y.sizes())
        throw ShapeError(std::string(what) + ": shape " + std::string(c10::str(x.sizes())) + " vs " +
                         std::string(c10::str(y.sizes())));
}

torch::Tensor per_sample_distance(const torch::Tensor& x, const torch::Tensor& y, FeatureMetric metric,
                                  FeatureReduction reduction) {
    const auto batch = x.dim() == 0 ? 1 : x.size(0);
    auto dx = x.reshape({batch, -1});
    auto dy = y.reshape({batch, -1});
    if (metric == FeatureMetric::Cosine) {
        // 1 - cos written as half the squared distance of the unit vectors,
        // which is exactly zero for identical inputs.
        auto ux = dx / dx.norm(2, 1, true).clamp_min(1e-12);
        auto uy = dy / dy.norm(2, 1, true).clamp_min(1e-12);
        return 0.5 * (ux - uy).pow(2).sum(1);
    }
    auto diff = dx - dy;
    // sqrt of a zero sum has an infinite derivative; the epsilon keeps the
    // gradient finite at the fixed point without moving the value noticeably.
    auto sq = diff.pow(2).sum(1);
    auto dist = torch::where(sq > 0, torch::sqrt(sq.clamp_min(1e-30)), torch::zeros_like(sq));
    if (reduction == FeatureReduction::Rms) dist = dist / std::sqrt(static_cast<double>(dx.size(1)));
    return dist;
}

}  // namespace

void LossWeights::validate() const {
    if (!std::isfinite(lambda1) || !std::isfinite(lambda2) || lambda1 < 0 || lambda2 < 0)
        throw ConfigError("loss weights must be finite and non-negative");
}

torch::Tensor gan_loss_discriminator(const torch::Tensor& real_scores, const torch::Tensor& fake_scores) {
    same_shape(real_scores, fake_scores, "gan_loss_discriminator");
    return (real_scores - 1.0).pow(2).mean() + fake_scores.pow(2).mean();
}

torch::Tensor gan_loss_generator(const torch::Tensor& fake_scores) {
    if (fake_scores.numel() == 0) throw ShapeError("gan_loss_generator: empty score map");
    return (fake_scores - 1.0).pow(2).mean();
}

torch::Tensor cycle_loss(const torch::Tensor& a, const torch::Tensor& a_rec, const torch::Tensor& b,
                         const torch::Tensor& b_rec) {
    same_shape(a, a_rec, "cycle_loss(a)");
    same_shape(b, b_rec, "cycle_loss(b)");
    return (a_rec - a).abs().mean() + (b_rec - b).abs().mean();
}

torch::Tensor feature_consistency_loss(const torch::Tensor& f_a, const torch::Tensor& f_ab, const torch::Tensor& f_b,
                                       const torch::Tensor& f_ba, FeatureMetric metric,
                                       FeatureReduction reduction) {
    same_shape(f_a, f_ab, "feature_consistency_loss(a)");
    same_shape(f_b, f_ba, "feature_consistency_loss(b)");
    same_shape(f_a, f_b, "feature_consistency_loss(a, b)");
    return per_sample_distance(f_ab, f_a, metric, reduction).mean() +
           per_sample_distance(f_ba, f_b, metric, reduction).mean();
}

torch::Tensor total_loss_tensor(const LossTerms& parts, const LossWeights& w) {
    w.validate();
    auto total = parts.gan_ab + parts.gan_ba + w.lambda1 * parts.cycle;
    if (parts.feature.defined()) total = total + w.lambda2 * parts.feature;
    return total;
}

LossBreakdown total_loss(double gan_ab, double gan_ba, double cycle, double feature, const LossWeights& w) {
    w.validate();
    return {gan_ab, gan_ba, cycle, feature, gan_ab + gan_ba + w.lambda1 * cycle + w.lambda2 * feature};
}

LossBreakdown total_loss(const LossTerms& parts, const LossWeights& w) {
    auto item = [](const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; };
    return total_loss(item(parts.gan_ab), item(parts.gan_ba), item(parts.cycle), item(parts.feature), w);
}

}  // namespace difl
