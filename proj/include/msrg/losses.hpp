#pragma once

// Adversarial (binary cross-entropy), pixel (L1) and perceptual losses, plus
// their weighted combination for the optimized generators.

#include <vector>

#include "msrg/layers.hpp"
#include "msrg/tensor.hpp"

namespace msrg {

inline constexpr double kBceClampEps = 1e-7;

struct LossWeights {
    double w_adv = 1e-3;
    double w_pix = 1.0;
    double w_perc = 6e-3;

    void validate() const {
        if (w_adv < 0.0 || w_pix < 0.0 || w_perc < 0.0)
            throw ConfigError("loss weights must be non-negative");
        if (w_adv == 0.0 && w_pix == 0.0 && w_perc == 0.0)
            throw ConfigError("at least one loss weight must be positive");
    }
};

// Mean of -[y ln p + (1-y) ln(1-p)] with p clamped to [eps, 1-eps]. The clamp
// is treated as part of the op, so the result stays finite for p in {0,1}.
inline Tensor bce_loss(Tape& tape, const Tensor& predictions, const Tensor& labels) {
    detail::require_same_shape(predictions, labels, "bce_loss");
    const std::size_t n = predictions.size();
    const double* p = predictions.data();
    const double* y = labels.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double pc = std::min(std::max(p[i], kBceClampEps), 1.0 - kBceClampEps);
        acc -= y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc);
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    if (detail::track(tape, predictions)) {
        out.set_requires_grad(true);
        tape.record([predictions, labels, out, n]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad_buffer()[0] / static_cast<double>(n);
            const double* p = predictions.data();
            const double* y = labels.data();
            auto& dp = predictions.grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                const double pc = std::min(std::max(p[i], kBceClampEps), 1.0 - kBceClampEps);
                dp[i] += g * (pc - y[i]) / (pc * (1.0 - pc));
            }
        });
    }
    return out;
}

// Mean absolute error. sign(0) is taken as 0 in the backward rule.
inline Tensor pixel_loss(Tape& tape, const Tensor& generated, const Tensor& target) {
    detail::require_same_shape(generated, target, "pixel_loss");
    const std::size_t n = generated.size();
    const double* a = generated.data();
    const double* b = target.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(a[i] - b[i]);
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    if (detail::track(tape, generated, target)) {
        out.set_requires_grad(true);
        tape.record([generated, target, out, n]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad_buffer()[0] / static_cast<double>(n);
            const double* a = generated.data();
            const double* b = target.data();
            if (generated.requires_grad()) {
                auto& da = generated.grad_buffer();
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = a[i] - b[i];
                    da[i] += d > 0.0 ? g : (d < 0.0 ? -g : 0.0);
                }
            }
            if (target.requires_grad()) {
                auto& db = target.grad_buffer();
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = a[i] - b[i];
                    db[i] -= d > 0.0 ? g : (d < 0.0 ? -g : 0.0);
                }
            }
        });
    }
    return out;
}

// Small fixed-weight convolutional stack standing in for a pretrained
// feature network. Weights are seeded once and never trained; the seed is
// carried in the training config so runs are reproducible. Externally
// supplied stage weights can be injected through from_weights().
class PerceptualExtractor {
public:
    static PerceptualExtractor seeded(std::uint64_t seed) {
        PerceptualExtractor e;
        Rng rng(derive_seed(seed, "perceptual-extractor"));
        const std::size_t channels[4] = {1, 8, 16, 32};
        for (int stage = 0; stage < 3; ++stage) {
            Tensor w = kaiming_normal(rng, Shape{channels[stage + 1], channels[stage], 3, 3},
                                      channels[stage] * 9);
            w.set_requires_grad(false);
            e.stage_weights_.push_back(w);
        }
        return e;
    }

    static PerceptualExtractor from_weights(std::vector<Tensor> stage_weights) {
        if (stage_weights.empty())
            throw ConfigError("perceptual extractor needs at least one stage weight");
        PerceptualExtractor e;
        for (auto& w : stage_weights) {
            if (w.rank() != 4)
                throw ConfigError("perceptual extractor stage weights must be OIHW");
            w.set_requires_grad(false);
            e.stage_weights_.push_back(w);
        }
        return e;
    }

    // Feature maps tapped after each conv+LeakyReLU stage.
    std::vector<Tensor> features(Tape& tape, const Tensor& x) const {
        std::vector<Tensor> taps;
        Tensor t = x;
        for (const Tensor& w : stage_weights_) {
            t = conv2d(tape, t, w, 2, 1);
            t = leaky_relu(tape, t, 0.2);
            taps.push_back(t);
        }
        return taps;
    }

    std::size_t stages() const { return stage_weights_.size(); }
    const std::vector<Tensor>& stage_weights() const { return stage_weights_; }

private:
    std::vector<Tensor> stage_weights_;
};

// Mean squared feature distance, averaged over tap points. Gradients flow to
// `generated` only; the target branch and the extractor weights are frozen.
inline Tensor perceptual_loss(Tape& tape, const Tensor& generated, const Tensor& target,
                              const PerceptualExtractor& extractor) {
    detail::require_same_shape(generated, target, "perceptual_loss");
    if (generated.rank() != 4 || generated.dim(1) != 1)
        throw ShapeError("perceptual_loss expects single-channel NCHW images, got " +
                         shape_str(generated.shape()));
    std::vector<Tensor> fg = extractor.features(tape, generated);
    std::vector<Tensor> ft = extractor.features(tape, target.requires_grad() ? target.detach() : target);
    Tensor total = Tensor::scalar(0.0);
    const double inv = 1.0 / static_cast<double>(fg.size());
    for (std::size_t i = 0; i < fg.size(); ++i) {
        Tensor d = sub(tape, fg[i], ft[i]);
        Tensor m = mean_all(tape, mul(tape, d, d));
        total = add(tape, total, scale(tape, m, inv));
    }
    return total;
}

// w_adv * BCE(d_out_on_fake, 1) + w_pix * L1 + w_perc * perceptual.
inline Tensor combined_generator_loss(Tape& tape, const Tensor& d_out_on_fake,
                                      const Tensor& generated, const Tensor& target,
                                      const LossWeights& weights,
                                      const PerceptualExtractor& extractor) {
    weights.validate();
    Tensor total = Tensor::scalar(0.0);
    if (weights.w_adv > 0.0) {
        Tensor real_labels(d_out_on_fake.shape(), 1.0);
        total = add(tape, total, scale(tape, bce_loss(tape, d_out_on_fake, real_labels), weights.w_adv));
    }
    if (weights.w_pix > 0.0)
        total = add(tape, total, scale(tape, pixel_loss(tape, generated, target), weights.w_pix));
    if (weights.w_perc > 0.0)
        total = add(tape, total, scale(tape, perceptual_loss(tape, generated, target, extractor), weights.w_perc));
    return total;
}

} // namespace msrg
