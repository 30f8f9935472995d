#pragma once

// Canonical network builders for the SOUP-GAN and CSR-GAN generator and
// discriminator pairs, in baseline and optimized variants, plus a rational
// spatial scale for desk-size instantiation. At scale 1 the built layer
// chains reproduce the published dimensions exactly.
//
// Up/downsampling convolutions use k=4, s=2, p=1; channel-preserving ones use
// k=3, s=1, p=1. The optimized variants deepen each branch with extra
// channel-preserving convolutions, double the first-stage filter width,
// insert residual blocks (CSR generator) or one self-attention block (CSR
// discriminator), and spectrally normalize every discriminator weight.

#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msrg/layers.hpp"
#include "msrg/rng.hpp"
#include "msrg/tensor.hpp"

namespace msrg {

// Positive rational applied to spatial dimensions only; channel widths and
// the latent dimension are never scaled.
struct Scale {
    long long num = 1;
    long long den = 1;

    Scale() = default;
    Scale(long long n, long long d) : num(n), den(d) {
        if (num <= 0 || den <= 0) throw ConfigError("scale must be positive");
        const long long g = std::gcd(num, den);
        num /= g;
        den /= g;
    }

    std::size_t apply(std::size_t base) const {
        const long long scaled = static_cast<long long>(base) * num;
        if (scaled % den != 0)
            throw ConfigError("scale " + str() + " makes dimension " + std::to_string(base) +
                              " non-integral");
        const long long v = scaled / den;
        if (v < 1)
            throw ConfigError("scale " + str() + " makes dimension " + std::to_string(base) + " vanish");
        return static_cast<std::size_t>(v);
    }

    bool is_one() const { return num == den; }

    std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }

    static Scale parse(const std::string& text) {
        const auto slash = text.find('/');
        try {
            if (slash == std::string::npos) return Scale(std::stoll(text), 1);
            return Scale(std::stoll(text.substr(0, slash)), std::stoll(text.substr(slash + 1)));
        } catch (const std::logic_error&) {
            throw ConfigError("cannot parse scale '" + text + "', expected N or N/D");
        }
    }
};

enum class NetRole { Generator, Discriminator };

struct NetworkSpec {
    std::string name;
    NetRole role = NetRole::Generator;
    bool conditional = false;
    Scale scale;
    Shape input_shape;  // per-sample, before any condition is attached
    Shape output_shape;
    std::vector<LayerNode> layers;

    std::vector<std::pair<std::string, Tensor>> named_parameters() {
        std::vector<std::pair<std::string, Tensor>> out;
        for (auto& layer : layers)
            for (auto& [pname, tensor] : layer.params)
                out.emplace_back(layer.name + "." + pname, tensor);
        return out;
    }

    std::vector<Tensor> parameters() {
        std::vector<Tensor> out;
        for (auto& layer : layers)
            for (auto& [pname, tensor] : layer.params) out.push_back(tensor);
        return out;
    }

    void zero_grad() {
        for (auto& layer : layers)
            for (auto& [pname, tensor] : layer.params) tensor.zero_grad();
    }

    void spectral_normalize_all(int n_power_iters) {
        for (auto& layer : layers) spectral_normalize(layer, n_power_iters);
    }

    // End-to-end consistency of the declared per-layer shapes.
    void validate() const {
        Shape cur = first_layer_input();
        for (const auto& layer : layers) {
            if (!layer.in_shape.empty() && layer.in_shape != cur)
                throw ConfigError(name + ": layer " + layer.name + " expects input " +
                                  shape_str(layer.in_shape) + " but receives " + shape_str(cur));
            if (!layer.out_shape.empty()) cur = layer.out_shape;
        }
        if (cur != output_shape)
            throw ConfigError(name + ": layer chain ends at " + shape_str(cur) +
                              ", declared output is " + shape_str(output_shape));
    }

    Shape first_layer_input() const {
        Shape cur = input_shape;
        if (conditional) {
            if (role == NetRole::Generator)
                cur.back() += 1; // condition concatenated onto the latent vector
            else
                cur.front() += 1; // condition broadcast as an extra channel plane
        }
        return cur;
    }
};

// Generator input bundle: standard-normal latent plus optional class label
// ({0 = Normal, 1 = Sick}) for the conditional models.
struct LatentInput {
    Tensor z;                        // (batch, latent_dim)
    std::optional<Tensor> condition; // (batch, 1)
};

inline LatentInput sample_latent(Rng& rng, std::size_t batch, std::size_t latent_dim) {
    Tensor z(Shape{batch, latent_dim});
    double* p = z.data();
    for (std::size_t i = 0; i < z.size(); ++i) p[i] = rng.normal();
    return LatentInput{z, std::nullopt};
}

// Fixed seeded Gaussian projection from a (degraded) input image to the
// latent vector: the compressed measurement the generator reconstructs from.
// The projection depends only on (seed, latent_dim, H, W), never on training,
// so a checkpoint plus an input image reproduces the same latent.
class LatentEncoder {
public:
    LatentEncoder() = default;
    LatentEncoder(std::uint64_t seed, std::size_t latent_dim) : seed_(seed), latent_dim_(latent_dim) {}

    std::uint64_t seed() const { return seed_; }
    std::size_t latent_dim() const { return latent_dim_; }

    // images: (N,1,H,W) in [-1,1]; returns (N, latent_dim).
    Tensor encode(const Tensor& images) const {
        if (images.rank() != 4 || images.dim(1) != 1)
            throw ShapeError("LatentEncoder expects (N,1,H,W) images, got " + shape_str(images.shape()));
        const std::size_t n = images.dim(0), h = images.dim(2), w = images.dim(3);
        const Tensor& proj = projection(h, w);
        Tensor z(Shape{n, latent_dim_});
        const double* px = images.data();
        const double* pp = proj.data();
        double* pz = z.data();
        const std::size_t hw = h * w;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < latent_dim_; ++k) {
                const double* row = pp + k * hw;
                const double* img = px + i * hw;
                double acc = 0.0;
                for (std::size_t j = 0; j < hw; ++j) acc += row[j] * img[j];
                pz[i * latent_dim_ + k] = acc;
            }
        return z;
    }

private:
    const Tensor& projection(std::size_t h, std::size_t w) const {
        const auto key = std::make_pair(h, w);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        const std::size_t hw = h * w;
        Tensor p(Shape{latent_dim_, hw});
        Rng rng(derive_seed(seed_, "latent-encoder", h * 1000003 + w));
        const double stddev = 1.0 / std::sqrt(static_cast<double>(hw));
        double* pd = p.data();
        for (std::size_t i = 0; i < p.size(); ++i) pd[i] = rng.normal(0.0, stddev);
        return cache_.emplace(key, std::move(p)).first->second;
    }

    std::uint64_t seed_ = 0;
    std::size_t latent_dim_ = 100;
    mutable std::map<std::pair<std::size_t, std::size_t>, Tensor> cache_;
};

struct BuildOptions {
    std::uint64_t seed = 42;
    std::size_t latent_dim = 100;
    std::size_t residual_blocks = 4; // optimized CSR generator
    std::size_t extra_convs = 1;     // extra channel-preserving convs per optimized stage
    std::size_t width_mult = 2;      // first-stage filter widening in optimized variants
    double alpha = 0.2;              // LeakyReLU slope
    std::size_t attn_bottleneck_div = 8;
    bool relu_baseline = false;      // restore plain-ReLU baselines
    int n_power_iters = 1;
};

namespace detail {

inline LayerNode hidden_activation(const std::string& name, const BuildOptions& opt, bool baseline) {
    if (baseline && opt.relu_baseline) return make_activation(name, LayerKind::ReLU);
    return make_activation(name, LayerKind::LeakyReLU, opt.alpha);
}

inline void set_shapes(LayerNode& l, Shape in, Shape out) {
    l.in_shape = std::move(in);
    l.out_shape = std::move(out);
}

} // namespace detail

// SOUP generator: dense 100 -> 64*64*256, reshape, two stride-2 transposed
// convolutions up to 256x256x1, tanh output.
inline NetworkSpec build_soup_generator(bool optimized, const Scale& scale,
                                        const BuildOptions& opt = {}) {
    const std::size_t s64 = scale.apply(64), s128 = scale.apply(128), s256 = scale.apply(256);
    Rng rng(derive_seed(opt.seed, optimized ? "soup-gen-opt" : "soup-gen"));
    NetworkSpec net;
    net.name = optimized ? "soup-optimized-generator" : "soup-baseline-generator";
    net.role = NetRole::Generator;
    net.conditional = false;
    net.scale = scale;
    net.input_shape = {opt.latent_dim};
    net.output_shape = {1, s256, s256};

    const std::size_t stage1_ch = optimized ? 128 * opt.width_mult : 128;
    auto& L = net.layers;

    L.push_back(make_dense("dense0", rng, opt.latent_dim, 256 * s64 * s64));
    detail::set_shapes(L.back(), {opt.latent_dim}, {256 * s64 * s64});
    L.push_back(make_reshape("reshape0", Shape{256, s64, s64}));
    detail::set_shapes(L.back(), {256 * s64 * s64}, {256, s64, s64});

    L.push_back(make_conv_transpose2d("convt1", rng, 256, stage1_ch, 4, 2, 1));
    detail::set_shapes(L.back(), {256, s64, s64}, {stage1_ch, s128, s128});
    L.push_back(detail::hidden_activation("act1", opt, !optimized));
    detail::set_shapes(L.back(), {stage1_ch, s128, s128}, {stage1_ch, s128, s128});

    if (optimized) {
        for (std::size_t i = 0; i < opt.extra_convs; ++i) {
            const std::string tag = "deep1_" + std::to_string(i);
            L.push_back(make_conv2d("conv_" + tag, rng, stage1_ch, stage1_ch, 3, 1, 1));
            detail::set_shapes(L.back(), {stage1_ch, s128, s128}, {stage1_ch, s128, s128});
            L.push_back(make_activation("act_" + tag, LayerKind::LeakyReLU, opt.alpha));
            detail::set_shapes(L.back(), {stage1_ch, s128, s128}, {stage1_ch, s128, s128});
        }
    }

    L.push_back(make_conv_transpose2d("convt2", rng, stage1_ch, 1, 4, 2, 1));
    detail::set_shapes(L.back(), {stage1_ch, s128, s128}, {1, s256, s256});
    L.push_back(make_activation("tanh_out", LayerKind::Tanh));
    detail::set_shapes(L.back(), {1, s256, s256}, {1, s256, s256});

    net.validate();
    return net;
}

// SOUP discriminator: three stride-2 convolutions 256x256 -> 32x32 with
// depth up to 256, flatten, dense, sigmoid scalar.
inline NetworkSpec build_soup_discriminator(bool optimized, const Scale& scale,
                                            const BuildOptions& opt = {}) {
    const std::size_t s256 = scale.apply(256), s128 = scale.apply(128), s64 = scale.apply(64),
                      s32 = scale.apply(32);
    Rng rng(derive_seed(opt.seed, optimized ? "soup-disc-opt" : "soup-disc"));
    NetworkSpec net;
    net.name = optimized ? "soup-optimized-discriminator" : "soup-baseline-discriminator";
    net.role = NetRole::Discriminator;
    net.conditional = false;
    net.scale = scale;
    net.input_shape = {1, s256, s256};
    net.output_shape = {1};

    const bool sn = optimized;
    const std::size_t c1 = optimized ? 64 * opt.width_mult : 64;
    const std::size_t c2 = 128, c3 = 256;
    auto& L = net.layers;

    L.push_back(make_conv2d("conv1", rng, 1, c1, 4, 2, 1, sn));
    detail::set_shapes(L.back(), {1, s256, s256}, {c1, s128, s128});
    L.push_back(detail::hidden_activation("act1", opt, !optimized));
    detail::set_shapes(L.back(), {c1, s128, s128}, {c1, s128, s128});

    L.push_back(make_conv2d("conv2", rng, c1, c2, 4, 2, 1, sn));
    detail::set_shapes(L.back(), {c1, s128, s128}, {c2, s64, s64});
    L.push_back(detail::hidden_activation("act2", opt, !optimized));
    detail::set_shapes(L.back(), {c2, s64, s64}, {c2, s64, s64});

    L.push_back(make_conv2d("conv3", rng, c2, c3, 4, 2, 1, sn));
    detail::set_shapes(L.back(), {c2, s64, s64}, {c3, s32, s32});
    L.push_back(detail::hidden_activation("act3", opt, !optimized));
    detail::set_shapes(L.back(), {c3, s32, s32}, {c3, s32, s32});

    if (optimized) {
        for (std::size_t i = 0; i < opt.extra_convs; ++i) {
            const std::string tag = "deep_" + std::to_string(i);
            L.push_back(make_conv2d("conv_" + tag, rng, c3, c3, 3, 1, 1, sn));
            detail::set_shapes(L.back(), {c3, s32, s32}, {c3, s32, s32});
            L.push_back(make_activation("act_" + tag, LayerKind::LeakyReLU, opt.alpha));
            detail::set_shapes(L.back(), {c3, s32, s32}, {c3, s32, s32});
        }
    }

    L.push_back(make_flatten("flatten"));
    detail::set_shapes(L.back(), {c3, s32, s32}, {c3 * s32 * s32});
    L.push_back(make_dense("dense_out", rng, c3 * s32 * s32, 1, sn));
    detail::set_shapes(L.back(), {c3 * s32 * s32}, {1});
    L.push_back(make_activation("sigmoid_out", LayerKind::Sigmoid));
    detail::set_shapes(L.back(), {1}, {1});

    net.validate();
    return net;
}

// CSR generator: (noise 100 + condition 1) -> dense -> 25x25x128, three
// stride-2 transposed convolutions up to 200x200x1, tanh output. The
// optimized variant inserts channel-preserving residual blocks after the
// reshape.
inline NetworkSpec build_csr_generator(bool optimized, const Scale& scale,
                                       const BuildOptions& opt = {}) {
    const std::size_t s25 = scale.apply(25), s50 = scale.apply(50), s100 = scale.apply(100),
                      s200 = scale.apply(200);
    Rng rng(derive_seed(opt.seed, optimized ? "csr-gen-opt" : "csr-gen"));
    NetworkSpec net;
    net.name = optimized ? "csr-optimized-generator" : "csr-baseline-generator";
    net.role = NetRole::Generator;
    net.conditional = true;
    net.scale = scale;
    net.input_shape = {opt.latent_dim};
    net.output_shape = {1, s200, s200};

    const std::size_t in_features = opt.latent_dim + 1;
    auto& L = net.layers;

    L.push_back(make_dense("dense0", rng, in_features, 128 * s25 * s25));
    detail::set_shapes(L.back(), {in_features}, {128 * s25 * s25});
    L.push_back(make_reshape("reshape0", Shape{128, s25, s25}));
    detail::set_shapes(L.back(), {128 * s25 * s25}, {128, s25, s25});

    if (optimized) {
        for (std::size_t i = 0; i < opt.residual_blocks; ++i) {
            L.push_back(make_residual_block("resblock" + std::to_string(i), rng, 128, opt.alpha));
            detail::set_shapes(L.back(), {128, s25, s25}, {128, s25, s25});
        }
    }

    L.push_back(make_conv_transpose2d("convt1", rng, 128, 64, 4, 2, 1));
    detail::set_shapes(L.back(), {128, s25, s25}, {64, s50, s50});
    L.push_back(detail::hidden_activation("act1", opt, !optimized));
    detail::set_shapes(L.back(), {64, s50, s50}, {64, s50, s50});

    L.push_back(make_conv_transpose2d("convt2", rng, 64, 32, 4, 2, 1));
    detail::set_shapes(L.back(), {64, s50, s50}, {32, s100, s100});
    L.push_back(detail::hidden_activation("act2", opt, !optimized));
    detail::set_shapes(L.back(), {32, s100, s100}, {32, s100, s100});

    L.push_back(make_conv_transpose2d("convt3", rng, 32, 1, 4, 2, 1));
    detail::set_shapes(L.back(), {32, s100, s100}, {1, s200, s200});
    L.push_back(make_activation("tanh_out", LayerKind::Tanh));
    detail::set_shapes(L.back(), {1, s200, s200}, {1, s200, s200});

    net.validate();
    return net;
}

// CSR discriminator: image plus condition plane, two stride-2 convolutions
// 200x200 -> 100x100x64 -> 50x50x128, flatten, dense, sigmoid. The optimized
// variant adds a self-attention block at the 50x50 stage, extra
// channel-preserving convolutions, and spectral normalization everywhere.
inline NetworkSpec build_csr_discriminator(bool optimized, const Scale& scale,
                                           const BuildOptions& opt = {}) {
    const std::size_t s200 = scale.apply(200), s100 = scale.apply(100), s50 = scale.apply(50);
    Rng rng(derive_seed(opt.seed, optimized ? "csr-disc-opt" : "csr-disc"));
    NetworkSpec net;
    net.name = optimized ? "csr-optimized-discriminator" : "csr-baseline-discriminator";
    net.role = NetRole::Discriminator;
    net.conditional = true;
    net.scale = scale;
    net.input_shape = {1, s200, s200};
    net.output_shape = {1};

    const bool sn = optimized;
    auto& L = net.layers;

    L.push_back(make_conv2d("conv1", rng, 2, 64, 4, 2, 1, sn));
    detail::set_shapes(L.back(), {2, s200, s200}, {64, s100, s100});
    L.push_back(detail::hidden_activation("act1", opt, !optimized));
    detail::set_shapes(L.back(), {64, s100, s100}, {64, s100, s100});

    L.push_back(make_conv2d("conv2", rng, 64, 128, 4, 2, 1, sn));
    detail::set_shapes(L.back(), {64, s100, s100}, {128, s50, s50});
    L.push_back(detail::hidden_activation("act2", opt, !optimized));
    detail::set_shapes(L.back(), {128, s50, s50}, {128, s50, s50});

    if (optimized) {
        L.push_back(make_self_attention("attn", rng, 128, opt.attn_bottleneck_div, sn));
        detail::set_shapes(L.back(), {128, s50, s50}, {128, s50, s50});
        for (std::size_t i = 0; i < opt.extra_convs; ++i) {
            const std::string tag = "deep_" + std::to_string(i);
            L.push_back(make_conv2d("conv_" + tag, rng, 128, 128, 3, 1, 1, sn));
            detail::set_shapes(L.back(), {128, s50, s50}, {128, s50, s50});
            L.push_back(make_activation("act_" + tag, LayerKind::LeakyReLU, opt.alpha));
            detail::set_shapes(L.back(), {128, s50, s50}, {128, s50, s50});
        }
    }

    L.push_back(make_flatten("flatten"));
    detail::set_shapes(L.back(), {128, s50, s50}, {128 * s50 * s50});
    L.push_back(make_dense("dense_out", rng, 128 * s50 * s50, 1, sn));
    detail::set_shapes(L.back(), {128 * s50 * s50}, {1});
    L.push_back(make_activation("sigmoid_out", LayerKind::Sigmoid));
    detail::set_shapes(L.back(), {1}, {1});

    net.validate();
    return net;
}

// --- presets -----------------------------------------------------------------

enum class Preset { SoupBaseline, SoupOptimized, CsrBaseline, CsrOptimized };

inline const char* preset_name(Preset p) {
    switch (p) {
        case Preset::SoupBaseline: return "soup-baseline";
        case Preset::SoupOptimized: return "soup-optimized";
        case Preset::CsrBaseline: return "csr-baseline";
        case Preset::CsrOptimized: return "csr-optimized";
    }
    return "?";
}

inline Preset parse_preset(const std::string& name) {
    if (name == "soup-baseline") return Preset::SoupBaseline;
    if (name == "soup-optimized") return Preset::SoupOptimized;
    if (name == "csr-baseline") return Preset::CsrBaseline;
    if (name == "csr-optimized") return Preset::CsrOptimized;
    throw ConfigError("unknown model preset '" + name +
                      "' (expected soup-baseline, soup-optimized, csr-baseline, csr-optimized)");
}

inline bool preset_is_csr(Preset p) { return p == Preset::CsrBaseline || p == Preset::CsrOptimized; }
inline bool preset_is_optimized(Preset p) {
    return p == Preset::SoupOptimized || p == Preset::CsrOptimized;
}

inline NetworkSpec build_generator(Preset p, const Scale& scale, const BuildOptions& opt = {}) {
    return preset_is_csr(p) ? build_csr_generator(preset_is_optimized(p), scale, opt)
                            : build_soup_generator(preset_is_optimized(p), scale, opt);
}

inline NetworkSpec build_discriminator(Preset p, const Scale& scale, const BuildOptions& opt = {}) {
    return preset_is_csr(p) ? build_csr_discriminator(preset_is_optimized(p), scale, opt)
                            : build_soup_discriminator(preset_is_optimized(p), scale, opt);
}

// --- forward -----------------------------------------------------------------

// Runs the layer chain. Conditional networks require a per-item condition
// (N,1); unconditional networks reject one.
inline Tensor network_forward(Tape& tape, const NetworkSpec& net, const Tensor& input,
                              const std::optional<Tensor>& condition = std::nullopt) {
    if (net.conditional && !condition.has_value())
        throw std::invalid_argument(net.name + " is conditional and requires a condition input");
    if (!net.conditional && condition.has_value())
        throw std::invalid_argument(net.name + " is unconditional and was given a condition input");

    Tensor x = input;
    if (net.role == NetRole::Generator) {
        if (x.rank() != 2 || x.dim(1) != net.input_shape[0])
            throw ShapeError(net.name + " expects latent input (N," +
                             std::to_string(net.input_shape[0]) + "), got " + shape_str(x.shape()));
        if (net.conditional) {
            const Tensor& c = *condition;
            if (c.rank() != 2 || c.dim(0) != x.dim(0) || c.dim(1) != 1)
                throw ShapeError(net.name + " expects condition (N,1), got " + shape_str(c.shape()));
            x = concat_channels(tape, x, c);
        }
    } else {
        if (x.rank() != 4 || Shape{x.dim(1), x.dim(2), x.dim(3)} != net.input_shape)
            throw ShapeError(net.name + " expects image input (N," + shape_str(net.input_shape) +
                             "), got " + shape_str(x.shape()));
        if (net.conditional) {
            const Tensor& c = *condition;
            if (c.dim(0) != x.dim(0))
                throw ShapeError(net.name + ": condition batch " + std::to_string(c.dim(0)) +
                                 " does not match input batch " + std::to_string(x.dim(0)));
            Tensor plane = broadcast_plane(tape, c, x.dim(2), x.dim(3));
            x = concat_channels(tape, x, plane);
        }
    }
    for (const auto& layer : net.layers) x = forward_layer(tape, layer, x);
    return x;
}

} // namespace msrg
