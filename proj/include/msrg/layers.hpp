#pragma once

// Network layer vocabulary: dense, conv2d, transposed conv2d, activations,
// reshape/flatten, residual block, self-attention, and spectral
// normalization of weight matrices via persistent power iteration.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msrg/rng.hpp"
#include "msrg/tensor.hpp"

namespace msrg {

enum class LayerKind {
    Dense,
    Conv2d,
    ConvTranspose2d,
    LeakyReLU,
    ReLU,
    Tanh,
    Sigmoid,
    Flatten,
    Reshape,
    ResidualBlock,
    SelfAttention,
};

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Dense: return "dense";
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::ConvTranspose2d: return "conv_transpose2d";
        case LayerKind::LeakyReLU: return "leaky_relu";
        case LayerKind::ReLU: return "relu";
        case LayerKind::Tanh: return "tanh";
        case LayerKind::Sigmoid: return "sigmoid";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::Reshape: return "reshape";
        case LayerKind::ResidualBlock: return "residual_block";
        case LayerKind::SelfAttention: return "self_attention";
    }
    return "?";
}

struct LayerHyper {
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t pad = 0;
    double alpha = 0.2;          // LeakyReLU negative slope
    bool spectral_norm = false;
    Shape target_shape;          // Reshape target, per sample (no batch dim)
    std::size_t attn_bottleneck_div = 8;
};

// Persistent power-iteration vectors for one normalized weight.
struct SpectralNormState {
    std::vector<double> u; // length = rows of the matricized weight
    std::vector<double> v; // length = cols
    double sigma = 1.0;
};

struct LayerNode {
    LayerKind kind;
    std::string name;
    LayerHyper hyper;
    std::map<std::string, Tensor> params;
    std::map<std::string, SpectralNormState> sn_state;
    Shape in_shape;  // per-sample, batch dim excluded
    Shape out_shape;
};

// --- shape formulas ---------------------------------------------------------

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
    const long long v = (static_cast<long long>(in) + 2 * static_cast<long long>(p) -
                         static_cast<long long>(k)) / static_cast<long long>(s) + 1;
    if (v < 1)
        throw ConfigError("conv output dim non-positive for in=" + std::to_string(in) +
                          " k=" + std::to_string(k) + " s=" + std::to_string(s) +
                          " p=" + std::to_string(p));
    return static_cast<std::size_t>(v);
}

inline std::size_t conv_transpose_out_dim(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
    const long long v = static_cast<long long>((in - 1) * s) - 2 * static_cast<long long>(p) +
                        static_cast<long long>(k);
    if (v < 1)
        throw ConfigError("transposed conv output dim non-positive for in=" + std::to_string(in) +
                          " k=" + std::to_string(k) + " s=" + std::to_string(s) +
                          " p=" + std::to_string(p));
    return static_cast<std::size_t>(v);
}

// --- initialization ---------------------------------------------------------

// Kaiming fan-in scaling, gain for the default LeakyReLU slope.
inline Tensor kaiming_normal(Rng& rng, Shape shape, std::size_t fan_in, double alpha = 0.2) {
    const double gain = std::sqrt(2.0 / (1.0 + alpha * alpha));
    const double stddev = gain / std::sqrt(static_cast<double>(fan_in));
    Tensor t(std::move(shape), 0.0, true);
    double* p = t.data();
    for (std::size_t i = 0; i < t.size(); ++i) p[i] = rng.normal(0.0, stddev);
    return t;
}

inline std::vector<double> random_unit_vector(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    double norm_sq = 0.0;
    for (auto& x : v) {
        x = rng.normal();
        norm_sq += x * x;
    }
    const double inv = 1.0 / std::max(std::sqrt(norm_sq), 1e-24);
    for (auto& x : v) x *= inv;
    return v;
}

// --- layer constructors -----------------------------------------------------

inline LayerNode make_dense(const std::string& name, Rng& rng, std::size_t in, std::size_t out,
                            bool spectral_norm = false) {
    LayerNode l;
    l.kind = LayerKind::Dense;
    l.name = name;
    l.hyper.spectral_norm = spectral_norm;
    l.params["weight"] = kaiming_normal(rng, Shape{in, out}, in);
    l.params["bias"] = Tensor(Shape{out}, 0.0, true);
    l.in_shape = {in};
    l.out_shape = {out};
    if (spectral_norm)
        l.sn_state["weight"] = SpectralNormState{random_unit_vector(rng, out), random_unit_vector(rng, in), 1.0};
    return l;
}

inline LayerNode make_conv2d(const std::string& name, Rng& rng, std::size_t in_ch, std::size_t out_ch,
                             std::size_t k, std::size_t s, std::size_t p, bool spectral_norm = false) {
    LayerNode l;
    l.kind = LayerKind::Conv2d;
    l.name = name;
    l.hyper.kernel = k;
    l.hyper.stride = s;
    l.hyper.pad = p;
    l.hyper.spectral_norm = spectral_norm;
    l.params["weight"] = kaiming_normal(rng, Shape{out_ch, in_ch, k, k}, in_ch * k * k);
    l.params["bias"] = Tensor(Shape{out_ch}, 0.0, true);
    if (spectral_norm)
        l.sn_state["weight"] =
            SpectralNormState{random_unit_vector(rng, out_ch), random_unit_vector(rng, in_ch * k * k), 1.0};
    return l;
}

inline LayerNode make_conv_transpose2d(const std::string& name, Rng& rng, std::size_t in_ch,
                                       std::size_t out_ch, std::size_t k, std::size_t s, std::size_t p,
                                       bool spectral_norm = false) {
    LayerNode l;
    l.kind = LayerKind::ConvTranspose2d;
    l.name = name;
    l.hyper.kernel = k;
    l.hyper.stride = s;
    l.hyper.pad = p;
    l.hyper.spectral_norm = spectral_norm;
    l.params["weight"] = kaiming_normal(rng, Shape{in_ch, out_ch, k, k}, out_ch * k * k);
    l.params["bias"] = Tensor(Shape{out_ch}, 0.0, true);
    if (spectral_norm)
        l.sn_state["weight"] =
            SpectralNormState{random_unit_vector(rng, out_ch), random_unit_vector(rng, in_ch * k * k), 1.0};
    return l;
}

inline LayerNode make_activation(const std::string& name, LayerKind kind, double alpha = 0.2) {
    LayerNode l;
    l.kind = kind;
    l.name = name;
    if (kind == LayerKind::LeakyReLU && !(alpha > 0.0 && alpha < 1.0))
        throw ConfigError("LeakyReLU slope must be in (0,1), got " + std::to_string(alpha));
    l.hyper.alpha = alpha;
    return l;
}

inline LayerNode make_flatten(const std::string& name) {
    LayerNode l;
    l.kind = LayerKind::Flatten;
    l.name = name;
    return l;
}

inline LayerNode make_reshape(const std::string& name, Shape target) {
    LayerNode l;
    l.kind = LayerKind::Reshape;
    l.name = name;
    l.hyper.target_shape = std::move(target);
    return l;
}

// Residual block: x + conv3x3 -> LeakyReLU -> conv3x3, channel-preserving.
inline LayerNode make_residual_block(const std::string& name, Rng& rng, std::size_t channels,
                                     double alpha = 0.2) {
    LayerNode l;
    l.kind = LayerKind::ResidualBlock;
    l.name = name;
    l.hyper.kernel = 3;
    l.hyper.stride = 1;
    l.hyper.pad = 1;
    l.hyper.alpha = alpha;
    l.params["conv1_weight"] = kaiming_normal(rng, Shape{channels, channels, 3, 3}, channels * 9);
    l.params["conv1_bias"] = Tensor(Shape{channels}, 0.0, true);
    l.params["conv2_weight"] = kaiming_normal(rng, Shape{channels, channels, 3, 3}, channels * 9);
    l.params["conv2_bias"] = Tensor(Shape{channels}, 0.0, true);
    return l;
}

// Gated query/key/value attention with 1x1 convolutions and a scalar gate
// initialized to zero, so a fresh block is the identity.
inline LayerNode make_self_attention(const std::string& name, Rng& rng, std::size_t channels,
                                     std::size_t bottleneck_div = 8, bool spectral_norm = false) {
    if (channels < bottleneck_div)
        throw ConfigError("self-attention needs >= " + std::to_string(bottleneck_div) +
                          " channels, got " + std::to_string(channels));
    if (channels % bottleneck_div != 0)
        throw ConfigError("self-attention channel count " + std::to_string(channels) +
                          " not divisible by bottleneck divisor " + std::to_string(bottleneck_div));
    const std::size_t bottleneck = channels / bottleneck_div;
    LayerNode l;
    l.kind = LayerKind::SelfAttention;
    l.name = name;
    l.hyper.attn_bottleneck_div = bottleneck_div;
    l.hyper.spectral_norm = spectral_norm;
    l.params["query_weight"] = kaiming_normal(rng, Shape{bottleneck, channels, 1, 1}, channels);
    l.params["key_weight"] = kaiming_normal(rng, Shape{bottleneck, channels, 1, 1}, channels);
    l.params["value_weight"] = kaiming_normal(rng, Shape{channels, channels, 1, 1}, channels);
    l.params["gamma"] = Tensor(Shape{1}, 0.0, true);
    if (spectral_norm) {
        l.sn_state["query_weight"] =
            SpectralNormState{random_unit_vector(rng, bottleneck), random_unit_vector(rng, channels), 1.0};
        l.sn_state["key_weight"] =
            SpectralNormState{random_unit_vector(rng, bottleneck), random_unit_vector(rng, channels), 1.0};
        l.sn_state["value_weight"] =
            SpectralNormState{random_unit_vector(rng, channels), random_unit_vector(rng, channels), 1.0};
    }
    return l;
}

// --- spectral normalization -------------------------------------------------

namespace detail {

// Weights are matricized with output channels as rows: dense (in,out) maps to
// (out,in); conv (o,i,kh,kw) flattens rows directly; transposed conv
// (i,o,kh,kw) gathers its strided out-channel dim.
inline void matricize_weight(LayerKind kind, const Tensor& w, std::vector<double>& m,
                             std::size_t& rows, std::size_t& cols) {
    if (kind == LayerKind::Dense) {
        rows = w.dim(1);
        cols = w.dim(0);
        m.resize(rows * cols);
        const double* p = w.data();
        for (std::size_t i = 0; i < cols; ++i)
            for (std::size_t o = 0; o < rows; ++o) m[o * cols + i] = p[i * rows + o];
    } else if (kind == LayerKind::ConvTranspose2d) {
        const std::size_t in_ch = w.dim(0), out_ch = w.dim(1), ksq = w.dim(2) * w.dim(3);
        rows = out_ch;
        cols = in_ch * ksq;
        m.resize(rows * cols);
        const double* p = w.data();
        for (std::size_t i = 0; i < in_ch; ++i)
            for (std::size_t o = 0; o < out_ch; ++o)
                for (std::size_t j = 0; j < ksq; ++j)
                    m[o * cols + i * ksq + j] = p[(i * out_ch + o) * ksq + j];
    } else { // Conv2d and 1x1 attention kernels share the OIHW layout
        rows = w.dim(0);
        cols = w.size() / rows;
        m.assign(w.data(), w.data() + w.size());
    }
}

inline void normalize_vec(std::vector<double>& x) {
    double norm_sq = 0.0;
    for (double v : x) norm_sq += v * v;
    const double norm = std::sqrt(norm_sq);
    if (norm < 1e-24) return; // zero vector: leave as-is
    for (double& v : x) v /= norm;
}

inline double power_iterate(const std::vector<double>& m, std::size_t rows, std::size_t cols,
                            std::vector<double>& u, std::vector<double>& v, int iters) {
    std::vector<double> tmp;
    for (int it = 0; it < iters; ++it) {
        // v <- normalize(M^T u)
        tmp.assign(cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double ur = u[r];
            if (ur == 0.0) continue;
            const double* row = m.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) tmp[c] += ur * row[c];
        }
        v = tmp;
        normalize_vec(v);
        // u <- normalize(M v)
        tmp.assign(rows, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* row = m.data() + r * cols;
            double acc = 0.0;
            for (std::size_t c = 0; c < cols; ++c) acc += row[c] * v[c];
            tmp[r] = acc;
        }
        u = tmp;
        normalize_vec(u);
    }
    // sigma = u^T M v
    double sigma = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = m.data() + r * cols;
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += row[c] * v[c];
        sigma += u[r] * acc;
    }
    return sigma;
}

} // namespace detail

inline constexpr double kSpectralNormSigmaFloor = 1e-12;

// Updates the persistent (u, v) vectors with n_power_iters steps and stores
// the sigma estimate used to rescale the effective weight. The stored sigma
// is treated as a constant by the backward pass.
inline void spectral_normalize(LayerNode& layer, int n_power_iters) {
    if (!layer.hyper.spectral_norm) return;
    for (auto& [param_name, state] : layer.sn_state) {
        const Tensor& w = layer.params.at(param_name);
        std::vector<double> m;
        std::size_t rows = 0, cols = 0;
        detail::matricize_weight(layer.kind, w, m, rows, cols);
        if (state.u.size() != rows || state.v.size() != cols)
            throw ConfigError("spectral norm state size mismatch for " + layer.name + "/" + param_name);
        const double sigma = detail::power_iterate(m, rows, cols, state.u, state.v, n_power_iters);
        state.sigma = std::max(sigma, kSpectralNormSigmaFloor);
    }
}

// Largest singular value via throwaway power iteration (fresh vectors, no
// state mutation); used for monitoring.
inline double spectral_sigma_estimate(LayerKind kind, const Tensor& w, int iters = 100,
                                      std::uint64_t seed = 1234567) {
    std::vector<double> m;
    std::size_t rows = 0, cols = 0;
    detail::matricize_weight(kind, w, m, rows, cols);
    Rng rng(seed);
    std::vector<double> u = random_unit_vector(rng, rows);
    std::vector<double> v = random_unit_vector(rng, cols);
    return detail::power_iterate(m, rows, cols, u, v, iters);
}

// --- forward dispatch -------------------------------------------------------

namespace detail {

inline Tensor effective_weight(Tape& tape, const LayerNode& layer, const std::string& name) {
    const Tensor& w = layer.params.at(name);
    if (!layer.hyper.spectral_norm) return w;
    auto it = layer.sn_state.find(name);
    if (it == layer.sn_state.end()) return w;
    return scale(tape, w, 1.0 / it->second.sigma);
}

inline Tensor residual_forward(Tape& tape, const LayerNode& l, const Tensor& x) {
    Tensor t = conv2d(tape, x, l.params.at("conv1_weight"), 1, 1);
    t = add_channel_bias(tape, t, l.params.at("conv1_bias"));
    t = leaky_relu(tape, t, l.hyper.alpha);
    t = conv2d(tape, t, l.params.at("conv2_weight"), 1, 1);
    t = add_channel_bias(tape, t, l.params.at("conv2_bias"));
    if (t.shape() != x.shape())
        throw ConfigError("residual block " + l.name + " drifted shape " + shape_str(x.shape()) +
                          " -> " + shape_str(t.shape()));
    return add(tape, x, t);
}

inline Tensor attention_forward(Tape& tape, const LayerNode& l, const Tensor& x) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t hw = h * w;
    const Tensor wq = effective_weight(tape, l, "query_weight");
    const Tensor wk = effective_weight(tape, l, "key_weight");
    const Tensor wv = effective_weight(tape, l, "value_weight");
    const std::size_t bottleneck = wq.dim(0);
    Tensor q = reshape(tape, conv2d(tape, x, wq, 1, 0), Shape{n, bottleneck, hw});
    Tensor k = reshape(tape, conv2d(tape, x, wk, 1, 0), Shape{n, bottleneck, hw});
    Tensor v = reshape(tape, conv2d(tape, x, wv, 1, 0), Shape{n, c, hw});
    // scores[i][j]: query position i against key position j
    Tensor scores = bmm(tape, transpose_last2(tape, q), k);
    Tensor attn = softmax_rows(tape, scores);
    Tensor o = bmm(tape, v, transpose_last2(tape, attn));
    o = reshape(tape, o, Shape{n, c, h, w});
    return add(tape, x, scale_by(tape, o, l.params.at("gamma")));
}

} // namespace detail

inline Tensor forward_layer(Tape& tape, const LayerNode& layer, const Tensor& x) {
    switch (layer.kind) {
        case LayerKind::Dense: {
            Tensor y = matmul(tape, x, detail::effective_weight(tape, layer, "weight"));
            return add_rowvec(tape, y, layer.params.at("bias"));
        }
        case LayerKind::Conv2d: {
            Tensor y = conv2d(tape, x, detail::effective_weight(tape, layer, "weight"),
                              layer.hyper.stride, layer.hyper.pad);
            return add_channel_bias(tape, y, layer.params.at("bias"));
        }
        case LayerKind::ConvTranspose2d: {
            Tensor y = conv_transpose2d(tape, x, detail::effective_weight(tape, layer, "weight"),
                                        layer.hyper.stride, layer.hyper.pad);
            return add_channel_bias(tape, y, layer.params.at("bias"));
        }
        case LayerKind::LeakyReLU:
            return leaky_relu(tape, x, layer.hyper.alpha);
        case LayerKind::ReLU:
            return relu(tape, x);
        case LayerKind::Tanh:
            return tanh_act(tape, x);
        case LayerKind::Sigmoid:
            return sigmoid_act(tape, x);
        case LayerKind::Flatten: {
            std::size_t rest = 1;
            for (std::size_t i = 1; i < x.rank(); ++i) rest *= x.dim(i);
            return reshape(tape, x, Shape{x.dim(0), rest});
        }
        case LayerKind::Reshape: {
            Shape target{x.dim(0)};
            target.insert(target.end(), layer.hyper.target_shape.begin(), layer.hyper.target_shape.end());
            return reshape(tape, x, std::move(target));
        }
        case LayerKind::ResidualBlock:
            return detail::residual_forward(tape, layer, x);
        case LayerKind::SelfAttention:
            return detail::attention_forward(tape, layer, x);
    }
    throw ConfigError("unknown layer kind");
}

// Convenience wrappers mirroring the layer-level operation names.
inline Tensor conv2d_forward(Tape& tape, const Tensor& x, const LayerNode& layer) {
    if (layer.kind != LayerKind::Conv2d)
        throw ConfigError("conv2d_forward got layer of kind " + std::string(layer_kind_name(layer.kind)));
    return forward_layer(tape, layer, x);
}

inline Tensor conv_transpose2d_forward(Tape& tape, const Tensor& x, const LayerNode& layer) {
    if (layer.kind != LayerKind::ConvTranspose2d)
        throw ConfigError("conv_transpose2d_forward got layer of kind " +
                          std::string(layer_kind_name(layer.kind)));
    return forward_layer(tape, layer, x);
}

inline Tensor residual_block_forward(Tape& tape, const Tensor& x, const LayerNode& layer) {
    if (layer.kind != LayerKind::ResidualBlock)
        throw ConfigError("residual_block_forward got layer of kind " +
                          std::string(layer_kind_name(layer.kind)));
    return forward_layer(tape, layer, x);
}

inline Tensor self_attention_forward(Tape& tape, const Tensor& x, const LayerNode& layer) {
    if (layer.kind != LayerKind::SelfAttention)
        throw ConfigError("self_attention_forward got layer of kind " +
                          std::string(layer_kind_name(layer.kind)));
    return forward_layer(tape, layer, x);
}

} // namespace msrg
