#pragma once

// Dense 64-bit float tensors with reverse-mode automatic differentiation over
// an explicitly recorded tape. Canonical image layout is NCHW, row-major.
//
// Every differentiable op appends one backward rule to the tape; backward()
// replays the rules in exact reverse recording order and accumulates
// gradients additively, so fan-out works without special cases. Reductions
// accumulate sequentially in row-major order, which keeps results
// bit-reproducible between runs.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "msrg/parallel.hpp"

namespace msrg {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until first needed
    bool requires_grad = false;
};

} // namespace detail

// Value-semantic handle to shared storage. Copies alias the same buffer; the
// data of a tensor is treated as immutable once it has entered a tape, the
// gradient buffer and explicit parameter updates being the exceptions.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        impl_->shape = std::move(shape);
        impl_->data.assign(shape_numel(impl_->shape), fill);
        impl_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    std::vector<double>& values() { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }

    double item() const {
        if (size() != 1)
            throw ShapeError("item() requires a scalar tensor, got shape " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

    bool has_grad() const { return !impl_->grad.empty(); }

    // Zero-initialized on first access; same length as data.
    std::vector<double>& grad_buffer() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
        return impl_->grad;
    }
    const std::vector<double>& grad_buffer() const { return impl_->grad; }

    void zero_grad() {
        if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    }

    // Deep copy with gradient tracking severed.
    Tensor detach() const {
        Tensor out(impl_->shape);
        out.impl_->data = impl_->data;
        return out;
    }

    Tensor clone() const {
        Tensor out = detach();
        out.set_requires_grad(impl_->requires_grad);
        return out;
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Recorded operation list. Forward ops append their backward rule; backward()
// visits the rules in exact reverse order. A tape constructed with
// recording=false turns every op into a plain forward evaluation.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void record(std::function<void()> backward_rule) {
        nodes_.push_back(std::move(backward_rule));
    }

    void backward(Tensor output) {
        if (output.size() != 1)
            throw ShapeError("backward requires a scalar output, got shape " + shape_str(output.shape()));
        if (!output.requires_grad())
            throw std::invalid_argument("backward output does not depend on any tensor with requires_grad");
        output.grad_buffer()[0] += 1.0;
        for (std::size_t i = nodes_.size(); i > 0; --i) nodes_[i - 1]();
    }

private:
    bool recording_ = true;
    std::vector<std::function<void()>> nodes_;
};

inline void backward(const Tensor& output, Tape& tape) { tape.backward(output); }

namespace detail {

inline bool track(const Tape& tape, const Tensor& a) {
    return tape.recording() && a.requires_grad();
}

inline bool track(const Tape& tape, const Tensor& a, const Tensor& b) {
    return tape.recording() && (a.requires_grad() || b.requires_grad());
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

// out[i,j] += sum_p a[i,p] * b[p,j]; AXPY inner loop keeps rows contiguous.
inline void matmul_accum(const double* a, const double* b, double* out,
                         std::size_t m, std::size_t k, std::size_t n) {
    parallel_for(m, [&](std::size_t i) {
        double* orow = out + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    });
}

// dA[i,p] += sum_j g[i,j] * b[p,j]
inline void matmul_grad_a(const double* g, const double* b, double* da,
                          std::size_t m, std::size_t k, std::size_t n) {
    parallel_for(m, [&](std::size_t i) {
        const double* grow = g + i * n;
        double* darow = da + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            darow[p] += acc;
        }
    });
}

// dB[p,j] += sum_i a[i,p] * g[i,j]
inline void matmul_grad_b(const double* a, const double* g, double* db,
                          std::size_t m, std::size_t k, std::size_t n) {
    parallel_for(k, [&](std::size_t p) {
        double* dbrow = db + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            const double* grow = g + i * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
        }
    });
}

struct ConvDims {
    std::size_t batch, in_ch, in_h, in_w;
    std::size_t out_ch, out_h, out_w;
    std::size_t kernel, stride;
    long long pad;
};

// Forward cross-correlation. Owned-plane partitioning: each (n, oc) output
// plane is produced by exactly one worker in a fixed accumulation order.
inline void conv2d_accum(const double* x, const double* w, double* out, const ConvDims& d) {
    const std::size_t in_plane = d.in_h * d.in_w;
    const std::size_t out_plane = d.out_h * d.out_w;
    const std::size_t ksq = d.kernel * d.kernel;
    parallel_for(d.batch * d.out_ch, [&](std::size_t plane) {
        const std::size_t n = plane / d.out_ch;
        const std::size_t oc = plane % d.out_ch;
        double* o = out + plane * out_plane;
        const double* xn = x + n * d.in_ch * in_plane;
        for (std::size_t ic = 0; ic < d.in_ch; ++ic) {
            const double* xc = xn + ic * in_plane;
            const double* wc = w + (oc * d.in_ch + ic) * ksq;
            for (std::size_t kh = 0; kh < d.kernel; ++kh) {
                for (std::size_t kw = 0; kw < d.kernel; ++kw) {
                    const double wv = wc[kh * d.kernel + kw];
                    if (wv == 0.0) continue;
                    const long long dh = static_cast<long long>(kh) - d.pad;
                    const long long dw = static_cast<long long>(kw) - d.pad;
                    for (std::size_t oh = 0; oh < d.out_h; ++oh) {
                        const long long ih = static_cast<long long>(oh * d.stride) + dh;
                        if (ih < 0 || ih >= static_cast<long long>(d.in_h)) continue;
                        const double* xrow = xc + static_cast<std::size_t>(ih) * d.in_w;
                        double* orow = o + oh * d.out_w;
                        for (std::size_t ow = 0; ow < d.out_w; ++ow) {
                            const long long iw = static_cast<long long>(ow * d.stride) + dw;
                            if (iw < 0 || iw >= static_cast<long long>(d.in_w)) continue;
                            orow[ow] += wv * xrow[static_cast<std::size_t>(iw)];
                        }
                    }
                }
            }
        }
    });
}

// dX for conv2d; partitioned over (n, ic) input planes.
inline void conv2d_grad_input(const double* g, const double* w, double* dx, const ConvDims& d) {
    const std::size_t in_plane = d.in_h * d.in_w;
    const std::size_t out_plane = d.out_h * d.out_w;
    const std::size_t ksq = d.kernel * d.kernel;
    parallel_for(d.batch * d.in_ch, [&](std::size_t plane) {
        const std::size_t n = plane / d.in_ch;
        const std::size_t ic = plane % d.in_ch;
        double* dxp = dx + plane * in_plane;
        const double* gn = g + n * d.out_ch * out_plane;
        for (std::size_t oc = 0; oc < d.out_ch; ++oc) {
            const double* gc = gn + oc * out_plane;
            const double* wc = w + (oc * d.in_ch + ic) * ksq;
            for (std::size_t kh = 0; kh < d.kernel; ++kh) {
                for (std::size_t kw = 0; kw < d.kernel; ++kw) {
                    const double wv = wc[kh * d.kernel + kw];
                    if (wv == 0.0) continue;
                    const long long dh = static_cast<long long>(kh) - d.pad;
                    const long long dw = static_cast<long long>(kw) - d.pad;
                    for (std::size_t oh = 0; oh < d.out_h; ++oh) {
                        const long long ih = static_cast<long long>(oh * d.stride) + dh;
                        if (ih < 0 || ih >= static_cast<long long>(d.in_h)) continue;
                        double* dxrow = dxp + static_cast<std::size_t>(ih) * d.in_w;
                        const double* grow = gc + oh * d.out_w;
                        for (std::size_t ow = 0; ow < d.out_w; ++ow) {
                            const long long iw = static_cast<long long>(ow * d.stride) + dw;
                            if (iw < 0 || iw >= static_cast<long long>(d.in_w)) continue;
                            dxrow[static_cast<std::size_t>(iw)] += wv * grow[ow];
                        }
                    }
                }
            }
        }
    });
}

// dW for conv2d; partitioned over output channels.
inline void conv2d_grad_weight(const double* x, const double* g, double* dw, const ConvDims& d) {
    const std::size_t in_plane = d.in_h * d.in_w;
    const std::size_t out_plane = d.out_h * d.out_w;
    const std::size_t ksq = d.kernel * d.kernel;
    parallel_for(d.out_ch, [&](std::size_t oc) {
        for (std::size_t ic = 0; ic < d.in_ch; ++ic) {
            double* dwc = dw + (oc * d.in_ch + ic) * ksq;
            for (std::size_t kh = 0; kh < d.kernel; ++kh) {
                for (std::size_t kw = 0; kw < d.kernel; ++kw) {
                    const long long dh = static_cast<long long>(kh) - d.pad;
                    const long long dw_off = static_cast<long long>(kw) - d.pad;
                    double acc = 0.0;
                    for (std::size_t n = 0; n < d.batch; ++n) {
                        const double* xc = x + (n * d.in_ch + ic) * in_plane;
                        const double* gc = g + (n * d.out_ch + oc) * out_plane;
                        for (std::size_t oh = 0; oh < d.out_h; ++oh) {
                            const long long ih = static_cast<long long>(oh * d.stride) + dh;
                            if (ih < 0 || ih >= static_cast<long long>(d.in_h)) continue;
                            const double* xrow = xc + static_cast<std::size_t>(ih) * d.in_w;
                            const double* grow = gc + oh * d.out_w;
                            for (std::size_t ow = 0; ow < d.out_w; ++ow) {
                                const long long iw = static_cast<long long>(ow * d.stride) + dw_off;
                                if (iw < 0 || iw >= static_cast<long long>(d.in_w)) continue;
                                acc += xrow[static_cast<std::size_t>(iw)] * grow[ow];
                            }
                        }
                    }
                    dwc[kh * d.kernel + kw] += acc;
                }
            }
        }
    });
}

// Transposed convolution forward: out[n,oc,ih*s-p+kh, iw*s-p+kw] += x*w.
// Weight layout (in_ch, out_ch, kh, kw). Partitioned over (n, oc) planes.
inline void conv_transpose2d_accum(const double* x, const double* w, double* out, const ConvDims& d) {
    // Here in_* describe x and out_* describe the (larger) output.
    const std::size_t in_plane = d.in_h * d.in_w;
    const std::size_t out_plane = d.out_h * d.out_w;
    const std::size_t ksq = d.kernel * d.kernel;
    parallel_for(d.batch * d.out_ch, [&](std::size_t plane) {
        const std::size_t n = plane / d.out_ch;
        const std::size_t oc = plane % d.out_ch;
        double* o = out + plane * out_plane;
        const double* xn = x + n * d.in_ch * in_plane;
        for (std::size_t ic = 0; ic < d.in_ch; ++ic) {
            const double* xc = xn + ic * in_plane;
            const double* wc = w + (ic * d.out_ch + oc) * ksq;
            for (std::size_t kh = 0; kh < d.kernel; ++kh) {
                for (std::size_t kw = 0; kw < d.kernel; ++kw) {
                    const double wv = wc[kh * d.kernel + kw];
                    if (wv == 0.0) continue;
                    const long long dh = static_cast<long long>(kh) - d.pad;
                    const long long dw = static_cast<long long>(kw) - d.pad;
                    for (std::size_t ih = 0; ih < d.in_h; ++ih) {
                        const long long oh = static_cast<long long>(ih * d.stride) + dh;
                        if (oh < 0 || oh >= static_cast<long long>(d.out_h)) continue;
                        const double* xrow = xc + ih * d.in_w;
                        double* orow = o + static_cast<std::size_t>(oh) * d.out_w;
                        for (std::size_t iw = 0; iw < d.in_w; ++iw) {
                            const long long ow = static_cast<long long>(iw * d.stride) + dw;
                            if (ow < 0 || ow >= static_cast<long long>(d.out_w)) continue;
                            orow[static_cast<std::size_t>(ow)] += wv * xrow[iw];
                        }
                    }
                }
            }
        }
    });
}

// dX for transposed convolution is an ordinary cross-correlation of the
// output gradient; partitioned over (n, ic).
inline void conv_transpose2d_grad_input(const double* g, const double* w, double* dx, const ConvDims& d) {
    const std::size_t in_plane = d.in_h * d.in_w;
    const std::size_t out_plane = d.out_h * d.out_w;
    const std::size_t ksq = d.kernel * d.kernel;
    parallel_for(d.batch * d.in_ch, [&](std::size_t plane) {
        const std::size_t n = plane / d.in_ch;
        const std::size_t ic = plane % d.in_ch;
        double* dxp = dx + plane * in_plane;
        const double* gn = g + n * d.out_ch * out_plane;
        for (std::size_t oc = 0; oc < d.out_ch; ++oc) {
            const double* gc = gn + oc * out_plane;
            const double* wc = w + (ic * d.out_ch + oc) * ksq;
            for (std::size_t kh = 0; kh < d.kernel; ++kh) {
                for (std::size_t kw = 0; kw < d.kernel; ++kw) {
                    const double wv = wc[kh * d.kernel + kw];
                    if (wv == 0.0) continue;
                    const long long dh = static_cast<long long>(kh) - d.pad;
                    const long long dw = static_cast<long long>(kw) - d.pad;
                    for (std::size_t ih = 0; ih < d.in_h; ++ih) {
                        const long long oh = static_cast<long long>(ih * d.stride) + dh;
                        if (oh < 0 || oh >= static_cast<long long>(d.out_h)) continue;
                        double* dxrow = dxp + ih * d.in_w;
                        const double* grow = gc + static_cast<std::size_t>(oh) * d.out_w;
                        for (std::size_t iw = 0; iw < d.in_w; ++iw) {
                            const long long ow = static_cast<long long>(iw * d.stride) + dw;
                            if (ow < 0 || ow >= static_cast<long long>(d.out_w)) continue;
                            dxrow[iw] += wv * grow[static_cast<std::size_t>(ow)];
                        }
                    }
                }
            }
        }
    });
}

// dW for transposed convolution; partitioned over in channels.
inline void conv_transpose2d_grad_weight(const double* x, const double* g, double* dw, const ConvDims& d) {
    const std::size_t in_plane = d.in_h * d.in_w;
    const std::size_t out_plane = d.out_h * d.out_w;
    const std::size_t ksq = d.kernel * d.kernel;
    parallel_for(d.in_ch, [&](std::size_t ic) {
        for (std::size_t oc = 0; oc < d.out_ch; ++oc) {
            double* dwc = dw + (ic * d.out_ch + oc) * ksq;
            for (std::size_t kh = 0; kh < d.kernel; ++kh) {
                for (std::size_t kw = 0; kw < d.kernel; ++kw) {
                    const long long dh = static_cast<long long>(kh) - d.pad;
                    const long long dw_off = static_cast<long long>(kw) - d.pad;
                    double acc = 0.0;
                    for (std::size_t n = 0; n < d.batch; ++n) {
                        const double* xc = x + (n * d.in_ch + ic) * in_plane;
                        const double* gc = g + (n * d.out_ch + oc) * out_plane;
                        for (std::size_t ih = 0; ih < d.in_h; ++ih) {
                            const long long oh = static_cast<long long>(ih * d.stride) + dh;
                            if (oh < 0 || oh >= static_cast<long long>(d.out_h)) continue;
                            const double* xrow = xc + ih * d.in_w;
                            const double* grow = gc + static_cast<std::size_t>(oh) * d.out_w;
                            for (std::size_t iw = 0; iw < d.in_w; ++iw) {
                                const long long ow = static_cast<long long>(iw * d.stride) + dw_off;
                                if (ow < 0 || ow >= static_cast<long long>(d.out_w)) continue;
                                acc += xrow[iw] * grow[static_cast<std::size_t>(ow)];
                            }
                        }
                    }
                    dwc[kh * d.kernel + kw] += acc;
                }
            }
        }
    });
}

} // namespace detail

// --- elementwise and structural ops ---------------------------------------

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
    if (detail::track(tape, a, b)) {
        out.set_requires_grad(true);
        tape.record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_buffer();
            if (a.requires_grad()) {
                auto& da = a.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& db = b.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] - pb[i];
    if (detail::track(tape, a, b)) {
        out.set_requires_grad(true);
        tape.record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_buffer();
            if (a.requires_grad()) {
                auto& da = a.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& db = b.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
    if (detail::track(tape, a, b)) {
        out.set_requires_grad(true);
        tape.record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_buffer();
            if (a.requires_grad()) {
                auto& da = a.grad_buffer();
                const double* pb2 = b.data();
                for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * pb2[i];
            }
            if (b.requires_grad()) {
                auto& db = b.grad_buffer();
                const double* pa2 = a.data();
                for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * pa2[i];
            }
        });
    }
    return out;
}

// Multiply by a compile-time-known constant.
inline Tensor scale(Tape& tape, const Tensor& x, double c) {
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = c * px[i];
    if (detail::track(tape, x)) {
        out.set_requires_grad(true);
        tape.record([x, out, c]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_buffer();
            auto& dx = x.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += c * g[i];
        });
    }
    return out;
}

// Multiply by a learnable scalar tensor (gating).
inline Tensor scale_by(Tape& tape, const Tensor& x, const Tensor& gamma) {
    if (gamma.size() != 1)
        throw ShapeError("scale_by: gate must be a scalar, got shape " + shape_str(gamma.shape()));
    const double gv = gamma.data()[0];
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = gv * px[i];
    if (detail::track(tape, x, gamma)) {
        out.set_requires_grad(true);
        tape.record([x, gamma, out, gv]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_buffer();
            if (x.requires_grad()) {
                auto& dx = x.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) dx[i] += gv * g[i];
            }
            if (gamma.requires_grad()) {
                const double* px2 = x.data();
                double acc = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * px2[i];
                gamma.grad_buffer()[0] += acc;
            }
        });
    }
    return out;
}

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n});
    detail::matmul_accum(a.data(), b.data(), out.data(), m, k, n);
    if (detail::track(tape, a, b)) {
        out.set_requires_grad(true);
        tape.record([a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_buffer().data();
            if (a.requires_grad())
                detail::matmul_grad_a(g, b.data(), a.grad_buffer().data(), m, k, n);
            if (b.requires_grad())
                detail::matmul_grad_b(a.data(), g, b.grad_buffer().data(), m, k, n);
        });
    }
    return out;
}

// Batched matmul over the leading dimension: (B,m,k) x (B,k,n) -> (B,m,n).
inline Tensor bmm(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor out(Shape{bs, m, n});
    for (std::size_t i = 0; i < bs; ++i)
        detail::matmul_accum(a.data() + i * m * k, b.data() + i * k * n,
                             out.data() + i * m * n, m, k, n);
    if (detail::track(tape, a, b)) {
        out.set_requires_grad(true);
        tape.record([a, b, out, bs, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_buffer().data();
            for (std::size_t i = 0; i < bs; ++i) {
                if (a.requires_grad())
                    detail::matmul_grad_a(g + i * m * n, b.data() + i * k * n,
                                          a.grad_buffer().data() + i * m * k, m, k, n);
                if (b.requires_grad())
                    detail::matmul_grad_b(a.data() + i * m * k, g + i * m * n,
                                          b.grad_buffer().data() + i * k * n, m, k, n);
            }
        });
    }
    return out;
}

inline Tensor transpose_last2(Tape& tape, const Tensor& x) {
    if (x.rank() != 3)
        throw ShapeError("transpose_last2 expects rank-3 input, got " + shape_str(x.shape()));
    const std::size_t b = x.dim(0), m = x.dim(1), n = x.dim(2);
    Tensor out(Shape{b, n, m});
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c)
                po[i * m * n + c * m + r] = px[i * m * n + r * n + c];
    if (detail::track(tape, x)) {
        out.set_requires_grad(true);
        tape.record([x, out, b, m, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_buffer().data();
            auto& dx = x.grad_buffer();
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c)
                        dx[i * m * n + r * n + c] += g[i * m * n + c * m + r];
        });
    }
    return out;
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.size())
        throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) +
                         " -> " + shape_str(new_shape));
    Tensor out(std::move(new_shape));
    out.values() = x.values();
    if (detail::track(tape, x)) {
        out.set_requires_grad(true);
        tape.record([x, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_buffer();
            auto& dx = x.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        });
    }
    return out;
}

// Spatial zero-value padding on NCHW tensors (fill value configurable).
inline Tensor pad2d(Tape& tape, const Tensor& x, std::size_t top, std::size_t bottom,
                    std::size_t left, std::size_t right, double fill = 0.0) {
    if (x.rank() != 4)
        throw ShapeError("pad2d expects NCHW input, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = h + top + bottom, ow = w + left + right;
    Tensor out(Shape{n, c, oh, ow}, fill);
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t r = 0; r < h; ++r) {
            const double* src = px + (p * h + r) * w;
            double* dst = po + (p * oh + r + top) * ow + left;
            for (std::size_t q = 0; q < w; ++q) dst[q] = src[q];
        }
    if (detail::track(tape, x)) {
        out.set_requires_grad(true);
        tape.record([x, out, n, c, h, w, oh, ow, top, left]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_buffer().data();
            auto& dx = x.grad_buffer();
            for (std::size_t p = 0; p < n * c; ++p)
                for (std::size_t r = 0; r < h; ++r) {
                    const double* grow = g + (p * oh + r + top) * ow + left;
                    double* drow = dx.data() + (p * h + r) * w;
                    for (std::size_t q = 0; q < w; ++q) drow[q] += grow[q];
                }
        });
    }
    return out;
}

inline Tensor crop2d(Tape& tape, const Tensor& x, std::size_t top, std::size_t left,
                     std::size_t height, std::size_t width) {
    if (x.rank() != 4)
        throw ShapeError("crop2d expects NCHW input, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (top + height > h || left + width > w)
        throw ShapeError("crop2d: region " + std::to_string(top) + "+" + std::to_string(height) +
                         " x " + std::to_string(left) + "+" + std::to_string(width) +
                         " out of bounds for " + shape_str(x.shape()));
    Tensor out(Shape{n, c, height, width});
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t r = 0; r < height; ++r) {
            const double* src = px + (p * h + r + top) * w + left;
            double* dst = po + (p * height + r) * width;
            for (std::size_t q = 0; q < width; ++q) dst[q] = src[q];
        }
    if (detail::track(tape, x)) {
        out.set_requires_grad(true);
        tape.record([x, out, n, c, h, w, height, width, top, left]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_buffer().data();
            auto& dx = x.grad_buffer();
            for (std::size_t p = 0; p < n * c; ++p)
                for (std::size_t r = 0; r < height; ++r) {
                    const double* grow = g + (p * height + r) * width;
                    double* drow = dx.data() + (p * h + r + top) * w + left;
                    for (std::size_t q = 0; q < width; ++q) drow[q] += grow[q];
                }
        });
    }
    return out;
}

// Concatenate along dimension 1 (features or channels); all other dims equal.
inline Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || a.rank() < 2)
        throw ShapeError("concat_channels: incompatible ranks " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    for (std::size_t i = 0; i < a.rank(); ++i)
        if (i != 1 && a.dim(i) != b.dim(i))
            throw ShapeError("concat_channels: non-channel dims differ " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    Shape out_shape = a.shape();
    out_shape[1] = a.dim(1) + b.dim(1);
    std::size_t inner = 1;
    for (std::size_t i = 2; i < a.rank(); ++i) inner *= a.dim(i);
    const std::size_t n = a.dim(0);
    const std::size_t ca = a.dim(1) * inner, cb = b.dim(1) * inner;
    Tensor out(std::move(out_shape));
    double* po = out.data();
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < ca; ++j) po[i * (ca + cb) + j] = pa[i * ca + j];
        for (std::size_t j = 0; j < cb; ++j) po[i * (ca + cb) + ca + j] = pb[i * cb + j];
    }
    if (detail::track(tape, a, b)) {
        out.set_requires_grad(true);
        tape.record([a, b, out, n, ca, cb]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_buffer().data();
            if (a.requires_grad()) {
                auto& da = a.grad_buffer();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < ca; ++j) da[i * ca + j] += g[i * (ca + cb) + j];
            }
            if (b.requires_grad()) {
                auto& db = b.grad_buffer();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < cb; ++j) db[i * cb + j] += g[i * (ca + cb) + ca + j];
            }
        });
    }
    return out;
}

// Expand a per-item scalar (N) or (N,1) into a constant (N,1,H,W) plane.
inline Tensor broadcast_plane(Tape& tape, const Tensor& values, std::size_t h, std::size_t w) {
    if (!(values.rank() == 1 || (values.rank() == 2 && values.dim(1) == 1)))
        throw ShapeError("broadcast_plane expects (N) or (N,1), got " + shape_str(values.shape()));
    const std::size_t n = values.dim(0);
    Tensor out(Shape{n, 1, h, w});
    double* po = out.data();
    const double* pv = values.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < h * w; ++j) po[i * h * w + j] = pv[i];
    if (detail::track(tape, values)) {
        out.set_requires_grad(true);
        tape.record([values, out, n, h, w]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_buffer().data();
            auto& dv = values.grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < h * w; ++j) acc += g[i * h * w + j];
                dv[i] += acc;
            }
        });
    }
    return out;
}

// --- activations ------------------------------------------------------------

inline Tensor leaky_relu(Tape& tape, const Tensor& x, double alpha) {
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw std::invalid_argument("leaky_relu: alpha must be in (0,1], got " + std::to_string(alpha));
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = px[i] > 0.0 ? px[i] : alpha * px[i];
    if (detail::track(tape, x)) {
        out.set_requires_grad(true);
        tape.record([x, out, alpha]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_buffer();
            auto& dx = x.grad_buffer();
            const double* px2 = x.data();
            for (std::size_t i = 0; i < g.size(); ++i)
                dx[i] += (px2[i] > 0.0 ? 1.0 : alpha) * g[i];
        });
    }
    return out;
}

inline Tensor relu(Tape& tape, const Tensor& x) {
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;
    if (detail::track(tape, x)) {
        out.set_requires_grad(true);
        tape.record([x, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_buffer();
            auto& dx = x.grad_buffer();
            const double* px2 = x.data();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (px2[i] > 0.0) dx[i] += g[i];
        });
    }
    return out;
}

inline Tensor tanh_act(Tape& tape, const Tensor& x) {
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = std::tanh(px[i]);
    if (detail::track(tape, x)) {
        out.set_requires_grad(true);
        tape.record([x, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_buffer();
            auto& dx = x.grad_buffer();
            const double* py = out.data();
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += (1.0 - py[i] * py[i]) * g[i];
        });
    }
    return out;
}

inline Tensor sigmoid_act(Tape& tape, const Tensor& x) {
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = px[i];
        po[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    if (detail::track(tape, x)) {
        out.set_requires_grad(true);
        tape.record([x, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_buffer();
            auto& dx = x.grad_buffer();
            const double* py = out.data();
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += py[i] * (1.0 - py[i]) * g[i];
        });
    }
    return out;
}

// Row softmax on (B,R,C): each row sums to 1. Max-shifted for stability.
inline Tensor softmax_rows(Tape& tape, const Tensor& x) {
    if (x.rank() != 3)
        throw ShapeError("softmax_rows expects rank-3 input, got " + shape_str(x.shape()));
    const std::size_t b = x.dim(0), r = x.dim(1), c = x.dim(2);
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t row = 0; row < b * r; ++row) {
        const double* xi = px + row * c;
        double* yi = po + row * c;
        double mx = xi[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            sum += yi[j];
        }
        for (std::size_t j = 0; j < c; ++j) yi[j] /= sum;
    }
    if (detail::track(tape, x)) {
        out.set_requires_grad(true);
        tape.record([x, out, b, r, c]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_buffer().data();
            const double* py = out.data();
            auto& dx = x.grad_buffer();
            for (std::size_t row = 0; row < b * r; ++row) {
                const double* yi = py + row * c;
                const double* gi = g + row * c;
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += gi[j] * yi[j];
                double* di = dx.data() + row * c;
                for (std::size_t j = 0; j < c; ++j) di[j] += yi[j] * (gi[j] - dot);
            }
        });
    }
    return out;
}

// --- reductions -------------------------------------------------------------

inline Tensor sum_all(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    const double* px = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) acc += px[i];
    Tensor out = Tensor::scalar(acc);
    if (detail::track(tape, x)) {
        out.set_requires_grad(true);
        tape.record([x, out]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad_buffer()[0];
            auto& dx = x.grad_buffer();
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
        });
    }
    return out;
}

inline Tensor mean_all(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    const double* px = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) acc += px[i];
    const double inv = 1.0 / static_cast<double>(x.size());
    Tensor out = Tensor::scalar(acc * inv);
    if (detail::track(tape, x)) {
        out.set_requires_grad(true);
        tape.record([x, out, inv]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad_buffer()[0] * inv;
            auto& dx = x.grad_buffer();
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
        });
    }
    return out;
}

// --- bias adds --------------------------------------------------------------

inline Tensor add_rowvec(Tape& tape, const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
        throw ShapeError("add_rowvec: incompatible shapes " + shape_str(x.shape()) +
                         " + " + shape_str(bias.shape()));
    const std::size_t n = x.dim(0), f = x.dim(1);
    Tensor out(x.shape());
    const double* px = x.data();
    const double* pb = bias.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j) po[i * f + j] = px[i * f + j] + pb[j];
    if (detail::track(tape, x, bias)) {
        out.set_requires_grad(true);
        tape.record([x, bias, out, n, f]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_buffer().data();
            if (x.requires_grad()) {
                auto& dx = x.grad_buffer();
                for (std::size_t i = 0; i < n * f; ++i) dx[i] += g[i];
            }
            if (bias.requires_grad()) {
                auto& db = bias.grad_buffer();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < f; ++j) db[j] += g[i * f + j];
            }
        });
    }
    return out;
}

inline Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
    if (x.rank() != 4 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
        throw ShapeError("add_channel_bias: incompatible shapes " + shape_str(x.shape()) +
                         " + " + shape_str(bias.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor out(x.shape());
    const double* px = x.data();
    const double* pb = bias.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double bv = pb[ch];
            const double* src = px + (i * c + ch) * plane;
            double* dst = po + (i * c + ch) * plane;
            for (std::size_t j = 0; j < plane; ++j) dst[j] = src[j] + bv;
        }
    if (detail::track(tape, x, bias)) {
        out.set_requires_grad(true);
        tape.record([x, bias, out, n, c, plane]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_buffer().data();
            if (x.requires_grad()) {
                auto& dx = x.grad_buffer();
                for (std::size_t i = 0; i < n * c * plane; ++i) dx[i] += g[i];
            }
            if (bias.requires_grad()) {
                auto& db = bias.grad_buffer();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const double* grow = g + (i * c + ch) * plane;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < plane; ++j) acc += grow[j];
                        db[ch] += acc;
                    }
            }
        });
    }
    return out;
}

// --- convolutions -----------------------------------------------------------

// Cross-correlation (no kernel flip), weight layout (out_ch, in_ch, kh, kw).
// Output H' = floor((H + 2p - k) / s) + 1, same for W.
inline Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w,
                     std::size_t stride, std::size_t pad) {
    if (x.rank() != 4 || w.rank() != 4)
        throw ShapeError("conv2d expects NCHW input and OIHW weight, got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
    if (x.dim(1) != w.dim(1))
        throw ShapeError("conv2d: channel mismatch, input " + shape_str(x.shape()) +
                         " vs weight " + shape_str(w.shape()));
    if (w.dim(2) != w.dim(3))
        throw ShapeError("conv2d: only square kernels supported, got " + shape_str(w.shape()));
    if (stride == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
    detail::ConvDims d;
    d.batch = x.dim(0);
    d.in_ch = x.dim(1);
    d.in_h = x.dim(2);
    d.in_w = x.dim(3);
    d.out_ch = w.dim(0);
    d.kernel = w.dim(2);
    d.stride = stride;
    d.pad = static_cast<long long>(pad);
    const long long oh = (static_cast<long long>(d.in_h) + 2 * d.pad - static_cast<long long>(d.kernel)) /
                             static_cast<long long>(stride) + 1;
    const long long ow = (static_cast<long long>(d.in_w) + 2 * d.pad - static_cast<long long>(d.kernel)) /
                             static_cast<long long>(stride) + 1;
    if (oh < 1 || ow < 1)
        throw ShapeError("conv2d: non-positive output dims for input " + shape_str(x.shape()) +
                         ", kernel " + std::to_string(d.kernel) + ", stride " + std::to_string(stride) +
                         ", pad " + std::to_string(pad));
    d.out_h = static_cast<std::size_t>(oh);
    d.out_w = static_cast<std::size_t>(ow);
    Tensor out(Shape{d.batch, d.out_ch, d.out_h, d.out_w});
    detail::conv2d_accum(x.data(), w.data(), out.data(), d);
    if (detail::track(tape, x, w)) {
        out.set_requires_grad(true);
        tape.record([x, w, out, d]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_buffer().data();
            if (x.requires_grad())
                detail::conv2d_grad_input(g, w.data(), x.grad_buffer().data(), d);
            if (w.requires_grad())
                detail::conv2d_grad_weight(x.data(), g, w.grad_buffer().data(), d);
        });
    }
    return out;
}

// Transposed convolution (adjoint of conv2d under identical k/s/p), weight
// layout (in_ch, out_ch, kh, kw). Output H' = (H-1)*s - 2p + k.
inline Tensor conv_transpose2d(Tape& tape, const Tensor& x, const Tensor& w,
                               std::size_t stride, std::size_t pad) {
    if (x.rank() != 4 || w.rank() != 4)
        throw ShapeError("conv_transpose2d expects NCHW input and IOHW weight, got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
    if (x.dim(1) != w.dim(0))
        throw ShapeError("conv_transpose2d: channel mismatch, input " + shape_str(x.shape()) +
                         " vs weight " + shape_str(w.shape()));
    if (w.dim(2) != w.dim(3))
        throw ShapeError("conv_transpose2d: only square kernels supported, got " + shape_str(w.shape()));
    if (stride == 0) throw std::invalid_argument("conv_transpose2d: stride must be >= 1");
    detail::ConvDims d;
    d.batch = x.dim(0);
    d.in_ch = x.dim(1);
    d.in_h = x.dim(2);
    d.in_w = x.dim(3);
    d.out_ch = w.dim(1);
    d.kernel = w.dim(2);
    d.stride = stride;
    d.pad = static_cast<long long>(pad);
    const long long oh = static_cast<long long>((d.in_h - 1) * stride) - 2 * d.pad +
                         static_cast<long long>(d.kernel);
    const long long ow = static_cast<long long>((d.in_w - 1) * stride) - 2 * d.pad +
                         static_cast<long long>(d.kernel);
    if (oh < 1 || ow < 1)
        throw ShapeError("conv_transpose2d: non-positive output dims for input " + shape_str(x.shape()) +
                         ", kernel " + std::to_string(d.kernel) + ", stride " + std::to_string(stride) +
                         ", pad " + std::to_string(pad));
    d.out_h = static_cast<std::size_t>(oh);
    d.out_w = static_cast<std::size_t>(ow);
    Tensor out(Shape{d.batch, d.out_ch, d.out_h, d.out_w});
    detail::conv_transpose2d_accum(x.data(), w.data(), out.data(), d);
    if (detail::track(tape, x, w)) {
        out.set_requires_grad(true);
        tape.record([x, w, out, d]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_buffer().data();
            if (x.requires_grad())
                detail::conv_transpose2d_grad_input(g, w.data(), x.grad_buffer().data(), d);
            if (w.requires_grad())
                detail::conv_transpose2d_grad_weight(x.data(), g, w.grad_buffer().data(), d);
        });
    }
    return out;
}

} // namespace msrg
