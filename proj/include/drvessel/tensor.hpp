#pragma once

// Dense double-precision tensors and the layer primitives of the segmentation
// network, each with an explicit backward pass, plus Adam and a
// finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "drvessel/error.hpp"
#include "drvessel/imgio.hpp"
#include "drvessel/rng.hpp"

namespace drvessel {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_size(const Shape& s)
{
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {}
    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values))
    {
        if (data.size() != shape_size(shape)) throw ShapeError("Tensor: value count does not match " + shape_str(shape));
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape[i]; }

    // [C,H,W] access
    double& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * shape[1] + y) * shape[2] + x]; }
    double at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * shape[1] + y) * shape[2] + x]; }

    double* plane(std::size_t c) { return data.data() + c * shape[1] * shape[2]; }
    const double* plane(std::size_t c) const { return data.data() + c * shape[1] * shape[2]; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline bool all_finite(const Tensor& t)
{
    return std::all_of(t.data.begin(), t.data.end(), [](double v) { return std::isfinite(v); });
}

inline Tensor from_image(const GrayImage& img)
{
    Tensor t({1, static_cast<std::size_t>(img.height), static_cast<std::size_t>(img.width)});
    std::copy(img.pixels.begin(), img.pixels.end(), t.data.begin());
    return t;
}

inline GrayImage to_image(const Tensor& t)
{
    if (t.rank() != 3 || t.dim(0) != 1) throw ShapeError("to_image: expected [1,H,W], got " + shape_str(t.shape));
    GrayImage img(static_cast<int>(t.dim(2)), static_cast<int>(t.dim(1)));
    std::copy(t.data.begin(), t.data.end(), img.pixels.begin());
    return img;
}

namespace detail {

inline void require_chw(const Tensor& t, const char* what)
{
    if (t.rank() != 3) throw ShapeError(std::string(what) + ": expected [C,H,W], got " + shape_str(t.shape));
}

// Output columns x for which x + kx - pad lies inside [0, W).
inline std::pair<long, long> valid_span(long out_extent, long in_extent, long k_off, long pad)
{
    const long lo = std::max(0L, pad - k_off);
    const long hi = std::min(out_extent, in_extent + pad - k_off);
    return {lo, std::max(lo, hi)};
}

} // namespace detail

// ---------------------------------------------------------------------------
// Convolution

inline Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, int pad)
{
    detail::require_chw(input, "conv2d");
    if (weights.rank() != 4) throw ShapeError("conv2d: weights must be [C_out,C_in,k,k]");
    const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t cout = weights.dim(0), k = weights.dim(2);
    if (weights.dim(1) != cin)
        throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, weights expect " +
                         std::to_string(weights.dim(1)));
    if (weights.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square with odd side");
    if (bias.size() != cout) throw ShapeError("conv2d: bias length must equal C_out");
    const long H = static_cast<long>(h), W = static_cast<long>(w), K = static_cast<long>(k), P = pad;
    const long ho = H + 2 * P - K + 1, wo = W + 2 * P - K + 1;
    if (ho < 1 || wo < 1) throw ShapeError("conv2d: padding too small for kernel");

    Tensor out({cout, static_cast<std::size_t>(ho), static_cast<std::size_t>(wo)});
    for (std::size_t o = 0; o < cout; ++o) {
        double* op = out.plane(o);
        std::fill(op, op + ho * wo, bias.data[o]);
        for (std::size_t c = 0; c < cin; ++c) {
            const double* ip = input.plane(c);
            const double* wp = &weights.data[(o * cin + c) * k * k];
            for (long ky = 0; ky < K; ++ky) {
                const auto [y0, y1] = detail::valid_span(ho, H, ky, P);
                for (long kx = 0; kx < K; ++kx) {
                    const double wv = wp[ky * K + kx];
                    const auto [x0, x1] = detail::valid_span(wo, W, kx, P);
                    for (long y = y0; y < y1; ++y) {
                        double* orow = op + y * wo;
                        const double* irow = ip + (y + ky - P) * W + (kx - P);
                        for (long x = x0; x < x1; ++x) orow[x] += wv * irow[x];
                    }
                }
            }
        }
    }
    return out;
}

struct ConvGrads {
    Tensor input;
    Tensor weights;
    Tensor bias;
};

inline ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& input, const Tensor& weights, int pad)
{
    detail::require_chw(input, "conv2d_backward");
    detail::require_chw(grad_out, "conv2d_backward");
    const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t cout = weights.dim(0), k = weights.dim(2);
    if (weights.rank() != 4 || weights.dim(1) != cin || grad_out.dim(0) != cout)
        throw ShapeError("conv2d_backward: shapes inconsistent with forward call");
    const long H = static_cast<long>(h), W = static_cast<long>(w), K = static_cast<long>(k), P = pad;
    const long ho = static_cast<long>(grad_out.dim(1)), wo = static_cast<long>(grad_out.dim(2));
    if (ho != H + 2 * P - K + 1 || wo != W + 2 * P - K + 1)
        throw ShapeError("conv2d_backward: grad_out spatial shape inconsistent with forward call");

    ConvGrads g{Tensor(input.shape), Tensor(weights.shape), Tensor({cout})};
    for (std::size_t o = 0; o < cout; ++o) {
        const double* gp = grad_out.plane(o);
        double s = 0.0;
        for (long i = 0; i < ho * wo; ++i) s += gp[i];
        g.bias.data[o] = s;
        for (std::size_t c = 0; c < cin; ++c) {
            const double* ip = input.plane(c);
            double* gip = g.input.plane(c);
            const double* wp = &weights.data[(o * cin + c) * k * k];
            double* gwp = &g.weights.data[(o * cin + c) * k * k];
            for (long ky = 0; ky < K; ++ky) {
                const auto [y0, y1] = detail::valid_span(ho, H, ky, P);
                for (long kx = 0; kx < K; ++kx) {
                    const double wv = wp[ky * K + kx];
                    const auto [x0, x1] = detail::valid_span(wo, W, kx, P);
                    double acc = 0.0;
                    for (long y = y0; y < y1; ++y) {
                        const double* grow = gp + y * wo;
                        const long off = (y + ky - P) * W + (kx - P);
                        const double* irow = ip + off;
                        double* girow = gip + off;
                        for (long x = x0; x < x1; ++x) {
                            acc += grow[x] * irow[x];
                            girow[x] += wv * grow[x];
                        }
                    }
                    gwp[ky * K + kx] = acc;
                }
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Pooling and upsampling

struct PoolResult {
    Tensor output;
    std::vector<std::uint8_t> argmax; ///< window-local index 0..3, row-major
};

inline PoolResult maxpool2x(const Tensor& input)
{
    detail::require_chw(input, "maxpool2x");
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (h % 2 || w % 2) throw ShapeError("maxpool2x: odd spatial extent " + shape_str(input.shape));
    PoolResult r{Tensor({c, h / 2, w / 2}), std::vector<std::uint8_t>(c * (h / 2) * (w / 2))};
    std::size_t i = 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < h / 2; ++y) {
            for (std::size_t x = 0; x < w / 2; ++x, ++i) {
                std::uint8_t best = 0;
                double v = input.at(ch, 2 * y, 2 * x);
                for (std::uint8_t j = 1; j < 4; ++j) {
                    const double u = input.at(ch, 2 * y + j / 2, 2 * x + j % 2);
                    if (u > v) {
                        v = u;
                        best = j;
                    }
                }
                r.output.data[i] = v;
                r.argmax[i] = best;
            }
        }
    }
    return r;
}

inline Tensor maxpool2x_backward(const Tensor& grad_out, const std::vector<std::uint8_t>& argmax, const Shape& input_shape)
{
    Tensor g(input_shape);
    const std::size_t c = input_shape[0], h2 = input_shape[1] / 2, w2 = input_shape[2] / 2;
    if (grad_out.size() != c * h2 * w2 || argmax.size() != grad_out.size())
        throw ShapeError("maxpool2x_backward: shapes inconsistent with forward call");
    std::size_t i = 0;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h2; ++y)
            for (std::size_t x = 0; x < w2; ++x, ++i)
                g.at(ch, 2 * y + argmax[i] / 2, 2 * x + argmax[i] % 2) += grad_out.data[i];
    return g;
}

/// Nearest-neighbor 2x.
inline Tensor upsample2x(const Tensor& input)
{
    detail::require_chw(input, "upsample2x");
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t x = 0; x < 2 * w; ++x) out.at(ch, y, x) = input.at(ch, y / 2, x / 2);
    return out;
}

inline Tensor upsample2x_backward(const Tensor& grad_out)
{
    detail::require_chw(grad_out, "upsample2x_backward");
    const std::size_t c = grad_out.dim(0), h = grad_out.dim(1) / 2, w = grad_out.dim(2) / 2;
    Tensor g({c, h, w});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t x = 0; x < 2 * w; ++x) g.at(ch, y / 2, x / 2) += grad_out.at(ch, y, x);
    return g;
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor relu(const Tensor& input)
{
    Tensor out(input.shape);
    for (std::size_t i = 0; i < input.size(); ++i) out.data[i] = input.data[i] > 0.0 ? input.data[i] : 0.0;
    return out;
}

/// Derivative at 0 is taken as 0.
inline Tensor relu_backward(const Tensor& grad_out, const Tensor& input)
{
    Tensor g(input.shape);
    for (std::size_t i = 0; i < input.size(); ++i) g.data[i] = input.data[i] > 0.0 ? grad_out.data[i] : 0.0;
    return g;
}

inline double sigmoid(double v)
{
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& input)
{
    Tensor out(input.shape);
    for (std::size_t i = 0; i < input.size(); ++i) out.data[i] = sigmoid(input.data[i]);
    return out;
}

inline Tensor sigmoid_backward(const Tensor& grad_out, const Tensor& output)
{
    Tensor g(output.shape);
    for (std::size_t i = 0; i < output.size(); ++i)
        g.data[i] = grad_out.data[i] * output.data[i] * (1.0 - output.data[i]);
    return g;
}

/// Channel concatenation of [Ca,H,W] and [Cb,H,W].
inline Tensor concat_channels(const Tensor& a, const Tensor& b)
{
    detail::require_chw(a, "concat_channels");
    detail::require_chw(b, "concat_channels");
    if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) throw ShapeError("concat_channels: spatial shapes differ");
    Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<long>(a.size()));
    return out;
}

inline std::pair<Tensor, Tensor> split_channels(const Tensor& t, std::size_t first)
{
    Tensor a({first, t.dim(1), t.dim(2)});
    Tensor b({t.dim(0) - first, t.dim(1), t.dim(2)});
    std::copy(t.data.begin(), t.data.begin() + static_cast<long>(a.size()), a.data.begin());
    std::copy(t.data.begin() + static_cast<long>(a.size()), t.data.end(), b.data.begin());
    return {std::move(a), std::move(b)};
}

inline void add_inplace(Tensor& dst, const Tensor& src)
{
    if (dst.size() != src.size()) throw ShapeError("add_inplace: size mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

// ---------------------------------------------------------------------------
// Loss

struct LossResult {
    double loss = 0.0;
    Tensor grad_logits;
};

inline constexpr double kProbEps = 1e-7;

/// Mean binary cross-entropy of a sigmoid probability map against a mask.
/// The gradient is taken with respect to the pre-sigmoid logits.
inline LossResult pixel_cross_entropy(const Tensor& prob, const MaskImage& target)
{
    if (prob.rank() != 3 || prob.dim(0) != 1 || prob.dim(1) != static_cast<std::size_t>(target.height) ||
        prob.dim(2) != static_cast<std::size_t>(target.width))
        throw ShapeError("pixel_cross_entropy: probability map " + shape_str(prob.shape) + " vs mask " +
                         std::to_string(target.width) + "x" + std::to_string(target.height));
    const double n = static_cast<double>(prob.size());
    LossResult r{0.0, Tensor(prob.shape)};
    double sum = 0.0;
    for (std::size_t i = 0; i < prob.size(); ++i) {
        const double p = std::clamp(prob.data[i], kProbEps, 1.0 - kProbEps);
        const double y = target.pixels[i];
        sum += y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
        r.grad_logits.data[i] = (prob.data[i] - y) / n;
    }
    r.loss = -sum / n;
    return r;
}

// ---------------------------------------------------------------------------
// Parameters and Adam

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m;
    Tensor adam_v;

    Parameter() = default;
    Parameter(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape), adam_m(value.shape), adam_v(value.shape)
    {
    }

    void zero_grad() { grad.fill(0.0); }
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t t = 0;
};

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before any parameter is touched.
inline void adam_step(std::span<Parameter> params, AdamConfig& cfg)
{
    for (const auto& p : params)
        if (!all_finite(p.grad)) throw NumericError("adam_step: non-finite gradient in parameter '" + p.name + "'");
    cfg.t += 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(cfg.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(cfg.t));
    for (auto& p : params) {
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad.data[i];
            double& m = p.adam_m.data[i];
            double& v = p.adam_v.data[i];
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            p.value.data[i] -= cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckOptions {
    int samples = 200;
    double h = 1e-5;
    std::uint64_t seed = 0;
    /// Floor on the relative-error denominator.
    double floor = 1e-6;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    int checked = 0;
};

/// Compares the analytic gradients already stored in `params[*].grad`
/// against central differences of `loss` at randomly sampled coordinates.
inline GradCheckReport grad_check(const std::function<double()>& loss, std::span<Parameter> params,
                                  const GradCheckOptions& opts = {})
{
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t i = 0; i < params[p].value.size(); ++i) coords.emplace_back(p, i);
    Rng rng(opts.seed);
    rng.shuffle(coords.begin(), coords.end());
    if (coords.size() > static_cast<std::size_t>(opts.samples)) coords.resize(opts.samples);

    GradCheckReport rep;
    for (const auto& [p, i] : coords) {
        double& v = params[p].value.data[i];
        const double saved = v;
        v = saved + opts.h;
        const double up = loss();
        v = saved - opts.h;
        const double down = loss();
        v = saved;
        const double numeric = (up - down) / (2.0 * opts.h);
        const double analytic = params[p].grad.data[i];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), opts.floor});
        const double err = std::abs(numeric - analytic) / denom;
        if (err > rep.max_rel_error) {
            rep.max_rel_error = err;
            rep.worst_param = params[p].name;
            rep.worst_index = i;
        }
        ++rep.checked;
    }
    return rep;
}

} // namespace drvessel
