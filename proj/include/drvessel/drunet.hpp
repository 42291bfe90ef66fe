#pragma once

// Dimensionality-reduced U-Net.
//
//   encoder stage s (s = 1..depth, C_s = base * 2^(s-1)):
//       conv3x3 -> relu -> conv3x3 -> relu (skip_s) -> maxpool2x
//   bottleneck:  conv3x3 (C_depth -> base * 2^depth) -> relu
//   reduce:      conv1x1 (-> latent_dim) -> relu          <- latent space z
//   decoder stage s (s = depth..1):
//       upsample2x -> concat(skip_s) -> conv3x3 (-> C_s) -> relu
//   head:        conv1x1 (C_1 -> 1) -> sigmoid
//
// The latent vector of a patch is the global average of the reduce
// activation over its spatial extent.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "drvessel/error.hpp"
#include "drvessel/imgio.hpp"
#include "drvessel/patchwork.hpp"
#include "drvessel/rng.hpp"
#include "drvessel/tensor.hpp"

namespace drvessel {

struct NetworkSpec {
    int depth = 2;
    int base_channels = 16;
    int latent_dim = 64;
    int patch = 48;
    std::uint64_t seed = 0;

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

inline void validate(const NetworkSpec& s)
{
    if (s.depth < 1) throw ConfigError("network spec: depth must be at least 1");
    if (s.base_channels < 1) throw ConfigError("network spec: base_channels must be at least 1");
    if (s.latent_dim < 1) throw ConfigError("network spec: latent_dim must be at least 1");
    if (s.patch < 1 || s.patch % (1 << s.depth) != 0)
        throw ConfigError("network spec: patch " + std::to_string(s.patch) + " not divisible by 2^depth = " +
                          std::to_string(1 << s.depth));
}

struct LayerShape {
    std::string name;
    std::size_t cout = 0;
    std::size_t cin = 0;
    std::size_t k = 0;
};

/// Layers in canonical order; parameter 2l is layer l's weight, 2l+1 its bias.
inline std::vector<LayerShape> layer_plan(const NetworkSpec& s)
{
    validate(s);
    std::vector<LayerShape> plan;
    const auto ch = [&](int stage) { return static_cast<std::size_t>(s.base_channels) << (stage - 1); };
    std::size_t in = 1;
    for (int st = 1; st <= s.depth; ++st) {
        const auto pre = "enc" + std::to_string(st);
        plan.push_back({pre + ".conv1", ch(st), in, 3});
        plan.push_back({pre + ".conv2", ch(st), ch(st), 3});
        in = ch(st);
    }
    const auto bott = static_cast<std::size_t>(s.base_channels) << s.depth;
    plan.push_back({"bottleneck", bott, in, 3});
    plan.push_back({"reduce", static_cast<std::size_t>(s.latent_dim), bott, 1});
    std::size_t prev = static_cast<std::size_t>(s.latent_dim);
    for (int st = s.depth; st >= 1; --st) {
        plan.push_back({"dec" + std::to_string(st), ch(st), prev + ch(st), 3});
        prev = ch(st);
    }
    plan.push_back({"head", 1, prev, 1});
    return plan;
}

inline std::size_t parameter_count(const NetworkSpec& s)
{
    std::size_t n = 0;
    for (const auto& l : layer_plan(s)) n += l.cout * l.cin * l.k * l.k + l.cout;
    return n;
}

struct Model {
    NetworkSpec spec;
    std::vector<Parameter> params;

    const Parameter& param(const std::string& name) const
    {
        for (const auto& p : params)
            if (p.name == name) return p;
        throw ConfigError("model has no parameter '" + name + "'");
    }
    Parameter& param(const std::string& name)
    {
        return const_cast<Parameter&>(static_cast<const Model&>(*this).param(name));
    }

    void zero_grad()
    {
        for (auto& p : params) p.zero_grad();
    }
};

/// Parameter values and spec equality; optimizer state is not compared.
inline bool same_weights(const Model& a, const Model& b)
{
    if (!(a.spec == b.spec) || a.params.size() != b.params.size()) return false;
    for (std::size_t i = 0; i < a.params.size(); ++i)
        if (a.params[i].name != b.params[i].name || !(a.params[i].value == b.params[i].value)) return false;
    return true;
}

/// Glorot-uniform weights, zero biases, drawn in canonical order from spec.seed.
inline Model build(const NetworkSpec& spec)
{
    Model m{spec, {}};
    Rng rng(Rng::derive(spec.seed, 0x1417));
    for (const auto& l : layer_plan(spec)) {
        Tensor w({l.cout, l.cin, l.k, l.k});
        const double fan_in = static_cast<double>(l.cin * l.k * l.k);
        const double fan_out = static_cast<double>(l.cout * l.k * l.k);
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        for (double& v : w.data) v = rng.uniform(-limit, limit);
        m.params.emplace_back(l.name + ".w", std::move(w));
        m.params.emplace_back(l.name + ".b", Tensor({l.cout}));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

struct ConvCache {
    Tensor input;
    Tensor pre;
};

struct EncoderCache {
    ConvCache c1, c2;
    Tensor act2; // skip
    PoolResult pool;
};

struct DecoderCache {
    std::size_t up_channels = 0;
    ConvCache conv;
};

} // namespace detail

/// Activations of one forward pass, retained for backward.
struct Trace {
    std::vector<detail::EncoderCache> enc;
    detail::ConvCache bottleneck, reduce;
    Tensor latent_map; // relu(reduce)
    std::vector<detail::DecoderCache> dec; // order depth..1
    detail::ConvCache head;
    Tensor prob;
};

namespace detail {

inline std::size_t layer_index_enc(int stage, int conv) { return 2 * static_cast<std::size_t>(stage - 1) + conv; }

inline Tensor apply_conv(const Model& m, std::size_t layer, ConvCache& cache, Tensor input)
{
    const auto& w = m.params[2 * layer].value;
    const auto& b = m.params[2 * layer + 1].value;
    const int pad = static_cast<int>(w.dim(2) / 2);
    cache.pre = conv2d(input, w, b, pad);
    cache.input = std::move(input);
    return cache.pre;
}

// Runs through the reduce layer; returns the latent map.
inline const Tensor& forward_encoder(const Model& m, const Tensor& x, Trace& t)
{
    const int depth = m.spec.depth;
    t.enc.assign(depth, {});
    Tensor cur = x;
    for (int s = 1; s <= depth; ++s) {
        auto& e = t.enc[s - 1];
        cur = relu(apply_conv(m, layer_index_enc(s, 0), e.c1, std::move(cur)));
        e.act2 = relu(apply_conv(m, layer_index_enc(s, 1), e.c2, std::move(cur)));
        e.pool = maxpool2x(e.act2);
        cur = e.pool.output;
    }
    const std::size_t bl = 2 * static_cast<std::size_t>(depth);
    cur = relu(apply_conv(m, bl, t.bottleneck, std::move(cur)));
    t.latent_map = relu(apply_conv(m, bl + 1, t.reduce, std::move(cur)));
    return t.latent_map;
}

inline void check_patch(const Model& m, const Tensor& x)
{
    const auto p = static_cast<std::size_t>(m.spec.patch);
    if (x.rank() != 3 || x.dim(0) != 1 || x.dim(1) != p || x.dim(2) != p)
        throw ShapeError("network expects a [1," + std::to_string(p) + "," + std::to_string(p) + "] patch, got " +
                         shape_str(x.shape));
}

inline void accumulate_conv(std::vector<Tensor>& grads, std::size_t layer, const ConvGrads& g)
{
    add_inplace(grads[2 * layer], g.weights);
    add_inplace(grads[2 * layer + 1], g.bias);
}

} // namespace detail

/// Full forward pass on a [1,patch,patch] tensor; returns logits and fills the trace.
inline Tensor forward_trace(const Model& m, const Tensor& x, Trace& t)
{
    detail::check_patch(m, x);
    const int depth = m.spec.depth;
    Tensor cur = detail::forward_encoder(m, x, t);
    t.dec.assign(depth, {});
    std::size_t layer = 2 * static_cast<std::size_t>(depth) + 2;
    for (int s = depth; s >= 1; --s, ++layer) {
        auto& d = t.dec[depth - s];
        Tensor up = upsample2x(cur);
        d.up_channels = up.dim(0);
        cur = relu(detail::apply_conv(m, layer, d.conv, concat_channels(up, t.enc[s - 1].act2)));
    }
    Tensor logits = detail::apply_conv(m, layer, t.head, std::move(cur));
    t.prob = sigmoid(logits);
    return logits;
}

/// Gradients of a loss with respect to every parameter, given the gradient
/// with respect to the logits. One tensor per parameter, canonical order.
inline std::vector<Tensor> backward(const Model& m, const Trace& t, const Tensor& grad_logits)
{
    std::vector<Tensor> grads;
    grads.reserve(m.params.size());
    for (const auto& p : m.params) grads.emplace_back(p.value.shape);

    const int depth = m.spec.depth;
    const std::size_t head_layer = 3 * static_cast<std::size_t>(depth) + 2;
    auto conv_back = [&](std::size_t layer, const detail::ConvCache& c, const Tensor& g_pre) {
        const auto& w = m.params[2 * layer].value;
        auto cg = conv2d_backward(g_pre, c.input, w, static_cast<int>(w.dim(2) / 2));
        detail::accumulate_conv(grads, layer, cg);
        return std::move(cg.input);
    };

    Tensor g = conv_back(head_layer, t.head, grad_logits);
    std::vector<Tensor> skip_grads(depth);
    std::size_t layer = head_layer - 1;
    for (int s = 1; s <= depth; ++s, --layer) {
        const auto& d = t.dec[depth - s];
        Tensor g_cat = conv_back(layer, d.conv, relu_backward(g, d.conv.pre));
        auto [g_up, g_skip] = split_channels(g_cat, d.up_channels);
        skip_grads[s - 1] = std::move(g_skip);
        g = upsample2x_backward(g_up);
    }
    const std::size_t bl = 2 * static_cast<std::size_t>(depth);
    g = conv_back(bl + 1, t.reduce, relu_backward(g, t.reduce.pre));
    g = conv_back(bl, t.bottleneck, relu_backward(g, t.bottleneck.pre));
    for (int s = depth; s >= 1; --s) {
        const auto& e = t.enc[s - 1];
        Tensor g_act2 = maxpool2x_backward(g, e.pool.argmax, e.act2.shape);
        add_inplace(g_act2, skip_grads[s - 1]);
        g = conv_back(detail::layer_index_enc(s, 1), e.c2, relu_backward(g_act2, e.c2.pre));
        g = conv_back(detail::layer_index_enc(s, 0), e.c1, relu_backward(g, e.c1.pre));
    }
    return grads;
}

/// Per-pixel vessel probabilities, strictly inside (0,1) for finite weights.
inline GrayImage forward(const Model& m, const GrayImage& patch)
{
    Trace t;
    forward_trace(m, from_image(patch), t);
    GrayImage out = to_image(t.prob);
    out.range = Range::unit;
    return out;
}

struct LatentVector {
    std::vector<double> values;
    friend bool operator==(const LatentVector&, const LatentVector&) = default;
};

inline LatentVector extract_latent(const Model& m, const GrayImage& patch)
{
    const Tensor x = from_image(patch);
    detail::check_patch(m, x);
    Trace t;
    const Tensor& z = detail::forward_encoder(m, x, t);
    const std::size_t plane = z.dim(1) * z.dim(2);
    LatentVector out{std::vector<double>(z.dim(0), 0.0)};
    for (std::size_t c = 0; c < z.dim(0); ++c) {
        double s = 0.0;
        const double* p = z.plane(c);
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
        out.values[c] = s / static_cast<double>(plane);
    }
    return out;
}

/// Cross-entropy loss of one patch; writes gradients into params[*].grad.
inline double loss_and_grad(Model& m, const GrayImage& patch, const MaskImage& mask)
{
    Trace t;
    forward_trace(m, from_image(patch), t);
    auto loss = pixel_cross_entropy(t.prob, mask);
    auto grads = backward(m, t, loss.grad_logits);
    for (std::size_t i = 0; i < m.params.size(); ++i) m.params[i].grad = std::move(grads[i]);
    return loss.loss;
}

inline double patch_loss(const Model& m, const GrayImage& patch, const MaskImage& mask)
{
    Trace t;
    forward_trace(m, from_image(patch), t);
    return pixel_cross_entropy(t.prob, mask).loss;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    int epochs = 20;
    int batch = 8;
    int patches_per_image = 16;
    AdamConfig adam;
    std::uint64_t seed = 0;
    int threads = 1; ///< results do not depend on this
};

struct TrainOutcome {
    Model model;
    std::vector<double> loss_history; ///< mean patch loss per epoch
    AdamConfig adam;                  ///< optimizer state after the last step
};

namespace detail {

struct SampleGrad {
    double loss = 0.0;
    std::vector<Tensor> grads;
};

inline SampleGrad sample_grad(const Model& m, const TrainingPatch& p)
{
    Trace t;
    forward_trace(m, from_image(p.image), t);
    auto l = pixel_cross_entropy(t.prob, p.mask);
    return {l.loss, backward(m, t, l.grad_logits)};
}

} // namespace detail

/// Minibatch Adam on mean per-pixel cross-entropy. Batch gradients are the
/// mean of per-sample gradients reduced in sample order; results do not
/// depend on the thread count.
inline TrainOutcome train(Model model, const std::vector<TrainingPatch>& data, const TrainConfig& cfg)
{
    if (cfg.epochs < 1 || cfg.batch < 1 || cfg.patches_per_image < 1)
        throw ConfigError("train: epochs, batch and patches_per_image must be at least 1");
    const auto p = static_cast<int>(model.spec.patch);
    for (const auto& d : data) {
        if (d.image.width != p || d.image.height != p || d.mask.width != p || d.mask.height != p)
            throw ShapeError("train: every patch must be " + std::to_string(p) + "x" + std::to_string(p));
        for (auto v : d.mask.pixels)
            if (v > 1) throw ConfigError("train: masks must be binary");
    }

    TrainOutcome out{std::move(model), {}, cfg.adam};
    if (data.empty()) return out;
    auto& m = out.model;
    const int threads = std::max(1, cfg.threads);
    std::vector<std::size_t> order(data.size());
    std::size_t batch_index = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng(Rng::derive(cfg.seed, static_cast<std::uint64_t>(epoch))).shuffle(order.begin(), order.end());
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch, ++batch_index) {
            const std::size_t n = std::min<std::size_t>(cfg.batch, order.size() - start);
            std::vector<detail::SampleGrad> results(n);
            if (threads == 1 || n == 1) {
                for (std::size_t i = 0; i < n; ++i) results[i] = detail::sample_grad(m, data[order[start + i]]);
            } else {
                std::vector<std::thread> pool;
                for (int w = 0; w < threads; ++w)
                    pool.emplace_back([&, w] {
                        for (std::size_t i = w; i < n; i += threads) results[i] = detail::sample_grad(m, data[order[start + i]]);
                    });
                for (auto& th : pool) th.join();
            }
            m.zero_grad();
            double batch_loss = 0.0;
            for (const auto& r : results) {
                batch_loss += r.loss;
                for (std::size_t k = 0; k < m.params.size(); ++k) add_inplace(m.params[k].grad, r.grads[k]);
            }
            if (!std::isfinite(batch_loss))
                throw NumericError("train: non-finite loss at batch " + std::to_string(batch_index));
            for (auto& prm : m.params)
                for (double& g : prm.grad.data) g /= static_cast<double>(n);
            adam_step(m.params, out.adam);
            epoch_loss += batch_loss;
        }
        out.loss_history.push_back(epoch_loss / static_cast<double>(data.size()));
    }
    return out;
}

/// Random training patches from masked records, patches_per_image per image,
/// drawn from a stream derived from `seed`.
inline std::vector<TrainingPatch> training_patches(const std::vector<SampleRecord>& records, int patch,
                                                   int patches_per_image, std::uint64_t seed)
{
    Rng rng(Rng::derive(seed, 0x5a4d));
    std::vector<TrainingPatch> out;
    for (const auto& r : records) {
        if (!r.mask) continue;
        auto ps = sample_patches(r.image, *r.mask, patch, patches_per_image, rng);
        for (auto& p : ps) out.push_back(std::move(p));
    }
    return out;
}

/// Probability map of a full image: per-patch predictions over the grid,
/// stitched by averaging.
inline GrayImage predict_image(const Model& m, const GrayImage& img, int stride)
{
    const auto grid = plan_grid(img.width, img.height, m.spec.patch, stride);
    auto set = extract(img, grid);
    for (auto& p : set.patches) p = forward(m, p);
    auto out = stitch(set);
    out.range = Range::unit;
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "DRU1" | u64 len | spec block (key=value lines) |
// per parameter: u64 len | name | u64 rank | u64 extents... | f64 values...
// All integers and floats little-endian.

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v)
{
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    ByteReader(const std::string& bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

    std::uint64_t u64()
    {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::uint64_t n)
    {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }
    [[noreturn]] void fail(const std::string& what) const { throw CorruptionError(origin_ + ": " + what); }

private:
    void need(std::uint64_t n) const
    {
        if (n > bytes_.size() - pos_) fail("truncated checkpoint");
    }
    const std::string& bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

inline std::string spec_block(const NetworkSpec& s)
{
    std::ostringstream os;
    os << "depth=" << s.depth << "\nbase_channels=" << s.base_channels << "\nlatent_dim=" << s.latent_dim
       << "\npatch=" << s.patch << "\nseed=" << s.seed << "\n";
    return os.str();
}

inline NetworkSpec parse_spec_block(const std::string& block, const ByteReader& r)
{
    std::map<std::string, std::string> kv;
    std::istringstream in(block);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) r.fail("spec line without '=': " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    const auto get = [&](const char* key) -> long long {
        const auto it = kv.find(key);
        if (it == kv.end()) r.fail(std::string("spec block missing '") + key + "'");
        try {
            std::size_t used = 0;
            const long long v = std::stoll(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            r.fail(std::string("spec field '") + key + "' is not an integer");
        }
    };
    NetworkSpec s;
    s.depth = static_cast<int>(get("depth"));
    s.base_channels = static_cast<int>(get("base_channels"));
    s.latent_dim = static_cast<int>(get("latent_dim"));
    s.patch = static_cast<int>(get("patch"));
    const auto seed_it = kv.find("seed");
    if (seed_it == kv.end()) r.fail("spec block missing 'seed'");
    try {
        s.seed = std::stoull(seed_it->second);
    } catch (const std::exception&) {
        r.fail("spec field 'seed' is not an integer");
    }
    try {
        validate(s);
    } catch (const ConfigError& e) {
        r.fail(std::string("invalid spec: ") + e.what());
    }
    return s;
}

} // namespace detail

inline std::string serialize(const Model& m)
{
    std::string out = "DRU1";
    const auto block = detail::spec_block(m.spec);
    detail::put_u64(out, block.size());
    out += block;
    for (const auto& p : m.params) {
        detail::put_u64(out, p.name.size());
        out += p.name;
        detail::put_u64(out, p.value.rank());
        for (auto e : p.value.shape) detail::put_u64(out, e);
        for (double v : p.value.data) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

inline Model deserialize(const std::string& bytes, const std::string& origin = "checkpoint")
{
    detail::ByteReader r(bytes, origin);
    if (bytes.size() < 4 || bytes.compare(0, 4, "DRU1") != 0) {
        if (bytes.size() >= 3 && bytes.compare(0, 3, "DRU") == 0) r.fail("unsupported checkpoint version");
        r.fail("bad magic, not a checkpoint");
    }
    r.str(4);
    const auto spec = detail::parse_spec_block(r.str(r.u64()), r);
    Model m = build(spec);
    for (auto& p : m.params) {
        const auto name = r.str(r.u64());
        if (name != p.name) r.fail("expected parameter '" + p.name + "', found '" + name + "'");
        const auto rank = r.u64();
        if (rank != p.value.rank()) r.fail("parameter '" + name + "' has rank " + std::to_string(rank));
        for (std::size_t i = 0; i < rank; ++i)
            if (r.u64() != p.value.shape[i]) r.fail("parameter '" + name + "' shape inconsistent with spec");
        for (double& v : p.value.data) v = r.f64();
        if (!all_finite(p.value)) r.fail("parameter '" + name + "' holds non-finite values");
    }
    if (!r.done()) r.fail("trailing bytes after last parameter");
    return m;
}

inline void save_checkpoint(const Model& m, const std::filesystem::path& path)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(path.string() + ": cannot open for writing");
    const auto bytes = serialize(m);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(path.string() + ": write failed");
}

/// Architecture fields a caller may require of a loaded checkpoint.
struct SpecRequirement {
    std::optional<int> depth, base_channels, latent_dim, patch;
};

inline void require_compatible(const NetworkSpec& s, const SpecRequirement& req, const std::string& origin)
{
    const auto check = [&](const std::optional<int>& want, int have, const char* field) {
        if (want && *want != have)
            throw ConfigError(origin + ": checkpoint " + field + "=" + std::to_string(have) + " but " +
                              std::to_string(*want) + " was requested");
    };
    check(req.depth, s.depth, "depth");
    check(req.base_channels, s.base_channels, "base_channels");
    check(req.latent_dim, s.latent_dim, "latent_dim");
    check(req.patch, s.patch, "patch");
}

inline Model load_checkpoint(const std::filesystem::path& path, const SpecRequirement& req = {})
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(path.string() + ": cannot open checkpoint");
    std::ostringstream ss;
    ss << in.rdbuf();
    Model m = deserialize(ss.str(), path.string());
    require_compatible(m.spec, req, path.string());
    return m;
}

} // namespace drvessel
