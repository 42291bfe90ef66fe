#pragma once

// Image containers, binary PGM/PPM I/O, the on-disk dataset registry and the
// synthetic vessel generator used for desk-scale experiments.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "drvessel/error.hpp"
#include "drvessel/rng.hpp"

namespace drvessel {

enum class Range { unit, zscore };

struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<double> pixels;
    Range range = Range::unit;

    GrayImage() = default;
    GrayImage(int w, int h, double fill = 0.0, Range r = Range::unit)
        : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill), range(r)
    {
    }

    double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
    std::size_t size() const { return pixels.size(); }
    bool empty() const { return pixels.empty(); }

    friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

struct MaskImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    MaskImage() = default;
    MaskImage(int w, int h, std::uint8_t fill = 0)
        : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill)
    {
    }

    std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
    std::size_t size() const { return pixels.size(); }

    double foreground_fraction() const
    {
        if (pixels.empty()) return 0.0;
        const auto n = std::count(pixels.begin(), pixels.end(), std::uint8_t{1});
        return static_cast<double>(n) / static_cast<double>(pixels.size());
    }

    friend bool operator==(const MaskImage&, const MaskImage&) = default;
};

/// Interleaved RGB, values in [0,1].
struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<double> values;

    RgbImage() = default;
    RgbImage(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h * 3, 0.0) {}

    double& at(int x, int y, int c) { return values[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int x, int y, int c) const { return values[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

    friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

enum class Domain { target, source };
enum class PictureLabel { similar, dissimilar };

inline std::string to_string(Domain d) { return d == Domain::target ? "target" : "source"; }
inline std::string to_string(PictureLabel l) { return l == PictureLabel::similar ? "similar" : "dissimilar"; }

struct SampleRecord {
    std::string id;
    Domain domain = Domain::target;
    std::string dataset_name;
    GrayImage image;
    std::optional<MaskImage> mask;
    std::optional<PictureLabel> picture_label;
};

inline MaskImage to_mask(const GrayImage& img)
{
    MaskImage m(img.width, img.height);
    for (std::size_t i = 0; i < img.size(); ++i) m.pixels[i] = img.pixels[i] >= 0.5 ? 1 : 0;
    return m;
}

inline GrayImage to_gray(const MaskImage& mask)
{
    GrayImage g(mask.width, mask.height);
    for (std::size_t i = 0; i < mask.size(); ++i) g.pixels[i] = mask.pixels[i];
    return g;
}

// ---------------------------------------------------------------------------
// PGM / PPM

enum class PnmFormat { pgm, ppm };

namespace detail {

inline void skip_single_whitespace(std::istream& in, const std::string& path, const char* after)
{
    const int c = in.get();
    if (c != ' ' && c != '\n' && c != '\t' && c != '\r')
        throw FormatError(path + ": expected whitespace after " + after);
}

inline int read_header_int(std::istream& in, const std::string& path, const char* field)
{
    // Whitespace and '#' comments may precede a header field.
    for (;;) {
        const int c = in.peek();
        if (c == '#') {
            std::string ignored;
            std::getline(in, ignored);
        } else if (c == ' ' || c == '\n' || c == '\t' || c == '\r') {
            in.get();
        } else {
            break;
        }
    }
    long long v = 0;
    int digits = 0;
    while (std::isdigit(in.peek())) {
        v = v * 10 + (in.get() - '0');
        if (v > (1LL << 30)) throw FormatError(path + ": header field '" + field + "' out of range");
        ++digits;
    }
    if (digits == 0) throw FormatError(path + ": malformed header field '" + field + "'");
    return static_cast<int>(v);
}

inline std::uint8_t quantize(double v)
{
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

} // namespace detail

inline std::variant<RgbImage, GrayImage> load_image(const std::filesystem::path& path, PnmFormat format)
{
    const std::string name = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(name + ": cannot open file");

    char magic[2] = {0, 0};
    in.read(magic, 2);
    const char expected = format == PnmFormat::pgm ? '5' : '6';
    if (!in || magic[0] != 'P' || magic[1] != expected)
        throw FormatError(name + std::string(": bad magic, expected P") + expected);

    const int width = detail::read_header_int(in, name, "width");
    const int height = detail::read_header_int(in, name, "height");
    const int maxval = detail::read_header_int(in, name, "maxval");
    if (width <= 0) throw FormatError(name + ": header field 'width' must be positive");
    if (height <= 0) throw FormatError(name + ": header field 'height' must be positive");
    if (maxval != 255) throw FormatError(name + ": header field 'maxval' must be 255, got " + std::to_string(maxval));
    detail::skip_single_whitespace(in, name, "maxval");

    const int channels = format == PnmFormat::pgm ? 1 : 3;
    std::vector<unsigned char> bytes(static_cast<std::size_t>(width) * height * channels);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw FormatError(name + ": pixel data truncated");

    if (format == PnmFormat::pgm) {
        GrayImage img(width, height);
        for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0;
        return img;
    }
    RgbImage img(width, height);
    for (std::size_t i = 0; i < bytes.size(); ++i) img.values[i] = bytes[i] / 255.0;
    return img;
}

inline GrayImage load_pgm(const std::filesystem::path& path)
{
    return std::get<GrayImage>(load_image(path, PnmFormat::pgm));
}

inline RgbImage load_ppm(const std::filesystem::path& path)
{
    return std::get<RgbImage>(load_image(path, PnmFormat::ppm));
}

inline MaskImage load_mask(const std::filesystem::path& path) { return to_mask(load_pgm(path)); }

namespace detail {

inline void write_pnm(const std::filesystem::path& path, const char* magic, int w, int h,
                      const std::vector<unsigned char>& bytes)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(path.string() + ": cannot open for writing");
    out << magic << '\n' << w << ' ' << h << '\n' << 255 << '\n';
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(path.string() + ": write failed");
}

} // namespace detail

/// Values are clamped to [0,1] and quantized to 256 levels.
inline void save_pgm(const std::filesystem::path& path, const GrayImage& img)
{
    std::vector<unsigned char> bytes(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) bytes[i] = detail::quantize(img.pixels[i]);
    detail::write_pnm(path, "P5", img.width, img.height, bytes);
}

inline void save_pgm(const std::filesystem::path& path, const MaskImage& mask)
{
    std::vector<unsigned char> bytes(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) bytes[i] = mask.pixels[i] ? 255 : 0;
    detail::write_pnm(path, "P5", mask.width, mask.height, bytes);
}

inline void save_ppm(const std::filesystem::path& path, const RgbImage& img)
{
    std::vector<unsigned char> bytes(img.values.size());
    for (std::size_t i = 0; i < img.values.size(); ++i) bytes[i] = detail::quantize(img.values[i]);
    detail::write_pnm(path, "P6", img.width, img.height, bytes);
}

inline GrayImage green_channel(const RgbImage& img)
{
    GrayImage g(img.width, img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) g.at(x, y) = img.at(x, y, 1);
    return g;
}

// ---------------------------------------------------------------------------
// Synthetic vessels

enum class VesselStyle { retina, neuron };

struct SynthSample {
    RgbImage image;
    MaskImage mask;
};

namespace detail {

class CurveCanvas {
public:
    CurveCanvas(int w, int h, double target_fraction)
        : mask(w, h), target_(static_cast<std::size_t>(std::ceil(target_fraction * w * h)))
    {
    }

    bool full() const { return count_ >= target_; }

    // Marks every pixel whose center lies within `radius` of (cx, cy).
    void stamp(double cx, double cy, double radius, const std::function<bool(int, int)>& allowed)
    {
        const int x0 = static_cast<int>(std::floor(cx - radius));
        const int x1 = static_cast<int>(std::ceil(cx + radius));
        const int y0 = static_cast<int>(std::floor(cy - radius));
        const int y1 = static_cast<int>(std::ceil(cy + radius));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                if (full()) return;
                if (x < 0 || y < 0 || x >= mask.width || y >= mask.height) continue;
                if (!allowed(x, y)) continue;
                const double dx = x + 0.5 - cx;
                const double dy = y + 0.5 - cy;
                if (dx * dx + dy * dy > radius * radius) continue;
                auto& p = mask.at(x, y);
                if (!p) {
                    p = 1;
                    ++count_;
                }
            }
        }
    }

    MaskImage mask;

private:
    std::size_t target_;
    std::size_t count_ = 0;
};

struct Branch {
    double x, y, heading, radius;
    int steps_left;
};

inline SynthSample synth_retina(Rng& rng, int w, int h)
{
    const double cx = w / 2.0;
    const double cy = h / 2.0;
    const double fov = 0.48 * std::min(w, h);
    const auto inside = [&](int x, int y) {
        const double dx = x + 0.5 - cx;
        const double dy = y + 0.5 - cy;
        return dx * dx + dy * dy <= fov * fov;
    };

    const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double disc_x = cx + side * 0.3 * fov;
    const double disc_y = cy + rng.uniform(-0.1, 0.1) * fov;
    const double disc_r = 0.14 * fov;

    CurveCanvas canvas(w, h, rng.uniform(0.08, 0.14));
    std::vector<Branch> stack;
    for (int attempt = 0; attempt < 64 && !canvas.full(); ++attempt) {
        const double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
        stack.push_back({disc_x, disc_y, heading, rng.uniform(1.1, 1.6), static_cast<int>(2 * fov)});
        while (!stack.empty() && !canvas.full()) {
            Branch b = stack.back();
            stack.pop_back();
            while (b.steps_left-- > 0 && !canvas.full()) {
                canvas.stamp(b.x, b.y, b.radius, inside);
                b.heading += 0.18 * rng.normal();
                b.x += std::cos(b.heading);
                b.y += std::sin(b.heading);
                if (!inside(static_cast<int>(b.x), static_cast<int>(b.y))) break;
                if (rng.uniform() < 0.04 && b.radius > 0.8) {
                    const double turn = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.4, 0.9);
                    stack.push_back({b.x, b.y, b.heading + turn, std::max(0.7, b.radius * 0.75), b.steps_left / 2});
                }
            }
        }
        stack.clear();
    }

    SynthSample out{RgbImage(w, h), std::move(canvas.mask)};
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!inside(x, y)) {
                for (int c = 0; c < 3; ++c) out.image.at(x, y, c) = std::clamp(0.02 + 0.01 * rng.normal(), 0.0, 1.0);
                continue;
            }
            const double dx = x + 0.5 - cx;
            const double dy = y + 0.5 - cy;
            const double r2 = (dx * dx + dy * dy) / (fov * fov);
            double shade = 1.0 - 0.35 * r2;
            const double ddx = x + 0.5 - disc_x;
            const double ddy = y + 0.5 - disc_y;
            shade += 0.35 * std::exp(-(ddx * ddx + ddy * ddy) / (2.0 * disc_r * disc_r));
            const double vessel = out.mask.at(x, y) ? 1.0 : 0.0;
            const double base[3] = {0.78, 0.46, 0.20};
            const double darken[3] = {0.15, 0.45, 0.30};
            for (int c = 0; c < 3; ++c) {
                const double v = base[c] * shade * (1.0 - darken[c] * vessel) + 0.02 * rng.normal();
                out.image.at(x, y, c) = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return out;
}

inline SynthSample synth_neuron(Rng& rng, int w, int h)
{
    const auto anywhere = [](int, int) { return true; };
    CurveCanvas canvas(w, h, rng.uniform(0.06, 0.12));
    for (int attempt = 0; attempt < 256 && !canvas.full(); ++attempt) {
        // Enter from a random border point heading roughly inward.
        double x, y, heading;
        const auto edge = rng.below(4);
        if (edge == 0) { x = rng.uniform(0, w); y = 0; heading = std::numbers::pi / 2; }
        else if (edge == 1) { x = rng.uniform(0, w); y = h; heading = -std::numbers::pi / 2; }
        else if (edge == 2) { x = 0; y = rng.uniform(0, h); heading = 0; }
        else { x = w; y = rng.uniform(0, h); heading = std::numbers::pi; }
        heading += rng.uniform(-0.6, 0.6);
        const double curl = rng.uniform(-0.04, 0.04);
        for (int step = 0; step < 4 * (w + h) && !canvas.full(); ++step) {
            canvas.stamp(x, y, 0.75, anywhere);
            heading += curl + 0.05 * rng.normal();
            x += std::cos(heading);
            y += std::sin(heading);
            if (x < -1 || y < -1 || x > w + 1 || y > h + 1) break;
        }
    }

    SynthSample out{RgbImage(w, h), std::move(canvas.mask)};
    const double fx = rng.uniform(0.1, 0.4);
    const double fy = rng.uniform(0.1, 0.4);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double texture = 0.08 * std::sin(fx * x + phase) * std::cos(fy * y - phase)
                                 + 0.07 * rng.normal();
            const double v = out.mask.at(x, y) ? 0.18 + 0.05 * rng.normal() : 0.58 + texture;
            const double g = std::clamp(v, 0.0, 1.0);
            out.image.at(x, y, 0) = g;
            out.image.at(x, y, 1) = g;
            out.image.at(x, y, 2) = g;
        }
    }
    return out;
}

} // namespace detail

/// Deterministic in (seed, width, height, style). Vessel pixels cover 5-20% of the mask.
inline SynthSample synth_vessels(std::uint64_t seed, int width, int height, VesselStyle style)
{
    if (width < 32 || height < 32)
        throw ConfigError("synth_vessels: width and height must be at least 32");
    Rng rng(Rng::derive(seed, style == VesselStyle::retina ? 1 : 2));
    return style == VesselStyle::retina ? detail::synth_retina(rng, width, height)
                                        : detail::synth_neuron(rng, width, height);
}

// ---------------------------------------------------------------------------
// Dataset registry: <root>/<dataset>/{images,masks}/<id>.pgm|ppm plus
// <root>/manifest.tsv with lines id<TAB>domain<TAB>dataset<TAB>label?

struct ManifestEntry {
    std::string id;
    Domain domain = Domain::target;
    std::string dataset_name;
    std::optional<PictureLabel> picture_label;

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

inline std::filesystem::path manifest_path(const std::filesystem::path& root) { return root / "manifest.tsv"; }

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& root)
{
    const auto path = manifest_path(root);
    std::ifstream in(path);
    if (!in) throw FormatError(path.string() + ": cannot open manifest");
    std::vector<ManifestEntry> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, '\t')) fields.push_back(f);
        const auto where = path.string() + ":" + std::to_string(lineno);
        if (fields.size() < 3 || fields.size() > 4) throw FormatError(where + ": expected 3 or 4 tab-separated fields");
        ManifestEntry e;
        e.id = fields[0];
        if (fields[1] == "target") e.domain = Domain::target;
        else if (fields[1] == "source") e.domain = Domain::source;
        else throw FormatError(where + ": domain must be target or source");
        e.dataset_name = fields[2];
        if (fields.size() == 4 && !fields[3].empty()) {
            if (fields[3] == "similar") e.picture_label = PictureLabel::similar;
            else if (fields[3] == "dissimilar") e.picture_label = PictureLabel::dissimilar;
            else throw FormatError(where + ": picture label must be similar or dissimilar");
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

inline void write_manifest(const std::filesystem::path& root, const std::vector<ManifestEntry>& entries)
{
    std::filesystem::create_directories(root);
    std::ofstream out(manifest_path(root), std::ios::trunc);
    for (const auto& e : entries) {
        out << e.id << '\t' << to_string(e.domain) << '\t' << e.dataset_name;
        if (e.picture_label) out << '\t' << to_string(*e.picture_label);
        out << '\n';
    }
    if (!out) throw Error(manifest_path(root).string() + ": write failed");
}

/// Replaces entries with a matching id, appends the rest, keeps first-seen order.
inline void upsert_manifest(std::vector<ManifestEntry>& entries, const ManifestEntry& e)
{
    for (auto& existing : entries) {
        if (existing.id == e.id) {
            existing = e;
            return;
        }
    }
    entries.push_back(e);
}

inline std::filesystem::path image_dir(const std::filesystem::path& root, const std::string& dataset)
{
    return root / dataset / "images";
}

inline std::filesystem::path mask_file(const std::filesystem::path& root, const ManifestEntry& e)
{
    return root / e.dataset_name / "masks" / (e.id + ".pgm");
}

/// Prefers a gray .pgm image and falls back to .ppm.
inline std::filesystem::path image_file(const std::filesystem::path& root, const ManifestEntry& e)
{
    const auto dir = image_dir(root, e.dataset_name);
    const auto pgm = dir / (e.id + ".pgm");
    if (std::filesystem::exists(pgm)) return pgm;
    return dir / (e.id + ".ppm");
}

/// Loads one record. RGB images are reduced to gray by `from_rgb`
/// (green channel by default); gray images are taken as-is.
inline SampleRecord load_sample(const std::filesystem::path& root, const ManifestEntry& e,
                                const std::function<GrayImage(const RgbImage&)>& from_rgb = green_channel)
{
    SampleRecord r;
    r.id = e.id;
    r.domain = e.domain;
    r.dataset_name = e.dataset_name;
    r.picture_label = e.picture_label;
    const auto img = image_file(root, e);
    if (img.extension() == ".pgm") r.image = load_pgm(img);
    else r.image = from_rgb(load_ppm(img));
    const auto m = mask_file(root, e);
    if (std::filesystem::exists(m)) {
        r.mask = load_mask(m);
        if (r.mask->width != r.image.width || r.mask->height != r.image.height)
            throw ShapeError(m.string() + ": mask dimensions differ from image");
    }
    if (r.domain == Domain::target && !r.mask)
        throw FormatError(e.id + ": target-domain record requires a mask at " + m.string());
    return r;
}

inline std::vector<SampleRecord> load_dataset(const std::filesystem::path& root,
                                              const std::vector<std::string>& datasets,
                                              const std::function<GrayImage(const RgbImage&)>& from_rgb = green_channel)
{
    std::vector<SampleRecord> out;
    for (const auto& e : read_manifest(root))
        if (std::find(datasets.begin(), datasets.end(), e.dataset_name) != datasets.end())
            out.push_back(load_sample(root, e, from_rgb));
    return out;
}

} // namespace drvessel
