#pragma once

// Stride-grid patch extraction, overlap-averaged stitching, and the seeded
// random patch sampler used to build training sets.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "drvessel/error.hpp"
#include "drvessel/imgio.hpp"
#include "drvessel/rng.hpp"

namespace drvessel {

struct PatchOrigin {
    int x = 0;
    int y = 0;
    friend bool operator==(const PatchOrigin&, const PatchOrigin&) = default;
};

struct PatchGrid {
    int image_w = 0;
    int image_h = 0;
    int patch = 0;
    int stride = 0;
    std::vector<PatchOrigin> origins; ///< row-major
};

struct PatchSet {
    PatchGrid grid;
    std::vector<GrayImage> patches;
};

namespace detail {

// Multiples of stride that fit, plus a clamped final origin when the last
// regular patch stops short of the border.
inline std::vector<int> axis_origins(int extent, int patch, int stride)
{
    std::vector<int> out;
    for (int o = 0; o + patch <= extent; o += stride) out.push_back(o);
    if (out.back() + patch < extent) out.push_back(extent - patch);
    return out;
}

} // namespace detail

inline PatchGrid plan_grid(int image_w, int image_h, int patch, int stride)
{
    if (stride <= 0) throw ConfigError("plan_grid: stride must be positive");
    if (patch <= 0) throw ConfigError("plan_grid: patch must be positive");
    if (stride > patch) throw ConfigError("plan_grid: stride larger than patch leaves gaps");
    if (patch > image_w || patch > image_h)
        throw ConfigError("plan_grid: patch " + std::to_string(patch) + " larger than image " +
                          std::to_string(image_w) + "x" + std::to_string(image_h));
    PatchGrid g{image_w, image_h, patch, stride, {}};
    const auto xs = detail::axis_origins(image_w, patch, stride);
    const auto ys = detail::axis_origins(image_h, patch, stride);
    g.origins.reserve(xs.size() * ys.size());
    for (int y : ys)
        for (int x : xs) g.origins.push_back({x, y});
    return g;
}

inline GrayImage crop(const GrayImage& img, PatchOrigin o, int patch)
{
    GrayImage p(patch, patch, 0.0, img.range);
    for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x) p.at(x, y) = img.at(o.x + x, o.y + y);
    return p;
}

inline MaskImage crop(const MaskImage& img, PatchOrigin o, int patch)
{
    MaskImage p(patch, patch);
    for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x) p.at(x, y) = img.at(o.x + x, o.y + y);
    return p;
}

inline PatchSet extract(const GrayImage& img, const PatchGrid& grid)
{
    if (img.width != grid.image_w || img.height != grid.image_h)
        throw ShapeError("extract: grid planned for a different image size");
    PatchSet set{grid, {}};
    set.patches.reserve(grid.origins.size());
    for (const auto& o : grid.origins) set.patches.push_back(crop(img, o, grid.patch));
    return set;
}

/// Each output pixel is the mean of every patch value covering it, accumulated
/// as a running mean in grid order. Identical contributions reproduce their
/// value exactly.
inline GrayImage stitch(const PatchSet& pred)
{
    const auto& g = pred.grid;
    if (pred.patches.size() != g.origins.size())
        throw ShapeError("stitch: " + std::to_string(pred.patches.size()) + " patches for " +
                         std::to_string(g.origins.size()) + " origins");
    GrayImage mean(g.image_w, g.image_h);
    std::vector<int> count(mean.size(), 0);
    for (std::size_t i = 0; i < g.origins.size(); ++i) {
        const auto& p = pred.patches[i];
        if (p.width != g.patch || p.height != g.patch) throw ShapeError("stitch: patch has wrong size");
        const auto o = g.origins[i];
        for (int y = 0; y < g.patch; ++y) {
            for (int x = 0; x < g.patch; ++x) {
                const auto idx = static_cast<std::size_t>(o.y + y) * g.image_w + o.x + x;
                const int k = ++count[idx];
                mean.pixels[idx] += (p.at(x, y) - mean.pixels[idx]) / k;
            }
        }
    }
    if (!pred.patches.empty()) mean.range = pred.patches.front().range;
    for (int c : count)
        if (c == 0) throw ShapeError("stitch: grid leaves pixels uncovered");
    return mean;
}

struct TrainingPatch {
    GrayImage image;
    MaskImage mask;
};

/// Uniform random patch origins over all valid positions, one independent
/// draw per patch.
inline std::vector<TrainingPatch> sample_patches(const GrayImage& img, const MaskImage& mask, int patch,
                                                 int count, Rng& rng)
{
    if (mask.width != img.width || mask.height != img.height)
        throw ShapeError("sample_patches: mask and image dimensions differ");
    if (patch > img.width || patch > img.height) throw ConfigError("sample_patches: patch larger than image");
    std::vector<TrainingPatch> out;
    out.reserve(count);
    const auto nx = static_cast<std::uint64_t>(img.width - patch + 1);
    const auto ny = static_cast<std::uint64_t>(img.height - patch + 1);
    for (int i = 0; i < count; ++i) {
        const PatchOrigin o{static_cast<int>(rng.below(nx)), static_cast<int>(rng.below(ny))};
        out.push_back({crop(img, o, patch), crop(mask, o, patch)});
    }
    return out;
}

} // namespace drvessel
