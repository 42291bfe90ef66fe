#pragma once

// Green-channel preprocessing chain: z-score normalization, rescaling to the
// unit range, contrast-limited adaptive histogram equalization, gamma.

#include <algorithm>
#include <cmath>
#include <vector>

#include "drvessel/error.hpp"
#include "drvessel/imgio.hpp"

namespace drvessel {

struct NormalizationStats {
    double mean = 0.0;
    double std = 0.0;
};

struct ClaheConfig {
    int tiles_x = 8;
    int tiles_y = 8;
    double clip_limit = 2.0; ///< multiple of the uniform bin height
    int bins = 256;
};

struct PreprocessConfig {
    ClaheConfig clahe;
    double gamma = 1.2;
};

/// Per-image (I - mean) / std with the population std. A constant image maps
/// to all zeros and reports std = 0.
inline std::pair<GrayImage, NormalizationStats> normalize(const GrayImage& img)
{
    if (img.empty()) throw ConfigError("normalize: empty image");
    const double n = static_cast<double>(img.size());
    double mean = 0.0;
    for (double v : img.pixels) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : img.pixels) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / n);

    GrayImage out(img.width, img.height, 0.0, Range::zscore);
    if (sd > 0.0)
        for (std::size_t i = 0; i < img.size(); ++i) out.pixels[i] = (img.pixels[i] - mean) / sd;
    return {std::move(out), NormalizationStats{mean, sd}};
}

/// Min-max map onto [0,1]; constant input maps to 0.5.
inline GrayImage rescale_unit(const GrayImage& img)
{
    if (img.empty()) throw ConfigError("rescale_unit: empty image");
    const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
    const double min = *lo;
    const double span = *hi - *lo;
    GrayImage out(img.width, img.height, 0.5, Range::unit);
    if (span > 0.0)
        for (std::size_t i = 0; i < img.size(); ++i)
            out.pixels[i] = std::clamp((img.pixels[i] - min) / span, 0.0, 1.0);
    return out;
}

namespace detail {

inline int bin_of(double v, int bins)
{
    const int b = static_cast<int>(std::floor(std::clamp(v, 0.0, 1.0) * bins));
    return std::min(b, bins - 1);
}

// Start offsets of `tiles` tiles along an axis of length `extent`; the last
// tile absorbs the remainder.
inline std::vector<int> tile_starts(int extent, int tiles)
{
    std::vector<int> starts(tiles + 1);
    const int size = extent / tiles;
    for (int i = 0; i < tiles; ++i) starts[i] = i * size;
    starts[tiles] = extent;
    return starts;
}

// Interpolation coordinate of pixel `p` between tile centers: lower tile index
// and weight of the upper tile.
inline std::pair<int, double> tile_position(int p, const std::vector<double>& centers)
{
    const int tiles = static_cast<int>(centers.size());
    if (p <= centers.front()) return {0, 0.0};
    if (p >= centers.back()) return {tiles - 1, 0.0};
    int i = 0;
    while (i + 1 < tiles && centers[i + 1] <= p) ++i;
    if (i == tiles - 1) return {i, 0.0};
    return {i, (p - centers[i]) / (centers[i + 1] - centers[i])};
}

} // namespace detail

/// Contrast-limited adaptive histogram equalization.
///
/// Each tile histogram is clipped at clip_limit * tile_pixels / bins and the
/// clipped mass is spread evenly over all bins. The tile mapping is the
/// inclusive CDF, so bin b maps to (count in bins <= b) / tile_pixels. Pixels
/// blend the mappings of the four nearest tile centers bilinearly; pixels
/// outside the outermost centers use the edge tiles only.
inline GrayImage clahe(const GrayImage& img, const ClaheConfig& cfg)
{
    if (cfg.tiles_x < 1 || cfg.tiles_y < 1) throw ConfigError("clahe: tile counts must be positive");
    if (cfg.bins < 2) throw ConfigError("clahe: need at least 2 bins");
    if (!(cfg.clip_limit > 1.0)) throw ConfigError("clahe: clip_limit must exceed 1");
    if (cfg.tiles_x > img.width || cfg.tiles_y > img.height)
        throw ConfigError("clahe: tile grid " + std::to_string(cfg.tiles_x) + "x" + std::to_string(cfg.tiles_y) +
                          " larger than image " + std::to_string(img.width) + "x" + std::to_string(img.height));

    const int bins = cfg.bins;
    const auto xs = detail::tile_starts(img.width, cfg.tiles_x);
    const auto ys = detail::tile_starts(img.height, cfg.tiles_y);

    std::vector<std::vector<double>> maps(static_cast<std::size_t>(cfg.tiles_x) * cfg.tiles_y);
    for (int ty = 0; ty < cfg.tiles_y; ++ty) {
        for (int tx = 0; tx < cfg.tiles_x; ++tx) {
            std::vector<double> hist(bins, 0.0);
            for (int y = ys[ty]; y < ys[ty + 1]; ++y)
                for (int x = xs[tx]; x < xs[tx + 1]; ++x) hist[detail::bin_of(img.at(x, y), bins)] += 1.0;
            const double n = static_cast<double>(xs[tx + 1] - xs[tx]) * (ys[ty + 1] - ys[ty]);
            const double clip = cfg.clip_limit * n / bins;
            double excess = 0.0;
            for (double& h : hist) {
                if (h > clip) {
                    excess += h - clip;
                    h = clip;
                }
            }
            const double share = excess / bins;
            auto& map = maps[static_cast<std::size_t>(ty) * cfg.tiles_x + tx];
            map.resize(bins);
            double cdf = 0.0;
            for (int b = 0; b < bins; ++b) {
                cdf += hist[b] + share;
                map[b] = std::clamp(cdf / n, 0.0, 1.0);
            }
        }
    }

    std::vector<double> cx(cfg.tiles_x), cy(cfg.tiles_y);
    for (int i = 0; i < cfg.tiles_x; ++i) cx[i] = 0.5 * (xs[i] + xs[i + 1] - 1);
    for (int i = 0; i < cfg.tiles_y; ++i) cy[i] = 0.5 * (ys[i] + ys[i + 1] - 1);

    GrayImage out(img.width, img.height, 0.0, Range::unit);
    for (int y = 0; y < img.height; ++y) {
        const auto [ty, wy] = detail::tile_position(y, cy);
        const int ty1 = std::min(ty + 1, cfg.tiles_y - 1);
        for (int x = 0; x < img.width; ++x) {
            const auto [tx, wx] = detail::tile_position(x, cx);
            const int tx1 = std::min(tx + 1, cfg.tiles_x - 1);
            const int b = detail::bin_of(img.at(x, y), bins);
            const auto m = [&](int i, int j) { return maps[static_cast<std::size_t>(j) * cfg.tiles_x + i][b]; };
            const double top = (1.0 - wx) * m(tx, ty) + wx * m(tx1, ty);
            const double bottom = (1.0 - wx) * m(tx, ty1) + wx * m(tx1, ty1);
            out.at(x, y) = std::clamp((1.0 - wy) * top + wy * bottom, 0.0, 1.0);
        }
    }
    return out;
}

inline GrayImage gamma_adjust(const GrayImage& img, double gamma)
{
    if (!(gamma > 0.0)) throw ConfigError("gamma_adjust: gamma must be positive");
    GrayImage out(img.width, img.height, 0.0, Range::unit);
    for (std::size_t i = 0; i < img.size(); ++i) out.pixels[i] = std::pow(std::clamp(img.pixels[i], 0.0, 1.0), gamma);
    return out;
}

/// normalize -> rescale_unit -> clahe -> gamma_adjust.
inline GrayImage preprocess(const GrayImage& green, const PreprocessConfig& cfg = {})
{
    return gamma_adjust(clahe(rescale_unit(normalize(green).first), cfg.clahe), cfg.gamma);
}

inline GrayImage preprocess_rgb(const RgbImage& rgb, const PreprocessConfig& cfg = {})
{
    return preprocess(green_channel(rgb), cfg);
}

} // namespace drvessel
