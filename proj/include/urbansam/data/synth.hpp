#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "urbansam/core/rng.hpp"
#include "urbansam/data/raster.hpp"

namespace urbansam {

enum class ObjectClass { Building, Road, Water };

inline std::string to_string(ObjectClass c) {
    switch (c) {
        case ObjectClass::Building: return "building";
        case ObjectClass::Road: return "road";
        case ObjectClass::Water: return "water";
    }
    return "?";
}

inline ObjectClass object_class_from(const std::string& s) {
    if (s == "building") return ObjectClass::Building;
    if (s == "road") return ObjectClass::Road;
    if (s == "water") return ObjectClass::Water;
    throw ConfigError("unknown object class '" + s + "' (building|road|water)");
}

struct SyntheticSceneSpec {
    Eigen::Index size = 64;
    ObjectClass object_class = ObjectClass::Building;
    double density = 0.5;       // 0 disables objects entirely
    double min_scale = 0.10;    // object size as a fraction of the scene side
    double max_scale = 0.32;
    std::uint64_t seed = 0;

    void validate() const {
        if (size < 16) throw ConfigError("synthetic scene size must be >= 16");
        if (density < 0.0 || density > 1.5) throw DataError("infeasible density " + std::to_string(density));
        if (min_scale <= 0 || max_scale < min_scale || max_scale > 0.9)
            throw ConfigError("synthetic scale range invalid");
    }
};

namespace synth_detail {

inline void paint_background(ImageU8& img, Rng& rng) {
    const double gx = rng.uniform(-12.0, 12.0), gy = rng.uniform(-12.0, 12.0);
    const double base[3] = {102.0, 112.0, 94.0};
    for (Eigen::Index y = 0; y < img.height; ++y)
        for (Eigen::Index x = 0; x < img.width; ++x) {
            const double grad = gx * (static_cast<double>(x) / static_cast<double>(img.width) - 0.5) +
                                gy * (static_cast<double>(y) / static_cast<double>(img.height) - 0.5);
            for (Eigen::Index c = 0; c < 3; ++c) {
                const double v = base[c] + grad + rng.uniform(-10.0, 10.0);
                img.at(c, y, x) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
            }
        }
}

inline void set_px(ImageU8& img, Eigen::Index y, Eigen::Index x, const double rgb[3], double noise,
                   Rng& rng) {
    for (Eigen::Index c = 0; c < 3; ++c) {
        const double v = rgb[c] + rng.uniform(-noise, noise);
        img.at(c, y, x) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
}

// Axis-aligned or rotated rectangles with speckle texture.
inline void draw_buildings(ImageU8& img, MaskU8& mask, const SyntheticSceneSpec& spec, Rng& rng) {
    const auto n = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::llround(spec.density * 10.0)));
    const double sz = static_cast<double>(spec.size);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double cx = rng.uniform(0.12, 0.88) * sz;
        const double cy = rng.uniform(0.12, 0.88) * sz;
        const double hw = 0.5 * rng.uniform(spec.min_scale, spec.max_scale) * sz;
        const double hh = 0.5 * rng.uniform(spec.min_scale, spec.max_scale) * sz;
        const double theta = rng.coin() ? 0.0 : rng.uniform(0.0, M_PI / 2.0);
        const double ct = std::cos(theta), st = std::sin(theta);
        double color[3];
        const double lum = rng.uniform(150.0, 225.0);
        for (double& c : color) c = std::clamp(lum + rng.uniform(-12.0, 12.0), 0.0, 255.0);
        const double rad = std::hypot(hw, hh) + 1.0;
        const auto y0 = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::floor(cy - rad)));
        const auto y1 = std::min<Eigen::Index>(spec.size - 1, static_cast<Eigen::Index>(std::ceil(cy + rad)));
        const auto x0 = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::floor(cx - rad)));
        const auto x1 = std::min<Eigen::Index>(spec.size - 1, static_cast<Eigen::Index>(std::ceil(cx + rad)));
        for (Eigen::Index y = y0; y <= y1; ++y)
            for (Eigen::Index x = x0; x <= x1; ++x) {
                const double dx = static_cast<double>(x) + 0.5 - cx;
                const double dy = static_cast<double>(y) + 0.5 - cy;
                const double u = ct * dx + st * dy;
                const double v = -st * dx + ct * dy;
                if (std::abs(u) <= hw && std::abs(v) <= hh) {
                    mask.at(y, x) = 1;
                    set_px(img, y, x, color, 18.0, rng);
                }
            }
    }
}

// Edge-to-edge ribbons, 3..8 px wide; crossings form junctions.
inline void draw_roads(ImageU8& img, MaskU8& mask, const SyntheticSceneSpec& spec, Rng& rng) {
    const auto n = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::llround(spec.density * 5.0)));
    const double sz = static_cast<double>(spec.size);
    for (Eigen::Index i = 0; i < n; ++i) {
        // endpoints on two different edges
        auto edge_point = [&](int edge) {
            const double t = rng.uniform(0.05, 0.95) * sz;
            switch (edge) {
                case 0: return std::pair<double, double>(0.0, t);
                case 1: return std::pair<double, double>(sz - 1.0, t);
                case 2: return std::pair<double, double>(t, 0.0);
                default: return std::pair<double, double>(t, sz - 1.0);
            }
        };
        const int e0 = static_cast<int>(rng.uniform_int(0, 3));
        int e1 = static_cast<int>(rng.uniform_int(0, 3));
        if (e1 == e0) e1 = (e1 + 2) % 4;
        auto [ay, ax] = edge_point(e0);
        auto [by, bx] = edge_point(e1);
        // one optional bend keeps the ribbon from being a plain straight line
        std::vector<std::pair<double, double>> pts{{ay, ax}};
        if (rng.coin(0.7))
            pts.emplace_back(rng.uniform(0.25, 0.75) * sz, rng.uniform(0.25, 0.75) * sz);
        pts.emplace_back(by, bx);
        const double width = rng.uniform(3.0, 8.0);
        const double half = width / 2.0;
        double color[3];
        const double lum = rng.uniform(68.0, 105.0);
        for (double& c : color) c = lum + rng.uniform(-5.0, 5.0);
        for (std::size_t s = 0; s + 1 < pts.size(); ++s) {
            const double y0 = pts[s].first, x0 = pts[s].second;
            const double y1 = pts[s + 1].first, x1 = pts[s + 1].second;
            const double len2 = (y1 - y0) * (y1 - y0) + (x1 - x0) * (x1 - x0);
            const auto ry0 = std::max<Eigen::Index>(
                0, static_cast<Eigen::Index>(std::floor(std::min(y0, y1) - half - 1)));
            const auto ry1 = std::min<Eigen::Index>(
                spec.size - 1, static_cast<Eigen::Index>(std::ceil(std::max(y0, y1) + half + 1)));
            const auto rx0 = std::max<Eigen::Index>(
                0, static_cast<Eigen::Index>(std::floor(std::min(x0, x1) - half - 1)));
            const auto rx1 = std::min<Eigen::Index>(
                spec.size - 1, static_cast<Eigen::Index>(std::ceil(std::max(x0, x1) + half + 1)));
            for (Eigen::Index y = ry0; y <= ry1; ++y)
                for (Eigen::Index x = rx0; x <= rx1; ++x) {
                    const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
                    double t = len2 > 0 ? ((py - y0) * (y1 - y0) + (px - x0) * (x1 - x0)) / len2 : 0.0;
                    t = std::clamp(t, 0.0, 1.0);
                    const double dy = py - (y0 + t * (y1 - y0));
                    const double dx = px - (x0 + t * (x1 - x0));
                    if (dy * dy + dx * dx <= half * half) {
                        mask.at(y, x) = 1;
                        set_px(img, y, x, color, 8.0, rng);
                    }
                }
        }
    }
}

// Smooth blobs from thresholded low-resolution noise; colors stay close to the
// background for low-contrast boundaries.
inline void draw_water(ImageU8& img, MaskU8& mask, const SyntheticSceneSpec& spec, Rng& rng) {
    const Eigen::Index grid = std::max<Eigen::Index>(3, spec.size / 8);
    std::vector<double> noise(static_cast<std::size_t>(grid * grid));
    for (auto& v : noise) v = rng.gaussian();
    // bilinear upsample of the noise field
    std::vector<double> field(static_cast<std::size_t>(spec.size * spec.size));
    for (Eigen::Index y = 0; y < spec.size; ++y)
        for (Eigen::Index x = 0; x < spec.size; ++x) {
            const double gy = (static_cast<double>(y) + 0.5) / static_cast<double>(spec.size) *
                                  static_cast<double>(grid) - 0.5;
            const double gx = (static_cast<double>(x) + 0.5) / static_cast<double>(spec.size) *
                                  static_cast<double>(grid) - 0.5;
            const auto cy = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(std::floor(gy)), 0, grid - 2);
            const auto cx = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(std::floor(gx)), 0, grid - 2);
            const double fy = std::clamp(gy - static_cast<double>(cy), 0.0, 1.0);
            const double fx = std::clamp(gx - static_cast<double>(cx), 0.0, 1.0);
            auto at = [&](Eigen::Index yy, Eigen::Index xx) {
                return noise[static_cast<std::size_t>(yy * grid + xx)];
            };
            field[static_cast<std::size_t>(y * spec.size + x)] =
                (1 - fy) * ((1 - fx) * at(cy, cx) + fx * at(cy, cx + 1)) +
                fy * ((1 - fx) * at(cy + 1, cx) + fx * at(cy + 1, cx + 1));
        }
    // threshold at the quantile that lands the requested coverage
    const double target = std::clamp(0.10 + 0.45 * spec.density, 0.05, 0.60);
    std::vector<double> sorted = field;
    const auto k = static_cast<std::size_t>(
        std::min<double>(static_cast<double>(sorted.size()) - 1.0,
                         (1.0 - target) * static_cast<double>(sorted.size())));
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
    const double thresh = sorted[k];
    const double color[3] = {88.0, 98.0, 108.0};
    for (Eigen::Index y = 0; y < spec.size; ++y)
        for (Eigen::Index x = 0; x < spec.size; ++x)
            if (field[static_cast<std::size_t>(y * spec.size + x)] >= thresh) {
                mask.at(y, x) = 1;
                set_px(img, y, x, color, 6.0, rng);
            }
}

}  // namespace synth_detail

// Deterministic synthetic scene with exact ground truth; identical spec+seed
// produce a bit-identical pair. Foreground coverage is kept inside [0.05,0.6]
// (rejection over fresh draws) whenever density is positive.
inline RasterSample generate_synthetic(const SyntheticSceneSpec& spec) {
    spec.validate();
    Rng rng(Rng::mix(spec.seed, 0x5eed5eedULL, static_cast<std::uint64_t>(spec.object_class)));
    RasterSample s;
    s.source_id = "synth-" + to_string(spec.object_class) + "-" + std::to_string(spec.seed);
    s.window = {0, 0, spec.size, spec.size};
    const int max_attempts = 64;
    for (int attempt = 0; attempt < max_attempts; ++attempt) {
        s.image = ImageU8(3, spec.size, spec.size);
        MaskU8 mask(spec.size, spec.size);
        synth_detail::paint_background(s.image, rng);
        if (spec.density > 0.0) {
            switch (spec.object_class) {
                case ObjectClass::Building: synth_detail::draw_buildings(s.image, mask, spec, rng); break;
                case ObjectClass::Road: synth_detail::draw_roads(s.image, mask, spec, rng); break;
                case ObjectClass::Water: synth_detail::draw_water(s.image, mask, spec, rng); break;
            }
        }
        const double frac = static_cast<double>(mask.count_foreground()) /
                            static_cast<double>(spec.size * spec.size);
        if (spec.density == 0.0 || (frac >= 0.05 && frac <= 0.60)) {
            s.mask = std::move(mask);
            return s;
        }
    }
    throw DataError("infeasible density " + std::to_string(spec.density) + " for " +
                    to_string(spec.object_class) + " scenes of size " + std::to_string(spec.size));
}

}  // namespace urbansam
