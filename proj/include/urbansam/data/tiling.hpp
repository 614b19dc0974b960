#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "urbansam/core/tensor.hpp"
#include "urbansam/data/raster.hpp"

namespace urbansam {

struct TilingSpec {
    Eigen::Index patch_size = 512;
    double overlap_fraction = 0.0;
    enum class PadMode { Reflect, Zero } pad_mode = PadMode::Reflect;

    Eigen::Index stride() const {
        return static_cast<Eigen::Index>(
            std::llround(static_cast<double>(patch_size) * (1.0 - overlap_fraction)));
    }

    void validate() const {
        if (patch_size < 32) throw ConfigError("tiling patch_size must be >= 32");
        if (overlap_fraction < 0.0 || overlap_fraction >= 1.0)
            throw ConfigError("tiling overlap_fraction must be in [0,1)");
        if (stride() < 1) throw ConfigError("tiling stride must be >= 1");
    }
};

namespace detail {

inline std::vector<Eigen::Index> tile_positions(Eigen::Index dim, Eigen::Index patch,
                                                Eigen::Index stride) {
    if (dim <= patch) return {0};
    const auto span = dim - patch;
    const auto n = (span + stride - 1) / stride + 1;  // ceil(span/stride) + 1
    std::vector<Eigen::Index> pos;
    pos.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) pos.push_back(i * stride);
    return pos;
}

inline Eigen::Index reflect_index(Eigen::Index i, Eigen::Index dim) {
    if (i < 0) i = -i;
    if (i >= dim) i = 2 * (dim - 1) - i;
    if (i < 0) i = 0;
    if (i >= dim) i = dim - 1;
    return i;
}

}  // namespace detail

// Row-major deterministic tiling; edge patches are padded per pad_mode and the
// source window recorded for stitching.
inline std::vector<RasterSample> tile(const RasterSample& raster, const TilingSpec& spec) {
    spec.validate();
    const auto& img = raster.image;
    if (img.height < 1 || img.width < 1)
        throw DataError("tile: degenerate raster " + std::to_string(img.height) + "x" +
                        std::to_string(img.width));
    const auto rows = detail::tile_positions(img.height, spec.patch_size, spec.stride());
    const auto cols = detail::tile_positions(img.width, spec.patch_size, spec.stride());
    std::vector<RasterSample> out;
    out.reserve(rows.size() * cols.size());
    const Eigen::Index p = spec.patch_size;
    for (auto r : rows)
        for (auto c : cols) {
            RasterSample s;
            s.source_id = raster.source_id;
            s.window = {r, c, p, p};
            s.image = ImageU8(img.channels, p, p);
            if (raster.mask) s.mask = MaskU8(p, p);
            for (Eigen::Index y = 0; y < p; ++y)
                for (Eigen::Index x = 0; x < p; ++x) {
                    const Eigen::Index sy = r + y, sx = c + x;
                    const bool inside = sy < img.height && sx < img.width;
                    if (inside) {
                        for (Eigen::Index ch = 0; ch < img.channels; ++ch)
                            s.image.at(ch, y, x) = img.at(ch, sy, sx);
                        if (raster.mask) s.mask->at(y, x) = raster.mask->at(sy, sx);
                    } else if (spec.pad_mode == TilingSpec::PadMode::Reflect) {
                        const Eigen::Index ry = detail::reflect_index(sy, img.height);
                        const Eigen::Index rx = detail::reflect_index(sx, img.width);
                        for (Eigen::Index ch = 0; ch < img.channels; ++ch)
                            s.image.at(ch, y, x) = img.at(ch, ry, rx);
                        if (raster.mask) s.mask->at(y, x) = raster.mask->at(ry, rx);
                    }
                    // zero pad: buffers already zeroed
                }
            out.push_back(std::move(s));
        }
    return out;
}

// Uniform-average stitching of per-patch probability maps back onto the full
// raster. Windows may extend past the raster edge (padded tiles); those cells
// are ignored. Uncovered cells are an error.
template <class S>
Tensor<S> stitch(const std::vector<std::pair<Window, Tensor<S>>>& patch_preds, Eigen::Index height,
                 Eigen::Index width) {
    Tensor<S> sum({1, height, width});
    Tensor<S> count({1, height, width});
    for (const auto& [win, prob] : patch_preds) {
        if (prob.dim(1) != win.h || prob.dim(2) != win.w)
            throw ValidationError("stitch: prediction shape " + prob.shape_str() +
                                  " does not match window " + std::to_string(win.h) + "x" +
                                  std::to_string(win.w));
        for (Eigen::Index y = 0; y < win.h; ++y) {
            const Eigen::Index sy = win.row + y;
            if (sy < 0 || sy >= height) continue;
            for (Eigen::Index x = 0; x < win.w; ++x) {
                const Eigen::Index sx = win.col + x;
                if (sx < 0 || sx >= width) continue;
                sum.at(0, sy, sx) += prob.at(0, y, x);
                count.at(0, sy, sx) += S(1);
            }
        }
    }
    std::string uncovered;
    int missing = 0;
    for (Eigen::Index y = 0; y < height; ++y)
        for (Eigen::Index x = 0; x < width; ++x)
            if (count.at(0, y, x) == S(0)) {
                if (missing < 5)
                    uncovered += " (" + std::to_string(y) + "," + std::to_string(x) + ")";
                ++missing;
            }
    if (missing)
        throw DataError("stitch: " + std::to_string(missing) + " uncovered cells, e.g." + uncovered);
    sum.array() /= count.array();
    return sum;
}

}  // namespace urbansam
