#pragma once

#include <cmath>

#include "urbansam/core/graph.hpp"
#include "urbansam/data/raster.hpp"

namespace urbansam {

// Half-pixel-center bilinear resize on 8-bit images, matching the tensor-side
// resize so regulated inputs and tensor paths agree.
inline ImageU8 resize_image_bilinear(const ImageU8& img, Eigen::Index ho, Eigen::Index wo) {
    if (img.height == ho && img.width == wo) return img;
    const auto ay = detail::make_lerp(img.height, ho);
    const auto ax = detail::make_lerp(img.width, wo);
    ImageU8 out(img.channels, ho, wo);
    for (Eigen::Index c = 0; c < img.channels; ++c)
        for (Eigen::Index y = 0; y < ho; ++y) {
            const auto y0 = ay.i0[static_cast<std::size_t>(y)], y1 = ay.i1[static_cast<std::size_t>(y)];
            const double fy = ay.w1[static_cast<std::size_t>(y)];
            for (Eigen::Index x = 0; x < wo; ++x) {
                const auto x0 = ax.i0[static_cast<std::size_t>(x)], x1 = ax.i1[static_cast<std::size_t>(x)];
                const double fx = ax.w1[static_cast<std::size_t>(x)];
                const double v = (1.0 - fy) * ((1.0 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1)) +
                                 fy * ((1.0 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1));
                out.at(c, y, x) = static_cast<std::uint8_t>(std::lround(std::min(255.0, std::max(0.0, v))));
            }
        }
    return out;
}

inline MaskU8 resize_mask_nearest(const MaskU8& m, Eigen::Index ho, Eigen::Index wo) {
    if (m.height == ho && m.width == wo) return m;
    const auto iy = detail::make_nearest(m.height, ho);
    const auto ix = detail::make_nearest(m.width, wo);
    MaskU8 out(ho, wo);
    for (Eigen::Index y = 0; y < ho; ++y)
        for (Eigen::Index x = 0; x < wo; ++x)
            out.at(y, x) = m.at(iy[static_cast<std::size_t>(y)], ix[static_cast<std::size_t>(x)]);
    return out;
}

struct Regulated {
    RasterSample sample;
    Eigen::Index native_height = 0, native_width = 0;  // inverse mapping target
};

// Resample a sample to the working resolution: bilinear for the image, nearest
// for the mask. The native size is recorded so predictions can be mapped back.
inline Regulated regulate(const RasterSample& s, Eigen::Index target_size, Eigen::Index patch_size) {
    if (target_size % patch_size != 0)
        throw ConfigError("regulate: target size " + std::to_string(target_size) +
                          " not divisible by patch size " + std::to_string(patch_size));
    Regulated r;
    r.native_height = s.image.height;
    r.native_width = s.image.width;
    r.sample.source_id = s.source_id;
    r.sample.window = s.window;
    r.sample.image = resize_image_bilinear(s.image, target_size, target_size);
    if (s.mask) r.sample.mask = resize_mask_nearest(*s.mask, target_size, target_size);
    return r;
}

// Map a probability map produced at working resolution back to native size.
template <class S>
Tensor<S> to_native(const Tensor<S>& prob, const Regulated& r) {
    if (prob.dim(1) == r.native_height && prob.dim(2) == r.native_width) return prob;
    Graph<S> g;
    Var<S> v = resize_bilinear(g.constant(prob), r.native_height, r.native_width);
    return g.val(v);
}

}  // namespace urbansam
