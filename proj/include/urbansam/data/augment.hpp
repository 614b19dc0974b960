#pragma once

#include "urbansam/core/rng.hpp"
#include "urbansam/data/raster.hpp"

namespace urbansam {

// k quarter-turns counter-clockwise.
inline ImageU8 rotate90(const ImageU8& img, int k) {
    k = ((k % 4) + 4) % 4;
    ImageU8 cur = img;
    for (int i = 0; i < k; ++i) {
        ImageU8 next(cur.channels, cur.width, cur.height);
        for (Eigen::Index c = 0; c < cur.channels; ++c)
            for (Eigen::Index y = 0; y < next.height; ++y)
                for (Eigen::Index x = 0; x < next.width; ++x)
                    next.at(c, y, x) = cur.at(c, x, next.height - 1 - y);
        cur = std::move(next);
    }
    return cur;
}

inline MaskU8 rotate90(const MaskU8& m, int k) {
    k = ((k % 4) + 4) % 4;
    MaskU8 cur = m;
    for (int i = 0; i < k; ++i) {
        MaskU8 next(cur.width, cur.height);
        for (Eigen::Index y = 0; y < next.height; ++y)
            for (Eigen::Index x = 0; x < next.width; ++x)
                next.at(y, x) = cur.at(x, next.height - 1 - y);
        cur = std::move(next);
    }
    return cur;
}

inline ImageU8 flip_h(const ImageU8& img) {
    ImageU8 out(img.channels, img.height, img.width);
    for (Eigen::Index c = 0; c < img.channels; ++c)
        for (Eigen::Index y = 0; y < img.height; ++y)
            for (Eigen::Index x = 0; x < img.width; ++x)
                out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
    return out;
}

inline MaskU8 flip_h(const MaskU8& m) {
    MaskU8 out(m.height, m.width);
    for (Eigen::Index y = 0; y < m.height; ++y)
        for (Eigen::Index x = 0; x < m.width; ++x) out.at(y, x) = m.at(y, m.width - 1 - x);
    return out;
}

inline ImageU8 flip_v(const ImageU8& img) {
    ImageU8 out(img.channels, img.height, img.width);
    for (Eigen::Index c = 0; c < img.channels; ++c)
        for (Eigen::Index y = 0; y < img.height; ++y)
            for (Eigen::Index x = 0; x < img.width; ++x)
                out.at(c, y, x) = img.at(c, img.height - 1 - y, x);
    return out;
}

inline MaskU8 flip_v(const MaskU8& m) {
    MaskU8 out(m.height, m.width);
    for (Eigen::Index y = 0; y < m.height; ++y)
        for (Eigen::Index x = 0; x < m.width; ++x) out.at(y, x) = m.at(m.height - 1 - y, x);
    return out;
}

// Right-angle rotation plus optional flips, image and mask transformed jointly;
// fully determined by the seed.
inline RasterSample augment(const RasterSample& s, std::uint64_t seed) {
    Rng rng(seed);
    const int k = static_cast<int>(rng.uniform_int(0, 3));
    const bool fh = rng.coin();
    const bool fv = rng.coin();
    RasterSample out;
    out.source_id = s.source_id;
    out.window = s.window;
    out.image = rotate90(s.image, k);
    if (fh) out.image = flip_h(out.image);
    if (fv) out.image = flip_v(out.image);
    if (s.mask) {
        MaskU8 m = rotate90(*s.mask, k);
        if (fh) m = flip_h(m);
        if (fv) m = flip_v(m);
        out.mask = std::move(m);
    }
    return out;
}

}  // namespace urbansam
