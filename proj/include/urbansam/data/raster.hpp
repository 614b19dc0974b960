#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "urbansam/core/errors.hpp"
#include "urbansam/core/tensor.hpp"

namespace urbansam {

// 8-bit raster in channel-major layout ([c][y][x]), 1 or 3 channels.
struct ImageU8 {
    Eigen::Index channels = 0, height = 0, width = 0;
    std::vector<std::uint8_t> pixels;

    ImageU8() = default;
    ImageU8(Eigen::Index c, Eigen::Index h, Eigen::Index w)
        : channels(c), height(h), width(w), pixels(static_cast<std::size_t>(c * h * w), 0) {}

    std::uint8_t& at(Eigen::Index c, Eigen::Index y, Eigen::Index x) {
        return pixels[static_cast<std::size_t>((c * height + y) * width + x)];
    }
    std::uint8_t at(Eigen::Index c, Eigen::Index y, Eigen::Index x) const {
        return pixels[static_cast<std::size_t>((c * height + y) * width + x)];
    }
    bool empty() const { return pixels.empty(); }
};

// Binary mask with values in {0,1}.
struct MaskU8 {
    Eigen::Index height = 0, width = 0;
    std::vector<std::uint8_t> values;

    MaskU8() = default;
    MaskU8(Eigen::Index h, Eigen::Index w) : height(h), width(w), values(static_cast<std::size_t>(h * w), 0) {}

    std::uint8_t& at(Eigen::Index y, Eigen::Index x) {
        return values[static_cast<std::size_t>(y * width + x)];
    }
    std::uint8_t at(Eigen::Index y, Eigen::Index x) const {
        return values[static_cast<std::size_t>(y * width + x)];
    }

    std::size_t count_foreground() const {
        std::size_t n = 0;
        for (auto v : values) n += (v != 0);
        return n;
    }
    bool empty_mask() const { return count_foreground() == 0; }
};

// Source window (row, col, h, w) a sample was cut from; used for stitching.
struct Window {
    Eigen::Index row = 0, col = 0, h = 0, w = 0;
};

struct RasterSample {
    ImageU8 image;                 // [3,H,W]
    std::optional<MaskU8> mask;    // matches image dims when present
    std::string source_id;
    Window window;

    void validate() const {
        if (image.channels != 3) throw ValidationError("RasterSample: image must have 3 channels");
        if (mask && (mask->height != image.height || mask->width != image.width))
            throw ValidationError("RasterSample: mask dims do not match image dims");
        if (mask)
            for (auto v : mask->values)
                if (v > 1) throw ValidationError("RasterSample: mask values must be in {0,1}");
    }
};

// Model input: [3,H,W] scaled to [0,1].
template <class S>
Tensor<S> to_model_input(const ImageU8& img) {
    Tensor<S> t({img.channels, img.height, img.width});
    for (Eigen::Index i = 0; i < t.numel(); ++i)
        t[i] = static_cast<S>(img.pixels[static_cast<std::size_t>(i)]) / S(255);
    return t;
}

template <class S>
Tensor<S> mask_to_tensor(const MaskU8& m) {
    Tensor<S> t({1, m.height, m.width});
    for (Eigen::Index i = 0; i < t.numel(); ++i)
        t[i] = static_cast<S>(m.values[static_cast<std::size_t>(i)]);
    return t;
}

// Probability map [1,H,W] -> 8-bit image, values scaled x255 and rounded half-up.
template <class S>
ImageU8 prob_to_image(const Tensor<S>& prob) {
    ImageU8 img(1, prob.dim(1), prob.dim(2));
    for (Eigen::Index i = 0; i < prob.numel(); ++i) {
        double v = static_cast<double>(prob[i]);
        v = v < 0 ? 0 : (v > 1 ? 1 : v);
        img.pixels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
    }
    return img;
}

template <class S>
MaskU8 threshold_prob(const Tensor<S>& prob, double thresh = 0.5) {
    MaskU8 m(prob.dim(1), prob.dim(2));
    for (Eigen::Index i = 0; i < prob.numel(); ++i)
        m.values[static_cast<std::size_t>(i)] = prob[i] >= static_cast<S>(thresh) ? 1 : 0;
    return m;
}

inline ImageU8 mask_to_image(const MaskU8& m) {
    ImageU8 img(1, m.height, m.width);
    for (std::size_t i = 0; i < m.values.size(); ++i) img.pixels[i] = m.values[i] ? 255 : 0;
    return img;
}

inline MaskU8 image_to_mask(const ImageU8& img) {
    if (img.channels != 1) throw DataError("mask images must be single-channel");
    MaskU8 m(img.height, img.width);
    for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = img.pixels[i] >= 128 ? 1 : 0;
    return m;
}

}  // namespace urbansam
