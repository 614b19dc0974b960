#pragma once

#include <filesystem>

#include "urbansam/data/raster.hpp"

namespace urbansam {

// PNG (8-bit gray/RGB via libpng) and baseline TIFF (uncompressed 8-bit
// gray/RGB, chunky). Format picked from the file extension.

ImageU8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageU8& img);

ImageU8 read_tiff(const std::filesystem::path& path);
void write_tiff(const std::filesystem::path& path, const ImageU8& img);

ImageU8 read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const ImageU8& img);

}  // namespace urbansam
