#include "urbansam/data/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <vector>

namespace urbansam {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::string lower_ext(const std::filesystem::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e;
}

}  // namespace

ImageU8 read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw DataError("cannot open " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("libpng init failed for " + path.string());
    }
    std::vector<png_bytep> rows;
    std::vector<png_byte> buf;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("failed to decode PNG " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const png_size_t rowbytes = png_get_rowbytes(png, info);
    const int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("unsupported PNG channel count in " + path.string());
    }
    buf.resize(rowbytes * h);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    ImageU8 img(channels, static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
    for (Eigen::Index y = 0; y < img.height; ++y)
        for (Eigen::Index x = 0; x < img.width; ++x)
            for (Eigen::Index c = 0; c < img.channels; ++c)
                img.at(c, y, x) = buf[static_cast<std::size_t>(y) * rowbytes +
                                      static_cast<std::size_t>(x * channels + c)];
    return img;
}

void write_png(const std::filesystem::path& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw DataError("write_png: image must have 1 or 3 channels");
    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw DataError("cannot write " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw DataError("libpng init failed for " + path.string());
    }
    std::vector<png_byte> row(static_cast<std::size_t>(img.width * img.channels));
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("failed to encode PNG " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
                 8, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (Eigen::Index y = 0; y < img.height; ++y) {
        for (Eigen::Index x = 0; x < img.width; ++x)
            for (Eigen::Index c = 0; c < img.channels; ++c)
                row[static_cast<std::size_t>(x * img.channels + c)] = img.at(c, y, x);
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// --- Baseline TIFF: uncompressed, 8-bit, chunky ----------------------------

namespace {

struct TiffReader {
    std::vector<unsigned char> bytes;
    bool little = true;

    std::uint16_t u16(std::size_t off) const {
        if (off + 2 > bytes.size()) throw DataError("truncated TIFF");
        return little ? static_cast<std::uint16_t>(bytes[off] | (bytes[off + 1] << 8))
                      : static_cast<std::uint16_t>((bytes[off] << 8) | bytes[off + 1]);
    }
    std::uint32_t u32(std::size_t off) const {
        if (off + 4 > bytes.size()) throw DataError("truncated TIFF");
        if (little)
            return static_cast<std::uint32_t>(bytes[off]) |
                   (static_cast<std::uint32_t>(bytes[off + 1]) << 8) |
                   (static_cast<std::uint32_t>(bytes[off + 2]) << 16) |
                   (static_cast<std::uint32_t>(bytes[off + 3]) << 24);
        return (static_cast<std::uint32_t>(bytes[off]) << 24) |
               (static_cast<std::uint32_t>(bytes[off + 1]) << 16) |
               (static_cast<std::uint32_t>(bytes[off + 2]) << 8) |
               static_cast<std::uint32_t>(bytes[off + 3]);
    }
};

struct TiffEntry {
    std::uint16_t type = 0;
    std::uint32_t count = 0;
    std::size_t value_base = 0;  // where the values live (inline or at offset)
};

std::uint32_t tiff_value_at(const TiffReader& r, const TiffEntry& e, std::uint32_t index) {
    if (e.type == 3) return r.u16(e.value_base + 2 * index);  // SHORT
    return r.u32(e.value_base + 4 * index);                   // LONG
}

void put16(std::vector<unsigned char>& v, std::uint16_t x) {
    v.push_back(static_cast<unsigned char>(x & 0xff));
    v.push_back(static_cast<unsigned char>(x >> 8));
}
void put32(std::vector<unsigned char>& v, std::uint32_t x) {
    for (int i = 0; i < 4; ++i) v.push_back(static_cast<unsigned char>((x >> (8 * i)) & 0xff));
}

}  // namespace

ImageU8 read_tiff(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path.string());
    TiffReader r;
    r.bytes.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    if (r.bytes.size() < 8) throw DataError("not a TIFF: " + path.string());
    if (r.bytes[0] == 'I' && r.bytes[1] == 'I')
        r.little = true;
    else if (r.bytes[0] == 'M' && r.bytes[1] == 'M')
        r.little = false;
    else
        throw DataError("not a TIFF: " + path.string());
    if (r.u16(2) != 42) throw DataError("not a TIFF: " + path.string());

    const std::uint32_t ifd = r.u32(4);
    const std::uint16_t n = r.u16(ifd);
    std::uint32_t width = 0, height = 0, bits = 8, compression = 1, photometric = 1, spp = 1;
    std::vector<std::uint32_t> strip_offsets, strip_counts;

    for (std::uint16_t i = 0; i < n; ++i) {
        const std::size_t eoff = ifd + 2 + 12u * i;
        const std::uint16_t tag = r.u16(eoff);
        TiffEntry e;
        e.type = r.u16(eoff + 2);
        e.count = r.u32(eoff + 4);
        const std::size_t elem = e.type == 3 ? 2 : 4;
        e.value_base = (elem * e.count <= 4) ? eoff + 8 : r.u32(eoff + 8);
        auto val0 = [&]() { return tiff_value_at(r, e, 0); };
        switch (tag) {
            case 256: width = val0(); break;
            case 257: height = val0(); break;
            case 258: bits = val0(); break;
            case 259: compression = val0(); break;
            case 262: photometric = val0(); break;
            case 277: spp = val0(); break;
            case 273:
                for (std::uint32_t k = 0; k < e.count; ++k)
                    strip_offsets.push_back(tiff_value_at(r, e, k));
                break;
            case 279:
                for (std::uint32_t k = 0; k < e.count; ++k)
                    strip_counts.push_back(tiff_value_at(r, e, k));
                break;
            default: break;
        }
    }
    if (compression != 1) throw DataError("TIFF " + path.string() + ": only uncompressed supported");
    if (bits != 8) throw DataError("TIFF " + path.string() + ": only 8-bit supported");
    if (spp != 1 && spp != 3) throw DataError("TIFF " + path.string() + ": unsupported sample count");
    if (photometric > 2) throw DataError("TIFF " + path.string() + ": unsupported photometric");
    if (width == 0 || height == 0 || strip_offsets.empty())
        throw DataError("TIFF " + path.string() + ": missing required tags");

    std::vector<unsigned char> data;
    data.reserve(static_cast<std::size_t>(width) * height * spp);
    for (std::size_t s = 0; s < strip_offsets.size(); ++s) {
        const std::uint32_t off = strip_offsets[s];
        const std::uint32_t cnt = s < strip_counts.size()
                                      ? strip_counts[s]
                                      : static_cast<std::uint32_t>(width * height * spp);
        if (off + cnt > r.bytes.size())
            throw DataError("TIFF " + path.string() + ": strip out of range");
        data.insert(data.end(), r.bytes.begin() + off, r.bytes.begin() + off + cnt);
    }
    if (data.size() < static_cast<std::size_t>(width) * height * spp)
        throw DataError("TIFF " + path.string() + ": pixel data truncated");

    ImageU8 img(static_cast<Eigen::Index>(spp), static_cast<Eigen::Index>(height),
                static_cast<Eigen::Index>(width));
    std::size_t k = 0;
    for (Eigen::Index y = 0; y < img.height; ++y)
        for (Eigen::Index x = 0; x < img.width; ++x)
            for (Eigen::Index c = 0; c < img.channels; ++c) img.at(c, y, x) = data[k++];
    if (photometric == 0)  // white-is-zero
        for (auto& p : img.pixels) p = static_cast<unsigned char>(255 - p);
    return img;
}

void write_tiff(const std::filesystem::path& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw DataError("write_tiff: image must have 1 or 3 channels");
    std::vector<unsigned char> out;
    out.reserve(img.pixels.size() + 256);
    out.push_back('I');
    out.push_back('I');
    put16(out, 42);
    const std::uint32_t data_off = 8;
    const auto data_len = static_cast<std::uint32_t>(img.pixels.size());
    put32(out, data_off + data_len + (data_len % 2));  // IFD offset, word aligned

    for (Eigen::Index y = 0; y < img.height; ++y)
        for (Eigen::Index x = 0; x < img.width; ++x)
            for (Eigen::Index c = 0; c < img.channels; ++c) out.push_back(img.at(c, y, x));
    if (data_len % 2) out.push_back(0);

    struct E {
        std::uint16_t tag, type;
        std::uint32_t count, value;
    };
    const std::uint16_t SHORT = 3, LONG = 4;
    std::vector<E> entries = {
        {256, LONG, 1, static_cast<std::uint32_t>(img.width)},
        {257, LONG, 1, static_cast<std::uint32_t>(img.height)},
        {258, SHORT, 1, 8},
        {259, SHORT, 1, 1},
        {262, SHORT, 1, static_cast<std::uint32_t>(img.channels == 1 ? 1 : 2)},
        {273, LONG, 1, data_off},
        {277, SHORT, 1, static_cast<std::uint32_t>(img.channels)},
        {278, LONG, 1, static_cast<std::uint32_t>(img.height)},
        {279, LONG, 1, data_len},
    };
    // RGB needs three BitsPerSample shorts, which do not fit inline; they are
    // appended right after the IFD.
    const bool rgb = img.channels == 3;
    const auto ifd_off = static_cast<std::uint32_t>(out.size());
    const auto ifd_len = static_cast<std::uint32_t>(2 + 12 * entries.size() + 4);
    if (rgb) entries[2] = {258, SHORT, 3, ifd_off + ifd_len};

    put16(out, static_cast<std::uint16_t>(entries.size()));
    for (const auto& e : entries) {
        put16(out, e.tag);
        put16(out, e.type);
        put32(out, e.count);
        if (e.type == SHORT && e.count == 1) {
            put16(out, static_cast<std::uint16_t>(e.value));
            put16(out, 0);
        } else {
            put32(out, e.value);
        }
    }
    put32(out, 0);  // no next IFD
    if (rgb) {
        put16(out, 8);
        put16(out, 8);
        put16(out, 8);
    }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

ImageU8 read_image(const std::filesystem::path& path) {
    const auto ext = lower_ext(path);
    if (ext == ".png") return read_png(path);
    if (ext == ".tif" || ext == ".tiff") return read_tiff(path);
    throw DataError("unsupported image format: " + path.string());
}

void write_image(const std::filesystem::path& path, const ImageU8& img) {
    const auto ext = lower_ext(path);
    if (ext == ".png") return write_png(path, img);
    if (ext == ".tif" || ext == ".tiff") return write_tiff(path, img);
    throw DataError("unsupported image format: " + path.string());
}

}  // namespace urbansam
