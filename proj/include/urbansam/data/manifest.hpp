#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "urbansam/data/image_io.hpp"
#include "urbansam/data/raster.hpp"

namespace urbansam {

// Dataset manifest: JSON-lines, one record per sample,
//   {"image": path, "mask": path|null, "split": "train"|"val"|"test"}
// Relative paths resolve against the manifest's directory.
struct ManifestEntry {
    std::string image;
    std::optional<std::string> mask;
    std::string split = "train";
};

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open manifest " + path.string());
    std::vector<ManifestEntry> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("manifest " + path.string() + " line " + std::to_string(lineno) + ": " +
                            e.what());
        }
        ManifestEntry e;
        e.image = j.at("image").get<std::string>();
        if (j.contains("mask") && !j.at("mask").is_null()) e.mask = j.at("mask").get<std::string>();
        if (j.contains("split")) e.split = j.at("split").get<std::string>();
        if (e.split != "train" && e.split != "val" && e.split != "test")
            throw DataError("manifest " + path.string() + " line " + std::to_string(lineno) +
                            ": unknown split '" + e.split + "'");
        out.push_back(std::move(e));
    }
    return out;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write manifest " + path.string());
    for (const auto& e : entries) {
        nlohmann::json j;
        j["image"] = e.image;
        j["mask"] = e.mask ? nlohmann::json(*e.mask) : nlohmann::json(nullptr);
        j["split"] = e.split;
        f << j.dump() << '\n';
    }
}

inline std::filesystem::path resolve_against(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
}

inline RasterSample load_sample(const ManifestEntry& e, const std::filesystem::path& manifest_dir,
                                bool require_mask = false) {
    RasterSample s;
    s.source_id = e.image;
    s.image = read_image(resolve_against(manifest_dir, e.image));
    if (s.image.channels == 1) {
        // promote grayscale input to 3 channels
        ImageU8 rgb(3, s.image.height, s.image.width);
        for (Eigen::Index y = 0; y < s.image.height; ++y)
            for (Eigen::Index x = 0; x < s.image.width; ++x)
                for (Eigen::Index c = 0; c < 3; ++c) rgb.at(c, y, x) = s.image.at(0, y, x);
        s.image = std::move(rgb);
    }
    if (e.mask) {
        s.mask = image_to_mask(read_image(resolve_against(manifest_dir, *e.mask)));
        if (s.mask->height != s.image.height || s.mask->width != s.image.width)
            throw DataError("sample " + e.image + ": mask dims do not match image");
    } else if (require_mask) {
        throw DataError("sample " + e.image + ": missing mask");
    }
    s.window = {0, 0, s.image.height, s.image.width};
    return s;
}

}  // namespace urbansam
