#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "urbansam/core/errors.hpp"
#include "urbansam/core/tensor.hpp"

namespace urbansam {

// Checkpoint directory layout:
//   manifest.json  — tensor name -> {shape, dtype, byte_offset, file}
//   weights.bin    — raw little-endian f64 blobs, in manifest (name-sorted) order
// Loading a checkpoint and saving it again is byte-identical: names are kept
// sorted, offsets recomputed the same way, and the JSON serializer orders keys.

inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t tensor_checksum(const Tensor<double>& t) {
    return fnv1a64(t.data(), static_cast<std::size_t>(t.numel()) * sizeof(double));
}

using StateDict = std::map<std::string, Tensor<double>>;

inline void save_checkpoint(const std::filesystem::path& dir, const StateDict& state) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : state) {
        nlohmann::json entry;
        entry["shape"] = nlohmann::json::array();
        for (auto d : t.shape()) entry["shape"].push_back(d);
        entry["dtype"] = "f64";
        entry["byte_offset"] = offset;
        entry["file"] = "weights.bin";
        manifest[name] = entry;
        offset += static_cast<std::uint64_t>(t.numel()) * sizeof(double);
    }
    {
        std::ofstream mf(dir / "manifest.json", std::ios::binary);
        if (!mf) throw DataError("cannot write " + (dir / "manifest.json").string());
        mf << manifest.dump(2) << '\n';
    }
    std::ofstream bf(dir / "weights.bin", std::ios::binary);
    if (!bf) throw DataError("cannot write " + (dir / "weights.bin").string());
    for (const auto& [name, t] : state)
        bf.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

inline StateDict load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json", std::ios::binary);
    if (!mf) throw DataError("cannot read " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    mf >> manifest;

    StateDict state;
    std::map<std::string, std::ifstream> blobs;
    for (auto it = manifest.begin(); it != manifest.end(); ++it) {
        const auto& entry = it.value();
        std::vector<Eigen::Index> shape;
        for (const auto& d : entry.at("shape")) shape.push_back(d.get<Eigen::Index>());
        if (entry.at("dtype").get<std::string>() != "f64")
            throw DataError("checkpoint tensor " + it.key() + ": unsupported dtype");
        const auto file = entry.at("file").get<std::string>();
        const auto off = entry.at("byte_offset").get<std::uint64_t>();
        auto& bf = blobs[file];
        if (!bf.is_open()) {
            bf.open(dir / file, std::ios::binary);
            if (!bf) throw DataError("cannot read " + (dir / file).string());
        }
        Tensor<double> t(shape);
        bf.seekg(static_cast<std::streamoff>(off));
        bf.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!bf) throw DataError("checkpoint blob truncated for tensor " + it.key());
        state.emplace(it.key(), std::move(t));
    }
    return state;
}

}  // namespace urbansam
