#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "testutil.hpp"
#include "urbansam/core/checkpoint.hpp"
#include "urbansam/model.hpp"

using namespace urbansam;
using testutil::random_tensor;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.trunk.image_size = 16;
    cfg.trunk.patch_size = 8;
    cfg.trunk.embed_dim = 8;
    cfg.trunk.num_stages = 2;
    cfg.trunk.num_heads = 2;
    cfg.adapter.num_modules = 2;
    cfg.adapter.channels = 4;
    cfg.attn_dim = 8;
    cfg.decoder_fuse_channels = 4;
    cfg.decoder_ladder_channels = 4;
    cfg.decoder_skip_channels = 2;
    cfg.decoder_mlp_hidden = 8;
    cfg.lora_rank = 2;
    cfg.lora_alpha = 4.0;
    return cfg;
}

}  // namespace

TEST_CASE("save then load then save is byte-identical") {
    auto dir = std::filesystem::temp_directory_path() / "urbansam_ckpt_a";
    auto dir2 = std::filesystem::temp_directory_path() / "urbansam_ckpt_b";
    Rng rng(1);
    StateDict sd;
    sd.emplace("alpha.weight", random_tensor({3, 4}, rng));
    sd.emplace("beta.bias", random_tensor({7}, rng));
    sd.emplace("gamma", Tensor<double>::scalar(0.123456789));
    save_checkpoint(dir, sd);
    StateDict back = load_checkpoint(dir);
    save_checkpoint(dir2, back);
    CHECK(slurp(dir / "manifest.json") == slurp(dir2 / "manifest.json"));
    CHECK(slurp(dir / "weights.bin") == slurp(dir2 / "weights.bin"));
    CHECK(!slurp(dir / "manifest.json").empty());
}

TEST_CASE("manifest records shape, dtype, offsets and file") {
    auto dir = std::filesystem::temp_directory_path() / "urbansam_ckpt_c";
    Rng rng(2);
    StateDict sd;
    sd.emplace("a", random_tensor({2, 3}, rng));
    sd.emplace("b", random_tensor({4}, rng));
    save_checkpoint(dir, sd);
    std::ifstream mf(dir / "manifest.json");
    nlohmann::json manifest;
    mf >> manifest;
    CHECK(manifest.at("a").at("shape") == nlohmann::json({2, 3}));
    CHECK(manifest.at("a").at("dtype") == "f64");
    CHECK(manifest.at("a").at("byte_offset") == 0);
    CHECK(manifest.at("a").at("file") == "weights.bin");
    CHECK(manifest.at("b").at("byte_offset") == 48);  // after the 6 doubles of "a"
}

TEST_CASE("model state dict round-trips through a checkpoint directory") {
    auto dir = std::filesystem::temp_directory_path() / "urbansam_ckpt_d";
    UrbanSamModel<double> model(tiny_cfg(), 7);
    Rng rx(3);
    Tensor<double> img = random_tensor({3, 16, 16}, rx, 0.0, 1.0);
    Tensor<double> before;
    {
        Graph<double> g;
        before = g.val(model.forward(g, img).seg_logits);
    }
    save_checkpoint(dir, model.state_dict());

    UrbanSamModel<double> other(tiny_cfg(), 99);  // different seed, then overwritten
    other.load_state_dict(load_checkpoint(dir));
    Tensor<double> after;
    {
        Graph<double> g;
        after = g.val(other.forward(g, img).seg_logits);
    }
    CHECK((before.array() - after.array()).abs().maxCoeff() == 0.0);
}

TEST_CASE("loading rejects missing tensors and wrong shapes") {
    auto dir = std::filesystem::temp_directory_path() / "urbansam_ckpt_e";
    UrbanSamModel<double> model(tiny_cfg(), 7);
    StateDict sd = model.state_dict();
    sd.erase(sd.begin()->first);
    save_checkpoint(dir, sd);
    UrbanSamModel<double> other(tiny_cfg(), 8);
    CHECK_THROWS_AS(other.load_state_dict(load_checkpoint(dir)), DataError);
}

TEST_CASE("tensor checksums are order and content sensitive") {
    Rng rng(4);
    Tensor<double> a = random_tensor({8}, rng);
    Tensor<double> b = a;
    CHECK(tensor_checksum(a) == tensor_checksum(b));
    b[3] += 1e-16;
    CHECK(tensor_checksum(a) != tensor_checksum(b));
}
