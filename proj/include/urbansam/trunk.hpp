#pragma once

#include <string>
#include <vector>

#include "urbansam/alignment.hpp"
#include "urbansam/core/graph.hpp"
#include "urbansam/core/rng.hpp"
#include "urbansam/layers.hpp"

namespace urbansam {

// Frozen vision-transformer trunk standing in for a SAM-style image encoder at
// toy scale. All parameters are frozen; adaptation happens only through LoRA
// deltas on the attention projections.
struct TrunkConfig {
    Eigen::Index image_size = 64;
    Eigen::Index patch_size = 16;
    Eigen::Index embed_dim = 64;
    Eigen::Index num_stages = 4;
    Eigen::Index blocks_per_stage = 1;
    Eigen::Index num_heads = 4;
    double mlp_ratio = 4.0;

    Eigen::Index token_grid() const { return image_size / patch_size; }
    Eigen::Index num_blocks() const { return num_stages * blocks_per_stage; }

    void validate() const {
        if (image_size % patch_size != 0)
            throw ConfigError("image_size " + std::to_string(image_size) +
                              " not divisible by patch_size " + std::to_string(patch_size));
        if (embed_dim % num_heads != 0)
            throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                              " not divisible by num_heads " + std::to_string(num_heads));
        if (num_stages < 1 || blocks_per_stage < 1) throw ConfigError("trunk needs >= 1 block");
        if (mlp_ratio <= 0) throw ConfigError("mlp_ratio must be positive");
    }
};

template <class S>
struct TrunkBlock {
    LayerNormLayer<S> ln1, ln2;
    LinearLayer<S> wq, wk, wv, wo;
    LinearLayer<S> fc1, fc2;
    Eigen::Index heads = 1;
    Eigen::Index dim = 0;

    TrunkBlock() = default;
    TrunkBlock(const std::string& name, Eigen::Index d, Eigen::Index num_heads, Eigen::Index hidden,
               Rng& rng)
        : ln1(name + ".ln1", d, false),
          ln2(name + ".ln2", d, false),
          wq(name + ".attn.q", d, d, rng, false),
          wk(name + ".attn.k", d, d, rng, false),
          wv(name + ".attn.v", d, d, rng, false),
          wo(name + ".attn.o", d, d, rng, false),
          fc1(name + ".mlp.fc1", d, hidden, rng, false),
          fc2(name + ".mlp.fc2", hidden, d, rng, false),
          heads(num_heads),
          dim(d) {}

    Var<S> attention(Graph<S>& g, Var<S> x, LoRASet<S>* lora, int block_index) {
        auto proj = [&](LinearLayer<S>& lin, const char* target) {
            LoRAPair<S>* pair = lora ? lora->find(block_index, target) : nullptr;
            return lora_linear(g, x, lin, pair);
        };
        Var<S> q = proj(wq, "Q");
        Var<S> k = proj(wk, "K");
        Var<S> v = proj(wv, "V");
        const Eigen::Index dh = dim / heads;
        std::vector<Var<S>> head_outs;
        head_outs.reserve(static_cast<std::size_t>(heads));
        for (Eigen::Index h = 0; h < heads; ++h) {
            Var<S> qh = slice_cols(q, h * dh, (h + 1) * dh);
            Var<S> kh = slice_cols(k, h * dh, (h + 1) * dh);
            Var<S> vh = slice_cols(v, h * dh, (h + 1) * dh);
            Var<S> logits = scale(matmul(qh, transpose(kh)), S(1) / std::sqrt(static_cast<S>(dh)));
            head_outs.push_back(matmul(softmax_rows(logits), vh));
        }
        Var<S> merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
        LoRAPair<S>* po = lora ? lora->find(block_index, "O") : nullptr;
        return lora_linear(g, merged, wo, po);
    }

    // Pre-norm transformer block on a token matrix [N, dim].
    Var<S> operator()(Graph<S>& g, Var<S> x, LoRASet<S>* lora, int block_index) {
        x = add(x, attention(g, ln1(g, x), lora, block_index));
        x = add(x, fc2(g, relu(fc1(g, ln2(g, x)))));
        return x;
    }

    void params(ParamList<S>& out) {
        ln1.params(out);
        ln2.params(out);
        wq.params(out);
        wk.params(out);
        wv.params(out);
        wo.params(out);
        fc1.params(out);
        fc2.params(out);
    }
};

template <class S>
struct TrunkEncoder {
    TrunkConfig cfg;
    Conv2dLayer<S> patch_conv;
    Param<S> pos;  // [embed_dim, grid, grid], added at the stem
    std::vector<TrunkBlock<S>> blocks;

    TrunkEncoder() = default;
    TrunkEncoder(const TrunkConfig& c, Rng& rng)
        : cfg(c),
          patch_conv("trunk.patch_embed", 3, c.embed_dim, c.patch_size, c.patch_size, 0, rng,
                     false),
          pos("trunk.pos", Tensor<S>({c.embed_dim, c.token_grid(), c.token_grid()}), false) {
        cfg.validate();
        init::gaussian(pos.value, rng, 0.02);
        const auto hidden = static_cast<Eigen::Index>(c.embed_dim * c.mlp_ratio);
        for (Eigen::Index b = 0; b < c.num_blocks(); ++b)
            blocks.emplace_back("trunk.block" + std::to_string(b + 1), c.embed_dim, c.num_heads,
                                hidden, rng);
    }

    // Patch embedding + positional grid; output [embed_dim, g, g].
    // `image` is a [3,S,S] map scaled to [0,1]. Sizes other than the configured
    // one are only accepted when allow_any_size is set (the positional grid is
    // then bilinearly resized, weights untouched).
    Var<S> patch_embed(Graph<S>& g, Var<S> image, bool allow_any_size = false) {
        const auto& im = g.val(image);
        if (im.rank() != 3 || im.dim(0) != 3)
            throw ConfigError("patch_embed: expected [3,H,W] image, got " + im.shape_str());
        if (!allow_any_size && (im.dim(1) != cfg.image_size || im.dim(2) != cfg.image_size))
            throw ConfigError("patch_embed: image is " + std::to_string(im.dim(1)) + "x" +
                              std::to_string(im.dim(2)) + " but config image_size is " +
                              std::to_string(cfg.image_size));
        if (im.dim(1) % cfg.patch_size != 0 || im.dim(2) % cfg.patch_size != 0)
            throw ConfigError("patch_embed: image " + std::to_string(im.dim(1)) + "x" +
                              std::to_string(im.dim(2)) + " not divisible by patch_size " +
                              std::to_string(cfg.patch_size));
        Var<S> x = patch_conv(g, image);
        Var<S> p = g.param(pos);
        const auto& xv = g.val(x);
        p = resize_bilinear(p, xv.dim(1), xv.dim(2));
        return add(x, p);
    }

    // One trunk stage on a [D,h,w] feature map; shape-preserving.
    Var<S> stage(Graph<S>& g, Var<S> x, int stage_index, LoRASet<S>* lora) {
        const auto& xv = g.val(x);
        if (xv.dim(0) != cfg.embed_dim)
            throw ConfigError("trunk_stage: feature channels " + std::to_string(xv.dim(0)) +
                              " != embed_dim " + std::to_string(cfg.embed_dim));
        const Eigen::Index h = xv.dim(1), w = xv.dim(2);
        Var<S> t = chw_to_tokens(x);
        for (Eigen::Index b = 0; b < cfg.blocks_per_stage; ++b) {
            const int block_index =
                static_cast<int>((stage_index - 1) * cfg.blocks_per_stage + b + 1);
            t = blocks[static_cast<std::size_t>(block_index - 1)](g, t, lora, block_index);
            g.check_finite(t, "trunk stage " + std::to_string(stage_index) + " block " +
                                  std::to_string(block_index));
        }
        return tokens_to_chw(t, h, w);
    }

    void params(ParamList<S>& out) {
        patch_conv.params(out);
        out.push_back(&pos);
        for (auto& b : blocks) b.params(out);
    }
};

// Attach LoRA pairs to the named projections of every trunk block.
template <class S>
LoRASet<S> attach_lora(const TrunkEncoder<S>& trunk, const std::set<std::string>& targets,
                       Eigen::Index rank, S alpha, Rng& rng) {
    for (const auto& t : targets)
        if (!lora_valid_targets().count(t)) {
            std::string valid;
            for (const auto& v : lora_valid_targets()) valid += (valid.empty() ? "" : ",") + v;
            throw ConfigError("unknown lora target '" + t + "' (valid: " + valid + ")");
        }
    if (rank < 1) throw ConfigError("lora rank must be >= 1, got " + std::to_string(rank));
    LoRASet<S> set;
    set.rank = rank;
    set.alpha = alpha;
    set.targets = targets;
    const Eigen::Index d = trunk.cfg.embed_dim;
    for (Eigen::Index b = 1; b <= trunk.cfg.num_blocks(); ++b)
        for (const auto& t : targets)
            set.pairs.emplace(
                std::make_pair(static_cast<int>(b), t),
                LoRAPair<S>("lora." + std::to_string(b) + "." + t, d, d, rank, alpha, rng));
    return set;
}

}  // namespace urbansam
