#pragma once

#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "urbansam/adapter.hpp"
#include "urbansam/alignment.hpp"
#include "urbansam/core/checkpoint.hpp"
#include "urbansam/core/graph.hpp"
#include "urbansam/core/rng.hpp"
#include "urbansam/decoder.hpp"
#include "urbansam/prompt.hpp"
#include "urbansam/trunk.hpp"

namespace urbansam {

struct ModelConfig {
    TrunkConfig trunk;
    UScalingConfig adapter;
    Eigen::Index attn_dim = 0;  // 0 -> embed_dim
    Eigen::Index decoder_fuse_channels = 24;
    Eigen::Index decoder_ladder_channels = 24;
    Eigen::Index decoder_skip_channels = 8;
    Eigen::Index decoder_mlp_hidden = 0;  // 0 -> embed_dim

    bool lora_enabled = true;
    Eigen::Index lora_rank = 4;
    double lora_alpha = 8.0;  // alpha = 2 * rank by default
    std::set<std::string> lora_targets = {"Q", "V"};

    // Component toggles for the ablation protocols.
    bool use_interaction = true;
    bool use_multiscale = true;  // false: adapters collapse to single-scale conv streams
    bool use_hier_decoder = true;
    bool decoder_lora = false;  // freeze the decoder MLP base, train low-rank deltas

    Eigen::Index stem_stride() const { return std::max<Eigen::Index>(1, trunk.patch_size / 8); }
    Eigen::Index adapter_ratio() const { return trunk.patch_size / stem_stride(); }
    Eigen::Index adapter_grid() const { return trunk.image_size / stem_stride(); }
    Eigen::Index d_c() const { return attn_dim > 0 ? attn_dim : trunk.embed_dim; }

    void validate() const {
        trunk.validate();
        adapter.validate();
        if (adapter.num_modules != trunk.num_stages)
            throw ConfigError("adapter has " + std::to_string(adapter.num_modules) +
                              " modules but trunk has " + std::to_string(trunk.num_stages) +
                              " stages; they must match");
        if (adapter_grid() % adapter.required_divisor() != 0)
            throw ConfigError("adapter grid " + std::to_string(adapter_grid()) +
                              " not divisible by " + std::to_string(adapter.required_divisor()));
        if (lora_enabled && lora_rank < 1) throw ConfigError("lora rank must be >= 1");
    }
};

// Spec'd per-stage pairing of trunk features, adapter features and the stage mask.
template <class S>
struct StageBundle {
    int stage_index = 0;
    Var<S> f_v;        // trunk features entering the interaction
    Var<S> f_u;        // adapter features on the trunk token grid
    Var<S> stage_mask;  // probability map on the token grid
};

template <class S>
struct ForwardOutputs {
    Var<S> seg_logits;       // [1,S,S]
    Var<S> final_prob;       // sigmoid(seg_logits)
    Var<S> aux_logits;       // [1,S/4,S/4]
    Var<S> quarter_prob;
    std::vector<Var<S>> stage_soft;  // per-stage probability maps on the token grid
    PromptOutputs<S> prompt;
    std::vector<StageBundle<S>> bundles;

    // The five deep-supervision masks: four stage maps plus the prompt map.
    // The hard prompt (straight-through) is the trained surface; the soft map
    // backs the finite-difference checks.
    std::vector<Var<S>> supervision_masks(bool hard_prompt = true) const {
        std::vector<Var<S>> v = stage_soft;
        v.push_back(hard_prompt ? prompt.hard : prompt.soft);
        return v;
    }
};

template <class S>
class UrbanSamModel {
public:
    ModelConfig cfg;
    TrunkEncoder<S> trunk;
    Conv2dLayer<S> stem;
    AdapterStack<S> adapter;
    std::vector<CrossMaskedAttention<S>> xattn;
    std::vector<Conv2dLayer<S>> mask_heads;
    PromptHead<S> prompt_head;
    ConsistencyDecoder<S> decoder;
    Conv2dLayer<S> simple_head;  // replaces the hierarchical decoder when ablated
    std::optional<LoRASet<S>> lora;
    std::vector<LoRAPair<S>> decoder_mlp_lora;

    explicit UrbanSamModel(const ModelConfig& c, std::uint64_t seed) : cfg(c) {
        cfg.validate();
        Rng rng(seed);
        trunk = TrunkEncoder<S>(cfg.trunk, rng);
        stem = Conv2dLayer<S>("adapter.stem", 3, cfg.adapter.channels, 3, cfg.stem_stride(), 1, rng);
        UScalingConfig acfg = cfg.adapter;
        acfg.single_scale = !cfg.use_multiscale;
        adapter = AdapterStack<S>(acfg, rng);
        const Eigen::Index d = cfg.trunk.embed_dim;
        for (Eigen::Index s = 1; s <= cfg.trunk.num_stages; ++s) {
            xattn.emplace_back("xattn." + std::to_string(s), d, cfg.adapter.channels, cfg.d_c(), rng);
            mask_heads.emplace_back("maskhead." + std::to_string(s), d, 1, 1, 1, 0, rng);
        }
        prompt_head = PromptHead<S>(cfg.trunk.num_stages, rng);
        DecoderConfig dc;
        dc.trunk_dim = d;
        dc.adapter_channels = cfg.adapter.channels;
        dc.fuse_channels = cfg.decoder_fuse_channels;
        dc.ladder_channels = cfg.decoder_ladder_channels;
        dc.skip_channels = cfg.decoder_skip_channels;
        dc.mlp_hidden = cfg.decoder_mlp_hidden > 0 ? cfg.decoder_mlp_hidden : d;
        dc.patch_size = cfg.trunk.patch_size;
        dc.adapter_ratio = cfg.adapter_ratio();
        decoder = ConsistencyDecoder<S>(dc, rng);
        simple_head = Conv2dLayer<S>("head", d, 1, 1, 1, 0, rng);
        // LoRA last so the base weights are seed-identical with and without it.
        if (cfg.lora_enabled)
            lora = attach_lora(trunk, cfg.lora_targets, cfg.lora_rank,
                               static_cast<S>(cfg.lora_alpha), rng);
        if (cfg.decoder_lora) {
            LinearLayer<S>* mlps[3] = {&decoder.mlp1, &decoder.mlp2, &decoder.mlp3};
            for (int i = 0; i < 3; ++i) {
                mlps[i]->weight.trainable = false;
                mlps[i]->bias.trainable = false;
                decoder_mlp_lora.emplace_back("lora.dec.l" + std::to_string(i + 1),
                                              mlps[i]->weight.value.dim(0),
                                              mlps[i]->weight.value.dim(1), cfg.lora_rank,
                                              static_cast<S>(cfg.lora_alpha), rng);
            }
            for (int i = 0; i < 3; ++i) decoder.mlp_lora[static_cast<std::size_t>(i)] = &decoder_mlp_lora[static_cast<std::size_t>(i)];
        }
    }

    UrbanSamModel(const UrbanSamModel&) = delete;
    UrbanSamModel& operator=(const UrbanSamModel&) = delete;

    LoRASet<S>* lora_set() { return lora ? &*lora : nullptr; }

    // Full forward pass. `image` is [3,S,S] scaled to [0,1]; S must equal the
    // configured image size unless allow_any_size (then S just has to satisfy
    // the patch and pooling divisibility constraints).
    ForwardOutputs<S> forward(Graph<S>& g, const Tensor<S>& image, bool allow_any_size = false) {
        ForwardOutputs<S> out;
        Var<S> img = g.constant(image);

        Var<S> stem_out = relu(stem(g, img));
        AdapterStackResult<S> ad = adapter(g, stem_out);

        Var<S> x = trunk.patch_embed(g, img, allow_any_size);
        const Eigen::Index gh = g.val(x).dim(1), gw = g.val(x).dim(2);
        Var<S> ones = g.constant(Tensor<S>::full({1, gh, gw}, S(1)));

        Var<S> f_v_last;
        for (Eigen::Index s = 1; s <= cfg.trunk.num_stages; ++s) {
            x = trunk.stage(g, x, static_cast<int>(s), lora_set());
            f_v_last = x;
            Var<S> f_u = ad.exports[static_cast<std::size_t>(s - 1)];
            if (cfg.use_interaction) {
                // no prediction exists ahead of stage 1, so its gate is all-ones
                Var<S> m_in = s == 1 ? ones : out.stage_soft[static_cast<std::size_t>(s - 2)];
                x = xattn[static_cast<std::size_t>(s - 1)](g, x, f_u, m_in);
            }
            Var<S> logit = mask_heads[static_cast<std::size_t>(s - 1)](g, x);
            Var<S> soft = sigmoid(logit);
            out.stage_soft.push_back(soft);
            out.bundles.push_back({static_cast<int>(s), f_v_last,
                                   resize_bilinear(f_u, gh, gw), soft});
        }

        out.prompt = prompt_head(g, out.stage_soft);

        if (cfg.use_hier_decoder) {
            DecoderState<S> st = decoder(g, f_v_last, ad.exports.back(), out.prompt.soft, x,
                                         &ad.pyramids.back());
            out.seg_logits = st.seg_logits;
            out.aux_logits = st.aux_quarter_logits;
        } else {
            Var<S> logits_tok = simple_head(g, x);
            const Eigen::Index S_img = g.val(img).dim(1);
            out.seg_logits = resize_bilinear(logits_tok, S_img, S_img);
            out.aux_logits = resize_bilinear(logits_tok, S_img / 4, S_img / 4);
        }
        out.final_prob = sigmoid(out.seg_logits);
        out.quarter_prob = sigmoid(out.aux_logits);
        return out;
    }

    // Encoder surface with caller-supplied adapter features and gating masks,
    // one per stage; returns the per-stage bundles in order.
    std::vector<StageBundle<S>> encode(Graph<S>& g, const Tensor<S>& image,
                                       const std::vector<Var<S>>& adapter_feats,
                                       const std::vector<Var<S>>& masks) {
        const auto n = static_cast<std::size_t>(cfg.trunk.num_stages);
        if (adapter_feats.size() != n || masks.size() != n)
            throw ConfigError("encode: expected " + std::to_string(n) + " adapter features and masks, got " +
                              std::to_string(adapter_feats.size()) + " and " +
                              std::to_string(masks.size()));
        Var<S> img = g.constant(image);
        Var<S> x = trunk.patch_embed(g, img);
        const Eigen::Index gh = g.val(x).dim(1), gw = g.val(x).dim(2);
        std::vector<StageBundle<S>> bundles;
        for (Eigen::Index s = 1; s <= cfg.trunk.num_stages; ++s) {
            x = trunk.stage(g, x, static_cast<int>(s), lora_set());
            Var<S> f_v = x;
            x = xattn[static_cast<std::size_t>(s - 1)](g, x, adapter_feats[static_cast<std::size_t>(s - 1)],
                                                       masks[static_cast<std::size_t>(s - 1)]);
            bundles.push_back({static_cast<int>(s), f_v,
                               resize_bilinear(adapter_feats[static_cast<std::size_t>(s - 1)], gh, gw),
                               resize_bilinear(masks[static_cast<std::size_t>(s - 1)], gh, gw)});
        }
        return bundles;
    }

    void params(ParamList<S>& out) {
        trunk.params(out);
        stem.params(out);
        adapter.params(out);
        for (auto& a : xattn) a.params(out);
        for (auto& m : mask_heads) m.params(out);
        prompt_head.params(out);
        if (cfg.use_hier_decoder)
            decoder.params(out);
        else
            simple_head.params(out);
        if (lora) lora->params(out);
        for (auto& p : decoder_mlp_lora) p.params(out);
    }

    ParamList<S> all_params() {
        ParamList<S> v;
        params(v);
        return v;
    }

    Eigen::Index trainable_count() {
        Eigen::Index n = 0;
        for (auto* p : all_params())
            if (p->trainable) n += p->value.numel();
        return n;
    }

    Eigen::Index total_count() {
        Eigen::Index n = 0;
        for (auto* p : all_params()) n += p->value.numel();
        return n;
    }

    std::uint64_t trunk_checksum() {
        ParamList<S> v;
        trunk.params(v);
        std::uint64_t h = 1469598103934665603ULL;
        for (auto* p : v) {
            const auto th = tensor_checksum(p->value);
            h ^= th;
            h *= 1099511628211ULL;
        }
        return h;
    }

    StateDict state_dict() {
        StateDict sd;
        for (auto* p : all_params()) sd.emplace(p->name, p->value);
        return sd;
    }

    // Loads every model parameter from the dict; unknown extra entries (e.g.
    // optimizer state) are left for the caller.
    void load_state_dict(const StateDict& sd) {
        for (auto* p : all_params()) {
            auto it = sd.find(p->name);
            if (it == sd.end()) throw DataError("checkpoint missing tensor " + p->name);
            if (it->second.shape() != p->value.shape())
                throw DataError("checkpoint tensor " + p->name + " has shape " +
                                it->second.shape_str() + ", expected " + p->value.shape_str());
            p->value = it->second;
        }
    }
};

}  // namespace urbansam
