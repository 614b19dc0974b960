#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "urbansam/data/image_io.hpp"
#include "urbansam/data/prompt_sim.hpp"
#include "urbansam/data/resample.hpp"
#include "urbansam/data/synth.hpp"
#include "urbansam/data/tiling.hpp"
#include "urbansam/model.hpp"
#include "urbansam/train.hpp"

namespace urbansam {

// --- Model config (de)serialization -----------------------------------------

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["image_size"] = c.trunk.image_size;
    j["patch_size"] = c.trunk.patch_size;
    j["embed_dim"] = c.trunk.embed_dim;
    j["num_stages"] = c.trunk.num_stages;
    j["blocks_per_stage"] = c.trunk.blocks_per_stage;
    j["num_heads"] = c.trunk.num_heads;
    j["mlp_ratio"] = c.trunk.mlp_ratio;
    j["adapter_channels"] = c.adapter.channels;
    j["adapter_scales"] = c.adapter.num_scales;
    j["adapter_modules"] = c.adapter.num_modules;
    j["phi"] = c.adapter.phi;
    j["attn_dim"] = c.attn_dim;
    j["decoder_fuse_channels"] = c.decoder_fuse_channels;
    j["decoder_ladder_channels"] = c.decoder_ladder_channels;
    j["decoder_skip_channels"] = c.decoder_skip_channels;
    j["decoder_mlp_hidden"] = c.decoder_mlp_hidden;
    j["lora_enabled"] = c.lora_enabled;
    j["lora_rank"] = c.lora_rank;
    j["lora_alpha"] = c.lora_alpha;
    j["lora_targets"] = std::vector<std::string>(c.lora_targets.begin(), c.lora_targets.end());
    j["use_interaction"] = c.use_interaction;
    j["use_multiscale"] = c.use_multiscale;
    j["use_hier_decoder"] = c.use_hier_decoder;
    j["decoder_lora"] = c.decoder_lora;
    return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    auto get = [&](const char* k, auto& v) {
        if (j.contains(k)) v = j.at(k).get<std::decay_t<decltype(v)>>();
    };
    get("image_size", c.trunk.image_size);
    get("patch_size", c.trunk.patch_size);
    get("embed_dim", c.trunk.embed_dim);
    get("num_stages", c.trunk.num_stages);
    get("blocks_per_stage", c.trunk.blocks_per_stage);
    get("num_heads", c.trunk.num_heads);
    get("mlp_ratio", c.trunk.mlp_ratio);
    get("adapter_channels", c.adapter.channels);
    get("adapter_scales", c.adapter.num_scales);
    get("phi", c.adapter.phi);
    get("attn_dim", c.attn_dim);
    get("decoder_fuse_channels", c.decoder_fuse_channels);
    get("decoder_ladder_channels", c.decoder_ladder_channels);
    get("decoder_skip_channels", c.decoder_skip_channels);
    get("decoder_mlp_hidden", c.decoder_mlp_hidden);
    get("lora_enabled", c.lora_enabled);
    get("lora_rank", c.lora_rank);
    get("lora_alpha", c.lora_alpha);
    if (j.contains("lora_targets")) {
        auto v = j.at("lora_targets").get<std::vector<std::string>>();
        c.lora_targets = std::set<std::string>(v.begin(), v.end());
    }
    get("use_interaction", c.use_interaction);
    get("use_multiscale", c.use_multiscale);
    get("use_hier_decoder", c.use_hier_decoder);
    get("decoder_lora", c.decoder_lora);
    c.adapter.num_modules = c.trunk.num_stages;  // matched by construction
    if (j.contains("adapter_modules")) c.adapter.num_modules = j.at("adapter_modules").get<Eigen::Index>();
    c.validate();
    return c;
}

inline void write_model_json(const std::filesystem::path& checkpoint_dir, const ModelConfig& cfg) {
    std::ofstream f(checkpoint_dir / "model.json");
    if (!f) throw DataError("cannot write " + (checkpoint_dir / "model.json").string());
    f << model_config_to_json(cfg).dump(2) << '\n';
}

inline ModelConfig read_model_json(const std::filesystem::path& checkpoint_dir) {
    std::ifstream f(checkpoint_dir / "model.json");
    if (!f) throw DataError("checkpoint " + checkpoint_dir.string() + " has no model.json");
    nlohmann::json j;
    f >> j;
    return model_config_from_json(j);
}

// Reconstructs the model a checkpoint directory was saved from.
template <class S>
std::unique_ptr<UrbanSamModel<S>> load_model(const std::filesystem::path& checkpoint_dir) {
    auto model = std::make_unique<UrbanSamModel<S>>(read_model_json(checkpoint_dir), 0);
    model->load_state_dict(load_checkpoint(checkpoint_dir));
    return model;
}

// --- Prediction over arbitrary rasters -------------------------------------

struct PredictResult {
    Tensor<double> probability;  // [1,H,W] at native raster resolution
    MaskU8 binary;               // probability thresholded at 0.5
};

// tile -> regulate to the model's working size -> forward -> map back to the
// native tile resolution -> average-stitch -> threshold.
template <class S>
PredictResult predict_raster(UrbanSamModel<S>& model, const RasterSample& raster,
                             const TilingSpec& tiling) {
    std::vector<std::pair<Window, Tensor<S>>> preds;
    for (const auto& patch : tile(raster, tiling)) {
        Regulated reg = regulate(patch, model.cfg.trunk.image_size, model.cfg.trunk.patch_size);
        Graph<S> g;
        auto out = model.forward(g, to_model_input<S>(reg.sample.image));
        preds.emplace_back(patch.window, to_native(g.val(out.final_prob), reg));
    }
    PredictResult res;
    res.probability = stitch(preds, raster.image.height, raster.image.width);
    res.binary = threshold_prob(res.probability, 0.5);
    return res;
}

template <class S>
void write_prediction(const PredictResult& res, const std::filesystem::path& prefix) {
    write_image(prefix.string() + "_prob.png", prob_to_image(res.probability));
    write_image(prefix.string() + "_mask.png", mask_to_image(res.binary));
}

// Export the model's learned mask prompt for one sample, upsampled to image
// resolution as an 8-bit {0,255} PNG-ready mask.
template <class S>
MaskU8 learned_prompt_mask(UrbanSamModel<S>& model, const RasterSample& sample) {
    Graph<S> g;
    auto out = model.forward(g, to_model_input<S>(sample.image));
    const auto& hard = g.val(out.prompt.hard);
    MaskU8 coarse(hard.dim(1), hard.dim(2));
    for (Eigen::Index i = 0; i < hard.numel(); ++i)
        coarse.values[static_cast<std::size_t>(i)] = hard[i] >= S(0.5) ? 1 : 0;
    return resize_mask_nearest(coarse, sample.image.height, sample.image.width);
}

// --- Ablation protocols -----------------------------------------------------

struct AblationOptions {
    int scene_count = 32;
    Eigen::Index scene_size = 32;
    std::uint64_t seed = 7;
    int epochs = 6;
    int batch_size = 8;
    double lr = 0.02;
    ObjectClass object_class = ObjectClass::Building;
    std::filesystem::path checkpoint;  // overlap ablation: adds the learned-prompter row
    ModelConfig model;                 // base model for the training ablations
    TrainConfig train;
};

inline std::vector<RasterSample> synthetic_set(int count, Eigen::Index size, std::uint64_t seed0,
                                               ObjectClass cls) {
    std::vector<RasterSample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        SyntheticSceneSpec sp;
        sp.size = size;
        sp.object_class = cls;
        sp.seed = seed0 + static_cast<std::uint64_t>(i);
        out.push_back(generate_synthetic(sp));
    }
    return out;
}

// Table of prompt quality under controlled degradation: for every prompt kind
// and overlap target, the prompt itself is scored against ground truth (mask
// and box kinds as masks; point kind by its match ratio). When a checkpoint is
// provided, the learned prompter's exported mask is scored the same way.
template <class S>
std::string ablate_overlap(const AblationOptions& opt, UrbanSamModel<S>* model) {
    auto scenes = synthetic_set(opt.scene_count, opt.scene_size, opt.seed + 5000, opt.object_class);
    std::ostringstream csv;
    csv << "kind,target_overlap,achieved_overlap," << MetricsReport::csv_header() << "\n";
    for (PromptKind kind : {PromptKind::Mask, PromptKind::Point, PromptKind::Box}) {
        for (int target : {100, 90, 70, 50}) {
            double achieved_sum = 0;
            int n = 0;
            MetricsReport pooled;
            for (const auto& s : scenes) {
                PromptSimSpec ps;
                ps.kind = kind;
                ps.target_overlap = target;
                ps.seed = Rng::mix(opt.seed, static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(target));
                PromptResult r = simulate_prompt(*s.mask, ps);
                achieved_sum += r.achieved;
                ++n;
                if (kind != PromptKind::Point)
                    pooled.merge(compute_metrics(mask_to_tensor<double>(r.mask),
                                                 mask_to_tensor<double>(*s.mask)));
            }
            csv << to_string(kind) << ',' << target << ',';
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.2f", achieved_sum / n * 100.0);
            csv << buf << ',';
            if (kind == PromptKind::Point)
                csv << ",,,,,,,,";
            else
                csv << pooled.csv_row();
            csv << "\n";
        }
    }
    if (model) {
        MetricsReport pooled;
        for (const auto& s : scenes) {
            MaskU8 prompt = learned_prompt_mask(*model, s);
            pooled.merge(compute_metrics(mask_to_tensor<double>(prompt), mask_to_tensor<double>(*s.mask)));
        }
        csv << "learned,-," << "-," << pooled.csv_row() << "\n";
    }
    return csv.str();
}

namespace harness_detail {

template <class S>
MetricsReport train_and_eval(ModelConfig cfg, const AblationOptions& opt,
                             const std::vector<RasterSample>& train_set,
                             const std::vector<RasterSample>& test_set,
                             const std::filesystem::path& run_dir) {
    cfg.trunk.image_size = opt.scene_size;
    UrbanSamModel<S> model(cfg, opt.seed);
    TrainConfig tc = opt.train;
    tc.epochs = opt.epochs;
    tc.batch_size = opt.batch_size;
    tc.lr = opt.lr;
    tc.seed = opt.seed;
    tc.lora_rank = cfg.lora_rank;
    tc.lora_alpha = cfg.lora_alpha;
    Trainer<S> trainer(model, tc);
    trainer.run(train_set, {}, run_dir);
    return evaluate_micro(model, test_set);
}

}  // namespace harness_detail

// LoRA placement grid in report order: frozen encoder + fine-tuned decoder,
// frozen encoder + decoder LoRA, encoder LoRA + fine-tuned decoder, both.
template <class S>
std::string ablate_lora_placement(const AblationOptions& opt, const std::filesystem::path& work) {
    auto train_set = synthetic_set(opt.scene_count, opt.scene_size, opt.seed + 100, opt.object_class);
    auto test_set = synthetic_set(opt.scene_count / 2, opt.scene_size, opt.seed + 90100, opt.object_class);
    std::ostringstream csv;
    csv << "image_encoder,mask_decoder," << MetricsReport::csv_header() << "\n";
    struct Row {
        const char* enc;
        const char* dec;
        bool enc_lora;
        bool dec_lora;
    };
    for (const Row& row : {Row{"frozen", "finetune", false, false}, Row{"frozen", "lora", false, true},
                           Row{"lora", "finetune", true, false}, Row{"lora", "lora", true, true}}) {
        ModelConfig cfg = opt.model;
        cfg.lora_enabled = row.enc_lora;
        cfg.decoder_lora = row.dec_lora;
        MetricsReport m = harness_detail::train_and_eval<S>(
            cfg, opt, train_set, test_set, work / (std::string("placement_") + row.enc + "_" + row.dec));
        csv << row.enc << ',' << row.dec << ',' << m.csv_row() << "\n";
    }
    return csv.str();
}

template <class S>
std::string ablate_lora_rank(const AblationOptions& opt, const std::filesystem::path& work) {
    auto train_set = synthetic_set(opt.scene_count, opt.scene_size, opt.seed + 200, opt.object_class);
    auto test_set = synthetic_set(opt.scene_count / 2, opt.scene_size, opt.seed + 90200, opt.object_class);
    std::ostringstream csv;
    csv << "rank," << MetricsReport::csv_header() << "\n";
    for (Eigen::Index rank : {1, 4, 8, 16}) {
        ModelConfig cfg = opt.model;
        cfg.lora_rank = rank;
        cfg.lora_alpha = 2.0 * static_cast<double>(rank);
        MetricsReport m = harness_detail::train_and_eval<S>(cfg, opt, train_set, test_set,
                                                            work / ("rank_" + std::to_string(rank)));
        csv << rank << ',' << m.csv_row() << "\n";
    }
    return csv.str();
}

// Component toggles, rows ordered {w/o LoRA, w/o MultiScale, w/o Interaction,
// w/o Decoder, full}.
template <class S>
std::string ablate_components(const AblationOptions& opt, const std::filesystem::path& work) {
    auto train_set = synthetic_set(opt.scene_count, opt.scene_size, opt.seed + 300, opt.object_class);
    auto test_set = synthetic_set(opt.scene_count / 2, opt.scene_size, opt.seed + 90300, opt.object_class);
    std::ostringstream csv;
    csv << "variant," << MetricsReport::csv_header() << "\n";
    struct Row {
        const char* name;
        void (*tweak)(ModelConfig&);
    };
    const Row rows[] = {
        {"w/o LoRA", [](ModelConfig& c) { c.lora_enabled = false; }},
        {"w/o MultiScale", [](ModelConfig& c) { c.use_multiscale = false; }},
        {"w/o Interaction", [](ModelConfig& c) { c.use_interaction = false; }},
        {"w/o Decoder", [](ModelConfig& c) { c.use_hier_decoder = false; }},
        {"full", [](ModelConfig&) {}},
    };
    int i = 0;
    for (const Row& row : rows) {
        ModelConfig cfg = opt.model;
        row.tweak(cfg);
        MetricsReport m = harness_detail::train_and_eval<S>(cfg, opt, train_set, test_set,
                                                            work / ("components_" + std::to_string(i++)));
        csv << row.name << ',' << m.csv_row() << "\n";
    }
    return csv.str();
}

}  // namespace urbansam
