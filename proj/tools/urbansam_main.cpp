#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "urbansam/data/manifest.hpp"
#include "urbansam/harness.hpp"

namespace fs = std::filesystem;
using namespace urbansam;

namespace {

std::uint64_t seed_with_env_override(std::uint64_t seed) {
    if (const char* env = std::getenv("URBANSAM_SEED")) return std::strtoull(env, nullptr, 10);
    return seed;
}

// Per-task presets: water trains at a flat 0.001 for 15 epochs without
// augmentation; road/building use lr 0.005 with a five-epoch warmup, decay and
// rotation/flip augmentation over 200 epochs; building additionally doubles
// the working resolution.
void apply_preset(const std::string& preset, TrainConfig& tc, int& regulate_factor) {
    if (preset == "water") {
        tc.lr = 0.001;
        tc.schedule = "none";
        tc.epochs = 15;
        tc.augment_data = false;
    } else if (preset == "road") {
        tc.lr = 0.005;
        tc.schedule = "warmup_exp";
        tc.warmup_epochs = 5;
        tc.epochs = 200;
        tc.augment_data = true;
    } else if (preset == "building") {
        tc.lr = 0.005;
        tc.schedule = "warmup_exp";
        tc.warmup_epochs = 5;
        tc.epochs = 200;
        tc.augment_data = true;
        regulate_factor = 2;
    } else if (!preset.empty()) {
        throw ConfigError("unknown preset '" + preset + "' (water|road|building)");
    }
}

std::vector<RasterSample> load_split(const fs::path& manifest_path, const std::string& split,
                                     bool require_mask) {
    const auto dir = manifest_path.parent_path();
    std::vector<RasterSample> out;
    for (const auto& e : read_manifest(manifest_path))
        if (e.split == split) out.push_back(load_sample(e, dir, require_mask));
    return out;
}

int cmd_train(const fs::path& config_path, const std::string& preset_flag, int epochs_flag) {
    std::ifstream cf(config_path);
    if (!cf) throw ConfigError("cannot open config " + config_path.string());
    nlohmann::json j;
    try {
        cf >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + config_path.string() + ": " + e.what());
    }
    TrainConfig tc = train_config_from_json(j);
    int regulate_factor = 1;
    std::string preset = j.value("preset", std::string());
    if (!preset_flag.empty()) preset = preset_flag;
    apply_preset(preset, tc, regulate_factor);
    if (j.contains("regulate_factor")) regulate_factor = j.at("regulate_factor").get<int>();
    if (epochs_flag > 0) tc.epochs = epochs_flag;
    tc.seed = seed_with_env_override(tc.seed);

    ModelConfig mc;
    if (j.contains("model")) mc = model_config_from_json(j.at("model"));
    mc.lora_rank = tc.lora_rank;
    mc.lora_alpha = tc.lora_alpha;
    mc.lora_targets = std::set<std::string>(tc.lora_targets.begin(), tc.lora_targets.end());
    if (regulate_factor > 1) mc.trunk.image_size *= regulate_factor;
    mc.validate();

    if (!j.contains("manifest")) throw ConfigError("config needs a 'manifest' path");
    const fs::path manifest = config_path.parent_path() / j.at("manifest").get<std::string>();
    auto train_set = load_split(manifest, "train", true);
    auto val_set = load_split(manifest, "val", true);
    if (train_set.empty()) throw DataError("manifest has no train samples: " + manifest.string());
    if (regulate_factor > 1 || !train_set.empty()) {
        for (auto& s : train_set)
            s = regulate(s, mc.trunk.image_size, mc.trunk.patch_size).sample;
        for (auto& s : val_set) s = regulate(s, mc.trunk.image_size, mc.trunk.patch_size).sample;
    }

    const fs::path run_dir = j.value("run_dir", std::string("runs/default"));
    UrbanSamModel<double> model(mc, tc.seed);
    Trainer<double> trainer(model, tc);
    if (fs::exists(run_dir / "checkpoint" / "manifest.json")) {
        trainer.load(run_dir / "checkpoint");
        std::cout << "resuming from epoch " << trainer.epochs_done() << "\n";
    }
    auto rec = trainer.run(train_set, val_set, run_dir, /*eval_every=*/1);
    write_model_json(rec.checkpoint_dir, mc);
    std::cout << "trained " << rec.epochs.size() << " epochs; trainable parameters "
              << model.trainable_count() << " of " << model.total_count() << "\n";
    if (!rec.epochs.empty() && rec.epochs.back().val_iou >= 0)
        std::cout << "final val IoU " << rec.epochs.back().val_iou << "\n";
    std::cout << "checkpoint: " << rec.checkpoint_dir.string() << "\n";
    return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& manifest, const std::string& split,
             bool macro, const fs::path& out_prefix) {
    auto model = load_model<double>(checkpoint);
    auto samples = load_split(manifest, split, true);
    if (samples.empty()) throw DataError("manifest has no '" + split + "' samples with masks");
    for (auto& s : samples)
        s = regulate(s, model->cfg.trunk.image_size, model->cfg.trunk.patch_size).sample;
    MetricsReport micro = evaluate_micro(*model, samples);
    nlohmann::json out = micro.to_json();
    if (macro) {
        MacroMetrics mm = evaluate_macro(*model, samples);
        out["macro"] = {{"oa", mm.oa}, {"precision", mm.precision}, {"recall", mm.recall},
                        {"f1", mm.f1}, {"iou", mm.iou}, {"images", mm.n}};
    }
    {
        std::ofstream jf(out_prefix.string() + ".json");
        jf << out.dump(2) << '\n';
        std::ofstream cfile(out_prefix.string() + ".csv");
        cfile << MetricsReport::csv_header() << '\n' << micro.csv_row() << '\n';
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_predict(const fs::path& checkpoint, const fs::path& input, Eigen::Index patch_size,
                double overlap, const std::string& pad, const fs::path& out_prefix) {
    auto model = load_model<double>(checkpoint);
    RasterSample raster;
    raster.image = read_image(input);
    if (raster.image.channels == 1) {
        ImageU8 rgb(3, raster.image.height, raster.image.width);
        for (Eigen::Index i = 0; i < raster.image.height * raster.image.width; ++i)
            for (int c = 0; c < 3; ++c)
                rgb.pixels[static_cast<std::size_t>(c * raster.image.height * raster.image.width + i)] =
                    raster.image.pixels[static_cast<std::size_t>(i)];
        raster.image = std::move(rgb);
    }
    raster.source_id = input.string();
    TilingSpec tiling;
    tiling.patch_size = patch_size;
    tiling.overlap_fraction = overlap;
    tiling.pad_mode = pad == "zero" ? TilingSpec::PadMode::Zero : TilingSpec::PadMode::Reflect;
    PredictResult res = predict_raster(*model, raster, tiling);
    write_prediction<double>(res, out_prefix);
    std::cout << "wrote " << out_prefix.string() << "_prob.png and _mask.png\n";
    return 0;
}

int cmd_ablate(const std::string& kind, const AblationOptions& opt_in, const fs::path& out_csv,
               const fs::path& work) {
    AblationOptions opt = opt_in;
    opt.seed = seed_with_env_override(opt.seed);
    opt.model.trunk.image_size = opt.scene_size;
    std::string csv;
    if (kind == "overlap") {
        std::unique_ptr<UrbanSamModel<double>> model;
        if (!opt.checkpoint.empty()) model = load_model<double>(opt.checkpoint);
        csv = ablate_overlap<double>(opt, model.get());
    } else if (kind == "lora_placement") {
        csv = ablate_lora_placement<double>(opt, work);
    } else if (kind == "lora_rank") {
        csv = ablate_lora_rank<double>(opt, work);
    } else if (kind == "components") {
        csv = ablate_components<double>(opt, work);
    } else {
        throw ConfigError("unknown ablation kind '" + kind +
                          "' (overlap|lora_placement|lora_rank|components)");
    }
    std::ofstream f(out_csv);
    if (!f) throw DataError("cannot write " + out_csv.string());
    f << csv;
    std::cout << csv;
    return 0;
}

int cmd_synth(const std::string& cls, int count, int val_count, int test_count, Eigen::Index size,
              std::uint64_t seed, const fs::path& out_dir) {
    seed = seed_with_env_override(seed);
    fs::create_directories(out_dir);
    std::vector<ManifestEntry> entries;
    auto emit = [&](int n, const std::string& split, std::uint64_t seed0) {
        for (int i = 0; i < n; ++i) {
            SyntheticSceneSpec sp;
            sp.size = size;
            sp.object_class = object_class_from(cls);
            sp.seed = seed0 + static_cast<std::uint64_t>(i);
            RasterSample s = generate_synthetic(sp);
            const std::string stem = split + "_" + std::to_string(i);
            write_png(out_dir / (stem + ".png"), s.image);
            write_png(out_dir / (stem + "_mask.png"), mask_to_image(*s.mask));
            entries.push_back({stem + ".png", stem + "_mask.png", split});
        }
    };
    emit(count, "train", seed);
    emit(val_count, "val", seed + 500000);
    emit(test_count, "test", seed + 900000);
    write_manifest(out_dir / "manifest.jsonl", entries);
    std::cout << "wrote " << entries.size() << " scenes to " << out_dir.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"UrbanSAM: invariance-adapter segmentation at desk scale"};
    app.require_subcommand(1);

    std::string config_path, preset;
    int epochs_flag = 0;
    auto* train = app.add_subcommand("train", "Train from a JSON config");
    train->add_option("--config", config_path, "Training config (JSON)")->required();
    train->add_option("--preset", preset, "Task preset: water|road|building");
    train->add_option("--epochs", epochs_flag, "Override epoch count");

    std::string ckpt, manifest, split = "test", out_prefix = "metrics";
    bool macro = false;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
    eval->add_option("--checkpoint", ckpt, "Checkpoint directory")->required();
    eval->add_option("--manifest", manifest, "Dataset manifest (JSONL)")->required();
    eval->add_option("--split", split, "Split: train|val|test");
    eval->add_flag("--macro", macro, "Also report per-image averaged metrics");
    eval->add_option("--out", out_prefix, "Output prefix for metrics.json/.csv");

    std::string in_path, pad = "reflect", pred_out = "prediction";
    Eigen::Index patch_size = 512;
    double overlap = 0.0;
    auto* predict = app.add_subcommand("predict", "Tile, segment and stitch a raster");
    predict->add_option("--checkpoint", ckpt, "Checkpoint directory")->required();
    predict->add_option("--input", in_path, "Input image (PNG or TIFF)")->required();
    predict->add_option("--patch-size", patch_size, "Tile size in pixels");
    predict->add_option("--overlap", overlap, "Tile overlap fraction [0,1)");
    predict->add_option("--pad", pad, "Edge padding: reflect|zero");
    predict->add_option("--out", pred_out, "Output prefix");

    std::string kind, abl_out = "ablation.csv", abl_work = "runs/ablate", abl_class = "building";
    AblationOptions abl;
    auto* ablate = app.add_subcommand("ablate", "Run an ablation protocol");
    ablate->add_option("--kind", kind, "overlap|lora_placement|lora_rank|components")->required();
    ablate->add_option("--count", abl.scene_count, "Synthetic training scenes");
    ablate->add_option("--size", abl.scene_size, "Scene size in pixels");
    ablate->add_option("--seed", abl.seed, "Seed");
    ablate->add_option("--epochs", abl.epochs, "Training epochs per variant");
    ablate->add_option("--lr", abl.lr, "Learning rate");
    ablate->add_option("--class", abl_class, "building|road|water");
    ablate->add_option("--checkpoint", ckpt, "Trained checkpoint (overlap kind: learned-prompter row)");
    ablate->add_option("--out", abl_out, "Output CSV path");
    ablate->add_option("--work-dir", abl_work, "Scratch directory for variant runs");

    std::string synth_class = "building";
    int count = 16, val_count = 0, test_count = 0;
    Eigen::Index size = 64;
    std::uint64_t seed = 0;
    std::string synth_out = "synth_data";
    auto* synth = app.add_subcommand("synth", "Generate a synthetic scene dataset");
    synth->add_option("--class", synth_class, "building|road|water")->required();
    synth->add_option("--count", count, "Train scene count")->required();
    synth->add_option("--val-count", val_count, "Validation scene count");
    synth->add_option("--test-count", test_count, "Test scene count");
    synth->add_option("--size", size, "Scene size in pixels");
    synth->add_option("--seed", seed, "Base seed");
    synth->add_option("--out", synth_out, "Output directory")->required();

    try {
        app.parse(argc, argv);
        if (train->parsed()) return cmd_train(config_path, preset, epochs_flag);
        if (eval->parsed()) return cmd_eval(ckpt, manifest, split, macro, out_prefix);
        if (predict->parsed()) return cmd_predict(ckpt, in_path, patch_size, overlap, pad, pred_out);
        if (ablate->parsed()) {
            abl.checkpoint = ckpt;
            abl.object_class = object_class_from(abl_class);
            return cmd_ablate(kind, abl, abl_out, abl_work);
        }
        if (synth->parsed()) return cmd_synth(synth_class, count, val_count, test_count, size, seed, synth_out);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
