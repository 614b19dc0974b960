#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "urbansam/core/checkpoint.hpp"
#include "urbansam/data/augment.hpp"
#include "urbansam/data/raster.hpp"
#include "urbansam/losses.hpp"
#include "urbansam/metrics.hpp"
#include "urbansam/model.hpp"

namespace urbansam {

struct TrainConfig {
    double lr = 0.001;
    double momentum = 0.9;
    double weight_decay = 0.0001;
    int epochs = 15;
    int warmup_epochs = 0;
    std::string schedule = "none";  // none | warmup_exp
    double decay_gamma = 0.97;
    int batch_size = 8;
    std::uint64_t seed = 42;
    Eigen::Index lora_rank = 4;
    double lora_alpha = 8.0;  // alpha = 2 * rank
    std::vector<std::string> lora_targets = {"Q", "V"};
    LossWeights loss;
    bool augment_data = false;
    double target_iou = 0.0;  // early stop on the val split when > 0

    void validate() const {
        if (lr <= 0) throw ConfigError("lr must be positive");
        if (warmup_epochs > epochs) throw ConfigError("warmup_epochs must be <= epochs");
        if (schedule != "none" && schedule != "warmup_exp")
            throw ConfigError("schedule must be 'none' or 'warmup_exp'");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        loss.validate();
    }
};

inline double lr_for_epoch(const TrainConfig& cfg, int epoch /*1-based*/) {
    if (cfg.schedule == "none") return cfg.lr;
    if (cfg.warmup_epochs > 0 && epoch <= cfg.warmup_epochs)
        return cfg.lr * static_cast<double>(epoch) / static_cast<double>(cfg.warmup_epochs);
    const int past = epoch - cfg.warmup_epochs;
    return cfg.lr * std::pow(cfg.decay_gamma, past);
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("momentum")) c.momentum = j.at("momentum").get<double>();
    if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("warmup_epochs")) c.warmup_epochs = j.at("warmup_epochs").get<int>();
    if (j.contains("schedule")) c.schedule = j.at("schedule").get<std::string>();
    if (j.contains("decay_gamma")) c.decay_gamma = j.at("decay_gamma").get<double>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("lora_rank")) c.lora_rank = j.at("lora_rank").get<Eigen::Index>();
    if (j.contains("lora_alpha"))
        c.lora_alpha = j.at("lora_alpha").get<double>();
    else
        c.lora_alpha = 2.0 * static_cast<double>(c.lora_rank);
    if (j.contains("lora_targets")) c.lora_targets = j.at("lora_targets").get<std::vector<std::string>>();
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        if (l.contains("lambda_bce")) c.loss.lambda_bce = l.at("lambda_bce").get<double>();
        if (l.contains("lambda_dice")) c.loss.lambda_dice = l.at("lambda_dice").get<double>();
        if (l.contains("n_masks")) c.loss.n_masks = l.at("n_masks").get<int>();
        if (l.contains("dice_smooth")) c.loss.dice_smooth = l.at("dice_smooth").get<double>();
    }
    if (j.contains("augment_data")) c.augment_data = j.at("augment_data").get<bool>();
    if (j.contains("target_iou")) c.target_iou = j.at("target_iou").get<double>();
    c.validate();
    return c;
}

struct EpochRecord {
    int epoch = 0;
    double loss_final = 0, loss_quarter = 0, loss_masks = 0, loss_total = 0;
    double lr = 0;
    double wall_seconds = 0;
    double val_iou = -1;  // -1 when no eval ran this epoch
};

struct RunRecord {
    std::vector<EpochRecord> epochs;
    std::filesystem::path checkpoint_dir;

    void append_jsonl(const std::filesystem::path& path, const EpochRecord& e) const {
        std::ofstream f(path, std::ios::app);
        nlohmann::json j{{"epoch", e.epoch},
                         {"loss_final", e.loss_final},
                         {"loss_quarter", e.loss_quarter},
                         {"loss_masks", e.loss_masks},
                         {"loss_total", e.loss_total},
                         {"lr", e.lr},
                         {"wall_seconds", e.wall_seconds}};
        if (e.val_iou >= 0) j["val_iou"] = e.val_iou;
        f << j.dump() << '\n';
    }
};

// Forward a sample through the model and report the thresholded prediction.
template <class S>
MaskU8 predict_mask(UrbanSamModel<S>& model, const RasterSample& sample, bool allow_any_size = false) {
    Graph<S> g;
    auto out = model.forward(g, to_model_input<S>(sample.image), allow_any_size);
    return threshold_prob(g.val(out.final_prob), 0.5);
}

// Predictor indirection so evaluation can also run against stubs.
template <class Pred>
MetricsReport evaluate_micro_fn(Pred&& predict, const std::vector<RasterSample>& samples) {
    MetricsReport total;
    for (const auto& s : samples) {
        if (!s.mask) throw DataError("evaluate: sample " + s.source_id + " is missing a mask");
        MaskU8 pred = predict(s);
        total.merge(compute_metrics(mask_to_tensor<double>(pred), mask_to_tensor<double>(*s.mask)));
    }
    return total;
}

template <class S>
MetricsReport evaluate_micro(UrbanSamModel<S>& model, const std::vector<RasterSample>& samples) {
    return evaluate_micro_fn([&](const RasterSample& s) { return predict_mask(model, s); }, samples);
}

struct MacroMetrics {
    double oa = 0, precision = 0, recall = 0, f1 = 0, iou = 0;
    int n = 0;
};

template <class Pred>
MacroMetrics evaluate_macro_fn(Pred&& predict, const std::vector<RasterSample>& samples) {
    MacroMetrics m;
    for (const auto& s : samples) {
        if (!s.mask) throw DataError("evaluate: sample " + s.source_id + " is missing a mask");
        MaskU8 pred = predict(s);
        MetricsReport r = compute_metrics(mask_to_tensor<double>(pred), mask_to_tensor<double>(*s.mask));
        m.oa += r.oa();
        m.precision += r.precision();
        m.recall += r.recall();
        m.f1 += r.f1();
        m.iou += r.iou();
        ++m.n;
    }
    if (m.n) {
        m.oa /= m.n;
        m.precision /= m.n;
        m.recall /= m.n;
        m.f1 /= m.n;
        m.iou /= m.n;
    }
    return m;
}

template <class S>
MacroMetrics evaluate_macro(UrbanSamModel<S>& model, const std::vector<RasterSample>& samples) {
    return evaluate_macro_fn([&](const RasterSample& s) { return predict_mask(model, s); }, samples);
}

// SGD with momentum and weight decay over the trainable parameters, loss from
// the deep-supervision composite. Single worker; every epoch derives its
// shuffle and augmentation streams from (seed, epoch), so an interrupted run
// resumed from a checkpoint replays the identical remaining epochs.
template <class S>
class Trainer {
public:
    Trainer(UrbanSamModel<S>& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
        cfg_.validate();
        for (auto* p : model_.all_params())
            if (p->trainable) {
                trainables_.push_back(p);
                momentum_.emplace("opt." + p->name + ".m", Tensor<S>(p->value.shape()));
            }
    }

    int epochs_done() const { return epochs_done_; }

    void save(const std::filesystem::path& dir) {
        StateDict sd = model_.state_dict();
        for (const auto& [name, t] : momentum_) sd.emplace(name, t);
        sd.emplace("train.epoch", Tensor<S>::scalar(static_cast<S>(epochs_done_)));
        save_checkpoint(dir, sd);
    }

    void load(const std::filesystem::path& dir) {
        StateDict sd = load_checkpoint(dir);
        model_.load_state_dict(sd);
        for (auto& [name, t] : momentum_) {
            auto it = sd.find(name);
            if (it != sd.end()) t = it->second;
        }
        auto it = sd.find("train.epoch");
        epochs_done_ = it != sd.end() ? static_cast<int>(it->second.value()) : 0;
    }

    // Trains through cfg.epochs (resuming after epochs_done when a checkpoint
    // was loaded), writing a checkpoint and a run-record line per epoch.
    RunRecord run(const std::vector<RasterSample>& train_set,
                  const std::vector<RasterSample>& val_set,
                  const std::filesystem::path& run_dir, int eval_every = 0) {
        if (train_set.empty()) throw DataError("train: empty training set");
        std::filesystem::create_directories(run_dir);
        RunRecord rec;
        rec.checkpoint_dir = run_dir / "checkpoint";
        const auto record_path = run_dir / "run.jsonl";

        for (int epoch = epochs_done_ + 1; epoch <= cfg_.epochs; ++epoch) {
            const auto t0 = std::chrono::steady_clock::now();
            EpochRecord er;
            er.epoch = epoch;
            er.lr = lr_for_epoch(cfg_, epoch);
            run_epoch(train_set, epoch, er);
            epochs_done_ = epoch;
            er.wall_seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (!val_set.empty() && (epoch == cfg_.epochs || cfg_.target_iou > 0 ||
                                     (eval_every > 0 && epoch % eval_every == 0))) {
                er.val_iou = evaluate_micro(model_, val_set).iou();
            }
            save(rec.checkpoint_dir);
            rec.append_jsonl(record_path, er);
            rec.epochs.push_back(er);
            if (cfg_.target_iou > 0 && er.val_iou >= cfg_.target_iou) break;
        }
        return rec;
    }

private:
    void run_epoch(const std::vector<RasterSample>& train_set, int epoch, EpochRecord& er) {
        // epoch-seeded order; resume-safe because nothing persists across epochs
        std::vector<std::size_t> order(train_set.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(Rng::mix(cfg_.seed, 0x0e70c4, static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1],
                      order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

        const double lr = lr_for_epoch(cfg_, epoch);
        std::size_t pos = 0;
        int batches = 0;
        while (pos < order.size()) {
            const std::size_t bend = std::min(order.size(), pos + static_cast<std::size_t>(cfg_.batch_size));
            const auto bsize = static_cast<S>(bend - pos);
            for (auto* p : trainables_) p->grad.set_zero();
            double bl_final = 0, bl_quarter = 0, bl_masks = 0, bl_total = 0;
            for (std::size_t k = pos; k < bend; ++k) {
                RasterSample s = train_set[order[k]];
                if (cfg_.augment_data)
                    s = augment(s, Rng::mix(cfg_.seed, static_cast<std::uint64_t>(epoch),
                                            static_cast<std::uint64_t>(order[k])));
                if (!s.mask) throw DataError("train: sample " + s.source_id + " is missing a mask");
                Graph<S> g;
                auto out = model_.forward(g, to_model_input<S>(s.image));
                const Tensor<S> gt = mask_to_tensor<S>(*s.mask);
                Var<S> l_final = composite_loss(g, out.final_prob, gt, cfg_.loss);
                const auto& qv = g.val(out.quarter_prob);
                Var<S> l_quarter = composite_loss(g, out.quarter_prob,
                                                  downsample_gt(gt, qv.dim(1), qv.dim(2)), cfg_.loss);
                auto masks = out.supervision_masks(true);
                Var<S> l_mask;
                for (std::size_t mi = 0; mi < masks.size(); ++mi) {
                    const auto& mv = g.val(masks[mi]);
                    Var<S> term = composite_loss(g, masks[mi],
                                                 downsample_gt(gt, mv.dim(1), mv.dim(2)), cfg_.loss);
                    l_mask = mi == 0 ? term : add(l_mask, term);
                }
                l_mask = scale(l_mask, S(1) / static_cast<S>(masks.size()));
                Var<S> l_total = add(add(l_final, l_quarter), l_mask);
                const double lv = static_cast<double>(g.val(l_total).value());
                if (!std::isfinite(lv))
                    throw NumericError("training loss became non-finite at epoch " +
                                       std::to_string(epoch) + "; last checkpoint retained");
                bl_final += g.val(l_final).value();
                bl_quarter += g.val(l_quarter).value();
                bl_masks += g.val(l_mask).value();
                bl_total += lv;
                g.backward(scale(l_total, S(1) / bsize));
            }
            // SGD step: v <- mu*v + g + wd*w ; w <- w - lr*v
            for (auto* p : trainables_) {
                auto& m = momentum_.at("opt." + p->name + ".m");
                m.array() = static_cast<S>(cfg_.momentum) * m.array() + p->grad.array() +
                            static_cast<S>(cfg_.weight_decay) * p->value.array();
                p->value.array() -= static_cast<S>(lr) * m.array();
            }
            er.loss_final += bl_final / static_cast<double>(bend - pos);
            er.loss_quarter += bl_quarter / static_cast<double>(bend - pos);
            er.loss_masks += bl_masks / static_cast<double>(bend - pos);
            er.loss_total += bl_total / static_cast<double>(bend - pos);
            ++batches;
            pos = bend;
        }
        if (batches) {
            er.loss_final /= batches;
            er.loss_quarter /= batches;
            er.loss_masks /= batches;
            er.loss_total /= batches;
        }
    }

    UrbanSamModel<S>& model_;
    TrainConfig cfg_;
    ParamList<S> trainables_;
    std::map<std::string, Tensor<S>> momentum_;
    int epochs_done_ = 0;
};

}  // namespace urbansam
