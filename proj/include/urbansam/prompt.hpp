#pragma once

#include <string>
#include <vector>

#include "urbansam/core/graph.hpp"
#include "urbansam/layers.hpp"

namespace urbansam {

// Prompt generation: fuse per-stage foreground probabilities through a 1x1
// convolution into a logits map, then binarize against a learnable threshold.
// The hard map is the exported prompt; its straight-through backward is the
// gradient of sigmoid(P - logit(tau)), which is how tau learns.
template <class S>
struct PromptOutputs {
    Var<S> logits;  // fused P_mask
    Var<S> soft;    // sigmoid(P_mask), feeds gated attention and the decoder
    Var<S> hard;    // straight-through {0,1} map on the same grid
};

template <class S>
struct PromptHead {
    Conv2dLayer<S> fusion;  // 1x1 over concatenated stage masks
    Param<S> tau;

    PromptHead() = default;
    PromptHead(Eigen::Index num_inputs, Rng& rng)
        : fusion("prompt.fusion", num_inputs, 1, 1, 1, 0, rng),
          tau("prompt.tau", Tensor<S>::full({}, S(0.5))) {
        // start the fusion as a plain average of the stage masks
        fusion.weight.value.array().setConstant(S(1) / static_cast<S>(num_inputs));
        fusion.bias.value.set_zero();
    }

    // Stage masks are probability maps [1,h,w]; anything off-grid is resampled
    // to the finest input grid before concatenation. Output is a logits map.
    Var<S> fuse(Graph<S>& g, const std::vector<Var<S>>& stage_masks) {
        if (stage_masks.empty()) throw ValidationError("fuse_stage_masks: empty mask list");
        const Eigen::Index expected = fusion.weight.value.dim(1);
        if (static_cast<Eigen::Index>(stage_masks.size()) != expected)
            throw ConfigError("fuse_stage_masks: got " + std::to_string(stage_masks.size()) +
                              " masks, fusion kernel expects " + std::to_string(expected));
        Eigen::Index h = 0, w = 0;
        for (auto m : stage_masks) {
            const auto& v = g.val(m);
            if (v.dim(1) * v.dim(2) > h * w) {
                h = v.dim(1);
                w = v.dim(2);
            }
        }
        std::vector<Var<S>> aligned;
        aligned.reserve(stage_masks.size());
        for (auto m : stage_masks) aligned.push_back(resize_bilinear(m, h, w));
        return fusion(g, concat_channels(aligned));
    }

    S tau_value() const { return read_tau(tau.value.value()); }

    PromptOutputs<S> binarize(Graph<S>& g, Var<S> logits) {
        Var<S> t = g.param(tau);
        return {logits, sigmoid(logits), ste_threshold(logits, t)};
    }

    PromptOutputs<S> operator()(Graph<S>& g, const std::vector<Var<S>>& stage_masks) {
        return binarize(g, fuse(g, stage_masks));
    }

    void params(ParamList<S>& out) {
        fusion.params(out);
        out.push_back(&tau);
    }
};

}  // namespace urbansam
