#pragma once

#include <vector>

#include "urbansam/core/graph.hpp"

namespace urbansam {

struct LossWeights {
    double lambda_bce = 0.2;
    double lambda_dice = 0.8;
    int n_masks = 5;
    double dice_smooth = 1.0;
    double bce_clip = 1e-7;

    void validate() const {
        if (lambda_bce < 0 || lambda_dice < 0) throw ValidationError("loss weights must be >= 0");
        if (n_masks < 1) throw ValidationError("n_masks must be >= 1");
        if (dice_smooth <= 0) throw ValidationError("dice smoothing must be positive");
    }
};

namespace detail {
template <class S>
void require_binary(const Tensor<S>& t, const char* what) {
    for (Eigen::Index i = 0; i < t.numel(); ++i)
        if (t[i] != S(0) && t[i] != S(1)) throw ValidationError(std::string(what) + ": ground truth must be binary");
}
}  // namespace detail

// Mean binary cross-entropy on probabilities, clipped away from {0,1}.
template <class S>
Var<S> bce_loss(Graph<S>& g, Var<S> pred_prob, const Tensor<S>& gt, double clip = 1e-7) {
    require_same_shape(g.val(pred_prob), gt, "bce_loss");
    detail::require_binary(gt, "bce_loss");
    Var<S> p = clamp(pred_prob, static_cast<S>(clip), static_cast<S>(1.0 - clip));
    Var<S> y = g.constant(gt);
    Tensor<S> ones = Tensor<S>::full(gt.shape(), S(1));
    Var<S> one = g.constant(ones);
    Var<S> term = add(mul(y, log_op(p)), mul(sub(one, y), log_op(sub(one, p))));
    return scale(mean_all(term), S(-1));
}

// Soft Dice loss: 1 - (2*sum(p*y)+eps) / (sum(p)+sum(y)+eps).
template <class S>
Var<S> dice_loss(Graph<S>& g, Var<S> pred_prob, const Tensor<S>& gt, double smooth = 1.0) {
    require_same_shape(g.val(pred_prob), gt, "dice_loss");
    detail::require_binary(gt, "dice_loss");
    Var<S> y = g.constant(gt);
    Var<S> inter = sum_all(mul(pred_prob, y));
    Var<S> denom = add(sum_all(pred_prob), sum_all(y));
    Var<S> num = add_const(scale(inter, S(2)), static_cast<S>(smooth));
    Var<S> den = add_const(denom, static_cast<S>(smooth));
    return add_const(scale(div(num, den), S(-1)), S(1));
}

// L = lambda_bce * BCE + lambda_dice * Dice.
template <class S>
Var<S> composite_loss(Graph<S>& g, Var<S> pred_prob, const Tensor<S>& gt, const LossWeights& w) {
    w.validate();
    return add(scale(bce_loss(g, pred_prob, gt, w.bce_clip), static_cast<S>(w.lambda_bce)),
               scale(dice_loss(g, pred_prob, gt, w.dice_smooth), static_cast<S>(w.lambda_dice)));
}

// Nearest-neighbor ground-truth downsample; keeps labels binary.
template <class S>
Tensor<S> downsample_gt(const Tensor<S>& gt, Eigen::Index ho, Eigen::Index wo) {
    const Eigen::Index c = gt.dim(0), h = gt.dim(1), w = gt.dim(2);
    if (h == ho && w == wo) return gt;
    const auto iy = detail::make_nearest(h, ho);
    const auto ix = detail::make_nearest(w, wo);
    Tensor<S> out({c, ho, wo});
    for (Eigen::Index cc = 0; cc < c; ++cc)
        for (Eigen::Index oh = 0; oh < ho; ++oh)
            for (Eigen::Index ow = 0; ow < wo; ++ow) out.at(cc, oh, ow) = gt.at(cc, iy[oh], ix[ow]);
    return out;
}

// Deep-supervision total: final prediction at image resolution, the quarter-
// resolution head against downsampled ground truth, and the average of the
// n_masks stage/prompt predictions against ground truth on their own grids.
template <class S>
Var<S> total_loss(Graph<S>& g, Var<S> final_pred, Var<S> quarter_pred,
                  const std::vector<Var<S>>& stage_mask_preds, const Tensor<S>& gt,
                  const LossWeights& w) {
    w.validate();
    if (static_cast<int>(stage_mask_preds.size()) != w.n_masks)
        throw ValidationError("total_loss: expected " + std::to_string(w.n_masks) +
                              " mask predictions, got " + std::to_string(stage_mask_preds.size()));
    Var<S> total = composite_loss(g, final_pred, gt, w);
    const auto& q = g.val(quarter_pred);
    total = add(total, composite_loss(g, quarter_pred, downsample_gt(gt, q.dim(1), q.dim(2)), w));
    Var<S> mask_sum;
    for (std::size_t i = 0; i < stage_mask_preds.size(); ++i) {
        const auto& mp = g.val(stage_mask_preds[i]);
        Var<S> term =
            composite_loss(g, stage_mask_preds[i], downsample_gt(gt, mp.dim(1), mp.dim(2)), w);
        mask_sum = i == 0 ? term : add(mask_sum, term);
    }
    return add(total, scale(mask_sum, S(1) / static_cast<S>(w.n_masks)));
}

}  // namespace urbansam
