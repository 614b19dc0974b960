#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "urbansam/core/graph.hpp"
#include "urbansam/core/rng.hpp"
#include "urbansam/layers.hpp"

namespace urbansam {

// Low-rank adaptation factors for one frozen projection.
// Effective delta = (alpha / rank) * B * A; A is Gaussian at init, B exactly zero,
// so a freshly attached pair leaves the frozen model untouched.
template <class S>
struct LoRAPair {
    Param<S> A;  // [rank, in_dim]
    Param<S> B;  // [out_dim, rank]
    Eigen::Index rank = 0;
    S alpha = S(0);

    LoRAPair() = default;
    LoRAPair(const std::string& name, Eigen::Index in_dim, Eigen::Index out_dim, Eigen::Index r,
             S alpha_, Rng& rng)
        : A(name + ".A", Tensor<S>({r, in_dim})),
          B(name + ".B", Tensor<S>({out_dim, r})),
          rank(r),
          alpha(alpha_) {
        if (r < 1) throw ConfigError("lora rank must be >= 1, got " + std::to_string(r));
        if (r >= std::min(in_dim, out_dim))
            throw ConfigError("lora rank " + std::to_string(r) + " must be < min(in_dim, out_dim)");
        init::gaussian(A.value, rng, std::sqrt(1.0 / static_cast<double>(in_dim)));
        // B stays zero
    }

    // Delta on a token matrix x [N, in_dim] -> [N, out_dim].
    Var<S> delta(Graph<S>& g, Var<S> x) {
        Var<S> ax = matmul(x, transpose(g.param(A)));   // [N, rank]
        Var<S> bax = matmul(ax, transpose(g.param(B)));  // [N, out_dim]
        return scale(bax, alpha / static_cast<S>(rank));
    }

    void params(ParamList<S>& out) {
        out.push_back(&A);
        out.push_back(&B);
    }
};

// y = W_frozen x + (alpha/rank) B (A x); the frozen weight never sees gradient.
template <class S>
Var<S> lora_linear(Graph<S>& g, Var<S> x, LinearLayer<S>& frozen, LoRAPair<S>* pair) {
    Var<S> y = frozen(g, x);
    if (pair) y = add(y, pair->delta(g, x));
    return y;
}

inline const std::set<std::string>& lora_valid_targets() {
    static const std::set<std::string> t{"Q", "K", "V", "O"};
    return t;
}

// One pair per (block, target projection).
template <class S>
struct LoRASet {
    std::map<std::pair<int, std::string>, LoRAPair<S>> pairs;
    Eigen::Index rank = 4;
    S alpha = S(8);
    std::set<std::string> targets;

    LoRAPair<S>* find(int block, const std::string& target) {
        auto it = pairs.find({block, target});
        return it == pairs.end() ? nullptr : &it->second;
    }

    std::size_t size() const { return pairs.size(); }

    void params(ParamList<S>& out) {
        for (auto& [key, p] : pairs) p.params(out);
    }
};

// Cross-branch masked attention: queries from trunk features, keys/values from
// adapter features, attended update gated per query token by a predicted
// foreground probability and added back onto the trunk features.
template <class S>
struct CrossMaskedAttention {
    Param<S> mq;  // [d_v, d_c]
    Param<S> mk;  // [d_u, d_c]
    Param<S> mv;  // [d_u, d_v] so the gated update lands back in trunk space
    Eigen::Index d_c = 0;

    CrossMaskedAttention() = default;
    CrossMaskedAttention(const std::string& name, Eigen::Index d_v, Eigen::Index d_u,
                         Eigen::Index d_c_, Rng& rng)
        : mq(name + ".mq", Tensor<S>({d_v, d_c_})),
          mk(name + ".mk", Tensor<S>({d_u, d_c_})),
          mv(name + ".mv", Tensor<S>({d_u, d_v})),
          d_c(d_c_) {
        if (d_c_ < 1) throw ConfigError("cross attention dim must be >= 1");
        init::xavier(mq.value, rng, d_v);
        init::xavier(mk.value, rng, d_u);
        init::xavier(mv.value, rng, d_u);
    }

    // Token-level form: f_v [Nv, d_v], f_u [Nu, d_u], m [Nv, 1] in [0,1].
    Var<S> tokens(Graph<S>& g, Var<S> f_v, Var<S> f_u, Var<S> m) {
        const auto& mval = g.val(m);
        if ((mval.array() < S(0)).any() || (mval.array() > S(1)).any())
            throw ValidationError("cross_masked_attention: mask values outside [0,1]");
        Var<S> q = matmul(f_v, g.param(mq));
        Var<S> k = matmul(f_u, g.param(mk));
        Var<S> v = matmul(f_u, g.param(mv));
        Var<S> logits = scale(matmul(q, transpose(k)), S(1) / std::sqrt(static_cast<S>(d_c)));
        Var<S> attn = softmax_rows(logits);
        Var<S> update = mul_rowwise(matmul(attn, v), m);
        return add(update, f_v);
    }

    // FeatureMap form: f_v [d_v,h,w], f_u [d_u,hu,wu], m [1,hm,wm];
    // f_u and m are resampled onto f_v's grid (bilinear keeps m in [0,1]).
    Var<S> operator()(Graph<S>& g, Var<S> f_v, Var<S> f_u, Var<S> m) {
        const Eigen::Index h = g.val(f_v).dim(1), w = g.val(f_v).dim(2);
        Var<S> fu_t = chw_to_tokens(resize_bilinear(f_u, h, w));
        Var<S> m_t = flatten_col(resize_bilinear(m, h, w));
        Var<S> fv_t = chw_to_tokens(f_v);
        Var<S> out_t = tokens(g, fv_t, fu_t, m_t);
        return tokens_to_chw(out_t, h, w);
    }

    void params(ParamList<S>& out) {
        out.push_back(&mq);
        out.push_back(&mk);
        out.push_back(&mv);
    }
};

}  // namespace urbansam
