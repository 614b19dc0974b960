#pragma once

#include <array>
#include <string>
#include <vector>

#include "urbansam/alignment.hpp"
#include "urbansam/core/graph.hpp"
#include "urbansam/layers.hpp"

namespace urbansam {

// Hierarchical consistency decoder. Trunk features, adapter features, the fused
// prompt probability and the post-interaction trunk map are brought onto a
// common grid at twice the token resolution (transposed convs on the trunk
// side, a strided conv on the adapter side), concatenated, gated by per-token
// MLP weights, and walked up to image resolution by a ladder of x2 transposed
// convolutions with skip fusions from the adapter pyramid. An auxiliary head
// taps the ladder at 1/4 image resolution for deep supervision.
struct DecoderConfig {
    Eigen::Index trunk_dim = 64;
    Eigen::Index adapter_channels = 24;
    Eigen::Index fuse_channels = 24;    // per-branch channels entering H1..H3
    Eigen::Index ladder_channels = 24;
    Eigen::Index skip_channels = 8;
    Eigen::Index mlp_hidden = 64;
    Eigen::Index patch_size = 16;       // token stride; fixes the ladder length
    Eigen::Index adapter_ratio = 8;     // adapter grid = ratio * token grid

    Eigen::Index ladder_rungs() const {
        Eigen::Index s = patch_size / 2, n = 0;
        while (s > 1) {
            s /= 2;
            ++n;
        }
        return n;
    }

    void validate() const {
        if (patch_size < 4 || (patch_size & (patch_size - 1)) != 0)
            throw ConfigError("decoder: patch_size must be a power of two >= 4");
        if (adapter_ratio < 2 || (adapter_ratio & (adapter_ratio - 1)) != 0)
            throw ConfigError("decoder: adapter grid ratio must be a power of two >= 2");
    }
};

template <class S>
struct DecoderState {
    std::vector<Eigen::Index> h1_shape, h2_shape, h3_shape;
    std::vector<Eigen::Index> token_weights_shape;
    Var<S> seg_logits;
    Var<S> aux_quarter_logits;
};

template <class S>
struct ConsistencyDecoder {
    DecoderConfig cfg;
    ConvT2dLayer<S> ct_v;   // trunk features up to the fusion grid
    Conv2dLayer<S> conv_u;  // adapter features down to the fusion grid
    ConvT2dLayer<S> ct_m;   // post-interaction trunk map up to the fusion grid
    Conv2dLayer<S> reduce;
    LinearLayer<S> mlp1, mlp2, mlp3;
    struct Rung {
        ConvT2dLayer<S> up;
        bool has_skip = false;
        Conv2dLayer<S> skip_proj;
        Conv2dLayer<S> fuse;
        Eigen::Index stride = 1;       // output stride of this rung
        Eigen::Index pyramid_level = -1;
    };
    std::vector<Rung> rungs;
    Conv2dLayer<S> aux_head;
    Conv2dLayer<S> out_head;
    // The MLP can run against frozen base weights with low-rank deltas (the
    // lora_placement ablation); pairs are owned by the model.
    std::array<LoRAPair<S>*, 3> mlp_lora{nullptr, nullptr, nullptr};

    ConsistencyDecoder() = default;
    ConsistencyDecoder(const DecoderConfig& c, Rng& rng) : cfg(c) {
        cfg.validate();
        const Eigen::Index fc = c.fuse_channels, lc = c.ladder_channels;
        ct_v = ConvT2dLayer<S>("decoder.ct_v", c.trunk_dim, fc, 2, rng);
        conv_u = Conv2dLayer<S>("decoder.conv_u", c.adapter_channels, fc, c.adapter_ratio / 2,
                                c.adapter_ratio / 2, 0, rng);
        ct_m = ConvT2dLayer<S>("decoder.ct_m", c.trunk_dim, fc, 2, rng);
        reduce = Conv2dLayer<S>("decoder.reduce", 3 * fc + 1, lc, 1, 1, 0, rng);
        mlp1 = LinearLayer<S>("decoder.mlp.l1", c.trunk_dim, c.mlp_hidden, rng);
        mlp2 = LinearLayer<S>("decoder.mlp.l2", c.mlp_hidden, c.mlp_hidden, rng);
        mlp3 = LinearLayer<S>("decoder.mlp.l3", c.mlp_hidden, 3 * fc + 1, rng);

        // Ladder from stride patch/2 down to stride 1. The adapter pyramid level
        // with a matching stride (if any) is fused in after each upsample.
        const Eigen::Index stem_stride = c.patch_size / c.adapter_ratio;
        Eigen::Index stride = c.patch_size / 2;
        int k = 0;
        while (stride > 1) {
            stride /= 2;
            Rung r;
            r.stride = stride;
            const std::string name = "decoder.rung" + std::to_string(++k);
            r.up = ConvT2dLayer<S>(name + ".up", lc, lc, 2, rng);
            // pyramid level j sits at stride stem_stride * 2^j
            Eigen::Index lvl = -1, s = stem_stride;
            for (Eigen::Index j = 0; s <= stride; ++j, s *= 2)
                if (s == stride) lvl = j;
            if (lvl >= 0) {
                r.has_skip = true;
                r.pyramid_level = lvl;
                r.skip_proj = Conv2dLayer<S>(name + ".skip", c.adapter_channels, c.skip_channels, 1,
                                             1, 0, rng);
                r.fuse = Conv2dLayer<S>(name + ".fuse", lc + c.skip_channels, lc, 3, 1, 1, rng);
            }
            rungs.push_back(std::move(r));
        }
        aux_head = Conv2dLayer<S>("decoder.aux", lc, 1, 1, 1, 0, rng);
        out_head = Conv2dLayer<S>("decoder.out", lc, 1, 1, 1, 0, rng);
    }

    // Three affine layers, ReLU between them, sigmoid output in [0,1];
    // one weight vector per token of the decoder-side trunk map.
    Var<S> mlp_token_weights(Graph<S>& g, Var<S> m_fv) {
        const auto& v = g.val(m_fv);
        const Eigen::Index h = v.dim(1), w = v.dim(2);
        Var<S> t = chw_to_tokens(m_fv);
        t = relu(lora_linear(g, t, mlp1, mlp_lora[0]));
        t = relu(lora_linear(g, t, mlp2, mlp_lora[1]));
        t = sigmoid(lora_linear(g, t, mlp3, mlp_lora[2]));
        return tokens_to_chw(t, h, w);
    }

    // f_v: pre-interaction trunk features [D,g,g]; f_u: adapter output at its
    // native grid [Cu, ratio*g, ratio*g]; m_pre: fused prompt probability;
    // m_fv: post-interaction trunk map [D,g,g]. pyramid: adapter encoder levels
    // of the last module (optional, enables the ladder skips).
    DecoderState<S> operator()(Graph<S>& g, Var<S> f_v, Var<S> f_u, Var<S> m_pre, Var<S> m_fv,
                               const std::vector<Var<S>>* pyramid = nullptr) {
        const auto& fv = g.val(f_v);
        const Eigen::Index grid = fv.dim(1);
        const Eigen::Index fuse_grid = grid * 2;
        const Eigen::Index out_size = grid * cfg.patch_size;
        const auto& fu = g.val(f_u);
        if (fu.dim(1) != grid * cfg.adapter_ratio)
            throw NumericError("decoder: adapter grid " + fu.shape_str() + " incompatible with trunk grid " +
                               fv.shape_str());

        Var<S> a = ct_v(g, f_v);
        Var<S> b = conv_u(g, f_u);
        Var<S> c = ct_m(g, m_fv);
        Var<S> p = resize_bilinear(m_pre, fuse_grid, fuse_grid);
        Var<S> h3 = concat_channels<S>({a, b, c, p});

        DecoderState<S> st;
        st.h1_shape = {2 * cfg.fuse_channels, fuse_grid, fuse_grid};
        st.h2_shape = {3 * cfg.fuse_channels, fuse_grid, fuse_grid};
        st.h3_shape = {3 * cfg.fuse_channels + 1, fuse_grid, fuse_grid};

        Var<S> weights = mlp_token_weights(g, m_fv);
        st.token_weights_shape = g.val(weights).shape();
        Var<S> gated = mul(h3, upsample_nearest(weights, 2));

        Var<S> x = relu(reduce(g, gated));
        Var<S> aux;
        bool aux_done = false;
        const Eigen::Index quarter = out_size / 4;
        if (cfg.patch_size / 2 <= 4 && !aux_done) {
            // fusion grid is already at or below stride 4
            aux = resize_bilinear(aux_head(g, x), quarter, quarter);
            aux_done = true;
        }
        for (auto& r : rungs) {
            x = relu(r.up(g, x));
            if (r.has_skip && pyramid && r.pyramid_level < static_cast<Eigen::Index>(pyramid->size())) {
                Var<S> skip = (*pyramid)[static_cast<std::size_t>(r.pyramid_level)];
                x = relu(r.fuse(g, concat_channels<S>({x, r.skip_proj(g, skip)})));
            }
            if (!aux_done && r.stride <= 4) {
                aux = resize_bilinear(aux_head(g, x), quarter, quarter);
                aux_done = true;
            }
        }
        st.seg_logits = out_head(g, x);
        st.aux_quarter_logits = aux;
        if (g.val(st.seg_logits).dim(1) != out_size)
            throw NumericError("decoder: output grid " + g.val(st.seg_logits).shape_str() +
                               " does not match image size " + std::to_string(out_size));
        return st;
    }

    void params(ParamList<S>& out) {
        ct_v.params(out);
        conv_u.params(out);
        ct_m.params(out);
        reduce.params(out);
        mlp1.params(out);
        mlp2.params(out);
        mlp3.params(out);
        for (auto& r : rungs) {
            r.up.params(out);
            if (r.has_skip) {
                r.skip_proj.params(out);
                r.fuse.params(out);
            }
        }
        aux_head.params(out);
        out_head.params(out);
    }
};

}  // namespace urbansam
