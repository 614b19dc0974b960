#pragma once

#include <string>
#include <vector>

#include "urbansam/core/graph.hpp"
#include "urbansam/core/rng.hpp"
#include "urbansam/layers.hpp"

namespace urbansam {

// Cascaded U-shaped adapter stack. Each module runs a per-scale double-conv
// encoder with factor-2 pooling, aggregates the decoder path deep-to-shallow
// with residual additions at equal scales, and emits the input plus the
// phi-scaled per-scale mappings, so zeroed mappings leave the input untouched.
struct UScalingConfig {
    Eigen::Index num_modules = 4;
    Eigen::Index num_scales = 4;
    double phi = 2.0;
    Eigen::Index channels = 24;
    Eigen::Index downsample_factor = 2;
    // Ablation escape hatch: collapse each module to its scale-0 double conv
    // (the plain convolutional stream the multiscale design is compared against).
    bool single_scale = false;

    Eigen::Index effective_scales() const { return single_scale ? 1 : num_scales; }

    Eigen::Index required_divisor() const {
        Eigen::Index d = 1;
        for (Eigen::Index j = 1; j < effective_scales(); ++j) d *= downsample_factor;
        return d;
    }

    void validate() const {
        if (num_modules < 1) throw ConfigError("adapter needs >= 1 module");
        if (num_scales < 2) throw ConfigError("adapter needs >= 2 scales");
        if (phi <= 0) throw ConfigError("adapter phi must be positive");
        if (downsample_factor != 2)
            throw ConfigError("adapter downsample_factor must be 2 (max-pool step)");
        if (channels < 1) throw ConfigError("adapter channels must be >= 1");
    }
};

template <class S>
struct UScaleResult {
    Var<S> out;                  // same shape as the input
    Var<S> delta;                // out - input, the module's weighted contribution
    std::vector<Var<S>> pyramid;  // encoder features, scale j at 1/2^j resolution
};

template <class S>
struct UScalingModule {
    struct EncScale {
        Conv2dLayer<S> c1, c2;
    };
    std::vector<EncScale> enc;        // per scale: double conv + relu
    std::vector<Conv2dLayer<S>> dec;  // per scale below top: conv after nearest upsample
    std::vector<Conv2dLayer<S>> proj;  // per scale: 1x1 mapping into the output sum
    double phi = 2.0;
    Eigen::Index num_scales = 4;

    UScalingModule() = default;
    UScalingModule(const std::string& name, const UScalingConfig& cfg, Rng& rng) {
        phi = cfg.phi;
        num_scales = cfg.effective_scales();
        const Eigen::Index c = cfg.channels;
        for (Eigen::Index j = 0; j < num_scales; ++j) {
            enc.push_back({Conv2dLayer<S>(name + ".enc" + std::to_string(j) + ".c1", c, c, 3, 1, 1, rng),
                           Conv2dLayer<S>(name + ".enc" + std::to_string(j) + ".c2", c, c, 3, 1, 1, rng)});
            proj.emplace_back(name + ".proj" + std::to_string(j), c, c, 1, 1, 0, rng);
            // zero mapping at init: each module starts as the identity, so the
            // cascaded residual sums cannot blow up the activation scale
            proj.back().weight.value.set_zero();
            proj.back().bias.value.set_zero();
        }
        for (Eigen::Index j = 0; j + 1 < num_scales; ++j)
            dec.emplace_back(name + ".dec" + std::to_string(j), c, c, 3, 1, 1, rng);
    }

    UScaleResult<S> operator()(Graph<S>& g, Var<S> x) {
        const auto& xv = g.val(x);
        Eigen::Index divisor = 1;
        for (Eigen::Index j = 1; j < num_scales; ++j) divisor *= 2;
        if (xv.dim(1) % divisor != 0 || xv.dim(2) % divisor != 0)
            throw ConfigError("u-scaling input " + xv.shape_str() +
                              " needs spatial dims divisible by " + std::to_string(divisor));

        // encoder: double conv per scale, pooled between scales
        std::vector<Var<S>> e;
        Var<S> cur = x;
        for (Eigen::Index j = 0; j < num_scales; ++j) {
            auto& sc = enc[static_cast<std::size_t>(j)];
            Var<S> f = relu(sc.c2(g, relu(sc.c1(g, cur))));
            e.push_back(f);
            if (j + 1 < num_scales) cur = maxpool2(f);
        }

        // decoder: deep to shallow, residual addition at equal scales
        std::vector<Var<S>> d(static_cast<std::size_t>(num_scales));
        d[static_cast<std::size_t>(num_scales - 1)] = e.back();
        for (Eigen::Index j = num_scales - 2; j >= 0; --j) {
            Var<S> up = upsample_nearest(d[static_cast<std::size_t>(j + 1)], 2);
            d[static_cast<std::size_t>(j)] =
                add(relu(dec[static_cast<std::size_t>(j)](g, up)), e[static_cast<std::size_t>(j)]);
        }

        // output: input + sum of phi-scaled per-scale mappings, upsampled to scale 0
        Var<S> acc;
        for (Eigen::Index j = 0; j < num_scales; ++j) {
            Var<S> term = scale(proj[static_cast<std::size_t>(j)](g, d[static_cast<std::size_t>(j)]),
                                static_cast<S>(phi));
            if (j > 0) {
                Eigen::Index f = 1;
                for (Eigen::Index t = 0; t < j; ++t) f *= 2;
                term = upsample_nearest(term, f);
            }
            acc = j == 0 ? term : add(acc, term);
        }
        return {add(x, acc), acc, std::move(e)};
    }

    void params(ParamList<S>& out) {
        for (auto& sc : enc) {
            sc.c1.params(out);
            sc.c2.params(out);
        }
        for (auto& dc : dec) dc.params(out);
        for (auto& pj : proj) pj.params(out);
    }
};

template <class S>
struct AdapterStackResult {
    std::vector<Var<S>> exports;                // per module, input grid resolution
    std::vector<std::vector<Var<S>>> pyramids;  // per module encoder pyramids
};

template <class S>
struct AdapterStack {
    UScalingConfig cfg;
    std::vector<UScalingModule<S>> modules;
    std::vector<Param<S>> gates;  // per-module weight on the module's contribution

    AdapterStack() = default;
    AdapterStack(const UScalingConfig& c, Rng& rng) : cfg(c) {
        cfg.validate();
        for (Eigen::Index i = 0; i < c.num_modules; ++i) {
            modules.emplace_back("adapter.mod" + std::to_string(i + 1), c, rng);
            gates.emplace_back("adapter.mod" + std::to_string(i + 1) + ".gate",
                               Tensor<S>::full({}, S(1)));
        }
    }

    // Chain the modules; module i consumes module i-1's output (module 1 the stem).
    // The learnable per-module gate scales each module's contribution, so a zero
    // gate passes the input through unchanged.
    AdapterStackResult<S> operator()(Graph<S>& g, Var<S> stem) {
        AdapterStackResult<S> res;
        Var<S> cur = stem;
        for (std::size_t i = 0; i < modules.size(); ++i) {
            UScaleResult<S> r = modules[i](g, cur);
            Var<S> gated = add(cur, scale_by(r.delta, g.param(gates[i])));
            res.exports.push_back(gated);
            res.pyramids.push_back(std::move(r.pyramid));
            cur = gated;
        }
        return res;
    }

    void params(ParamList<S>& out) {
        for (std::size_t i = 0; i < modules.size(); ++i) {
            modules[i].params(out);
            out.push_back(&gates[i]);
        }
    }
};

}  // namespace urbansam
