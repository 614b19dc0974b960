#pragma once

#include <string>
#include <vector>

#include "urbansam/core/graph.hpp"
#include "urbansam/core/rng.hpp"
#include "urbansam/core/tensor.hpp"

namespace urbansam {

template <class S>
using ParamList = std::vector<Param<S>*>;

namespace init {

template <class S>
void gaussian(Tensor<S>& t, Rng& rng, double stddev) {
    for (Eigen::Index i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.gaussian(0.0, stddev));
}

// He init for ReLU convolutions, Xavier-ish for plain projections.
template <class S>
void he(Tensor<S>& t, Rng& rng, Eigen::Index fan_in) {
    gaussian(t, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

template <class S>
void xavier(Tensor<S>& t, Rng& rng, Eigen::Index fan_in) {
    gaussian(t, rng, std::sqrt(1.0 / static_cast<double>(fan_in)));
}

// Uniform fan-in bias init; keeps post-activation zeros off the relu kink.
template <class S>
void fan_in_bias(Tensor<S>& t, Rng& rng, Eigen::Index fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.uniform(-bound, bound));
}

}  // namespace init

// 2-d convolution layer; weight [Cout,Cin,k,k], bias [Cout].
template <class S>
struct Conv2dLayer {
    Param<S> weight, bias;
    Eigen::Index stride = 1, pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(const std::string& name, Eigen::Index cin, Eigen::Index cout, Eigen::Index k,
                Eigen::Index stride_, Eigen::Index pad_, Rng& rng, bool trainable = true)
        : weight(name + ".weight", Tensor<S>({cout, cin, k, k}), trainable),
          bias(name + ".bias", Tensor<S>({cout}), trainable),
          stride(stride_),
          pad(pad_) {
        init::he(weight.value, rng, cin * k * k);
        init::fan_in_bias(bias.value, rng, cin * k * k);
    }

    Var<S> operator()(Graph<S>& g, Var<S> x) {
        return conv2d(x, g.param(weight), g.param(bias), stride, pad);
    }

    void params(ParamList<S>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
};

// Transposed convolution with kernel == stride; weight [Cin,Cout,k,k].
template <class S>
struct ConvT2dLayer {
    Param<S> weight, bias;

    ConvT2dLayer() = default;
    ConvT2dLayer(const std::string& name, Eigen::Index cin, Eigen::Index cout, Eigen::Index k,
                 Rng& rng, bool trainable = true)
        : weight(name + ".weight", Tensor<S>({cin, cout, k, k}), trainable),
          bias(name + ".bias", Tensor<S>({cout}), trainable) {
        init::he(weight.value, rng, cin * k * k);
        init::fan_in_bias(bias.value, rng, cin * k * k);
    }

    Var<S> operator()(Graph<S>& g, Var<S> x) {
        return conv_transpose2d(x, g.param(weight), g.param(bias));
    }

    void params(ParamList<S>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
};

// Affine map on token matrices; weight stored [in,out] so forward needs no transpose.
template <class S>
struct LinearLayer {
    Param<S> weight, bias;

    LinearLayer() = default;
    LinearLayer(const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng,
                bool trainable = true)
        : weight(name + ".weight", Tensor<S>({in, out}), trainable),
          bias(name + ".bias", Tensor<S>({out}), trainable) {
        init::xavier(weight.value, rng, in);
        init::fan_in_bias(bias.value, rng, in);
    }

    Var<S> operator()(Graph<S>& g, Var<S> x) {
        return add_rowwise(matmul(x, g.param(weight)), g.param(bias));
    }

    void params(ParamList<S>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
};

template <class S>
struct LayerNormLayer {
    Param<S> gamma, beta;

    LayerNormLayer() = default;
    LayerNormLayer(const std::string& name, Eigen::Index dim, bool trainable = true)
        : gamma(name + ".gamma", Tensor<S>::full({dim}, S(1)), trainable),
          beta(name + ".beta", Tensor<S>({dim}), trainable) {}

    Var<S> operator()(Graph<S>& g, Var<S> x) {
        return layernorm_rows(x, g.param(gamma), g.param(beta));
    }

    void params(ParamList<S>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
};

}  // namespace urbansam
