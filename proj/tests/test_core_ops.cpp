#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "testutil.hpp"
#include "urbansam/core/graph.hpp"

using namespace urbansam;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

// FD-checks a unary/structural op by wrapping it in a weighted-sum loss so the
// scalar output exercises every element of the op output.
void check_op(const std::function<Var<double>(Graph<double>&, Var<double>)>& op,
              std::vector<Eigen::Index> in_shape, double lo = -1.0, double hi = 1.0) {
    Rng rng(7);
    Param<double> x("x", random_tensor(in_shape, rng, lo, hi));
    Tensor<double> w;  // fixed random weights over the op output
    auto build = [&](Graph<double>& g) {
        Var<double> y = op(g, g.param(x));
        if (w.numel() == 0) {
            Rng wr(11);
            w = random_tensor(g.val(y).shape(), wr);
        }
        return mean_all(mul(y, g.constant(w)));
    };
    auto loss = [&]() {
        Graph<double> g;
        return build(g).value().value();
    };
    auto back = [&]() {
        Graph<double> g;
        g.backward(build(g));
    };
    auto res = grad_check({&x}, loss, back);
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-6);
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
    check_op([](Graph<double>& g, Var<double> x) { return relu(x); }, {3, 4, 4});
    check_op([](Graph<double>& g, Var<double> x) { return sigmoid(x); }, {2, 3, 3});
    check_op([](Graph<double>& g, Var<double> x) { return log_op(x); }, {2, 5}, 0.2, 2.0);
    check_op([](Graph<double>& g, Var<double> x) { return clamp(x, -0.5, 0.5); }, {3, 7});
    check_op([](Graph<double>& g, Var<double> x) { return scale(add_const(x, 0.3), -1.7); }, {4, 4});
    check_op([](Graph<double>& g, Var<double> x) { return add(x, x); }, {2, 2});
    check_op([](Graph<double>& g, Var<double> x) { return mul(x, x); }, {2, 2});
}

TEST_CASE("matrix ops match finite differences") {
    Rng rng(3);
    Tensor<double> other = random_tensor({4, 5}, rng);
    check_op([&](Graph<double>& g, Var<double> x) { return matmul(x, g.constant(other)); }, {3, 4});
    check_op([&](Graph<double>& g, Var<double> x) { return matmul(g.constant(other), transpose(x)); },
             {6, 5});
    check_op([](Graph<double>& g, Var<double> x) { return softmax_rows(x); }, {5, 6});
    check_op([](Graph<double>& g, Var<double> x) { return slice_cols(x, 1, 4); }, {3, 6});
    check_op([](Graph<double>& g, Var<double> x) {
        auto a = slice_cols(x, 0, 2);
        auto b = slice_cols(x, 2, 5);
        return concat_cols<double>({b, a});
    }, {3, 5});
}

TEST_CASE("two-input ops propagate to both sides") {
    Rng rng(5);
    Param<double> a("a", random_tensor({3, 4}, rng));
    Param<double> b("b", random_tensor({4, 2}, rng));
    auto build = [&](Graph<double>& g) {
        Var<double> ratio = div(sigmoid(g.param(a)), add_const(sigmoid(g.param(a)), 0.5));
        return mean_all(matmul(transpose(ratio), matmul(g.param(a), g.param(b))));
    };
    auto loss = [&]() {
        Graph<double> g;
        return build(g).value().value();
    };
    auto back = [&]() {
        Graph<double> g;
        g.backward(build(g));
    };
    auto res = grad_check({&a, &b}, loss, back);
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("row-wise broadcast ops match finite differences") {
    Rng rng(9);
    Param<double> a("a", random_tensor({5, 3}, rng));
    Param<double> v("v", random_tensor({3}, rng));
    Param<double> m("m", random_tensor({5, 1}, rng, 0.1, 0.9));
    auto build = [&](Graph<double>& g) {
        Var<double> y = add_rowwise(g.param(a), g.param(v));
        y = mul_rowwise(y, g.param(m));
        return mean_all(mul(y, y));
    };
    auto loss = [&]() {
        Graph<double> g;
        return build(g).value().value();
    };
    auto back = [&]() {
        Graph<double> g;
        g.backward(build(g));
    };
    auto res = grad_check({&a, &v, &m}, loss, back);
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("spatial ops match finite differences") {
    check_op([](Graph<double>& g, Var<double> x) { return maxpool2(x); }, {2, 6, 6});
    check_op([](Graph<double>& g, Var<double> x) { return upsample_nearest(x, 2); }, {2, 3, 3});
    check_op([](Graph<double>& g, Var<double> x) { return resize_bilinear(x, 7, 5); }, {2, 4, 6});
    check_op([](Graph<double>& g, Var<double> x) { return resize_bilinear(x, 3, 2); }, {2, 5, 5});
    check_op([](Graph<double>& g, Var<double> x) { return resize_nearest(x, 5, 7); }, {1, 3, 3});
    check_op([](Graph<double>& g, Var<double> x) { return chw_to_tokens(x); }, {3, 2, 4});
    check_op([](Graph<double>& g, Var<double> x) { return tokens_to_chw(x, 2, 3); }, {6, 4});
    check_op([](Graph<double>& g, Var<double> x) {
        return concat_channels<double>({x, relu(x)});
    }, {2, 3, 3});
}

TEST_CASE("conv ops match finite differences") {
    Rng rng(13);
    Param<double> x("x", random_tensor({3, 6, 6}, rng));
    Param<double> w("w", random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5));
    Param<double> b("b", random_tensor({4}, rng));
    for (auto [stride, pad] : std::vector<std::pair<Eigen::Index, Eigen::Index>>{{1, 1}, {2, 1}, {3, 0}, {1, 0}}) {
        Tensor<double> mix;
        auto build = [&, stride, pad](Graph<double>& g) {
            Var<double> y = conv2d(g.param(x), g.param(w), g.param(b), stride, pad);
            if (mix.numel() == 0) {
                Rng mr(17);
                mix = random_tensor(g.val(y).shape(), mr);
            }
            return mean_all(mul(y, g.constant(mix)));
        };
        auto loss = [&]() {
            Graph<double> g;
            return build(g).value().value();
        };
        auto back = [&]() {
            Graph<double> g;
            g.backward(build(g));
        };
        auto res = grad_check({&x, &w, &b}, loss, back);
        INFO("stride=" << stride << " pad=" << pad << " " << res.worst);
        CHECK(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("transposed conv matches finite differences") {
    Rng rng(19);
    Param<double> x("x", random_tensor({3, 3, 4}, rng));
    Param<double> w("w", random_tensor({3, 2, 2, 2}, rng, -0.5, 0.5));
    Param<double> b("b", random_tensor({2}, rng));
    Tensor<double> mix;
    auto build = [&](Graph<double>& g) {
        Var<double> y = conv_transpose2d(g.param(x), g.param(w), g.param(b));
        if (mix.numel() == 0) {
            Rng mr(23);
            mix = random_tensor(g.val(y).shape(), mr);
        }
        return mean_all(mul(y, g.constant(mix)));
    };
    auto loss = [&]() {
        Graph<double> g;
        return build(g).value().value();
    };
    auto back = [&]() {
        Graph<double> g;
        g.backward(build(g));
    };
    auto res = grad_check({&x, &w, &b}, loss, back);
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("layernorm matches finite differences") {
    Rng rng(29);
    Param<double> x("x", random_tensor({4, 6}, rng));
    Param<double> gm("gamma", random_tensor({6}, rng, 0.5, 1.5));
    Param<double> bt("beta", random_tensor({6}, rng));
    Tensor<double> mix;
    auto build = [&](Graph<double>& g) {
        Var<double> y = layernorm_rows(g.param(x), g.param(gm), g.param(bt));
        if (mix.numel() == 0) {
            Rng mr(31);
            mix = random_tensor(g.val(y).shape(), mr);
        }
        return mean_all(mul(y, g.constant(mix)));
    };
    auto loss = [&]() {
        Graph<double> g;
        return build(g).value().value();
    };
    auto back = [&]() {
        Graph<double> g;
        g.backward(build(g));
    };
    auto res = grad_check({&x, &gm, &bt}, loss, back);
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("scale_by gate matches finite differences") {
    Rng rng(37);
    Param<double> x("x", random_tensor({2, 3, 3}, rng));
    Param<double> s("s", Tensor<double>::full({}, 0.7));
    auto build = [&](Graph<double>& g) { return mean_all(mul(scale_by(g.param(x), g.param(s)),
                                                             scale_by(g.param(x), g.param(s)))); };
    auto loss = [&]() {
        Graph<double> g;
        return build(g).value().value();
    };
    auto back = [&]() {
        Graph<double> g;
        g.backward(build(g));
    };
    auto res = grad_check({&x, &s}, loss, back);
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("straight-through threshold backward equals the shifted-soft surrogate") {
    // The hard output is piecewise constant, so instead of FD on the hard map we
    // check that ste_threshold's backward equals the analytic gradient of
    // sigmoid(p - logit(tau)) built from primitive ops.
    Rng rng(41);
    Param<double> p("p", random_tensor({1, 4, 4}, rng, -2.0, 2.0));
    Param<double> tau("tau", Tensor<double>::full({}, 0.6));
    Tensor<double> mix = random_tensor({1, 4, 4}, rng);

    Param<double> p2("p2", p.value);
    Param<double> tau2("tau2", tau.value);

    {
        Graph<double> g;
        Var<double> hard = ste_threshold(g.param(p), g.param(tau));
        // hard forward really is the thresholded map
        const auto& hv = g.val(hard);
        for (Eigen::Index i = 0; i < hv.numel(); ++i) {
            const double soft = 1.0 / (1.0 + std::exp(-p.value[i]));
            CHECK(hv[i] == (soft >= 0.6 ? 1.0 : 0.0));
        }
        g.backward(mean_all(mul(hard, g.constant(mix))));
    }
    {
        Graph<double> g;
        Var<double> t = g.param(tau2);
        Var<double> one = g.constant(Tensor<double>::scalar(1.0));
        Var<double> logit_tau = sub(log_op(t), log_op(sub(one, t)));
        Tensor<double> ones(p2.value.shape());
        ones.array().setConstant(1.0);
        Var<double> shift = scale_by(g.constant(ones), logit_tau);
        Var<double> soft = sigmoid(sub(g.param(p2), shift));
        g.backward(mean_all(mul(soft, g.constant(mix))));
    }
    for (Eigen::Index i = 0; i < p.grad.numel(); ++i)
        CHECK(p.grad[i] == doctest::Approx(p2.grad[i]).epsilon(1e-9));
    CHECK(tau.grad.value() == doctest::Approx(tau2.grad.value()).epsilon(1e-9));
}

TEST_CASE("softmax rows are stochastic") {
    Rng rng(43);
    Graph<double> g;
    Var<double> y = softmax_rows(g.constant(random_tensor({20, 13}, rng, -5.0, 5.0)));
    const auto m = g.val(y).mat(20, 13);
    for (Eigen::Index r = 0; r < 20; ++r) CHECK(std::abs(m.row(r).sum() - 1.0) < 1e-6);
}

TEST_CASE("frozen parameters keep empty gradient accumulators") {
    Rng rng(47);
    Param<double> frozen("w_frozen", random_tensor({3, 3}, rng), false);
    Param<double> live("w_live", random_tensor({3, 3}, rng));
    Graph<double> g;
    Var<double> y = matmul(g.param(frozen), g.param(live));
    g.backward(mean_all(mul(y, y)));
    CHECK(frozen.grad.array().abs().maxCoeff() == 0.0);
    CHECK(live.grad.array().abs().maxCoeff() > 0.0);
}
