#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "testutil.hpp"
#include "urbansam/decoder.hpp"

using namespace urbansam;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

DecoderConfig desk_cfg() {
    DecoderConfig c;
    c.trunk_dim = 16;
    c.adapter_channels = 8;
    c.fuse_channels = 6;
    c.ladder_channels = 6;
    c.skip_channels = 4;
    c.mlp_hidden = 16;
    c.patch_size = 16;
    c.adapter_ratio = 8;
    return c;
}

struct Inputs {
    Tensor<double> f_v, f_u, m_pre, m_fv;
    std::vector<Tensor<double>> pyr;
};

Inputs make_inputs(const DecoderConfig& c, Eigen::Index grid, Rng& rng) {
    Inputs in;
    in.f_v = random_tensor({c.trunk_dim, grid, grid}, rng);
    in.f_u = random_tensor({c.adapter_channels, grid * c.adapter_ratio, grid * c.adapter_ratio}, rng);
    in.m_pre = random_tensor({1, grid, grid}, rng, 0.0, 1.0);
    in.m_fv = random_tensor({c.trunk_dim, grid, grid}, rng);
    Eigen::Index s = grid * c.adapter_ratio;
    for (int j = 0; j < 4; ++j) {
        in.pyr.push_back(random_tensor({c.adapter_channels, s, s}, rng));
        s /= 2;
    }
    return in;
}

}  // namespace

TEST_CASE("decoder output resolutions: full image and exact quarter") {
    auto cfg = desk_cfg();
    Rng rng(1);
    ConsistencyDecoder<double> dec(cfg, rng);
    Rng rx(2);
    auto in = make_inputs(cfg, 4, rx);
    Graph<double> g;
    std::vector<Var<double>> pyr;
    for (auto& p : in.pyr) pyr.push_back(g.constant(p));
    auto st = dec(g, g.constant(in.f_v), g.constant(in.f_u), g.constant(in.m_pre),
                  g.constant(in.m_fv), &pyr);
    CHECK(g.val(st.seg_logits).shape() == std::vector<Eigen::Index>{1, 64, 64});
    CHECK(g.val(st.aux_quarter_logits).shape() == std::vector<Eigen::Index>{1, 16, 16});
    CHECK(st.h1_shape == std::vector<Eigen::Index>{12, 8, 8});
    CHECK(st.h2_shape == std::vector<Eigen::Index>{18, 8, 8});
    CHECK(st.h3_shape == std::vector<Eigen::Index>{19, 8, 8});
}

TEST_CASE("mlp token weights: zero layers give 0.5 everywhere, shape is per-token") {
    auto cfg = desk_cfg();
    Rng rng(3);
    ConsistencyDecoder<double> dec(cfg, rng);
    for (auto* p : std::vector<Param<double>*>{&dec.mlp1.weight, &dec.mlp1.bias, &dec.mlp2.weight,
                                               &dec.mlp2.bias, &dec.mlp3.weight, &dec.mlp3.bias})
        p->value.set_zero();
    Rng rx(4);
    Tensor<double> m_fv = random_tensor({cfg.trunk_dim, 4, 4}, rx);
    Graph<double> g;
    Var<double> w = dec.mlp_token_weights(g, g.constant(m_fv));
    CHECK(g.val(w).shape() == std::vector<Eigen::Index>{19, 4, 4});
    CHECK(g.val(w).array().minCoeff() == 0.5);
    CHECK(g.val(w).array().maxCoeff() == 0.5);
}

TEST_CASE("token weights stay in [0,1]") {
    auto cfg = desk_cfg();
    Rng rng(5);
    ConsistencyDecoder<double> dec(cfg, rng);
    Rng rx(6);
    Tensor<double> m_fv = random_tensor({cfg.trunk_dim, 4, 4}, rx, -3.0, 3.0);
    Graph<double> g;
    Var<double> w = dec.mlp_token_weights(g, g.constant(m_fv));
    CHECK(g.val(w).array().minCoeff() >= 0.0);
    CHECK(g.val(w).array().maxCoeff() <= 1.0);
}

TEST_CASE("saturated MLP output makes the gate an identity") {
    // With the last layer forced to sigmoid(100) == 1.0 (exact in double), the
    // gate multiplies by exactly one, so the first two MLP layers must have no
    // influence on the output at all.
    auto cfg = desk_cfg();
    Rng rng(7);
    ConsistencyDecoder<double> dec(cfg, rng);
    dec.mlp3.weight.value.set_zero();
    dec.mlp3.bias.value.array().setConstant(100.0);
    Rng rx(8);
    auto in = make_inputs(cfg, 4, rx);

    auto run = [&]() {
        Graph<double> g;
        std::vector<Var<double>> pyr;
        for (auto& p : in.pyr) pyr.push_back(g.constant(p));
        auto st = dec(g, g.constant(in.f_v), g.constant(in.f_u), g.constant(in.m_pre),
                      g.constant(in.m_fv), &pyr);
        return g.val(st.seg_logits);
    };
    Tensor<double> before = run();
    init::gaussian(dec.mlp1.weight.value, rng, 1.0);  // would change the gate if it mattered
    init::gaussian(dec.mlp2.weight.value, rng, 1.0);
    Tensor<double> after = run();
    CHECK((before.array() - after.array()).abs().maxCoeff() == 0.0);
}

TEST_CASE("perturbing one MLP weight changes the segmentation output") {
    auto cfg = desk_cfg();
    Rng rng(9);
    ConsistencyDecoder<double> dec(cfg, rng);
    Rng rx(10);
    auto in = make_inputs(cfg, 4, rx);
    auto run = [&]() {
        Graph<double> g;
        auto st = dec(g, g.constant(in.f_v), g.constant(in.f_u), g.constant(in.m_pre),
                      g.constant(in.m_fv));
        return g.val(st.seg_logits);
    };
    Tensor<double> before = run();
    dec.mlp2.weight.value[0] += 0.25;
    Tensor<double> after = run();
    CHECK((before.array() - after.array()).abs().maxCoeff() > 0.0);
}

TEST_CASE("decoder is deterministic") {
    auto cfg = desk_cfg();
    Rng rng(11);
    ConsistencyDecoder<double> dec(cfg, rng);
    Rng rx(12);
    auto in = make_inputs(cfg, 4, rx);
    auto run = [&]() {
        Graph<double> g;
        std::vector<Var<double>> pyr;
        for (auto& p : in.pyr) pyr.push_back(g.constant(p));
        auto st = dec(g, g.constant(in.f_v), g.constant(in.f_u), g.constant(in.m_pre),
                      g.constant(in.m_fv), &pyr);
        return g.val(st.seg_logits);
    };
    Tensor<double> a = run(), b = run();
    CHECK((a.array() - b.array()).abs().maxCoeff() == 0.0);
}

TEST_CASE("decoder gradients match finite differences at 16x16 toy size") {
    DecoderConfig cfg;
    cfg.trunk_dim = 6;
    cfg.adapter_channels = 4;
    cfg.fuse_channels = 4;
    cfg.ladder_channels = 4;
    cfg.skip_channels = 3;
    cfg.mlp_hidden = 6;
    cfg.patch_size = 4;
    cfg.adapter_ratio = 4;
    Rng rng(13);
    ConsistencyDecoder<double> dec(cfg, rng);
    Rng rx(14);
    Tensor<double> f_v = random_tensor({6, 4, 4}, rx);
    Tensor<double> f_u = random_tensor({4, 16, 16}, rx);
    Tensor<double> m_pre = random_tensor({1, 4, 4}, rx, 0.0, 1.0);
    Tensor<double> m_fv = random_tensor({6, 4, 4}, rx);
    std::vector<Tensor<double>> pyr{random_tensor({4, 16, 16}, rx), random_tensor({4, 8, 8}, rx),
                                    random_tensor({4, 4, 4}, rx), random_tensor({4, 2, 2}, rx)};
    Tensor<double> mix_seg, mix_aux;
    auto build = [&](Graph<double>& g) {
        std::vector<Var<double>> pv;
        for (auto& p : pyr) pv.push_back(g.constant(p));
        auto st = dec(g, g.constant(f_v), g.constant(f_u), g.constant(m_pre), g.constant(m_fv), &pv);
        if (mix_seg.numel() == 0) {
            Rng mr(15);
            mix_seg = random_tensor(g.val(st.seg_logits).shape(), mr);
            mix_aux = random_tensor(g.val(st.aux_quarter_logits).shape(), mr);
        }
        return add(mean_all(mul(st.seg_logits, g.constant(mix_seg))),
                   mean_all(mul(st.aux_quarter_logits, g.constant(mix_aux))));
    };
    auto loss = [&]() {
        Graph<double> g;
        return build(g).value().value();
    };
    auto back = [&]() {
        Graph<double> g;
        g.backward(build(g));
    };
    ParamList<double> ps;
    dec.params(ps);
    auto res = grad_check(ps, loss, back);
    INFO(res.worst);
    CHECK(res.max_rel_err <= 1e-4);
}
