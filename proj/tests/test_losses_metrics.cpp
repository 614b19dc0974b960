#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "testutil.hpp"
#include "urbansam/losses.hpp"
#include "urbansam/metrics.hpp"

using namespace urbansam;
using testutil::random_binary;
using testutil::random_tensor;

namespace {

double eval_bce(const Tensor<double>& p, const Tensor<double>& y, double clip = 1e-7) {
    Graph<double> g;
    return g.val(bce_loss(g, g.constant(p), y, clip)).value();
}

double eval_dice(const Tensor<double>& p, const Tensor<double>& y, double smooth = 1.0) {
    Graph<double> g;
    return g.val(dice_loss(g, g.constant(p), y, smooth)).value();
}

// independent scalar-loop oracle
double bce_oracle(const Tensor<double>& p, const Tensor<double>& y, double clip = 1e-7) {
    double acc = 0;
    for (Eigen::Index i = 0; i < p.numel(); ++i) {
        double pi = std::min(std::max(p[i], clip), 1.0 - clip);
        acc += -(y[i] * std::log(pi) + (1.0 - y[i]) * std::log(1.0 - pi));
    }
    return acc / static_cast<double>(p.numel());
}

double dice_oracle(const Tensor<double>& p, const Tensor<double>& y, double smooth = 1.0) {
    double inter = 0, sp = 0, sy = 0;
    for (Eigen::Index i = 0; i < p.numel(); ++i) {
        inter += p[i] * y[i];
        sp += p[i];
        sy += y[i];
    }
    return 1.0 - (2.0 * inter + smooth) / (sp + sy + smooth);
}

MetricsReport metrics_oracle(const Tensor<double>& pred, const Tensor<double>& gt) {
    MetricsReport r;
    for (Eigen::Index i = 0; i < pred.numel(); ++i) {
        if (pred[i] == 1 && gt[i] == 1)
            ++r.tp;
        else if (pred[i] == 1 && gt[i] == 0)
            ++r.fp;
        else if (pred[i] == 0 && gt[i] == 1)
            ++r.fn;
        else
            ++r.tn;
    }
    return r;
}

}  // namespace

TEST_CASE("bce analytic points") {
    Tensor<double> gt = Tensor<double>::full({1, 4, 4}, 1.0);
    CHECK(eval_bce(gt, gt) <= -std::log(1.0 - 1e-7) + 1e-12);  // pred == gt, clipped
    Tensor<double> half = Tensor<double>::full({1, 4, 4}, 0.5);
    Rng rng(1);
    Tensor<double> y = random_binary({1, 4, 4}, rng);
    CHECK(eval_bce(half, y) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("bce equals the scalar-loop oracle on random 8x8 instances") {
    Rng rng(2);
    for (int i = 0; i < 10; ++i) {
        Tensor<double> p = random_tensor({1, 8, 8}, rng, 0.0, 1.0);
        Tensor<double> y = random_binary({1, 8, 8}, rng);
        CHECK(std::abs(eval_bce(p, y) - bce_oracle(p, y)) <= 1e-12);
    }
}

TEST_CASE("bce rejects shape mismatch and non-binary targets") {
    Graph<double> g;
    Rng rng(3);
    Tensor<double> p = random_tensor({1, 4, 4}, rng, 0.0, 1.0);
    CHECK_THROWS_AS(bce_loss(g, g.constant(p), Tensor<double>({1, 3, 3})), ValidationError);
    Tensor<double> soft_gt = Tensor<double>::full({1, 4, 4}, 0.25);
    CHECK_THROWS_AS(bce_loss(g, g.constant(p), soft_gt), ValidationError);
}

TEST_CASE("dice analytic points") {
    Rng rng(4);
    Tensor<double> y = random_binary({1, 6, 6}, rng);
    CHECK(eval_dice(y, y) == doctest::Approx(0.0).epsilon(1e-12));  // exact with smoothing
    // disjoint supports
    Tensor<double> p({1, 2, 2}), q({1, 2, 2});
    p[0] = 1;
    q[1] = 1;
    CHECK(eval_dice(p, q, 1e-9) == doctest::Approx(1.0).epsilon(1e-6));
    // half-ones 4x4 against constant 0.5, tiny smoothing recovers the hand value
    Tensor<double> half = Tensor<double>::full({1, 4, 4}, 0.5);
    Tensor<double> gt({1, 4, 4});
    for (int i = 0; i < 8; ++i) gt[i] = 1.0;
    CHECK(eval_dice(half, gt, 1e-12) == doctest::Approx(0.5).epsilon(1e-9));
    // and the smoothed form matches its own closed form
    CHECK(eval_dice(half, gt, 1.0) == doctest::Approx(1.0 - 9.0 / 17.0).epsilon(1e-12));
}

TEST_CASE("composite loss is the exact weighted sum") {
    Rng rng(5);
    Tensor<double> p = random_tensor({1, 5, 5}, rng, 0.0, 1.0);
    Tensor<double> y = random_binary({1, 5, 5}, rng);
    LossWeights w;
    w.lambda_bce = 1.0;
    w.lambda_dice = 0.0;
    Graph<double> g;
    CHECK(g.val(composite_loss(g, g.constant(p), y, w)).value() ==
          doctest::Approx(eval_bce(p, y)).epsilon(1e-15));
    w.lambda_bce = 0.2;
    w.lambda_dice = 0.8;
    const double expect = 0.2 * eval_bce(p, y) + 0.8 * eval_dice(p, y);
    CHECK(std::abs(g.val(composite_loss(g, g.constant(p), y, w)).value() - expect) <= 1e-12);
    w.lambda_bce = 0.0;
    w.lambda_dice = 0.0;
    CHECK(g.val(composite_loss(g, g.constant(p), y, w)).value() == 0.0);
    w.lambda_bce = -0.1;
    CHECK_THROWS_AS(w.validate(), ValidationError);
}

TEST_CASE("total loss composition against independent recomputation") {
    Rng rng(6);
    LossWeights w;  // 0.2 / 0.8, n=5
    Tensor<double> gt = random_binary({1, 16, 16}, rng);
    Tensor<double> final_pred = random_tensor({1, 16, 16}, rng, 0.0, 1.0);
    Tensor<double> quarter_pred = random_tensor({1, 4, 4}, rng, 0.0, 1.0);
    std::vector<Tensor<double>> masks;
    for (int i = 0; i < 5; ++i) masks.push_back(random_tensor({1, 4, 4}, rng, 0.0, 1.0));

    Graph<double> g;
    std::vector<Var<double>> mvars;
    for (auto& m : masks) mvars.push_back(g.constant(m));
    const double got = g.val(total_loss(g, g.constant(final_pred), g.constant(quarter_pred), mvars,
                                        gt, w)).value();

    auto comp = [&](const Tensor<double>& p, const Tensor<double>& y) {
        return 0.2 * bce_oracle(p, y) + 0.8 * dice_oracle(p, y);
    };
    Tensor<double> gt4 = downsample_gt(gt, 4, 4);
    double expect = comp(final_pred, gt) + comp(quarter_pred, gt4);
    double msum = 0;
    for (auto& m : masks) msum += comp(m, gt4);
    expect += msum / 5.0;
    CHECK(std::abs(got - expect) <= 1e-12);
}

TEST_CASE("total loss analytic cases") {
    LossWeights w;
    Graph<double> g;
    Tensor<double> gt({1, 8, 8});
    for (int i = 0; i < 32; ++i) gt[i] = 1.0;
    Tensor<double> gt2 = downsample_gt(gt, 2, 2);
    // all predictions perfect -> total ~ 0
    std::vector<Var<double>> perfect;
    for (int i = 0; i < 5; ++i) perfect.push_back(g.constant(gt2));
    const double t = g.val(total_loss(g, g.constant(gt), g.constant(gt2), perfect, gt, w)).value();
    CHECK(t <= 1e-6);
    // wrong count of stage predictions
    std::vector<Var<double>> four(perfect.begin(), perfect.begin() + 4);
    CHECK_THROWS_AS(total_loss(g, g.constant(gt), g.constant(gt2), four, gt, w), ValidationError);
}

TEST_CASE("nearest-neighbor GT downsampling stays binary") {
    Rng rng(7);
    Tensor<double> gt = random_binary({1, 32, 32}, rng, 0.3);
    for (auto dims : std::vector<std::pair<Eigen::Index, Eigen::Index>>{{8, 8}, {4, 4}, {5, 7}}) {
        Tensor<double> d = downsample_gt(gt, dims.first, dims.second);
        for (Eigen::Index i = 0; i < d.numel(); ++i) CHECK((d[i] == 0.0 || d[i] == 1.0));
    }
}

TEST_CASE("metrics hand example and degenerate cases") {
    // tp=3 fp=1 fn=1 tn=5
    Tensor<double> pred({1, 2, 5}), gt({1, 2, 5});
    // lay out the confusion cells explicitly
    double pv[10] = {1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
    double yv[10] = {1, 1, 1, 0, 1, 0, 0, 0, 0, 0};
    for (int i = 0; i < 10; ++i) {
        pred[i] = pv[i];
        gt[i] = yv[i];
    }
    MetricsReport r = compute_metrics(pred, gt);
    CHECK(r.tp == 3);
    CHECK(r.fp == 1);
    CHECK(r.fn == 1);
    CHECK(r.tn == 5);
    CHECK(r.oa() == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(r.precision() == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(r.recall() == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(r.f1() == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(r.iou() == doctest::Approx(0.6).epsilon(1e-15));

    MetricsReport perfect = compute_metrics(gt, gt);
    CHECK(perfect.oa() == 1.0);
    CHECK(perfect.precision() == 1.0);
    CHECK(perfect.recall() == 1.0);
    CHECK(perfect.f1() == 1.0);
    CHECK(perfect.iou() == 1.0);

    Tensor<double> inverted({1, 2, 5});
    for (int i = 0; i < 10; ++i) inverted[i] = 1.0 - gt[i];
    CHECK(compute_metrics(inverted, gt).iou() == 0.0);

    Tensor<double> soft = Tensor<double>::full({1, 2, 5}, 0.5);
    CHECK_THROWS_AS(compute_metrics(soft, gt), ValidationError);
}

TEST_CASE("metric-oracle equivalence on 100 random pairs, F1/IoU relation") {
    Rng rng(8);
    for (int i = 0; i < 100; ++i) {
        Tensor<double> pred = random_binary({1, 16, 16}, rng, 0.4);
        Tensor<double> gt = random_binary({1, 16, 16}, rng, 0.4);
        MetricsReport got = compute_metrics(pred, gt);
        MetricsReport want = metrics_oracle(pred, gt);
        CHECK(got.tp == want.tp);
        CHECK(got.fp == want.fp);
        CHECK(got.fn == want.fn);
        CHECK(got.tn == want.tn);
        CHECK(got.oa() == want.oa());
        CHECK(got.precision() == want.precision());
        CHECK(got.recall() == want.recall());
        CHECK(got.f1() == want.f1());
        CHECK(got.iou() == want.iou());
        if (got.tp + got.fp + got.fn > 0)
            CHECK(std::abs(got.f1() - 2.0 * got.iou() / (1.0 + got.iou())) <= 1e-12);
    }
}

TEST_CASE("streaming metric accumulation is count-additive") {
    Rng rng(9);
    MetricsReport merged;
    MetricsReport whole;
    Tensor<double> all_pred({1, 8, 40}), all_gt({1, 8, 40});
    Eigen::Index off = 0;
    for (int b = 0; b < 5; ++b) {
        Tensor<double> pred = random_binary({1, 8, 8}, rng);
        Tensor<double> gt = random_binary({1, 8, 8}, rng);
        merged.merge(compute_metrics(pred, gt));
        for (Eigen::Index y = 0; y < 8; ++y)
            for (Eigen::Index x = 0; x < 8; ++x) {
                all_pred.at(0, y, off + x) = pred.at(0, y, x);
                all_gt.at(0, y, off + x) = gt.at(0, y, x);
            }
        off += 8;
    }
    whole = compute_metrics(all_pred, all_gt);
    CHECK(merged.tp == whole.tp);
    CHECK(merged.fp == whole.fp);
    CHECK(merged.fn == whole.fn);
    CHECK(merged.tn == whole.tn);
    CHECK(merged.iou() == whole.iou());
}

TEST_CASE("loss gradients match finite differences") {
    Rng rng(10);
    Param<double> logits("logits", random_tensor({1, 4, 4}, rng, -1.5, 1.5));
    Tensor<double> gt = random_binary({1, 4, 4}, rng);
    LossWeights w;
    auto build = [&](Graph<double>& g) {
        return composite_loss(g, sigmoid(g.param(logits)), gt, w);
    };
    auto loss = [&]() {
        Graph<double> g;
        return build(g).value().value();
    };
    auto back = [&]() {
        Graph<double> g;
        g.backward(build(g));
    };
    auto res = testutil::grad_check({&logits}, loss, back);
    INFO(res.worst);
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("metrics serialization") {
    Tensor<double> pred({1, 2, 2}), gt({1, 2, 2});
    pred[0] = 1;
    gt[0] = 1;
    gt[1] = 1;
    MetricsReport r = compute_metrics(pred, gt);
    auto j = r.to_json();
    CHECK(j.at("tp").get<int>() == 1);
    CHECK(j.at("fn").get<int>() == 1);
    CHECK(j.contains("oa"));
    CHECK(j.contains("iou"));
    CHECK(MetricsReport::csv_header() == "tp,fp,fn,tn,oa,precision,recall,f1,iou");
    CHECK(r.csv_row().substr(0, 8) == "1,0,1,2,");
}
