#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "rb/diffusion.hpp"
#include "rb/rng.hpp"

using namespace rb;

namespace {

Tensor randn(std::vector<int> shape, std::mt19937_64& eng, bool rg = false) {
    std::normal_distribution<double> d(0.0, 1.0);
    Tensor t = Tensor::zeros(std::move(shape), rg);
    for (double& v : t.values()) v = d(eng);
    return t;
}

GuidanceBundle toy_bundle(std::mt19937_64& eng, int d_diff) {
    GuidanceBundle b;
    b.v_hat = randn({4, d_diff}, eng);
    b.rbar_vis = randn({5, d_diff}, eng);
    b.ebar_vis = randn({3, d_diff}, eng);
    b.rbar_txt = randn({2, d_diff}, eng);
    b.ebar_txt = randn({3, d_diff}, eng);
    return b;
}

}  // namespace

TEST_CASE("noise schedule matches the cumulative-product oracle") {
    NoiseSchedule s = NoiseSchedule::linear(100, 1e-4, 0.02);
    CHECK(s.abar(0) == 1.0);
    CHECK(s.abar(1) == doctest::Approx(1.0 - 1e-4).epsilon(1e-12));

    // independent cumulative product
    double prod = 1.0;
    for (int t = 1; t <= 100; ++t) {
        const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 99.0;
        prod *= 1.0 - beta;
        CHECK(s.abar(t) == doctest::Approx(prod).epsilon(1e-12));
        CHECK(s.abar(t) > 0.0);
        CHECK(s.abar(t) < 1.0);
        if (t > 1) CHECK(s.abar(t) < s.abar(t - 1));
    }

    CHECK_THROWS_AS(s.abar(101), InvariantError);
    CHECK_THROWS_AS(s.abar(-1), InvariantError);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.0, 0.02), InvariantError);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.5, 0.2), InvariantError);
}

TEST_CASE("forward noising closed form and variance") {
    auto eng = make_engine(61, "diff");
    NoiseSchedule s = NoiseSchedule::linear(50, 1e-4, 0.02);
    Tensor z0 = randn({4, 3}, eng);
    Tensor zero_eps = Tensor::zeros({4, 3});
    const int t = 20;
    Tensor z_t = forward_noising(z0, t, zero_eps, s);
    for (std::size_t i = 0; i < z0.numel(); ++i)
        CHECK(z_t.values()[i] == std::sqrt(s.abar(t)) * z0.values()[i]);

    CHECK_THROWS_AS(forward_noising(z0, 0, zero_eps, s), InvariantError);
    CHECK_THROWS_AS(forward_noising(z0, 51, zero_eps, s), InvariantError);
    CHECK_THROWS_AS(forward_noising(z0, 5, Tensor::zeros({3, 3}), s), InvariantError);

    // Monte Carlo: for unit-variance z0 the noised variance stays at
    // abar * Var(z0) + (1 - abar) = 1
    std::normal_distribution<double> n01(0.0, 1.0);
    double sum = 0, sum_sq = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        const double z = n01(eng);
        const double e = n01(eng);
        const double v = std::sqrt(s.abar(t)) * z + std::sqrt(1.0 - s.abar(t)) * e;
        sum += v;
        sum_sq += v * v;
    }
    const double var = sum_sq / draws - (sum / draws) * (sum / draws);
    CHECK(var == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("conditioning reduces to the bare latents at zero init") {
    auto eng = make_engine(62, "diff");
    const int c_lat = 6, d_diff = 8;
    ConditionInjections inj = ConditionInjections::make(d_diff, c_lat);
    Tensor z_t = randn({10, c_lat}, eng);
    Tensor img_lat = randn({10, c_lat}, eng);
    Tensor rbar_vis = randn({5, d_diff}, eng);
    Tensor rbar_txt = randn({3, d_diff}, eng);
    Tensor out = condition_inputs(z_t, img_lat, rbar_vis, rbar_txt, inj);
    CHECK(out.shape() == std::vector<int>{10, 2 * c_lat});
    Tensor cat = concat({z_t, img_lat}, 1);
    CHECK(out.values() == cat.values());  // zero-init projections add nothing

    CHECK_THROWS_AS(condition_inputs(z_t, randn({9, c_lat}, eng), rbar_vis, rbar_txt, inj),
                    InvariantError);
}

TEST_CASE("gradient flows into the cue maps once the injections move off zero") {
    auto eng = make_engine(63, "diff");
    const int c_lat = 4, d_diff = 6;
    ConditionInjections inj = ConditionInjections::make(d_diff, c_lat);
    for (double& v : inj.vis.w.values()) v = std::normal_distribution<>(0, 0.1)(eng);
    for (double& v : inj.txt.w.values()) v = std::normal_distribution<>(0, 0.1)(eng);
    Tensor z_t = randn({6, c_lat}, eng);
    Tensor img_lat = randn({6, c_lat}, eng);
    Tensor rbar_vis = randn({5, d_diff}, eng, true);
    Tensor rbar_txt = randn({3, d_diff}, eng, true);
    {
        Tape tape;
        tape.backward(sum_all(condition_inputs(z_t, img_lat, rbar_vis, rbar_txt, inj)));
    }
    CHECK(rbar_vis.grad_norm() > 0.0);
    CHECK(rbar_txt.grad_norm() > 0.0);
}

TEST_CASE("denoiser output shape and timestep sensitivity") {
    auto eng = make_engine(64, "diff");
    Denoiser dn = Denoiser::make(4, 8, 2, 2, eng);
    Tensor conditioned = randn({6, 8}, eng);
    Tensor ctx = randn({5, 8}, eng);
    Tensor p1 = dn.forward(3, conditioned, ctx);
    CHECK(p1.shape() == std::vector<int>{6, 4});

    Tensor p2 = dn.forward(40, conditioned, ctx);
    bool differs = false;
    for (std::size_t i = 0; i < p1.numel(); ++i)
        if (p1.values()[i] != p2.values()[i]) differs = true;
    CHECK(differs);
}

TEST_CASE("noise prediction loss oracle cases") {
    auto eng = make_engine(65, "diff");
    Tensor eps = randn({8, 4}, eng);
    // a cheating predictor that returns the true noise
    CHECK(noise_prediction_loss(eps, eps).item() == 0.0);
    // loss is non-negative
    CHECK(noise_prediction_loss(eps, randn({8, 4}, eng)).item() > 0.0);

    // zero predictor across draws: mean squared magnitude of a standard
    // normal is 1
    double acc = 0.0;
    const int draws = 1000;
    Tensor zero = Tensor::zeros({8, 4});
    for (int i = 0; i < draws; ++i) {
        Tensor e = randn({8, 4}, eng);
        acc += noise_prediction_loss(e, zero).item();
    }
    CHECK(acc / draws == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("full diffusion loss is finite and differentiable") {
    auto eng = make_engine(66, "diff");
    const int c_lat = 4, d_diff = 8;
    NoiseSchedule s = NoiseSchedule::linear(20, 1e-4, 0.02);
    Denoiser dn = Denoiser::make(c_lat, d_diff, 1, 2, eng);
    ConditionInjections inj = ConditionInjections::make(d_diff, c_lat);
    GuidanceBundle bundle = toy_bundle(eng, d_diff);
    Tensor z0 = randn({6, c_lat}, eng);
    Tensor img_lat = randn({6, c_lat}, eng);

    auto rng = make_engine(9, "draw");
    Tensor loss;
    {
        Tape tape;
        loss = diffusion_loss(z0, img_lat, bundle, s, dn, inj, rng);
        tape.backward(loss);
    }
    CHECK(std::isfinite(loss.item()));
    CHECK(loss.item() >= 0.0);
    double head_norm = dn.head.w.grad_norm();
    CHECK(head_norm > 0.0);
}

TEST_CASE("total loss is the exact unweighted sum") {
    Tensor a = Tensor::scalar(0.0);
    Tensor b = Tensor::scalar(0.0);
    CHECK(total_loss(a, b).item() == 0.0);

    Tensor m = Tensor::scalar(32.0 * std::log(100.0));
    Tensor d = Tensor::scalar(1.0);
    CHECK(total_loss(m, d).item() == 32.0 * std::log(100.0) + 1.0);

    Tensor bad = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
    CHECK_THROWS_AS(total_loss(bad, d), InvariantError);
    Tensor inf = Tensor::scalar(std::numeric_limits<double>::infinity());
    CHECK_THROWS_AS(total_loss(m, inf), InvariantError);
}

TEST_CASE("ddim reconstructs the original latent under the true-noise oracle") {
    auto eng = make_engine(67, "diff");
    NoiseSchedule s = NoiseSchedule::linear(100, 1e-4, 0.02);
    Tensor z0 = randn({8, 4}, eng);
    Tensor eps = randn({8, 4}, eng);
    Tensor z_T = forward_noising(z0, 100, eps, s);

    DenoiseFn oracle = [&](int, const Tensor&) { return eps; };
    for (int steps : {100, 10, 1}) {
        Tensor rec = ddim_reverse(z_T, s, steps, oracle);
        double linf = 0;
        for (std::size_t i = 0; i < z0.numel(); ++i)
            linf = std::max(linf, std::abs(rec.values()[i] - z0.values()[i]));
        CHECK(linf < 1e-5);
    }
    CHECK_THROWS_AS(ddim_reverse(z_T, s, 0, oracle), InvariantError);
    CHECK_THROWS_AS(ddim_reverse(z_T, s, 101, oracle), InvariantError);
}

TEST_CASE("single ddim step applies the jump formula once") {
    auto eng = make_engine(68, "diff");
    NoiseSchedule s = NoiseSchedule::linear(100, 1e-4, 0.02);
    Tensor z_T = randn({4, 3}, eng);
    Tensor pred = randn({4, 3}, eng);
    DenoiseFn fixed = [&](int, const Tensor&) { return pred; };
    Tensor out = ddim_reverse(z_T, s, 1, fixed);
    const double ab = s.abar(100);
    for (std::size_t i = 0; i < z_T.numel(); ++i) {
        const double expect = (z_T.values()[i] - std::sqrt(1.0 - ab) * pred.values()[i]) /
                              std::sqrt(ab);
        CHECK(out.values()[i] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("seeded sampling is reproducible") {
    Tensor a = seeded_normal({5, 3}, 1234);
    Tensor b = seeded_normal({5, 3}, 1234);
    Tensor c = seeded_normal({5, 3}, 1235);
    CHECK(a.values() == b.values());
    CHECK(a.values() != c.values());
}

TEST_CASE("timestep embedding varies with t") {
    Tensor e1 = timestep_embedding(1, 8);
    Tensor e2 = timestep_embedding(2, 8);
    CHECK(e1.numel() == 8);
    CHECK(e1.values() != e2.values());
}
