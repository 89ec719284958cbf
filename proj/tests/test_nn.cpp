#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <random>

#include "rb/nn.hpp"
#include "rb/rng.hpp"
#include "rb/tensor.hpp"

using namespace rb;

namespace {

Tensor randn(std::vector<int> shape, std::mt19937_64& eng, bool rg = false) {
    std::normal_distribution<double> d(0.0, 1.0);
    Tensor t = Tensor::zeros(std::move(shape), rg);
    for (double& v : t.values()) v = d(eng);
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

}  // namespace

TEST_CASE("attention single-key degeneracy") {
    auto eng = make_engine(1, "nn");
    CrossAttentionBlock blk = CrossAttentionBlock::make(8, 2, eng);
    Tensor q = randn({5, 8}, eng);
    Tensor kv = randn({1, 8}, eng);
    AttentionTrace trace;
    Tensor out = blk.forward(q, kv, false, &trace);
    CHECK(out.shape() == std::vector<int>{5, 8});
    for (const Tensor& w : trace.head_weights) {
        CHECK(w.shape() == std::vector<int>{5, 1});
        for (double v : w.values()) CHECK(v == 1.0);
    }
    // every query row receives the same single value row
    for (int i = 1; i < 5; ++i)
        for (int j = 0; j < 8; ++j) CHECK(out.at(i, j) == out.at(0, j));
}

TEST_CASE("attention duplicate keys share weight") {
    auto eng = make_engine(2, "nn");
    CrossAttentionBlock blk = CrossAttentionBlock::make(8, 2, eng);
    Tensor q = randn({3, 8}, eng);
    Tensor row = randn({1, 8}, eng);
    Tensor kv = concat({row, row, randn({1, 8}, eng)}, 0);
    AttentionTrace trace;
    blk.forward(q, kv, false, &trace);
    for (const Tensor& w : trace.head_weights)
        for (int i = 0; i < 3; ++i)
            CHECK(w.at(i, 0) == doctest::Approx(w.at(i, 1)).epsilon(1e-12));
}

TEST_CASE("attention rows are stochastic for every head and call") {
    auto eng = make_engine(3, "nn");
    for (int trial = 0; trial < 3; ++trial) {
        CrossAttentionBlock blk = CrossAttentionBlock::make(12, 3, eng);
        Tensor q = randn({4, 12}, eng);
        Tensor kv = randn({6, 12}, eng);
        AttentionTrace trace;
        blk.forward(q, kv, false, &trace);
        CHECK(trace.head_weights.size() == 3);
        for (const Tensor& w : trace.head_weights) {
            for (int i = 0; i < w.rows(); ++i) {
                double s = 0;
                for (int j = 0; j < w.cols(); ++j) {
                    CHECK(w.at(i, j) >= 0.0);
                    s += w.at(i, j);
                }
                CHECK(std::abs(s - 1.0) < 1e-9);
            }
        }
    }
}

TEST_CASE("head outputs stay inside the projected value hull") {
    auto eng = make_engine(4, "nn");
    CrossAttentionBlock blk = CrossAttentionBlock::make(4, 2, eng);  // 2-coordinate heads
    Tensor q = randn({3, 4}, eng);
    Tensor kv = randn({5, 4}, eng);
    AttentionTrace trace;
    blk.forward(q, kv, false, &trace);

    Tensor v = matmul_nt(kv, blk.wv);
    const int dh = 2;
    for (int h = 0; h < 2; ++h) {
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor head_out = matmul(trace.head_weights[static_cast<std::size_t>(h)], vh);
        for (int c = 0; c < dh; ++c) {
            double lo = vh.at(0, c), hi = vh.at(0, c);
            for (int i = 1; i < 5; ++i) {
                lo = std::min(lo, vh.at(i, c));
                hi = std::max(hi, vh.at(i, c));
            }
            for (int i = 0; i < 3; ++i) {
                CHECK(head_out.at(i, c) >= lo - 1e-12);
                CHECK(head_out.at(i, c) <= hi + 1e-12);
            }
        }
    }
}

TEST_CASE("attention is permutation invariant over key rows") {
    auto eng = make_engine(5, "nn");
    CrossAttentionBlock blk = CrossAttentionBlock::make(8, 2, eng);
    Tensor q = randn({3, 8}, eng);
    Tensor kv = randn({6, 8}, eng);
    std::vector<int> perm{4, 0, 5, 2, 1, 3};
    Tensor kv_perm = gather_rows(kv, perm);
    Tensor a = blk.forward(q, kv);
    Tensor b = blk.forward(q, kv_perm);
    CHECK(max_abs_diff(a, b) < 1e-9);
}

TEST_CASE("attention construction and width errors") {
    auto eng = make_engine(6, "nn");
    CHECK_THROWS_AS(CrossAttentionBlock::make(10, 4, eng), InvariantError);
    CrossAttentionBlock blk = CrossAttentionBlock::make(8, 2, eng);
    CHECK_THROWS_AS(blk.forward(randn({2, 6}, eng), randn({2, 8}, eng)), InvariantError);
    CHECK_THROWS_AS(blk.forward(randn({2, 8}, eng), randn({2, 6}, eng)), InvariantError);
}

TEST_CASE("attention gradients vs finite differences") {
    auto eng = make_engine(7, "nn");
    CrossAttentionBlock blk = CrossAttentionBlock::make(6, 2, eng);
    for (auto* w : {&blk.wq, &blk.wk, &blk.wv, &blk.wo}) w->d->requires_grad = true;
    Tensor q = randn({3, 6}, eng);
    Tensor kv = randn({4, 6}, eng);
    Tensor probe = randn({3, 6}, eng);
    double err = grad_check(
        [&](const std::vector<Tensor>&) { return sum_all(mul(blk.forward(q, kv), probe)); },
        {blk.wq, blk.wk, blk.wv, blk.wo});
    CHECK(err < 1e-4);
}

TEST_CASE("feed forward zero weights and shape") {
    auto eng = make_engine(8, "nn");
    FeedForward ff = FeedForward::make(6, eng);
    for (double& v : ff.in.w.values()) v = 0.0;
    for (double& v : ff.out.w.values()) v = 0.0;
    Tensor x = randn({4, 6}, eng);
    Tensor y = ff.forward(x);
    CHECK(y.shape() == std::vector<int>{4, 6});
    for (double v : y.values()) CHECK(v == 0.0);  // zero weights, zero biases

    FeedForward ff2 = FeedForward::make(6, eng);
    for (int n : {1, 3, 9}) CHECK(ff2.forward(randn({n, 6}, eng)).rows() == n);
}

TEST_CASE("lora zero-init equivalence and defaults") {
    auto eng = make_engine(9, "nn");
    Tensor base = randn({10, 6}, eng);
    LoraAdapter ad = LoraAdapter::make(6, 10, 8, 16.0, eng);
    CHECK(ad.rank == 8);
    CHECK(ad.alpha == 16.0);
    CHECK(ad.a.shape() == std::vector<int>{8, 6});
    CHECK(ad.b.shape() == std::vector<int>{10, 8});
    for (double v : ad.b.values()) CHECK(v == 0.0);

    Tensor x = randn({5, 6}, eng);
    Tensor adapted = lora_forward(x, base, ad);
    Tensor plain = matmul_nt(x, base);
    CHECK(max_abs_diff(adapted, plain) == 0.0);  // exact at B = 0

    Tensor merged = lora_merge(base, ad);
    CHECK(max_abs_diff(merged, base) == 0.0);
}

TEST_CASE("lora merge equals adapted forward on random sizes") {
    auto eng = make_engine(10, "nn");
    std::uniform_int_distribution<int> dim(2, 12);
    for (int trial = 0; trial < 10; ++trial) {
        const int d_in = dim(eng), d_out = dim(eng);
        const int rank = trial == 0 ? 8 : 1 + (trial % 4);
        const double alpha = trial == 0 ? 16.0 : 2.0 * rank;
        Tensor base = randn({d_out, d_in}, eng);
        LoraAdapter ad = LoraAdapter::make(d_in, d_out, rank, alpha, eng);
        for (double& v : ad.b.values()) v = std::normal_distribution<>(0, 0.1)(eng);

        Tensor x = randn({4, d_in}, eng);
        Tensor adapted = lora_forward(x, base, ad);
        Tensor via_merge = matmul_nt(x, lora_merge(base, ad));
        CHECK(max_abs_diff(adapted, via_merge) < 1e-6);
    }
}

TEST_CASE("lora scale cancels when alpha equals rank") {
    auto eng = make_engine(11, "nn");
    const int d = 4;
    Tensor base = randn({d, d}, eng);
    LoraAdapter ad = LoraAdapter::make(d, d, d, static_cast<double>(d), eng);
    for (double& v : ad.b.values()) v = std::normal_distribution<>(0, 0.5)(eng);
    Tensor merged = lora_merge(base, ad);
    Tensor expect = add(base, matmul(ad.b, ad.a));
    CHECK(max_abs_diff(merged, expect) < 1e-12);
}

TEST_CASE("lora only trains the adapter when the base is frozen") {
    auto eng = make_engine(12, "nn");
    Tensor base = randn({5, 4}, eng);  // requires_grad = false
    LoraAdapter ad = LoraAdapter::make(4, 5, 2, 4.0, eng);
    Tensor x = randn({3, 4}, eng);
    {
        Tape tape;
        tape.backward(sum_all(lora_forward(x, base, ad)));
    }
    // at the zero init the B factor blocks A's gradient; B itself trains
    CHECK(ad.a.grad_norm() == 0.0);
    CHECK(ad.b.grad_norm() > 0.0);
    CHECK(base.grad_norm() == 0.0);

    ad.b.zero_grad();
    for (double& v : ad.b.values()) v = std::normal_distribution<>(0, 0.1)(eng);
    {
        Tape tape;
        tape.backward(sum_all(lora_forward(x, base, ad)));
    }
    CHECK(ad.a.grad_norm() > 0.0);
    CHECK(ad.b.grad_norm() > 0.0);
    CHECK(base.grad_norm() == 0.0);
}

TEST_CASE("adamw descends a quadratic") {
    Tensor w = Tensor::from_values({3}, {5.0, -4.0, 2.5}, true);
    ParamSet ps;
    ps.add("w", w);
    AdamW opt = AdamW::make(ps, 0.05, 0.0);
    for (int step = 0; step < 400; ++step) {
        Tape tape;
        tape.backward(sum_all(mul(w, w)));
        opt.step();
        opt.zero_grads();
    }
    for (double v : w.values()) CHECK(std::abs(v) < 1e-2);
}

TEST_CASE("checkpoint archive round trip") {
    auto eng = make_engine(13, "nn");
    ParamSet ps;
    ps.add("layer.w", randn({4, 3}, eng));
    ps.add("layer.b", randn({4}, eng));
    ps.add("emb", randn({7, 2}, eng));
    nlohmann::ordered_json manifest;
    manifest["step"] = 42;
    manifest["note"] = "roundtrip";
    const std::string path = "test_nn_archive.rbta";
    write_archive(path, ps, manifest);

    auto [entries, mani] = read_archive(path);
    CHECK(entries.size() == 3);
    CHECK(mani.at("step").get<int>() == 42);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        CHECK(entries[i].first == ps.items[i].first);
        CHECK(entries[i].second.values() == ps.items[i].second.values());
    }

    ParamSet dst;
    dst.add("layer.w", Tensor::zeros({4, 3}));
    dst.add("layer.b", Tensor::zeros({4}));
    dst.add("emb", Tensor::zeros({7, 2}));
    load_into(dst, entries);
    CHECK(dst.items[0].second.values() == ps.items[0].second.values());

    ParamSet bad;
    bad.add("missing", Tensor::zeros({2}));
    CHECK_THROWS_AS(load_into(bad, entries), IoError);
    std::remove(path.c_str());
}

TEST_CASE("lora attached to attention projections") {
    auto eng = make_engine(14, "nn");
    CrossAttentionBlock blk = CrossAttentionBlock::make(8, 2, eng);
    blk.attach_lora(2, 4.0, eng);
    Tensor q = randn({3, 8}, eng);
    Tensor kv = randn({4, 8}, eng);
    Tensor with_lora = blk.forward(q, kv);

    CrossAttentionBlock no_lora = blk;
    no_lora.lq.reset();
    no_lora.lk.reset();
    no_lora.lv.reset();
    no_lora.lo.reset();
    Tensor without = no_lora.forward(q, kv);
    CHECK(max_abs_diff(with_lora, without) == 0.0);  // B = 0 exactness
    CHECK(blk.lora_params("b").items.size() == 8);
}
