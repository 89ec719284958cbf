#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "rb/cme.hpp"
#include "rb/rng.hpp"

using namespace rb;

namespace {

Tensor randn(std::vector<int> shape, std::mt19937_64& eng, bool rg = false) {
    std::normal_distribution<double> d(0.0, 1.0);
    Tensor t = Tensor::zeros(std::move(shape), rg);
    for (double& v : t.values()) v = d(eng);
    return t;
}

}  // namespace

TEST_CASE("enhancer runs exactly five cross-attention blocks with the stated wiring") {
    auto eng = make_engine(51, "cme");
    Enhancer e = Enhancer::make("visual", 3, 8, 6, 10, 2, eng);
    Tensor v_hat = randn({5, 8}, eng, true);
    Tensor ctx = randn({7, 6}, eng, true);
    Tensor cues = randn({2, 10}, eng, true);

    Tape tape;
    EnhancerTrace trace;
    EnhancerOutput out = e.forward(v_hat, ctx, cues, &trace);
    CHECK(out.rbar.shape() == std::vector<int>{7, 8});
    CHECK(out.ebar.shape() == std::vector<int>{3, 8});

    std::vector<const TapeNode*> attn_nodes;
    for (const TapeNode& n : tape.nodes())
        if (n.op == "cross_attention") attn_nodes.push_back(&n);
    REQUIRE(attn_nodes.size() == 5);

    // block 1: learnable tokens read the guidance
    CHECK(attn_nodes[0]->inputs == std::vector<std::int64_t>{trace.q_tokens, trace.v_hat});
    CHECK(attn_nodes[0]->output == trace.f1);
    // block 2: projected context reads projected cues
    CHECK(attn_nodes[1]->inputs == std::vector<std::int64_t>{trace.ctx, trace.cues});
    CHECK(attn_nodes[1]->output == trace.f2);
    // block 3: F1 queries F2 (residual+norm folds into vbar)
    CHECK(attn_nodes[2]->inputs == std::vector<std::int64_t>{trace.f1, trace.f2});
    CHECK(attn_nodes[2]->output == trace.vbar);
    // block 4: F2 queries the refined guidance
    CHECK(attn_nodes[3]->inputs == std::vector<std::int64_t>{trace.f2, trace.vbar});
    CHECK(attn_nodes[3]->output == trace.g);
    // block 5: gate output reads the cues again
    CHECK(attn_nodes[4]->inputs == std::vector<std::int64_t>{trace.g, trace.cues});
}

TEST_CASE("enhancer shape contract across input sizes") {
    auto eng = make_engine(52, "cme");
    Enhancer e = Enhancer::make("textual", 4, 8, 6, 10, 2, eng);
    for (int n_c : {1, 3, 11}) {
        for (int n_k : {1, 2, 7}) {
            EnhancerOutput out =
                e.forward(randn({5, 8}, eng), randn({n_c, 6}, eng), randn({n_k, 10}, eng));
            CHECK(out.rbar.shape() == std::vector<int>{n_c, 8});
            CHECK(out.ebar.shape() == std::vector<int>{4, 8});
        }
    }
    CHECK_THROWS_AS(
        e.forward(randn({5, 7}, eng), randn({3, 6}, eng), randn({2, 10}, eng)),
        InvariantError);
}

TEST_CASE("enhancer output is deterministic") {
    auto eng = make_engine(53, "cme");
    Enhancer e = Enhancer::make("visual", 3, 8, 6, 10, 2, eng);
    Tensor v_hat = randn({4, 8}, eng);
    Tensor ctx = randn({3, 6}, eng);
    Tensor cues = randn({2, 10}, eng);
    EnhancerOutput a = e.forward(v_hat, ctx, cues);
    EnhancerOutput b = e.forward(v_hat, ctx, cues);
    CHECK(a.rbar.values() == b.rbar.values());
    CHECK(a.ebar.values() == b.ebar.values());
}

TEST_CASE("enhance fills all four features with no hidden coupling") {
    auto eng = make_engine(54, "cme");
    Enhancer ea = Enhancer::make("visual", 3, 8, 6, 10, 2, eng);
    Enhancer eb = Enhancer::make("textual", 3, 8, 6, 10, 2, eng);
    Tensor v_hat = randn({4, 8}, eng);
    Tensor img = randn({5, 6}, eng);
    Tensor r_v = randn({3, 10}, eng);
    Tensor txt = randn({2, 6}, eng);
    Tensor r_t = randn({1, 10}, eng);

    GuidanceBundle b1;
    b1.v_hat = v_hat;
    enhance(b1, img, r_v, txt, r_t, ea, eb);
    CHECK(b1.rbar_vis.defined());
    CHECK(b1.ebar_vis.defined());
    CHECK(b1.rbar_txt.defined());
    CHECK(b1.ebar_txt.defined());

    // swapping the enhancers swaps which parameters serve which modality
    GuidanceBundle b2;
    b2.v_hat = v_hat;
    enhance(b2, img, r_v, txt, r_t, eb, ea);
    CHECK(b2.rbar_vis.values() == eb.forward(v_hat, img, r_v).rbar.values());
    CHECK(b2.rbar_txt.values() == ea.forward(v_hat, txt, r_t).rbar.values());
    CHECK(b1.rbar_vis.values() != b2.rbar_vis.values());
}

TEST_CASE("ebar source is configurable") {
    auto eng = make_engine(55, "cme");
    Enhancer vbar_e = Enhancer::make("visual", 3, 8, 6, 10, 2, eng, /*ebar_from_gate=*/false);
    auto eng2 = make_engine(55, "cme");
    Enhancer gate_e = Enhancer::make("visual", 3, 8, 6, 10, 2, eng2, /*ebar_from_gate=*/true);
    Tensor v_hat = randn({4, 8}, eng);
    Tensor ctx = randn({5, 6}, eng);
    Tensor cues = randn({2, 10}, eng);
    EnhancerOutput a = vbar_e.forward(v_hat, ctx, cues);
    EnhancerOutput b = gate_e.forward(v_hat, ctx, cues);
    CHECK(a.ebar.rows() == 3);       // refined guidance rows
    CHECK(b.ebar.rows() == 5);       // gate rows track the context
    CHECK(a.rbar.values() == b.rbar.values());  // same weights, same rbar
}

TEST_CASE("gradient reaches the learnable tokens and both outputs") {
    auto eng = make_engine(56, "cme");
    Enhancer e = Enhancer::make("visual", 3, 8, 6, 10, 2, eng);
    Tensor v_hat = randn({4, 8}, eng, true);
    Tensor ctx = randn({3, 6}, eng, true);
    Tensor cues = randn({2, 10}, eng, true);
    {
        Tape tape;
        EnhancerOutput out = e.forward(v_hat, ctx, cues);
        tape.backward(add(sum_all(out.rbar), sum_all(out.ebar)));
    }
    CHECK(e.q_tokens.grad_norm() > 0.0);
    CHECK(v_hat.grad_norm() > 0.0);
    CHECK(ctx.grad_norm() > 0.0);
    CHECK(cues.grad_norm() > 0.0);
}
