#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "rb/encoders.hpp"
#include "rb/frce.hpp"
#include "rb/rng.hpp"

using namespace rb;

namespace {

Tensor flat_image(int h, int w, double lum) {
    Tensor img = Tensor::zeros({h, w, 3});
    for (double& v : img.values()) v = lum;
    return img;
}

void fill_rect(Tensor& img, int y0, int x0, int y1, int x1, double lum) {
    const int w = img.dim(1);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            for (int c = 0; c < 3; ++c)
                img.values()[(static_cast<std::size_t>(y) * w + x) * 3 + c] = lum;
}

Tensor randn(std::vector<int> shape, std::mt19937_64& eng, bool rg = false) {
    std::normal_distribution<double> d(0.0, 1.0);
    Tensor t = Tensor::zeros(std::move(shape), rg);
    for (double& v : t.values()) v = d(eng);
    return t;
}

ImageTokens fake_tokens(const Tensor& fine, int h, int w, int patch) {
    ImageTokens t;
    t.per_scale = {fine};
    t.patch_sizes = {patch};
    t.h = h;
    t.w = w;
    t.c = 3;
    return t;
}

Vocabulary test_vocab() {
    return build_vocab({"what would happen if the ice cube melted",
                        "a red square on a plain background"},
                       4);
}

}  // namespace

TEST_CASE("segmentation: uniform image is one background region") {
    SegmentationMap seg = segment_regions(flat_image(16, 16, 0.2));
    CHECK(seg.n_r == 1);
    for (int label : seg.labels) CHECK(label == 0);
}

TEST_CASE("segmentation: bright square against dark background") {
    Tensor img = flat_image(16, 16, 0.1);
    fill_rect(img, 4, 5, 9, 10, 0.8);
    SegmentationMap seg = segment_regions(img);
    CHECK(seg.n_r == 2);
    // flood-fill oracle: exactly the rectangle pixels carry label 1
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            const bool inside = y >= 4 && y <= 9 && x >= 5 && x <= 10;
            CHECK(seg.at(y, x) == (inside ? 1 : 0));
        }
}

TEST_CASE("segmentation: two squares ordered by top-left pixel") {
    Tensor img = flat_image(20, 20, 0.1);
    fill_rect(img, 12, 2, 15, 5, 0.7);   // lower-left square
    fill_rect(img, 2, 10, 5, 13, 0.9);   // upper-right square
    SegmentationMap seg = segment_regions(img);
    CHECK(seg.n_r == 3);
    CHECK(seg.at(2, 10) == 1);  // first in scan order
    CHECK(seg.at(12, 2) == 2);

    // labels always partition the pixels
    for (int label : seg.labels) {
        CHECK(label >= 0);
        CHECK(label < seg.n_r);
    }
}

TEST_CASE("segmentation: small components merge into background") {
    Tensor img = flat_image(16, 16, 0.1);
    fill_rect(img, 3, 3, 3, 4, 0.9);  // 2 px, below min_area 4
    SegmentationMap seg = segment_regions(img, 0.1, 4);
    CHECK(seg.n_r == 1);
    fill_rect(img, 8, 8, 9, 9, 0.9);  // exactly min_area
    seg = segment_regions(img, 0.1, 4);
    CHECK(seg.n_r == 2);
}

TEST_CASE("patch extractor window shapes and locality") {
    auto eng = make_engine(31, "frce");
    PatchExtractor pe = PatchExtractor::make(8, 12, 2, 2, eng);
    Tensor fine = randn({64, 8}, eng);  // 8x8 grid
    ImageTokens toks = fake_tokens(fine, 32, 32, 4);
    Tensor local = pe.forward(toks);
    CHECK(local.shape() == std::vector<int>{16, 12});

    // swapping tokens across two windows changes only those output rows
    Tensor fine2 = fine.clone();
    // window (0,0) covers grid cells (0,0),(0,1),(1,0),(1,1); window (3,3)
    // covers cells (6,6)..(7,7); swap one token between them
    for (int j = 0; j < 8; ++j)
        std::swap(fine2.values()[(0 * 8 + 0) * 8 + j], fine2.values()[(6 * 8 + 6) * 8 + j]);
    Tensor local2 = pe.forward(fake_tokens(fine2, 32, 32, 4));
    for (int row = 0; row < 16; ++row) {
        bool same = true;
        for (int j = 0; j < 12; ++j)
            if (local.at(row, j) != local2.at(row, j)) same = false;
        const bool touched = row == 0 || row == 15;
        CHECK(same == !touched);
    }

    CHECK_THROWS_AS(PatchExtractor::make(8, 12, 3, 2, eng).forward(toks), InvariantError);
}

TEST_CASE("patch extractor gradients") {
    auto eng = make_engine(32, "frce");
    PatchExtractor pe = PatchExtractor::make(4, 6, 2, 2, eng);
    Tensor fine = randn({16, 4}, eng);  // 4x4 grid
    ImageTokens toks = fake_tokens(fine, 16, 16, 4);
    Tensor probe = randn({4, 6}, eng);
    std::vector<Tensor> params;
    for (auto& [_, t] : pe.params("p").items) params.push_back(t);
    double err = grad_check(
        [&](const std::vector<Tensor>&) { return sum_all(mul(pe.forward(toks), probe)); },
        params);
    CHECK(err < 1e-4);
}

TEST_CASE("region extractor pools by region and reports fallbacks") {
    auto eng = make_engine(33, "frce");
    RegionExtractor re = RegionExtractor::make(8, 12, 2, eng);

    Tensor img = flat_image(16, 16, 0.1);
    fill_rect(img, 4, 4, 11, 11, 0.9);
    SegmentationMap seg = segment_regions(img);
    REQUIRE(seg.n_r == 2);

    ImageEncoder enc = ImageEncoder::make(16, 16, 3, {4}, 8, eng);
    ImageTokens toks = enc.encode(img);
    Tensor global = re.forward(toks, seg);
    CHECK(global.shape() == std::vector<int>{2, 12});
    CHECK(*re.empty_region_fallbacks == 0);

    // a region too small to contain any patch center triggers the fallback
    Tensor img2 = flat_image(16, 16, 0.1);
    fill_rect(img2, 0, 4, 1, 5, 0.9);  // 2x2 at rows 0-1, away from center (2, y)
    SegmentationMap seg2 = segment_regions(img2);
    REQUIRE(seg2.n_r == 2);
    re.forward(enc.encode(img2), seg2);
    CHECK(*re.empty_region_fallbacks == 1);
}

TEST_CASE("region extractor is equivariant under content swaps") {
    auto eng = make_engine(34, "frce");
    RegionExtractor re = RegionExtractor::make(8, 12, 2, eng);
    ImageEncoder enc = ImageEncoder::make(16, 16, 3, {4}, 8, eng);
    // position content must be removed for exact swap equivariance
    for (Tensor& p : enc.pos)
        for (double& v : p.values()) v = 0.0;

    // two congruent squares, then the same image with their contents swapped
    Tensor img_a = flat_image(16, 16, 0.1);
    fill_rect(img_a, 4, 0, 7, 3, 0.9);
    fill_rect(img_a, 8, 8, 11, 11, 0.6);
    Tensor img_b = flat_image(16, 16, 0.1);
    fill_rect(img_b, 4, 0, 7, 3, 0.6);
    fill_rect(img_b, 8, 8, 11, 11, 0.9);

    SegmentationMap seg_a = segment_regions(img_a);
    SegmentationMap seg_b = segment_regions(img_b);
    REQUIRE(seg_a.n_r == 3);
    REQUIRE(seg_b.n_r == 3);

    Tensor ga = re.forward(enc.encode(img_a), seg_a);
    Tensor gb = re.forward(enc.encode(img_b), seg_b);
    // region rows swap (background row 0 unchanged)
    for (int j = 0; j < 12; ++j) {
        CHECK(ga.at(0, j) == doctest::Approx(gb.at(0, j)).epsilon(1e-9));
        CHECK(ga.at(1, j) == doctest::Approx(gb.at(2, j)).epsilon(1e-9));
        CHECK(ga.at(2, j) == doctest::Approx(gb.at(1, j)).epsilon(1e-9));
    }
}

TEST_CASE("fuse_visual_cues is exact row concatenation") {
    auto eng = make_engine(35, "frce");
    Tensor local = randn({16, 8}, eng);
    Tensor global = randn({2, 8}, eng);
    Tensor fused = fuse_visual_cues(local, global);
    CHECK(fused.shape() == std::vector<int>{18, 8});
    CHECK(slice_rows(fused, 0, 16).values() == local.values());
    CHECK(slice_rows(fused, 16, 18).values() == global.values());
    CHECK_THROWS_AS(fuse_visual_cues(local, randn({2, 6}, eng)), InvariantError);
}

TEST_CASE("object word extraction strips frame and fillers") {
    CHECK(extract_object_words("What would happen if the ice cube melted?") ==
          std::vector<std::string>{"ice", "cube"});
    CHECK(extract_object_words("What would the red square look like if it melted?") ==
          std::vector<std::string>{"red", "square"});
    CHECK(extract_object_words("abc") == std::vector<std::string>{"abc"});
    CHECK(extract_object_words("What would happen if it melted?").empty());
}

TEST_CASE("object tokens embed with UNK fallback and determinism") {
    auto eng = make_engine(36, "frce");
    Vocabulary vocab = test_vocab();
    ObjectExtractor oe = ObjectExtractor::make(vocab.size(), 12, eng);

    auto [obj, words] = oe.extract("What would happen if the ice cube melted?", vocab);
    CHECK(obj.shape() == std::vector<int>{2, 12});
    CHECK(words == std::vector<std::string>{"ice", "cube"});

    // nothing survives the stop list -> single UNK row
    auto [unk, none] = oe.extract("What would happen if it melted?", vocab);
    CHECK(unk.shape() == std::vector<int>{1, 12});
    CHECK(none.empty());
    for (int j = 0; j < 12; ++j)
        CHECK(unk.at(0, j) == oe.table.at(Vocabulary::kUnk, j));

    auto [again, _] = oe.extract("What would happen if the ice cube melted?", vocab);
    CHECK(again.values() == obj.values());
}

TEST_CASE("id controller shapes and single-key degeneracy") {
    auto eng = make_engine(37, "frce");
    IdController idc = IdController::make(8, 2, eng);
    Tensor r_v = randn({5, 8}, eng);
    for (int n_o : {1, 2, 4}) {
        Tensor obj = randn({n_o, 8}, eng);
        CHECK(idc.forward(r_v, obj).shape() == std::vector<int>{n_o, 8});
    }

    // one visual row: every object row attends to it with weight one
    Tensor one_row = randn({1, 8}, eng);
    Tensor obj = randn({3, 8}, eng);
    AttentionTrace trace;
    idc.attn.forward(obj, one_row, false, &trace);
    for (const Tensor& w : trace.head_weights)
        for (double v : w.values()) CHECK(v == 1.0);
}

TEST_CASE("full cue extraction shapes and concatenation law") {
    auto eng = make_engine(38, "frce");
    Vocabulary vocab = test_vocab();
    FrceModule frce = FrceModule::make(8, 12, vocab.size(), 2, 2, 0.1, 4, eng);
    ImageEncoder enc = ImageEncoder::make(16, 16, 3, {2, 4}, 8, eng);

    Tensor img = flat_image(16, 16, 0.1);
    fill_rect(img, 4, 4, 9, 9, 0.9);
    ImageTokens toks = enc.encode(img);
    ReasoningCues cues =
        frce.forward(toks, img, "What would happen if the ice cube melted?", vocab);

    const int n_p = 16;  // 8x8 fine grid, window 2
    CHECK(cues.r_local.shape() == std::vector<int>{n_p, 12});
    CHECK(cues.r_global.rows() == cues.seg.n_r);
    CHECK(cues.r_v.rows() == cues.r_local.rows() + cues.r_global.rows());
    CHECK(cues.r_t.rows() == 2);  // ice, cube
    CHECK(slice_rows(cues.r_v, 0, n_p).values() == cues.r_local.values());
}

TEST_CASE("cue extraction is differentiable end to end") {
    auto eng = make_engine(39, "frce");
    Vocabulary vocab = test_vocab();
    FrceModule frce = FrceModule::make(4, 6, vocab.size(), 2, 2, 0.1, 4, eng);
    ImageEncoder enc = ImageEncoder::make(8, 8, 3, {2}, 4, eng);

    Tensor img = flat_image(8, 8, 0.1);
    fill_rect(img, 2, 2, 5, 5, 0.9);
    ImageTokens toks = enc.encode(img);
    const std::string instruction = "What would happen if the ice cube melted?";

    Tensor probe_v = randn({6, 6}, eng);  // 4 windows (4x4 grid, window 2) + 2 regions
    Tensor probe_t = randn({2, 6}, eng);
    std::vector<Tensor> params;
    for (auto& [_, t] : frce.params("f").items) params.push_back(t);
    double err = grad_check(
        [&](const std::vector<Tensor>&) {
            ReasoningCues cues = frce.forward(toks, img, instruction, vocab);
            return add(sum_all(mul(cues.r_v, probe_v)), sum_all(mul(cues.r_t, probe_t)));
        },
        params);
    CHECK(err < 1e-4);
}
