#pragma once

#include <memory>
#include <string>
#include <vector>

#include "rb/encoders.hpp"
#include "rb/nn.hpp"
#include "rb/tensor.hpp"

namespace rb {

// ---- segmentation ------------------------------------------------------------

/// Integer label per pixel; labels partition the image, label 0 is the
/// background region and components are ordered by their top-left pixel.
struct SegmentationMap {
    std::vector<int> labels;  // row-major h*w
    int h = 0, w = 0;
    int n_r = 1;

    int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * w + x]; }
};

/// Deterministic luminance / connected-component segmenter: threshold
/// against the median border luminance, 4-connectivity labeling, small
/// components merged into background.
SegmentationMap segment_regions(const Tensor& image, double tau = 0.1, int min_area = 4);

// ---- cue containers ------------------------------------------------------------

struct ReasoningCues {
    Tensor r_local;   // [n_p, d_llm]
    Tensor r_global;  // [n_r, d_llm]
    Tensor r_v;       // [n_p + n_r, d_llm], exact row concat [r_local; r_global]
    Tensor r_t;       // [n_o, d_llm]
    SegmentationMap seg;
    std::vector<std::string> object_words;
};

// ---- branch blocks ----------------------------------------------------------------

/// Patch-level extractor: fine-scale tokens regrouped into w x w windows;
/// one shared self-attention + feed-forward tower emits a row per window.
struct PatchExtractor {
    int window = 2;
    CrossAttentionBlock attn;  // self-attention at d_enc
    FeedForward ff;
    Linear out;  // d_enc -> d_llm

    static PatchExtractor make(int d_enc, int d_llm, int window, int heads,
                               std::mt19937_64& eng);
    Tensor forward(const ImageTokens& tokens) const;  // [n_p, d_llm]
    ParamSet params(const std::string& prefix) const;
};

/// Region-level extractor: masked mean-pool of fine tokens per region, then
/// feed-forward + cross-attention of the pooled row against all tokens.
struct RegionExtractor {
    FeedForward ff;
    CrossAttentionBlock attn;  // pooled row attends to all fine tokens
    Linear out;                // d_enc -> d_llm
    std::shared_ptr<long> empty_region_fallbacks = std::make_shared<long>(0);

    static RegionExtractor make(int d_enc, int d_llm, int heads, std::mt19937_64& eng);
    Tensor forward(const ImageTokens& tokens, const SegmentationMap& seg) const;  // [n_r, d_llm]
    ParamSet params(const std::string& prefix) const;
};

/// Rule-based object extraction (stop-list heuristic standing in for a
/// language model) plus an object embedding table in the LM width.
struct ObjectExtractor {
    Tensor table;  // [vocab, d_llm]

    static ObjectExtractor make(int vocab_size, int d_llm, std::mt19937_64& eng);
    /// Returns the object rows and the surviving words (UNK row if none).
    std::pair<Tensor, std::vector<std::string>> extract(const std::string& instruction,
                                                        const Vocabulary& vocab) const;
    ParamSet params(const std::string& prefix) const;
};

/// Words kept by the stop-list heuristic after stripping the hypothetical
/// framing; exposed for tests.
std::vector<std::string> extract_object_words(const std::string& instruction);

/// Cross-attention (object tokens as queries, visual cues as keys/values)
/// followed by a feed-forward network, residual around each sub-block.
struct IdController {
    CrossAttentionBlock attn;  // d_llm
    FeedForward ff;

    static IdController make(int d_llm, int heads, std::mt19937_64& eng);
    Tensor forward(const Tensor& r_v, const Tensor& object_tokens) const;  // [n_o, d_llm]
    ParamSet params(const std::string& prefix) const;
};

Tensor fuse_visual_cues(const Tensor& r_local, const Tensor& r_global);

// ---- assembled module ----------------------------------------------------------------

struct FrceModule {
    PatchExtractor patch;
    RegionExtractor region;
    ObjectExtractor object;
    IdController id_controller;
    double seg_tau = 0.1;
    int seg_min_area = 4;

    static FrceModule make(int d_enc, int d_llm, int vocab_size, int window, int heads,
                           double seg_tau, int seg_min_area, std::mt19937_64& eng);
    ReasoningCues forward(const ImageTokens& tokens, const Tensor& image,
                          const std::string& instruction, const Vocabulary& vocab) const;
    ParamSet params(const std::string& prefix) const;
};

}  // namespace rb
