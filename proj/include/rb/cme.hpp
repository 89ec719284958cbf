#pragma once

#include <cstdint>
#include <string>

#include "rb/guidance.hpp"
#include "rb/nn.hpp"
#include "rb/tensor.hpp"

namespace rb {

struct EnhancerOutput {
    Tensor rbar;  // [n_ctx, d_diff]
    Tensor ebar;  // refined guidance rows
};

/// Tensor ids of the intermediates of one enhancer forward; lets tests pin
/// the five-block wiring against the recorded tape.
struct EnhancerTrace {
    std::int64_t q_tokens = 0, v_hat = 0, ctx = 0, cues = 0;
    std::int64_t f1 = 0, f2 = 0, vbar = 0, g = 0, rbar = 0;
};

/// One modality branch of the cross-modal enhancer: five cross-attention
/// blocks, then a linear projection and a normalization layer. Context and
/// cue features enter through per-modality width projections.
struct Enhancer {
    std::string modality;  // "visual" or "textual"
    Tensor q_tokens;       // [n_e, d_diff] learnable
    CrossAttentionBlock block1, block2, block3, block4, block5;  // block3 residual+norm
    Linear out_linear;  // d_diff -> d_diff
    LayerNorm out_norm;
    Linear ctx_proj;    // d_ctx_in -> d_diff
    Linear cues_proj;   // d_cues_in -> d_diff
    bool ebar_from_gate = false;  // take ebar from block 4 instead of the refined guidance

    static Enhancer make(const std::string& modality, int n_e, int d_diff, int d_ctx_in,
                         int d_cues_in, int heads, std::mt19937_64& eng,
                         bool ebar_from_gate = false);
    EnhancerOutput forward(const Tensor& v_hat, const Tensor& ctx_raw, const Tensor& cues_raw,
                           EnhancerTrace* trace = nullptr) const;
    ParamSet params(const std::string& prefix) const;
};

/// Runs both enhancers and fills the four enhanced features of the bundle.
void enhance(GuidanceBundle& bundle, const Tensor& img_feat, const Tensor& r_v,
             const Tensor& txt_feat, const Tensor& r_t, const Enhancer& visual,
             const Enhancer& textual);

}  // namespace rb
