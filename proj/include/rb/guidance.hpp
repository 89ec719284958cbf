#pragma once

#include <string>
#include <vector>

#include "rb/encoders.hpp"
#include "rb/nn.hpp"
#include "rb/tensor.hpp"

namespace rb {

// ---- sequence assembly ---------------------------------------------------------

/// Input sequence with recorded segment boundaries. ends holds cumulative
/// row counts for the five segments in order: image-adapter output, visual
/// cues, textual cues, text embedding, guidance tokens.
struct AssembledSequence {
    Tensor seq;  // [L_total, d_llm]
    std::vector<int> ends;
};

AssembledSequence assemble_sequence(const Tensor& ia_out, const Tensor& r_v, const Tensor& r_t,
                                    const Tensor& text_rows, const Tensor& img_embed);

// ---- decoder-only guidance LM -----------------------------------------------------

struct LmBlock {
    CrossAttentionBlock attn;  // causal self-attention, residual+norm, LoRA'd
    FeedForward ff;
    LayerNorm norm;
};

struct LmOutput {
    Tensor hidden;  // [L, d_llm], pre-head final-layer state
    Tensor logits;  // [L, vocab]
};

/// Toy causal LM over continuous input rows. Base weights are frozen when
/// frozen_base is set; the LoRA adapters and the r guidance-token
/// embeddings stay trainable.
struct GuidanceLM {
    Tensor tok_embed;  // [vocab, d_llm]; guidance rows unused (img_embed replaces them)
    Tensor img_embed;  // [r, d_llm] learnable guidance-token embeddings
    std::vector<LmBlock> blocks;
    Linear head;  // d_llm -> vocab, untied
    int r = 32;
    int d_llm = 64;
    bool frozen_base = true;

    static GuidanceLM make(int vocab_size, int r, int d_llm, int layers, int heads,
                           int lora_rank, double lora_alpha, bool frozen_base,
                           std::mt19937_64& eng);
    LmOutput forward(const Tensor& seq) const;
    Tensor embed_tokens(const std::vector<int>& ids) const;

    ParamSet base_params(const std::string& prefix) const;  // frozen set + head
    ParamSet lora_params(const std::string& prefix) const;
    ParamSet img_embed_params(const std::string& prefix) const;
};

/// Final r hidden rows (the guidance-token states V).
Tensor extract_guidance(const Tensor& hidden, const std::vector<int>& ends, int r);

/// Negative log-likelihood of each guidance token id at its own position,
/// conditioned causally on everything before it.
Tensor mllm_loss(const Tensor& logits, const std::vector<int>& ends, const Vocabulary& vocab);

// ---- QFormer aligner ---------------------------------------------------------------

struct QFormerLayer {
    CrossAttentionBlock self_attn;   // residual+norm
    CrossAttentionBlock cross_attn;  // residual+norm, attends to V
    FeedForward ff;
    LayerNorm norm;
};

/// Learnable query tokens refined through self-attention / cross-attention /
/// feed-forward layers, then projected into the editor's width.
struct QFormer {
    Tensor queries;  // [n_q, d_llm]
    std::vector<QFormerLayer> layers;
    Linear out;  // d_llm -> d_diff

    static QFormer make(int n_queries, int n_layers, int d_llm, int d_diff, int heads,
                        std::mt19937_64& eng);
    Tensor forward(const Tensor& v) const;  // [n_q, d_diff]
    ParamSet params(const std::string& prefix) const;
};

/// Guidance features threaded from the LM into the diffusion editor.
struct GuidanceBundle {
    Tensor v;      // [r, d_llm]
    Tensor v_hat;  // [n_q, d_diff]
    Tensor rbar_vis, ebar_vis;  // filled by the cross-modal enhancer
    Tensor rbar_txt, ebar_txt;
};

}  // namespace rb
