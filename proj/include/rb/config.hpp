#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace rb {

/// Every knob of the pipeline. Serialized as flat JSON with dotted keys;
/// unknown keys are rejected and the merged effective config is echoed into
/// every output directory.
struct PipelineConfig {
    // master seed; named sub-streams derive from it
    std::uint64_t seed = 7;

    // image geometry
    int image_h = 32, image_w = 32, image_c = 3;
    std::vector<int> image_scales{4, 8};

    // widths
    int d_enc = 32, d_llm = 64, d_diff = 32;

    // encoders
    bool encoders_trainable = true;
    int text_max_len = 16;

    // vocabulary / guidance tokens
    int vocab_r = 32;

    // cue extraction
    int frce_window = 2;
    int frce_heads = 4;
    double seg_tau = 0.1;
    int seg_min_area = 4;
    std::string segmenter = "luminance-cc";
    std::string object_extractor = "stoplist";

    // guidance LM
    int lm_layers = 2;
    int lm_heads = 4;
    bool lm_frozen_base = true;

    // LoRA
    int lora_rank = 8;
    double lora_alpha = 16.0;

    // QFormer
    int qf_queries = 77;
    int qf_layers = 6;
    int qf_heads = 4;

    // cross-modal enhancer
    int cme_tokens = 16;
    int cme_heads = 4;
    std::string cme_e_source = "vbar";  // "vbar" | "gate"

    // diffusion
    int diff_t_steps = 100;
    double diff_beta_start = 1e-4;
    double diff_beta_end = 0.02;
    int diff_layers = 2;
    int diff_heads = 4;

    // optimizer
    double optim_lr = 1e-3;
    double optim_weight_decay = 1e-2;

    // training
    int train_batch = 16;
    int train_steps = 2000;
    int train_checkpoint_every = 500;
    int train_overfit = 0;  // >0 fixes that many samples and their noise draws
    double train_overfit_stop = 0.95;  // stop overfit runs at this loss reduction
    int train_log_every = 25;

    // data forge
    int data_count = 400;
    std::array<double, 4> data_category_mix{0.25, 0.25, 0.25, 0.25};
    int data_m_candidates = 8;
    int data_top_n = 1;
    double data_w_rule = 0.5;
    double data_w_psnr = 0.5;
    double data_val_fraction = 0.1;
    int data_val_cap = 400;

    // evaluation
    int eval_ddim_steps = 20;
    bool eval_oracle_outputs = false;  // debug: score targets as outputs

    // paths (CLI-provided, echoed for reproducibility)
    std::string out_dir;
    std::string data_dir;
    std::string checkpoint;
    std::string resume;

    static PipelineConfig defaults() { return PipelineConfig{}; }
    static PipelineConfig from_json(const nlohmann::ordered_json& j);  // strict keys
    static PipelineConfig load(const std::string& path);
    nlohmann::ordered_json to_json() const;
    void save(const std::string& path) const;

    /// Applies a single "key=value" override (CLI --set).
    void apply_override(const std::string& key, const std::string& value);
    void validate() const;

    int fine_patch() const;
    int fine_tokens() const;   // latent token count
    int total_image_tokens() const;
};

}  // namespace rb
