#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rb/cme.hpp"
#include "rb/config.hpp"
#include "rb/diffusion.hpp"
#include "rb/encoders.hpp"
#include "rb/forge.hpp"
#include "rb/frce.hpp"
#include "rb/guidance.hpp"
#include "rb/metrics.hpp"
#include "rb/nn.hpp"
#include "rb/tensor.hpp"

namespace rb {

/// Intermediates of the guidance half of the pipeline (everything before
/// the diffusion loss), kept for loss wiring and debug dumps.
struct GuidanceForward {
    ImageTokens tokens;
    Tensor img_feat;  // raw tokens coarse-to-fine [n_img, d_enc]
    Tensor txt_feat;  // [L, d_enc]
    ReasoningCues cues;
    AssembledSequence assembled;
    LmOutput lm_out;
    Tensor l_mllm;
    GuidanceBundle bundle;
};

struct ReasonBrainModel {
    PipelineConfig cfg;
    Vocabulary vocab;
    ImageEncoder img_enc;
    TextEncoder txt_enc;
    ImageAdapter ia;
    FrceModule frce;
    GuidanceLM lm;
    QFormer qformer;
    Enhancer enh_visual;
    Enhancer enh_textual;
    ConditionInjections injections;
    Denoiser denoiser;
    NoiseSchedule sched;

    /// Builds and initializes every module; each parameter draws its init
    /// from a stream keyed by (seed, "init.<module>").
    static ReasonBrainModel init(const PipelineConfig& cfg, const Vocabulary& vocab);

    /// Everything, including frozen tensors (checkpoint content minus LoRA).
    ParamSet base_params() const;
    ParamSet lora_parameters() const;
    /// Optimizer set, grouped; group names back the per-group
    /// gradient-presence assertions.
    std::map<std::string, ParamSet> trainable_groups() const;
    ParamSet trainable_params() const;

    GuidanceForward guidance_forward(const Tensor& source_image,
                                     const std::string& instruction) const;
    /// Target-image latent (fine-scale tokens).
    Tensor encode_latent(const Tensor& image) const;
    Tensor dm_loss(const GuidanceForward& g, const Tensor& source_image,
                   const Tensor& target_image, int t, const Tensor& eps) const;

    struct EditResult {
        Tensor latent;  // final z0
        Tensor image;   // decoded via the fine-scale projection transpose
        GuidanceBundle bundle;
    };
    /// Deterministic end-to-end edit; hooks let tests replace the denoiser
    /// or pin the initial latent.
    struct EditHooks {
        DenoiseFn denoiser_override;
        std::optional<Tensor> init_latent;
    };
    EditResult sample_edit(const Tensor& source_image, const std::string& instruction,
                           int steps, std::uint64_t sample_seed,
                           const EditHooks* hooks = nullptr) const;
};

// ---- checkpointing ------------------------------------------------------------------

/// Writes <prefix>.base.rbta, <prefix>.lora.rbta and, when given an
/// optimizer, <prefix>.opt.rbta with its moments and step counter.
void save_checkpoint(const std::string& prefix, const ReasonBrainModel& model,
                     const AdamW* opt, std::int64_t step);

struct CheckpointInfo {
    std::int64_t step = 0;
};

CheckpointInfo load_checkpoint(const std::string& prefix, ReasonBrainModel& model, AdamW* opt);

// ---- training ------------------------------------------------------------------------

struct StepLosses {
    double l_mllm = 0, l_dm = 0, l_total = 0;
};

struct TrainState {
    ReasonBrainModel* model = nullptr;
    AdamW opt;
    std::vector<int> train_ids;
    const std::vector<EditSample>* samples = nullptr;  // by sample_id
    std::vector<std::pair<int, Tensor>> fixed_draws;   // overfit (t, eps) per slot
    std::vector<int> overfit_ids;
};

TrainState make_train_state(ReasonBrainModel& model, const LoadedDataset& ds);

/// One optimizer step over a batch; draws are keyed by (seed, stream, step)
/// so resumed runs replay identical batches and noise.
StepLosses train_step(TrainState& st, int step);

/// Model-backed embedding provider (mean-pooled toy encoder features,
/// L2-normalized).
Embedder model_embedder(const ReasonBrainModel& model);

}  // namespace rb
