#pragma once

#include <functional>
#include <random>
#include <vector>

#include "rb/guidance.hpp"
#include "rb/nn.hpp"
#include "rb/tensor.hpp"

namespace rb {

// ---- noise schedule -------------------------------------------------------------

/// Linear beta schedule with cumulative-product signal coefficients;
/// alpha_bar is strictly decreasing and stays inside (0,1). Timesteps are
/// 1-based: t in [1, t_steps].
struct NoiseSchedule {
    int t_steps = 100;
    std::vector<double> beta;       // beta[t-1]
    std::vector<double> alpha_bar;  // alpha_bar[t-1]

    static NoiseSchedule linear(int t_steps, double beta_start, double beta_end);
    double abar(int t) const;  // alpha_bar at t; abar(0) == 1
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
Tensor forward_noising(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);

// ---- conditioning -----------------------------------------------------------------

/// Zero-initialized projections that fold the two enhanced cue maps into
/// the channel-concatenated latent; training starts from the unconditioned
/// editor.
struct ConditionInjections {
    Linear vis;  // d_diff -> 2*c_latent, zero weights, no bias
    Linear txt;

    static ConditionInjections make(int d_diff, int c_latent);
    ParamSet params(const std::string& prefix) const;
};

/// Channel-concatenates [z_t, source latent] and adds the projected,
/// row-pooled cue injections to every latent token.
Tensor condition_inputs(const Tensor& z_t, const Tensor& img_lat, const Tensor& rbar_vis,
                        const Tensor& rbar_txt, const ConditionInjections& inj);

// ---- denoiser -----------------------------------------------------------------------

Tensor timestep_embedding(int t, int d);  // sinusoidal, constant

struct DenoiserBlock {
    CrossAttentionBlock self_attn;   // residual+norm
    CrossAttentionBlock cross_attn;  // residual+norm, attends to guidance context
    FeedForward ff;
    LayerNorm norm;
};

/// Transformer over latent tokens conditioned on the timestep embedding and
/// cross-attending to [ebar_vis; ebar_txt]; predicts the added noise.
struct Denoiser {
    Linear input;  // 2*c_latent -> d_model
    std::vector<DenoiserBlock> blocks;
    Linear head;  // d_model -> c_latent
    int d_model = 32;
    int c_latent = 32;

    static Denoiser make(int c_latent, int d_model, int layers, int heads,
                         std::mt19937_64& eng);
    Tensor forward(int t, const Tensor& conditioned, const Tensor& context) const;
    ParamSet params(const std::string& prefix) const;
};

// ---- losses --------------------------------------------------------------------------

/// ||eps - predicted||^2 averaged over elements.
Tensor noise_prediction_loss(const Tensor& eps, const Tensor& predicted);

/// Full conditional loss with (t, eps) supplied by the caller so fixed-draw
/// training modes stay reproducible.
Tensor diffusion_loss_at(const Tensor& z0_target, const Tensor& img_lat,
                         const GuidanceBundle& bundle, const NoiseSchedule& sched,
                         const Denoiser& model, const ConditionInjections& inj, int t,
                         const Tensor& eps);

/// Draws t uniform in [1, t_steps] and eps standard normal from rng, then
/// defers to diffusion_loss_at.
Tensor diffusion_loss(const Tensor& z0_target, const Tensor& img_lat,
                      const GuidanceBundle& bundle, const NoiseSchedule& sched,
                      const Denoiser& model, const ConditionInjections& inj,
                      std::mt19937_64& rng);

std::pair<int, Tensor> draw_t_eps(std::mt19937_64& rng, const NoiseSchedule& sched,
                                  const std::vector<int>& latent_shape);

/// Exact unweighted sum of the two objective terms; non-finite inputs abort
/// training with a diagnostic.
Tensor total_loss(const Tensor& l_mllm, const Tensor& l_dm);

// ---- sampler -----------------------------------------------------------------------------

using DenoiseFn = std::function<Tensor(int t, const Tensor& z_t)>;

/// Deterministic DDIM-style reverse process: z0_hat = (z_t -
/// sqrt(1-abar_t) eps_hat) / sqrt(abar_t), then re-noise toward the next
/// gridpoint. steps == 1 applies the single-jump estimate once.
Tensor ddim_reverse(const Tensor& z_init, const NoiseSchedule& sched, int steps,
                    const DenoiseFn& denoise);

Tensor seeded_normal(const std::vector<int>& shape, std::uint64_t seed);

}  // namespace rb
