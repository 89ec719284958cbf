#include "rb/diffusion.hpp"

#include <cmath>

#include "rb/errors.hpp"
#include "rb/rng.hpp"

namespace rb {

NoiseSchedule NoiseSchedule::linear(int t_steps, double beta_start, double beta_end) {
    if (t_steps < 1) throw InvariantError("noise schedule: t_steps must be >= 1");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
        throw InvariantError("noise schedule: betas must satisfy 0 < start <= end < 1");
    NoiseSchedule s;
    s.t_steps = t_steps;
    s.beta.resize(static_cast<std::size_t>(t_steps));
    s.alpha_bar.resize(static_cast<std::size_t>(t_steps));
    double prod = 1.0;
    for (int i = 0; i < t_steps; ++i) {
        const double frac = t_steps == 1 ? 0.0 : static_cast<double>(i) / (t_steps - 1);
        s.beta[i] = beta_start + (beta_end - beta_start) * frac;
        prod *= 1.0 - s.beta[i];
        s.alpha_bar[i] = prod;
        if (!(s.alpha_bar[i] > 0.0 && s.alpha_bar[i] < 1.0))
            throw InvariantError("noise schedule: alpha_bar left (0,1) at t=" + std::to_string(i + 1));
        if (i > 0 && s.alpha_bar[i] >= s.alpha_bar[i - 1])
            throw InvariantError("noise schedule: alpha_bar must be strictly decreasing");
    }
    return s;
}

double NoiseSchedule::abar(int t) const {
    if (t == 0) return 1.0;
    if (t < 1 || t > t_steps)
        throw InvariantError("noise schedule: t " + std::to_string(t) + " outside [1," +
                             std::to_string(t_steps) + "]");
    return alpha_bar[static_cast<std::size_t>(t - 1)];
}

Tensor forward_noising(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (eps.shape() != z0.shape())
        throw InvariantError("forward_noising: eps shape " + shape_str(eps.shape()) +
                             " != z0 shape " + shape_str(z0.shape()));
    if (t < 1 || t > sched.t_steps)
        throw InvariantError("forward_noising: t " + std::to_string(t) + " outside [1," +
                             std::to_string(sched.t_steps) + "]");
    const double ab = sched.abar(t);
    return add(mul_scalar(z0, std::sqrt(ab)), mul_scalar(eps, std::sqrt(1.0 - ab)));
}

// ---- conditioning -------------------------------------------------------------------

ConditionInjections ConditionInjections::make(int d_diff, int c_latent) {
    ConditionInjections inj;
    inj.vis = Linear::make_zero(d_diff, 2 * c_latent);
    inj.txt = Linear::make_zero(d_diff, 2 * c_latent);
    return inj;
}

ParamSet ConditionInjections::params(const std::string& prefix) const {
    ParamSet ps;
    ps.merge(prefix + ".vis", vis.params(""));
    ps.merge(prefix + ".txt", txt.params(""));
    return ps;
}

Tensor condition_inputs(const Tensor& z_t, const Tensor& img_lat, const Tensor& rbar_vis,
                        const Tensor& rbar_txt, const ConditionInjections& inj) {
    if (z_t.rows() != img_lat.rows())
        throw InvariantError("condition_inputs: latent row mismatch " + shape_str(z_t.shape()) +
                             " vs " + shape_str(img_lat.shape()));
    Tensor cat = concat({z_t, img_lat}, 1);
    // cue maps have sample-dependent row counts; pool rows after the
    // channel projection and broadcast over the latent grid
    Tensor inj_vis = mean_rows(inj.vis.forward(rbar_vis));
    Tensor inj_txt = mean_rows(inj.txt.forward(rbar_txt));
    return add_rowvec(add_rowvec(cat, inj_vis), inj_txt);
}

// ---- denoiser -------------------------------------------------------------------------

Tensor timestep_embedding(int t, int d) {
    Tensor emb = Tensor::zeros({d});
    const int half = d / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        emb.values()[i] = std::sin(t * freq);
        emb.values()[half + i] = std::cos(t * freq);
    }
    if (d % 2) emb.values()[d - 1] = 0.0;
    return emb;
}

Denoiser Denoiser::make(int c_latent, int d_model, int layers, int heads,
                        std::mt19937_64& eng) {
    Denoiser dn;
    dn.c_latent = c_latent;
    dn.d_model = d_model;
    dn.input = Linear::make(2 * c_latent, d_model, eng);
    for (int i = 0; i < layers; ++i) {
        DenoiserBlock blk;
        blk.self_attn = CrossAttentionBlock::make(d_model, heads, eng, /*residual_norm=*/true);
        blk.cross_attn = CrossAttentionBlock::make(d_model, heads, eng, /*residual_norm=*/true);
        blk.ff = FeedForward::make(d_model, eng);
        blk.norm = LayerNorm::make(d_model);
        dn.blocks.push_back(std::move(blk));
    }
    dn.head = Linear::make(d_model, c_latent, eng);
    return dn;
}

Tensor Denoiser::forward(int t, const Tensor& conditioned, const Tensor& context) const {
    if (conditioned.cols() != 2 * c_latent)
        throw InvariantError("denoiser: conditioned width " + shape_str(conditioned.shape()) +
                             " != 2*c_latent " + std::to_string(2 * c_latent));
    Tensor x = input.forward(conditioned);
    x = add_rowvec(x, timestep_embedding(t, d_model));
    for (const DenoiserBlock& blk : blocks) {
        x = blk.self_attn.forward(x, x);
        x = blk.cross_attn.forward(x, context);
        x = blk.norm.forward(add(x, blk.ff.forward(x)));
    }
    return head.forward(x);
}

ParamSet Denoiser::params(const std::string& prefix) const {
    ParamSet ps;
    ps.merge(prefix + ".input", input.params(""));
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string bp = prefix + ".block" + std::to_string(i);
        ps.merge(bp + ".self_attn", blocks[i].self_attn.params(""));
        ps.merge(bp + ".cross_attn", blocks[i].cross_attn.params(""));
        ps.merge(bp + ".ff", blocks[i].ff.params(""));
        ps.merge(bp + ".norm", blocks[i].norm.params(""));
    }
    ps.merge(prefix + ".head", head.params(""));
    return ps;
}

// ---- losses -------------------------------------------------------------------------------

Tensor noise_prediction_loss(const Tensor& eps, const Tensor& predicted) {
    Tensor diff = sub(eps, predicted);
    return mean_all(mul(diff, diff));
}

Tensor diffusion_loss_at(const Tensor& z0_target, const Tensor& img_lat,
                         const GuidanceBundle& bundle, const NoiseSchedule& sched,
                         const Denoiser& model, const ConditionInjections& inj, int t,
                         const Tensor& eps) {
    Tensor z_t = forward_noising(z0_target, t, eps, sched);
    Tensor conditioned = condition_inputs(z_t, img_lat, bundle.rbar_vis, bundle.rbar_txt, inj);
    Tensor context = concat({bundle.ebar_vis, bundle.ebar_txt}, 0);
    Tensor pred = model.forward(t, conditioned, context);
    return noise_prediction_loss(eps, pred);
}

std::pair<int, Tensor> draw_t_eps(std::mt19937_64& rng, const NoiseSchedule& sched,
                                  const std::vector<int>& latent_shape) {
    std::uniform_int_distribution<int> t_dist(1, sched.t_steps);
    const int t = t_dist(rng);
    std::normal_distribution<double> n01(0.0, 1.0);
    Tensor eps = Tensor::zeros(latent_shape);
    for (double& v : eps.values()) v = n01(rng);
    return {t, eps};
}

Tensor diffusion_loss(const Tensor& z0_target, const Tensor& img_lat,
                      const GuidanceBundle& bundle, const NoiseSchedule& sched,
                      const Denoiser& model, const ConditionInjections& inj,
                      std::mt19937_64& rng) {
    auto [t, eps] = draw_t_eps(rng, sched, z0_target.shape());
    return diffusion_loss_at(z0_target, img_lat, bundle, sched, model, inj, t, eps);
}

Tensor total_loss(const Tensor& l_mllm, const Tensor& l_dm) {
    const double a = l_mllm.item();
    const double b = l_dm.item();
    if (!std::isfinite(a) || !std::isfinite(b)) {
        throw InvariantError("total_loss: non-finite loss term (mllm=" + std::to_string(a) +
                             ", dm=" + std::to_string(b) + ")");
    }
    return add(l_mllm, l_dm);
}

// ---- sampler ----------------------------------------------------------------------------------

Tensor seeded_normal(const std::vector<int>& shape, std::uint64_t seed) {
    std::mt19937_64 eng(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.values()) v = n01(eng);
    return t;
}

Tensor ddim_reverse(const Tensor& z_init, const NoiseSchedule& sched, int steps,
                    const DenoiseFn& denoise) {
    if (steps < 1) throw InvariantError("ddim_reverse: steps must be >= 1");
    if (steps > sched.t_steps) throw InvariantError("ddim_reverse: steps exceed schedule length");
    // timestep grid from T down to 0, deduplicated after rounding
    std::vector<int> ts;
    for (int i = 0; i <= steps; ++i) {
        const int t = static_cast<int>(std::llround(
            static_cast<double>(sched.t_steps) * (steps - i) / steps));
        if (ts.empty() || t < ts.back()) ts.push_back(t);
    }
    Tensor z = z_init;
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
        const int t_cur = ts[i];
        const int t_next = ts[i + 1];
        Tensor eps_hat = denoise(t_cur, z);
        const double ab = sched.abar(t_cur);
        Tensor z0_hat = mul_scalar(sub(z, mul_scalar(eps_hat, std::sqrt(1.0 - ab))),
                                   1.0 / std::sqrt(ab));
        if (t_next == 0) {
            z = z0_hat;
        } else {
            const double abn = sched.abar(t_next);
            z = add(mul_scalar(z0_hat, std::sqrt(abn)),
                    mul_scalar(eps_hat, std::sqrt(1.0 - abn)));
        }
    }
    return z;
}

}  // namespace rb
