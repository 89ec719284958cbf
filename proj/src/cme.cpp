#include "rb/cme.hpp"

#include "rb/errors.hpp"

namespace rb {

Enhancer Enhancer::make(const std::string& modality, int n_e, int d_diff, int d_ctx_in,
                        int d_cues_in, int heads, std::mt19937_64& eng, bool ebar_from_gate) {
    Enhancer e;
    e.modality = modality;
    e.q_tokens = normal_init({n_e, d_diff}, 0.02, eng);
    e.block1 = CrossAttentionBlock::make(d_diff, heads, eng);
    e.block2 = CrossAttentionBlock::make(d_diff, heads, eng);
    e.block3 = CrossAttentionBlock::make(d_diff, heads, eng, /*residual_norm=*/true);
    e.block4 = CrossAttentionBlock::make(d_diff, heads, eng);
    e.block5 = CrossAttentionBlock::make(d_diff, heads, eng);
    e.out_linear = Linear::make(d_diff, d_diff, eng);
    e.out_norm = LayerNorm::make(d_diff);
    e.ctx_proj = Linear::make(d_ctx_in, d_diff, eng);
    e.cues_proj = Linear::make(d_cues_in, d_diff, eng);
    e.ebar_from_gate = ebar_from_gate;
    return e;
}

EnhancerOutput Enhancer::forward(const Tensor& v_hat, const Tensor& ctx_raw,
                                 const Tensor& cues_raw, EnhancerTrace* trace) const {
    if (v_hat.cols() != q_tokens.cols()) {
        throw InvariantError("enhancer: guidance width " + shape_str(v_hat.shape()) +
                             " does not match block width " + shape_str(q_tokens.shape()));
    }
    Tensor ctx = ctx_proj.forward(ctx_raw);
    Tensor cues = cues_proj.forward(cues_raw);

    Tensor f1 = block1.forward(q_tokens, v_hat);  // learnable tokens read the guidance
    Tensor f2 = block2.forward(ctx, cues);        // modality context reads its cues
    Tensor vbar = block3.forward(f1, f2);         // fuse, residual + norm
    Tensor gate = block4.forward(f2, vbar);       // context re-reads the refined guidance
    Tensor r5 = block5.forward(gate, cues);
    Tensor rbar = out_norm.forward(out_linear.forward(r5));

    if (trace) {
        trace->q_tokens = q_tokens.id();
        trace->v_hat = v_hat.id();
        trace->ctx = ctx.id();
        trace->cues = cues.id();
        trace->f1 = f1.id();
        trace->f2 = f2.id();
        trace->vbar = vbar.id();
        trace->g = gate.id();
        trace->rbar = rbar.id();
    }
    EnhancerOutput out;
    out.rbar = rbar;
    out.ebar = ebar_from_gate ? gate : vbar;
    return out;
}

ParamSet Enhancer::params(const std::string& prefix) const {
    ParamSet ps;
    ps.add(prefix + ".q_tokens", q_tokens);
    ps.merge(prefix + ".block1", block1.params(""));
    ps.merge(prefix + ".block2", block2.params(""));
    ps.merge(prefix + ".block3", block3.params(""));
    ps.merge(prefix + ".block4", block4.params(""));
    ps.merge(prefix + ".block5", block5.params(""));
    ps.merge(prefix + ".out_linear", out_linear.params(""));
    ps.merge(prefix + ".out_norm", out_norm.params(""));
    ps.merge(prefix + ".ctx_proj", ctx_proj.params(""));
    ps.merge(prefix + ".cues_proj", cues_proj.params(""));
    return ps;
}

void enhance(GuidanceBundle& bundle, const Tensor& img_feat, const Tensor& r_v,
             const Tensor& txt_feat, const Tensor& r_t, const Enhancer& visual,
             const Enhancer& textual) {
    EnhancerOutput vis = visual.forward(bundle.v_hat, img_feat, r_v);
    EnhancerOutput txt = textual.forward(bundle.v_hat, txt_feat, r_t);
    bundle.rbar_vis = vis.rbar;
    bundle.ebar_vis = vis.ebar;
    bundle.rbar_txt = txt.rbar;
    bundle.ebar_txt = txt.ebar;
}

}  // namespace rb
