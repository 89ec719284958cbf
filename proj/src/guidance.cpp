#include "rb/guidance.hpp"

#include "rb/errors.hpp"

namespace rb {

AssembledSequence assemble_sequence(const Tensor& ia_out, const Tensor& r_v, const Tensor& r_t,
                                    const Tensor& text_rows, const Tensor& img_embed) {
    const Tensor* parts[] = {&ia_out, &r_v, &r_t, &text_rows, &img_embed};
    const int d = ia_out.cols();
    for (const Tensor* p : parts) {
        if (p->rank() != 2 || p->cols() != d) {
            throw InvariantError("assemble_sequence: width mismatch, expected " +
                                 std::to_string(d) + " got " + shape_str(p->shape()));
        }
    }
    AssembledSequence out;
    out.seq = concat({ia_out, r_v, r_t, text_rows, img_embed}, 0);
    int acc = 0;
    for (const Tensor* p : parts) {
        acc += p->rows();
        out.ends.push_back(acc);
    }
    return out;
}

// ---- guidance LM --------------------------------------------------------------------

GuidanceLM GuidanceLM::make(int vocab_size, int r, int d_llm, int layers, int heads,
                            int lora_rank, double lora_alpha, bool frozen_base,
                            std::mt19937_64& eng) {
    GuidanceLM lm;
    lm.r = r;
    lm.d_llm = d_llm;
    lm.frozen_base = frozen_base;
    lm.tok_embed = normal_init({vocab_size, d_llm}, 0.02, eng, !frozen_base);
    lm.img_embed = normal_init({r, d_llm}, 0.02, eng, true);
    for (int i = 0; i < layers; ++i) {
        LmBlock blk;
        blk.attn = CrossAttentionBlock::make(d_llm, heads, eng, /*residual_norm=*/true);
        blk.attn.attach_lora(lora_rank, lora_alpha, eng);
        blk.ff = FeedForward::make(d_llm, eng);
        blk.norm = LayerNorm::make(d_llm);
        lm.blocks.push_back(std::move(blk));
    }
    lm.head = Linear::make(d_llm, vocab_size, eng);
    if (frozen_base) {
        for (auto& [_, t] : lm.base_params("lm").items) t.d->requires_grad = false;
    }
    return lm;
}

LmOutput GuidanceLM::forward(const Tensor& seq) const {
    if (seq.rank() != 2 || seq.cols() != d_llm) {
        throw InvariantError("lm_forward: expected [L," + std::to_string(d_llm) + "], got " +
                             shape_str(seq.shape()));
    }
    Tensor x = seq;
    for (const LmBlock& blk : blocks) {
        x = blk.attn.forward(x, x, /*causal=*/true);
        x = blk.norm.forward(add(x, blk.ff.forward(x)));
    }
    LmOutput out;
    out.hidden = x;
    out.logits = head.forward(x);
    return out;
}

Tensor GuidanceLM::embed_tokens(const std::vector<int>& ids) const {
    return gather_rows(tok_embed, ids);
}

ParamSet GuidanceLM::base_params(const std::string& prefix) const {
    ParamSet ps;
    ps.add(prefix + ".tok_embed", tok_embed);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string bp = prefix + ".block" + std::to_string(i);
        ps.merge(bp + ".attn", blocks[i].attn.params(""));
        ps.merge(bp + ".ff", blocks[i].ff.params(""));
        ps.merge(bp + ".norm", blocks[i].norm.params(""));
    }
    ps.merge(prefix + ".head", head.params(""));
    return ps;
}

ParamSet GuidanceLM::lora_params(const std::string& prefix) const {
    ParamSet ps;
    for (std::size_t i = 0; i < blocks.size(); ++i)
        ps.merge(prefix + ".block" + std::to_string(i) + ".attn", blocks[i].attn.lora_params(""));
    return ps;
}

ParamSet GuidanceLM::img_embed_params(const std::string& prefix) const {
    ParamSet ps;
    ps.add(prefix + ".img_embed", img_embed);
    return ps;
}

Tensor extract_guidance(const Tensor& hidden, const std::vector<int>& ends, int r) {
    if (ends.size() < 2) throw InvariantError("extract_guidance: missing segment boundaries");
    const int last = ends.back();
    const int prev = ends[ends.size() - 2];
    if (last - prev != r) {
        throw InvariantError("extract_guidance: final segment has " + std::to_string(last - prev) +
                             " rows, expected r = " + std::to_string(r));
    }
    if (hidden.rows() != last) throw InvariantError("extract_guidance: hidden rows != L_total");
    return slice_rows(hidden, last - r, last);
}

Tensor mllm_loss(const Tensor& logits, const std::vector<int>& ends, const Vocabulary& vocab) {
    if (ends.size() != 5) throw InvariantError("mllm_loss: expected five segment boundaries");
    const int start = ends[3];
    const int r = ends[4] - ends[3];
    if (r != vocab.r)
        throw InvariantError("mllm_loss: guidance segment length " + std::to_string(r) +
                             " != vocab r " + std::to_string(vocab.r));
    if (logits.rows() != ends[4]) throw InvariantError("mllm_loss: logits do not cover sequence");
    Tensor logp = log_softmax_rows(logits);
    std::vector<std::pair<int, int>> picks;
    picks.reserve(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) picks.emplace_back(start + i, vocab.img_id(i));
    return mul_scalar(sum_all(select_items(logp, picks)), -1.0);
}

// ---- QFormer --------------------------------------------------------------------------

QFormer QFormer::make(int n_queries, int n_layers, int d_llm, int d_diff, int heads,
                      std::mt19937_64& eng) {
    if (n_queries < 1 || n_layers < 1) throw InvariantError("qformer: bad layer/query counts");
    QFormer qf;
    qf.queries = normal_init({n_queries, d_llm}, 0.02, eng);
    for (int i = 0; i < n_layers; ++i) {
        QFormerLayer layer;
        layer.self_attn = CrossAttentionBlock::make(d_llm, heads, eng, /*residual_norm=*/true);
        layer.cross_attn = CrossAttentionBlock::make(d_llm, heads, eng, /*residual_norm=*/true);
        layer.ff = FeedForward::make(d_llm, eng);
        layer.norm = LayerNorm::make(d_llm);
        qf.layers.push_back(std::move(layer));
    }
    qf.out = Linear::make(d_llm, d_diff, eng);
    return qf;
}

Tensor QFormer::forward(const Tensor& v) const {
    if (v.rank() != 2 || v.cols() != queries.cols()) {
        throw InvariantError("qformer: guidance width " + shape_str(v.shape()) +
                             " does not match query width " + shape_str(queries.shape()));
    }
    Tensor x = queries;
    for (const QFormerLayer& layer : layers) {
        x = layer.self_attn.forward(x, x);
        x = layer.cross_attn.forward(x, v);
        x = layer.norm.forward(add(x, layer.ff.forward(x)));
    }
    return out.forward(x);
}

ParamSet QFormer::params(const std::string& prefix) const {
    ParamSet ps;
    ps.add(prefix + ".queries", queries);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string lp = prefix + ".layer" + std::to_string(i);
        ps.merge(lp + ".self_attn", layers[i].self_attn.params(""));
        ps.merge(lp + ".cross_attn", layers[i].cross_attn.params(""));
        ps.merge(lp + ".ff", layers[i].ff.params(""));
        ps.merge(lp + ".norm", layers[i].norm.params(""));
    }
    ps.merge(prefix + ".out", out.params(""));
    return ps;
}

}  // namespace rb
