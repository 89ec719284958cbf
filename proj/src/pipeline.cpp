#include "rb/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "rb/errors.hpp"
#include "rb/rng.hpp"

namespace rb {

ReasonBrainModel ReasonBrainModel::init(const PipelineConfig& cfg, const Vocabulary& vocab) {
    cfg.validate();
    if (vocab.r != cfg.vocab_r)
        throw ConfigError("model init: vocab r " + std::to_string(vocab.r) +
                          " != config vocab.r " + std::to_string(cfg.vocab_r));
    ReasonBrainModel m;
    m.cfg = cfg;
    m.vocab = vocab;

    auto eng_for = [&](const char* name) { return make_engine(cfg.seed, name); };

    {
        auto eng = eng_for("init.img_enc");
        m.img_enc = ImageEncoder::make(cfg.image_h, cfg.image_w, cfg.image_c, cfg.image_scales,
                                       cfg.d_enc, eng);
    }
    {
        auto eng = eng_for("init.txt_enc");
        m.txt_enc = TextEncoder::make(vocab.size(), cfg.d_enc, cfg.text_max_len, eng);
    }
    {
        auto eng = eng_for("init.ia");
        m.ia = ImageAdapter::make(cfg.d_enc, cfg.d_llm, eng);
    }
    {
        auto eng = eng_for("init.frce");
        m.frce = FrceModule::make(cfg.d_enc, cfg.d_llm, vocab.size(), cfg.frce_window,
                                  cfg.frce_heads, cfg.seg_tau, cfg.seg_min_area, eng);
    }
    {
        auto eng = eng_for("init.lm");
        m.lm = GuidanceLM::make(vocab.size(), cfg.vocab_r, cfg.d_llm, cfg.lm_layers,
                                cfg.lm_heads, cfg.lora_rank, cfg.lora_alpha,
                                cfg.lm_frozen_base, eng);
    }
    {
        auto eng = eng_for("init.qformer");
        m.qformer = QFormer::make(cfg.qf_queries, cfg.qf_layers, cfg.d_llm, cfg.d_diff,
                                  cfg.qf_heads, eng);
    }
    {
        auto eng = eng_for("init.cme.visual");
        m.enh_visual = Enhancer::make("visual", cfg.cme_tokens, cfg.d_diff, cfg.d_enc,
                                      cfg.d_llm, cfg.cme_heads, eng,
                                      cfg.cme_e_source == "gate");
    }
    {
        auto eng = eng_for("init.cme.textual");
        m.enh_textual = Enhancer::make("textual", cfg.cme_tokens, cfg.d_diff, cfg.d_enc,
                                       cfg.d_llm, cfg.cme_heads, eng,
                                       cfg.cme_e_source == "gate");
    }
    m.injections = ConditionInjections::make(cfg.d_diff, cfg.d_enc);
    {
        auto eng = eng_for("init.denoiser");
        m.denoiser = Denoiser::make(cfg.d_enc, cfg.d_diff, cfg.diff_layers, cfg.diff_heads, eng);
    }
    m.sched = NoiseSchedule::linear(cfg.diff_t_steps, cfg.diff_beta_start, cfg.diff_beta_end);

    if (!cfg.encoders_trainable) {
        for (auto& [_, t] : m.img_enc.params("e").items) t.d->requires_grad = false;
        for (auto& [_, t] : m.txt_enc.params("e").items) t.d->requires_grad = false;
    }
    return m;
}

ParamSet ReasonBrainModel::base_params() const {
    ParamSet ps;
    ps.merge("img_enc", img_enc.params(""));
    ps.merge("txt_enc", txt_enc.params(""));
    ps.merge("ia", ia.params(""));
    ps.merge("frce", frce.params(""));
    ps.merge("lm", lm.base_params(""));
    ps.merge("lm", lm.img_embed_params(""));
    ps.merge("qformer", qformer.params(""));
    ps.merge("cme.visual", enh_visual.params(""));
    ps.merge("cme.textual", enh_textual.params(""));
    ps.merge("inject", injections.params(""));
    ps.merge("denoiser", denoiser.params(""));
    return ps;
}

ParamSet ReasonBrainModel::lora_parameters() const {
    return lm.lora_params("lm");
}

std::map<std::string, ParamSet> ReasonBrainModel::trainable_groups() const {
    std::map<std::string, ParamSet> g;
    g["lora"] = lm.lora_params("lm");
    g["ia"] = [&] {
        ParamSet p;
        p.merge("ia", ia.params(""));
        return p;
    }();
    ParamSet frce_p;
    frce_p.merge("frce", frce.params(""));
    g["frce"] = frce_p;
    ParamSet qf_p;
    qf_p.merge("qformer", qformer.params(""));
    g["qformer"] = qf_p;
    ParamSet cme_p;
    cme_p.merge("cme.visual", enh_visual.params(""));
    cme_p.merge("cme.textual", enh_textual.params(""));
    g["cme"] = cme_p;
    ParamSet dn_p;
    dn_p.merge("denoiser", denoiser.params(""));
    dn_p.merge("inject", injections.params(""));
    g["denoiser"] = dn_p;
    ParamSet lm_extra;
    lm_extra.merge("lm", lm.img_embed_params(""));
    g["guidance_tokens"] = lm_extra;
    if (cfg.encoders_trainable) {
        ParamSet enc_p;
        enc_p.merge("img_enc", img_enc.params(""));
        enc_p.merge("txt_enc", txt_enc.params(""));
        g["encoders"] = enc_p;
    }
    return g;
}

ParamSet ReasonBrainModel::trainable_params() const {
    ParamSet ps;
    for (const auto& [_, group] : trainable_groups())
        for (const auto& [name, t] : group.items) ps.add(name, t);
    return ps;
}

GuidanceForward ReasonBrainModel::guidance_forward(const Tensor& source_image,
                                                   const std::string& instruction) const {
    GuidanceForward g;
    g.tokens = img_enc.encode(source_image);
    g.img_feat = concat_coarse_to_fine(g.tokens);
    Tensor ia_out = ia.forward(g.tokens);

    g.cues = frce.forward(g.tokens, source_image, instruction, vocab);

    const std::vector<int> ids = encode_ids(instruction, vocab, cfg.text_max_len);
    g.txt_feat = txt_enc.encode(ids);
    Tensor text_rows = lm.embed_tokens(ids);

    g.assembled = assemble_sequence(ia_out, g.cues.r_v, g.cues.r_t, text_rows, lm.img_embed);
    g.lm_out = lm.forward(g.assembled.seq);
    g.l_mllm = mllm_loss(g.lm_out.logits, g.assembled.ends, vocab);

    g.bundle.v = extract_guidance(g.lm_out.hidden, g.assembled.ends, cfg.vocab_r);
    g.bundle.v_hat = qformer.forward(g.bundle.v);
    enhance(g.bundle, g.img_feat, g.cues.r_v, g.txt_feat, g.cues.r_t, enh_visual, enh_textual);
    return g;
}

Tensor ReasonBrainModel::encode_latent(const Tensor& image) const {
    return img_enc.encode(image).fine();
}

Tensor ReasonBrainModel::dm_loss(const GuidanceForward& g, const Tensor& source_image,
                                 const Tensor& target_image, int t, const Tensor& eps) const {
    Tensor z0 = encode_latent(target_image);
    Tensor img_lat = g.tokens.fine();
    (void)source_image;
    return diffusion_loss_at(z0, img_lat, g.bundle, sched, denoiser, injections, t, eps);
}

ReasonBrainModel::EditResult ReasonBrainModel::sample_edit(const Tensor& source_image,
                                                           const std::string& instruction,
                                                           int steps,
                                                           std::uint64_t sample_seed,
                                                           const EditHooks* hooks) const {
    NoTape inference;
    GuidanceForward g = guidance_forward(source_image, instruction);
    Tensor img_lat = g.tokens.fine();
    Tensor context = concat({g.bundle.ebar_vis, g.bundle.ebar_txt}, 0);

    DenoiseFn fn;
    if (hooks && hooks->denoiser_override) {
        fn = hooks->denoiser_override;
    } else {
        fn = [&](int t, const Tensor& z_t) {
            Tensor conditioned =
                condition_inputs(z_t, img_lat, g.bundle.rbar_vis, g.bundle.rbar_txt, injections);
            return denoiser.forward(t, conditioned, context);
        };
    }
    Tensor z_init;
    if (hooks && hooks->init_latent) {
        z_init = *hooks->init_latent;
    } else {
        z_init = seeded_normal(img_lat.shape(), derive_seed(cfg.seed, "sampler", sample_seed));
    }
    EditResult res;
    res.latent = ddim_reverse(z_init, sched, steps, fn);
    res.image = img_enc.decode_fine(res.latent);
    res.bundle = g.bundle;
    return res;
}

// ---- checkpointing -----------------------------------------------------------------------

void save_checkpoint(const std::string& prefix, const ReasonBrainModel& model,
                     const AdamW* opt, std::int64_t step) {
    nlohmann::ordered_json manifest;
    manifest["step"] = step;
    manifest["vocab_size"] = model.vocab.size();
    manifest["r"] = model.vocab.r;
    manifest["config"] = model.cfg.to_json();
    {
        ParamSet base = model.base_params();
        nlohmann::ordered_json m = manifest;
        m["kind"] = "base";
        nlohmann::ordered_json names = nlohmann::ordered_json::array();
        for (const auto& [n, _] : base.items) names.push_back(n);
        m["tensors"] = names;
        write_archive(prefix + ".base.rbta", base, m);
    }
    {
        ParamSet lora = model.lora_parameters();
        nlohmann::ordered_json m;
        m["step"] = step;
        m["kind"] = "lora";
        m["rank"] = model.cfg.lora_rank;
        m["alpha"] = model.cfg.lora_alpha;
        write_archive(prefix + ".lora.rbta", lora, m);
    }
    if (opt) {
        ParamSet st;
        for (std::size_t i = 0; i < opt->params.items.size(); ++i) {
            st.add("m." + opt->params.items[i].first, opt->m[i]);
            st.add("v." + opt->params.items[i].first, opt->v[i]);
        }
        nlohmann::ordered_json m;
        m["step"] = step;
        m["kind"] = "opt";
        m["t"] = opt->t;
        write_archive(prefix + ".opt.rbta", st, m);
    }
}

CheckpointInfo load_checkpoint(const std::string& prefix, ReasonBrainModel& model,
                               AdamW* opt) {
    CheckpointInfo info;
    {
        auto [entries, manifest] = read_archive(prefix + ".base.rbta");
        ParamSet base = model.base_params();
        load_into(base, entries);
        info.step = manifest.at("step").get<std::int64_t>();
    }
    {
        auto [entries, _] = read_archive(prefix + ".lora.rbta");
        ParamSet lora = model.lora_parameters();
        load_into(lora, entries);
    }
    if (opt) {
        auto [entries, manifest] = read_archive(prefix + ".opt.rbta");
        ParamSet st;
        for (std::size_t i = 0; i < opt->params.items.size(); ++i) {
            st.add("m." + opt->params.items[i].first, opt->m[i]);
            st.add("v." + opt->params.items[i].first, opt->v[i]);
        }
        load_into(st, entries);
        opt->t = manifest.at("t").get<std::int64_t>();
    }
    return info;
}

// ---- training --------------------------------------------------------------------------------

TrainState make_train_state(ReasonBrainModel& model, const LoadedDataset& ds) {
    TrainState st;
    st.model = &model;
    st.samples = &ds.samples;
    st.train_ids = ds.train_ids;
    if (st.train_ids.empty())
        throw InvariantError("train: dataset has no training samples");

    const PipelineConfig& cfg = model.cfg;
    st.opt = AdamW::make(model.trainable_params(), cfg.optim_lr, cfg.optim_weight_decay);

    if (cfg.train_overfit > 0) {
        // fixed batch: the first overfit-many train ids, with one frozen
        // (t, eps) pair per slot reused every step
        const int n = std::min<int>(cfg.train_overfit, static_cast<int>(st.train_ids.size()));
        st.overfit_ids.assign(st.train_ids.begin(), st.train_ids.begin() + n);
        for (int i = 0; i < n; ++i) {
            auto eng = make_engine(cfg.seed, "train-noise", static_cast<std::uint64_t>(i));
            st.fixed_draws.push_back(
                draw_t_eps(eng, model.sched, {cfg.fine_tokens(), cfg.d_enc}));
        }
    }
    return st;
}

StepLosses train_step(TrainState& st, int step) {
    ReasonBrainModel& model = *st.model;
    const PipelineConfig& cfg = model.cfg;
    const bool overfit = cfg.train_overfit > 0;

    std::vector<int> batch_ids;
    if (overfit) {
        batch_ids = st.overfit_ids;
    } else {
        auto eng = make_engine(cfg.seed, "train-batch", static_cast<std::uint64_t>(step));
        std::uniform_int_distribution<std::size_t> pick(0, st.train_ids.size() - 1);
        for (int i = 0; i < cfg.train_batch; ++i) batch_ids.push_back(st.train_ids[pick(eng)]);
    }

    Tape tape;
    Tensor mllm_sum, dm_sum;
    for (std::size_t bi = 0; bi < batch_ids.size(); ++bi) {
        const EditSample& s = (*st.samples)[static_cast<std::size_t>(batch_ids[bi])];
        GuidanceForward g = model.guidance_forward(s.source, s.instruction);

        int t;
        Tensor eps;
        if (overfit) {
            t = st.fixed_draws[bi].first;
            eps = st.fixed_draws[bi].second;
        } else {
            auto eng = make_engine(cfg.seed, "train-noise",
                                   static_cast<std::uint64_t>(step) * 1000003ULL + bi);
            auto draw = draw_t_eps(eng, model.sched, {cfg.fine_tokens(), cfg.d_enc});
            t = draw.first;
            eps = draw.second;
        }
        Tensor ldm = model.dm_loss(g, s.source, s.target, t, eps);
        mllm_sum = mllm_sum.defined() ? add(mllm_sum, g.l_mllm) : g.l_mllm;
        dm_sum = dm_sum.defined() ? add(dm_sum, ldm) : ldm;
    }
    const double inv_b = 1.0 / static_cast<double>(batch_ids.size());
    Tensor l_mllm = mul_scalar(mllm_sum, inv_b);
    Tensor l_dm = mul_scalar(dm_sum, inv_b);
    Tensor l_total = total_loss(l_mllm, l_dm);

    tape.backward(l_total);
    st.opt.step();
    st.opt.zero_grads();

    StepLosses out;
    out.l_mllm = l_mllm.item();
    out.l_dm = l_dm.item();
    out.l_total = l_total.item();
    return out;
}

Embedder model_embedder(const ReasonBrainModel& model) {
    const ReasonBrainModel* m = &model;
    Embedder e;
    e.embed_image = [m](const Tensor& image) {
        NoTape off;
        Tensor pooled = mean_rows(m->encode_latent(image));
        Tensor flat = Tensor::from_values({pooled.cols()}, pooled.values());
        return l2_normalize(flat);
    };
    e.embed_text = [m](const std::string& text) {
        NoTape off;
        const std::vector<int> ids = encode_ids(text, m->vocab, m->cfg.text_max_len);
        Tensor pooled = mean_rows(m->txt_enc.encode(ids));
        Tensor flat = Tensor::from_values({pooled.cols()}, pooled.values());
        return l2_normalize(flat);
    };
    return e;
}

}  // namespace rb
