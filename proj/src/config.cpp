#include "rb/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "rb/errors.hpp"

namespace rb {

namespace {

using ojson = nlohmann::ordered_json;

template <typename T>
void read_key(const ojson& j, std::set<std::string>& seen, const char* key, T& out) {
    if (j.contains(key)) {
        seen.insert(key);
        try {
            out = j.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config: bad value for ") + key + ": " + e.what());
        }
    }
}

}  // namespace

nlohmann::ordered_json PipelineConfig::to_json() const {
    ojson j;
    j["seed"] = seed;
    j["image.h"] = image_h;
    j["image.w"] = image_w;
    j["image.c"] = image_c;
    j["image.scales"] = image_scales;
    j["dims.d_enc"] = d_enc;
    j["dims.d_llm"] = d_llm;
    j["dims.d_diff"] = d_diff;
    j["encoders.trainable"] = encoders_trainable;
    j["text.max_len"] = text_max_len;
    j["vocab.r"] = vocab_r;
    j["frce.window"] = frce_window;
    j["frce.heads"] = frce_heads;
    j["frce.seg_tau"] = seg_tau;
    j["frce.seg_min_area"] = seg_min_area;
    j["frce.segmenter"] = segmenter;
    j["frce.object_extractor"] = object_extractor;
    j["lm.layers"] = lm_layers;
    j["lm.heads"] = lm_heads;
    j["lm.frozen_base"] = lm_frozen_base;
    j["lora.rank"] = lora_rank;
    j["lora.alpha"] = lora_alpha;
    j["qformer.queries"] = qf_queries;
    j["qformer.layers"] = qf_layers;
    j["qformer.heads"] = qf_heads;
    j["cme.n_e"] = cme_tokens;
    j["cme.heads"] = cme_heads;
    j["cme.e_source"] = cme_e_source;
    j["diffusion.t_steps"] = diff_t_steps;
    j["diffusion.beta_start"] = diff_beta_start;
    j["diffusion.beta_end"] = diff_beta_end;
    j["diffusion.layers"] = diff_layers;
    j["diffusion.heads"] = diff_heads;
    j["optim.lr"] = optim_lr;
    j["optim.weight_decay"] = optim_weight_decay;
    j["train.batch"] = train_batch;
    j["train.steps"] = train_steps;
    j["train.checkpoint_every"] = train_checkpoint_every;
    j["train.overfit"] = train_overfit;
    j["train.overfit_stop"] = train_overfit_stop;
    j["train.log_every"] = train_log_every;
    j["data.count"] = data_count;
    j["data.category_mix"] = data_category_mix;
    j["data.m_candidates"] = data_m_candidates;
    j["data.top_n"] = data_top_n;
    j["data.w_rule"] = data_w_rule;
    j["data.w_psnr"] = data_w_psnr;
    j["data.val_fraction"] = data_val_fraction;
    j["data.val_cap"] = data_val_cap;
    j["eval.ddim_steps"] = eval_ddim_steps;
    j["eval.oracle_outputs"] = eval_oracle_outputs;
    // paths are invocation arguments, not experiment state; they stay out
    // of the serialized form so echoed configs and checkpoint manifests
    // are byte-stable across working directories
    return j;
}

PipelineConfig PipelineConfig::from_json(const nlohmann::ordered_json& j) {
    PipelineConfig c;
    std::set<std::string> seen;
    read_key(j, seen, "seed", c.seed);
    read_key(j, seen, "image.h", c.image_h);
    read_key(j, seen, "image.w", c.image_w);
    read_key(j, seen, "image.c", c.image_c);
    read_key(j, seen, "image.scales", c.image_scales);
    read_key(j, seen, "dims.d_enc", c.d_enc);
    read_key(j, seen, "dims.d_llm", c.d_llm);
    read_key(j, seen, "dims.d_diff", c.d_diff);
    read_key(j, seen, "encoders.trainable", c.encoders_trainable);
    read_key(j, seen, "text.max_len", c.text_max_len);
    read_key(j, seen, "vocab.r", c.vocab_r);
    read_key(j, seen, "frce.window", c.frce_window);
    read_key(j, seen, "frce.heads", c.frce_heads);
    read_key(j, seen, "frce.seg_tau", c.seg_tau);
    read_key(j, seen, "frce.seg_min_area", c.seg_min_area);
    read_key(j, seen, "frce.segmenter", c.segmenter);
    read_key(j, seen, "frce.object_extractor", c.object_extractor);
    read_key(j, seen, "lm.layers", c.lm_layers);
    read_key(j, seen, "lm.heads", c.lm_heads);
    read_key(j, seen, "lm.frozen_base", c.lm_frozen_base);
    read_key(j, seen, "lora.rank", c.lora_rank);
    read_key(j, seen, "lora.alpha", c.lora_alpha);
    read_key(j, seen, "qformer.queries", c.qf_queries);
    read_key(j, seen, "qformer.layers", c.qf_layers);
    read_key(j, seen, "qformer.heads", c.qf_heads);
    read_key(j, seen, "cme.n_e", c.cme_tokens);
    read_key(j, seen, "cme.heads", c.cme_heads);
    read_key(j, seen, "cme.e_source", c.cme_e_source);
    read_key(j, seen, "diffusion.t_steps", c.diff_t_steps);
    read_key(j, seen, "diffusion.beta_start", c.diff_beta_start);
    read_key(j, seen, "diffusion.beta_end", c.diff_beta_end);
    read_key(j, seen, "diffusion.layers", c.diff_layers);
    read_key(j, seen, "diffusion.heads", c.diff_heads);
    read_key(j, seen, "optim.lr", c.optim_lr);
    read_key(j, seen, "optim.weight_decay", c.optim_weight_decay);
    read_key(j, seen, "train.batch", c.train_batch);
    read_key(j, seen, "train.steps", c.train_steps);
    read_key(j, seen, "train.checkpoint_every", c.train_checkpoint_every);
    read_key(j, seen, "train.overfit", c.train_overfit);
    read_key(j, seen, "train.overfit_stop", c.train_overfit_stop);
    read_key(j, seen, "train.log_every", c.train_log_every);
    read_key(j, seen, "data.count", c.data_count);
    read_key(j, seen, "data.category_mix", c.data_category_mix);
    read_key(j, seen, "data.m_candidates", c.data_m_candidates);
    read_key(j, seen, "data.top_n", c.data_top_n);
    read_key(j, seen, "data.w_rule", c.data_w_rule);
    read_key(j, seen, "data.w_psnr", c.data_w_psnr);
    read_key(j, seen, "data.val_fraction", c.data_val_fraction);
    read_key(j, seen, "data.val_cap", c.data_val_cap);
    read_key(j, seen, "eval.ddim_steps", c.eval_ddim_steps);
    read_key(j, seen, "eval.oracle_outputs", c.eval_oracle_outputs);
    for (const auto& [key, _] : j.items()) {
        if (!seen.count(key)) throw ConfigError("config: unknown key " + key);
    }
    return c;
}

PipelineConfig PipelineConfig::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open " + path);
    ojson j;
    try {
        is >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config: bad json in " + path + ": " + e.what());
    }
    return from_json(j);
}

void PipelineConfig::save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("config: cannot write " + path);
    os << to_json().dump(2) << "\n";
}

void PipelineConfig::apply_override(const std::string& key, const std::string& value) {
    ojson j = to_json();
    if (!j.contains(key)) throw ConfigError("config: unknown key " + key);
    ojson parsed;
    try {
        parsed = ojson::parse(value);
    } catch (const nlohmann::json::parse_error&) {
        parsed = value;  // bare strings stay strings
    }
    j[key] = parsed;
    PipelineConfig next = from_json(j);
    // path fields live outside the serialized form
    next.out_dir = out_dir;
    next.data_dir = data_dir;
    next.checkpoint = checkpoint;
    next.resume = resume;
    *this = next;
}

int PipelineConfig::fine_patch() const {
    int p = image_scales[0];
    for (int s : image_scales) p = std::min(p, s);
    return p;
}

int PipelineConfig::fine_tokens() const {
    const int p = fine_patch();
    return (image_h / p) * (image_w / p);
}

int PipelineConfig::total_image_tokens() const {
    int n = 0;
    for (int s : image_scales) n += (image_h / s) * (image_w / s);
    return n;
}

void PipelineConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    if (image_h < 4 || image_w < 4 || image_c < 1) fail("image dims too small");
    if (image_scales.empty()) fail("image.scales must not be empty");
    for (int s : image_scales) {
        if (s < 1 || image_h % s != 0 || image_w % s != 0)
            fail("scale " + std::to_string(s) + " does not divide the image");
    }
    if (d_enc < 1 || d_llm < 1 || d_diff < 1) fail("widths must be positive");
    if (text_max_len < 3) fail("text.max_len must be >= 3");
    if (vocab_r < 1) fail("vocab.r must be >= 1");
    const int g = image_h / fine_patch();
    if (frce_window < 1 || g % frce_window != 0)
        fail("frce.window must divide the fine token grid " + std::to_string(g));
    if (d_enc % frce_heads != 0) fail("frce.heads must divide d_enc");
    if (d_llm % lm_heads != 0) fail("lm.heads must divide d_llm");
    if (d_llm % qf_heads != 0) fail("qformer.heads must divide d_llm");
    if (d_diff % cme_heads != 0) fail("cme.heads must divide d_diff");
    if (d_diff % diff_heads != 0) fail("diffusion.heads must divide d_diff");
    if (seg_tau <= 0 || seg_tau >= 1) fail("frce.seg_tau must be in (0,1)");
    if (seg_min_area < 1) fail("frce.seg_min_area must be >= 1");
    if (segmenter != "luminance-cc") fail("unknown segmenter " + segmenter);
    if (object_extractor != "stoplist") fail("unknown object extractor " + object_extractor);
    if (lm_layers < 1 || qf_layers < 1 || diff_layers < 1) fail("layer counts must be >= 1");
    if (lora_rank < 1) fail("lora.rank must be >= 1");
    if (qf_queries < 1) fail("qformer.queries must be >= 1");
    if (cme_tokens < 1) fail("cme.n_e must be >= 1");
    if (cme_e_source != "vbar" && cme_e_source != "gate")
        fail("cme.e_source must be vbar or gate");
    if (diff_t_steps < 1) fail("diffusion.t_steps must be >= 1");
    if (!(diff_beta_start > 0 && diff_beta_end < 1 && diff_beta_start <= diff_beta_end))
        fail("diffusion betas must satisfy 0 < start <= end < 1");
    if (optim_lr <= 0) fail("optim.lr must be positive");
    if (optim_weight_decay < 0) fail("optim.weight_decay must be >= 0");
    if (train_batch < 1) fail("train.batch must be >= 1");
    if (train_steps < 1) fail("train.steps must be >= 1");
    if (train_checkpoint_every < 1) fail("train.checkpoint_every must be >= 1");
    if (train_overfit < 0) fail("train.overfit must be >= 0");
    if (!(train_overfit_stop >= 0 && train_overfit_stop < 1))
        fail("train.overfit_stop must be in [0,1)");
    if (data_count < 4) fail("data.count must be >= 4");
    double mix_total = 0;
    for (double wgt : data_category_mix) {
        if (wgt < 0) fail("data.category_mix weights must be >= 0");
        mix_total += wgt;
    }
    if (mix_total <= 0) fail("data.category_mix weights sum to zero");
    if (data_m_candidates < 1) fail("data.m_candidates must be >= 1");
    if (data_top_n < 1 || data_top_n > data_m_candidates)
        fail("data.top_n must be in [1, m_candidates]");
    if (data_w_rule < 0 || data_w_psnr < 0 ||
        std::abs(data_w_rule + data_w_psnr - 1.0) > 1e-9)
        fail("data score weights must be non-negative and sum to 1");
    if (!(data_val_fraction >= 0 && data_val_fraction < 1))
        fail("data.val_fraction must be in [0,1)");
    if (data_val_cap < 0) fail("data.val_cap must be >= 0");
    if (eval_ddim_steps < 1 || eval_ddim_steps > diff_t_steps)
        fail("eval.ddim_steps must be in [1, t_steps]");
}

}  // namespace rb
