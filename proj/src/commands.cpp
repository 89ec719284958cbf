#include "rb/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "rb/errors.hpp"
#include "rb/metrics.hpp"
#include "rb/rng.hpp"
#include "rb/selftest.hpp"

namespace fs = std::filesystem;

namespace rb {

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 1;
    if (dynamic_cast<const IoError*>(&e)) return 2;
    return 3;
}

Vocabulary vocab_from_dataset(const LoadedDataset& ds, int r) {
    std::vector<std::string> corpus;
    for (int id : ds.train_ids) {
        const EditSample& s = ds.samples[static_cast<std::size_t>(id)];
        corpus.push_back(s.instruction);
        corpus.push_back(s.initial_instruction);
        corpus.push_back(s.source_caption);
        corpus.push_back(s.target_caption);
    }
    if (corpus.empty()) {
        for (const EditSample& s : ds.samples) corpus.push_back(s.instruction);
    }
    return build_vocab(corpus, r);
}

void cmd_gen_data(const PipelineConfig& cfg) {
    cfg.validate();
    if (cfg.out_dir.empty()) throw ConfigError("gen-data: --out is required");
    ForgeOptions opt;
    opt.h = cfg.image_h;
    opt.w = cfg.image_w;
    opt.c = cfg.image_c;
    opt.count = cfg.data_count;
    opt.master_seed = cfg.seed;
    opt.category_mix = cfg.data_category_mix;
    opt.m_candidates = cfg.data_m_candidates;
    opt.w_rule = cfg.data_w_rule;
    opt.w_psnr = cfg.data_w_psnr;
    opt.val_fraction = cfg.data_val_fraction;
    opt.val_cap = cfg.data_val_cap;
    DatasetManifest mani = build_dataset(opt, cfg.out_dir);
    cfg.save((fs::path(cfg.out_dir) / "config.json").string());
    std::cout << "wrote " << cfg.data_count << " samples to " << cfg.out_dir << "\n";
    for (const auto& [cat, jc] : mani.json.at("categories").items()) {
        std::cout << "  " << cat << ": train " << jc.at("train").get<int>() << ", val "
                  << jc.at("val").get<int>() << "\n";
    }
}

namespace {

std::string step_ckpt_prefix(const std::string& out_dir, std::int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt_%06lld", static_cast<long long>(step));
    return (fs::path(out_dir) / buf).string();
}

}  // namespace

TrainRunResult cmd_train(const PipelineConfig& cfg) {
    flush_subnormals();
    cfg.validate();
    if (cfg.data_dir.empty()) throw ConfigError("train: --data is required");
    if (cfg.out_dir.empty()) throw ConfigError("train: --out is required");
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("train: cannot create " + cfg.out_dir + ": " + ec.message());

    LoadedDataset ds = load_dataset(cfg.data_dir);
    Vocabulary vocab = vocab_from_dataset(ds, cfg.vocab_r);
    vocab.save((fs::path(cfg.out_dir) / "vocab.json").string());
    cfg.save((fs::path(cfg.out_dir) / "config.json").string());

    ReasonBrainModel model = ReasonBrainModel::init(cfg, vocab);
    TrainState st = make_train_state(model, ds);

    int start_step = 0;
    if (!cfg.resume.empty()) {
        CheckpointInfo info = load_checkpoint(cfg.resume, model, &st.opt);
        start_step = static_cast<int>(info.step);
    }

    std::ofstream log(fs::path(cfg.out_dir) / "train_log.jsonl",
                      start_step > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("train: cannot open train_log.jsonl");

    TrainRunResult result;
    const bool overfit = cfg.train_overfit > 0;
    double initial_total = -1.0;
    std::string last_ckpt;

    for (int step = start_step + 1; step <= cfg.train_steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        StepLosses losses;
        try {
            losses = train_step(st, step);
        } catch (const InvariantError& e) {
            // leave the last periodic checkpoint in place and surface the abort
            log.flush();
            throw InvariantError(std::string("train aborted at step ") + std::to_string(step) +
                                 ": " + e.what() +
                                 (last_ckpt.empty() ? "" : " (last good checkpoint: " + last_ckpt + ")"));
        }
        const auto t1 = std::chrono::steady_clock::now();
        const long wall_ms =
            std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();

        nlohmann::ordered_json line;
        line["step"] = step;
        line["l_mllm"] = losses.l_mllm;
        line["l_dm"] = losses.l_dm;
        line["l_total"] = losses.l_total;
        line["wall_ms"] = wall_ms;
        log << line.dump() << "\n";
        result.losses.push_back(losses);
        result.steps_run = step;

        if (initial_total < 0) initial_total = losses.l_total;
        if (cfg.train_log_every > 0 && step % cfg.train_log_every == 0) {
            std::cout << "step " << step << " l_mllm " << losses.l_mllm << " l_dm " << losses.l_dm
                      << " l_total " << losses.l_total << "\n";
        }
        if (step % cfg.train_checkpoint_every == 0) {
            last_ckpt = step_ckpt_prefix(cfg.out_dir, step);
            save_checkpoint(last_ckpt, model, &st.opt, step);
            model.vocab.save(last_ckpt + ".vocab.json");
        }
        if (overfit && cfg.train_overfit_stop > 0 &&
            losses.l_total <= (1.0 - cfg.train_overfit_stop) * initial_total) {
            break;  // converged well past the target reduction
        }
    }

    const std::string final_prefix = (fs::path(cfg.out_dir) / "ckpt_final").string();
    save_checkpoint(final_prefix, model, &st.opt, result.steps_run);
    model.vocab.save(final_prefix + ".vocab.json");
    result.checkpoint_prefix = final_prefix;
    return result;
}

namespace {

PipelineConfig checkpoint_config(const std::string& prefix) {
    auto [entries, manifest] = read_archive(prefix + ".base.rbta");
    (void)entries;
    return PipelineConfig::from_json(manifest.at("config"));
}

void check_dims_match(const PipelineConfig& a, const PipelineConfig& b) {
    auto dims = [](const PipelineConfig& c) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "image %dx%dx%d, d_enc %d, d_llm %d, d_diff %d", c.image_h,
                      c.image_w, c.image_c, c.d_enc, c.d_llm, c.d_diff);
        return std::string(buf);
    };
    if (a.image_h != b.image_h || a.image_w != b.image_w || a.image_c != b.image_c ||
        a.d_enc != b.d_enc || a.d_llm != b.d_llm || a.d_diff != b.d_diff) {
        throw ConfigError("dim mismatch: config has (" + dims(a) + ") but checkpoint has (" +
                          dims(b) + ")");
    }
}

ReasonBrainModel model_from_checkpoint(const PipelineConfig& active, const std::string& prefix) {
    PipelineConfig stored = checkpoint_config(prefix);
    check_dims_match(active, stored);
    Vocabulary vocab = Vocabulary::load(prefix + ".vocab.json");
    stored.eval_ddim_steps = active.eval_ddim_steps;
    stored.eval_oracle_outputs = active.eval_oracle_outputs;
    ReasonBrainModel model = ReasonBrainModel::init(stored, vocab);
    load_checkpoint(prefix, model, nullptr);
    return model;
}

}  // namespace

void cmd_eval(const PipelineConfig& cfg) {
    flush_subnormals();
    cfg.validate();
    if (cfg.data_dir.empty()) throw ConfigError("eval: --data is required");
    if (cfg.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
    if (cfg.out_dir.empty()) throw ConfigError("eval: --out is required");
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("eval: cannot create " + cfg.out_dir + ": " + ec.message());

    LoadedDataset ds = load_dataset(cfg.data_dir);
    ReasonBrainModel model = model_from_checkpoint(cfg, cfg.checkpoint);

    std::vector<EvalItem> items;
    items.reserve(ds.val_ids.size());
    for (int id : ds.val_ids) {
        const EditSample& s = ds.samples[static_cast<std::size_t>(id)];
        EvalItem item;
        item.sample = &s;
        if (cfg.eval_oracle_outputs) {
            item.output = s.target;
        } else {
            auto res = model.sample_edit(s.source, s.instruction, cfg.eval_ddim_steps,
                                         static_cast<std::uint64_t>(s.sample_id));
            item.output = res.image;
        }
        items.push_back(std::move(item));
    }
    MetricReport rep = evaluate(items, model_embedder(model));

    {
        std::ofstream os(fs::path(cfg.out_dir) / "report.json");
        if (!os) throw IoError("eval: cannot write report.json");
        os << rep.to_json().dump(2) << "\n";
    }
    {
        std::ofstream os(fs::path(cfg.out_dir) / "report.txt");
        if (!os) throw IoError("eval: cannot write report.txt");
        os << rep.to_table();
    }
    cfg.save((fs::path(cfg.out_dir) / "config.json").string());
    std::cout << rep.to_table();
}

void write_ppm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(2) < 1)
        throw InvariantError("write_ppm: expected [H,W,C] image");
    const int h = image.dim(0), w = image.dim(1), c = image.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("write_ppm: cannot open " + path);
    os << "P6\n" << w << " " << h << "\n255\n";
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                const double v = image.values()[(static_cast<std::size_t>(y) * w + x) * c +
                                                std::min(ch, c - 1)];
                os.put(static_cast<char>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
            }
    if (!os) throw IoError("write_ppm: write failed for " + path);
}

void cmd_edit(const PipelineConfig& cfg, const EditArgs& args) {
    flush_subnormals();
    cfg.validate();
    if (cfg.checkpoint.empty()) throw ConfigError("edit: --checkpoint is required");
    if (args.image_path.empty()) throw ConfigError("edit: --image is required");
    if (args.instruction.empty()) throw ConfigError("edit: --instruction must be nonempty");
    if (args.out_prefix.empty()) throw ConfigError("edit: --out is required");

    ReasonBrainModel model = model_from_checkpoint(cfg, cfg.checkpoint);

    Tensor image;
    try {
        image = load_rbt(args.image_path);
        validate_image(image, model.cfg.image_h, model.cfg.image_w, model.cfg.image_c);
    } catch (const InvariantError& e) {
        throw IoError(std::string("edit: invalid image file ") + args.image_path + ": " + e.what());
    }

    auto res = model.sample_edit(image, args.instruction, cfg.eval_ddim_steps, args.edit_seed);
    save_rbt(args.out_prefix + ".rbt", res.image);
    write_ppm(args.out_prefix + ".ppm", res.image);
    cfg.save(args.out_prefix + ".config.json");
    if (args.dump_guidance) {
        ParamSet dump;
        dump.add("v", res.bundle.v);
        dump.add("v_hat", res.bundle.v_hat);
        dump.add("rbar_vis", res.bundle.rbar_vis);
        dump.add("ebar_vis", res.bundle.ebar_vis);
        dump.add("rbar_txt", res.bundle.rbar_txt);
        dump.add("ebar_txt", res.bundle.ebar_txt);
        nlohmann::ordered_json m;
        m["kind"] = "guidance_dump";
        m["instruction"] = args.instruction;
        write_archive(args.out_prefix + ".guidance.rbta", dump, m);
    }
    std::cout << "edited image written to " << args.out_prefix << ".rbt\n";
}

int cmd_selftest() {
    const auto results = run_selftest();
    bool all_pass = true;
    for (const SelfTestResult& r : results) {
        std::printf("%-28s max_rel_err %.3e  %s\n", r.name.c_str(), r.max_err,
                    r.pass ? "ok" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    std::printf("%zu checks, %s\n", results.size(), all_pass ? "all passed" : "FAILURES");
    return all_pass ? 0 : 3;
}

}  // namespace rb
