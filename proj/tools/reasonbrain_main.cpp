// Command-line entry points for the hypothetical-instruction editing
// pipeline: gen-data, train, eval, edit, selftest.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "rb/commands.hpp"
#include "rb/config.hpp"
#include "rb/errors.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "flat JSON config file (dotted keys)");
    cmd->add_option("--set", opts.sets, "override a config key, e.g. --set optim.lr=5e-4");
}

rb::PipelineConfig resolve_config(const CommonOpts& opts) {
    rb::PipelineConfig cfg = opts.config_path.empty()
                                 ? rb::PipelineConfig::defaults()
                                 : rb::PipelineConfig::load(opts.config_path);
    for (const std::string& kv : opts.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw rb::ConfigError("--set expects key=value, got " + kv);
        cfg.apply_override(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale hypothetical-instruction image editing pipeline"};
    app.require_subcommand(1);

    CommonOpts gen_opts, train_opts, eval_opts, edit_opts;

    auto* gen = app.add_subcommand("gen-data", "synthesize an edit dataset");
    add_common(gen, gen_opts);
    int gen_count = -1;
    std::uint64_t gen_seed = 0;
    bool gen_seed_set = false;
    std::string gen_out;
    std::vector<double> gen_mix;
    gen->add_option("--count", gen_count, "number of samples");
    gen->add_option("--seed", gen_seed, "master seed")->each([&](const std::string&) {
        gen_seed_set = true;
    });
    gen->add_option("--out-dir,--out", gen_out, "output directory")->required();
    gen->add_option("--category-mix", gen_mix, "four category weights")->expected(4);

    auto* train = app.add_subcommand("train", "train the editing pipeline");
    add_common(train, train_opts);
    std::string train_data, train_out, train_resume;
    int train_overfit = -1, train_steps = -1;
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--overfit", train_overfit, "fix one n-sample batch and its noise draws");
    train->add_option("--steps", train_steps, "training steps");
    train->add_option("--resume", train_resume, "checkpoint prefix to resume from");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
    add_common(eval, eval_opts);
    std::string eval_data, eval_ckpt, eval_out;
    bool eval_oracle = false;
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint prefix")->required();
    eval->add_option("--out", eval_out, "output directory")->required();
    eval->add_flag("--oracle-outputs", eval_oracle, "score targets as outputs (debug)");

    auto* edit = app.add_subcommand("edit", "edit a single image");
    add_common(edit, edit_opts);
    rb::EditArgs edit_args;
    std::string edit_ckpt;
    edit->add_option("--checkpoint", edit_ckpt, "checkpoint prefix")->required();
    edit->add_option("--image", edit_args.image_path, "input image (RBT1 [H,W,C])")->required();
    edit->add_option("--instruction", edit_args.instruction, "hypothetical instruction")
        ->required();
    edit->add_option("--out", edit_args.out_prefix, "output prefix")->required();
    edit->add_option("--seed", edit_args.edit_seed, "sampler seed");
    edit->add_flag("--dump-guidance", edit_args.dump_guidance,
                   "also write the guidance tensors");

    auto* selftest = app.add_subcommand("selftest", "gradient and invariant audit");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            rb::PipelineConfig cfg = resolve_config(gen_opts);
            if (gen_count > 0) cfg.data_count = gen_count;
            if (gen_seed_set) cfg.seed = gen_seed;
            if (!gen_mix.empty()) {
                for (int i = 0; i < 4; ++i) cfg.data_category_mix[static_cast<std::size_t>(i)] = gen_mix[static_cast<std::size_t>(i)];
            }
            cfg.out_dir = gen_out;
            rb::cmd_gen_data(cfg);
        } else if (train->parsed()) {
            rb::PipelineConfig cfg = resolve_config(train_opts);
            cfg.data_dir = train_data;
            cfg.out_dir = train_out;
            cfg.resume = train_resume;
            if (train_overfit >= 0) {
                cfg.train_overfit = train_overfit;
                if (train_overfit > 0) cfg.train_batch = train_overfit;
            }
            if (train_steps > 0) cfg.train_steps = train_steps;
            rb::cmd_train(cfg);
        } else if (eval->parsed()) {
            rb::PipelineConfig cfg = resolve_config(eval_opts);
            cfg.data_dir = eval_data;
            cfg.checkpoint = eval_ckpt;
            cfg.out_dir = eval_out;
            cfg.eval_oracle_outputs = eval_oracle;
            rb::cmd_eval(cfg);
        } else if (edit->parsed()) {
            rb::PipelineConfig cfg = resolve_config(edit_opts);
            cfg.checkpoint = edit_ckpt;
            rb::cmd_edit(cfg, edit_args);
        } else if (selftest->parsed()) {
            return rb::cmd_selftest();
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return rb::exit_code_for(e);
    }
    return 0;
}
