#pragma once

#include <string>
#include <vector>

#include "rb/config.hpp"
#include "rb/pipeline.hpp"

namespace rb {

// Exit codes shared by every command: 0 ok, 1 config, 2 io, 3 invariant.
int exit_code_for(const std::exception& e);

struct TrainRunResult {
    std::vector<StepLosses> losses;
    int steps_run = 0;
    std::string checkpoint_prefix;  // final checkpoint
};

/// gen-data: synthesizes the dataset into cfg.out_dir and prints a manifest
/// summary.
void cmd_gen_data(const PipelineConfig& cfg);

/// train: full training loop over cfg.data_dir; writes vocab, effective
/// config, train_log.jsonl and periodic checkpoints into cfg.out_dir.
TrainRunResult cmd_train(const PipelineConfig& cfg);

/// eval: runs the sampler over the validation split of cfg.data_dir with
/// the checkpoint at cfg.checkpoint, writes report.json / report.txt.
void cmd_eval(const PipelineConfig& cfg);

struct EditArgs {
    std::string image_path;   // RBT1 [H,W,C]
    std::string instruction;
    std::string out_prefix;
    bool dump_guidance = false;
    std::uint64_t edit_seed = 0;
};

/// edit: single-image inference; writes <out>.rbt, <out>.ppm and optionally
/// <out>.guidance.rbta.
void cmd_edit(const PipelineConfig& cfg, const EditArgs& args);

/// selftest: gradient/invariant audit; returns process exit code.
int cmd_selftest();

void write_ppm(const std::string& path, const Tensor& image);

/// Vocabulary from the training split of a dataset (instructions plus
/// captions, in sample-id order).
Vocabulary vocab_from_dataset(const LoadedDataset& ds, int r);

}  // namespace rb
