#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "rb/forge.hpp"
#include "rb/tensor.hpp"

namespace rb {

/// Pluggable embedding provider; both functions must return L2-normalized
/// vectors of a common width.
struct Embedder {
    std::function<Tensor(const Tensor& image)> embed_image;
    std::function<Tensor(const std::string& text)> embed_text;
};

Tensor l2_normalize(const Tensor& v);

struct MetricCounters {
    long non_unit_inputs = 0;   // metric_sim inputs that needed renormalizing
    long degenerate_dirs = 0;   // zero-delta directional cases
};

/// Mean absolute pixel difference.
double metric_l1(const Tensor& a, const Tensor& b);

/// Cosine similarity of unit vectors (dot product); non-unit inputs are
/// normalized and counted.
double metric_sim(const Tensor& u, const Tensor& v, MetricCounters* counters = nullptr);

struct DirResult {
    double value = 0.0;
    bool degenerate = false;  // either embedding delta had norm < 1e-9
};

/// Cosine between the image-embedding delta and the text-embedding delta of
/// an edit pair.
DirResult metric_dir(const Tensor& src_img, const Tensor& out_img,
                     const std::string& src_caption, const std::string& out_caption,
                     const Embedder& emb, MetricCounters* counters = nullptr);

// ---- report ---------------------------------------------------------------------

struct SampleMetrics {
    int sample_id = 0;
    std::string category;
    double l1 = 0, sim_im = 0, sim_out = 0, sim_dir = 0, sim_dino = 0;
    bool dir_degenerate = false;
};

struct MetricAggregate {
    long count = 0;
    double l1 = 0, sim_im = 0, sim_out = 0, sim_dir = 0, sim_dino = 0;
};

struct MetricReport {
    std::vector<SampleMetrics> rows;  // sorted by sample_id
    MetricAggregate overall;
    std::map<std::string, MetricAggregate> per_category;
    std::vector<int> omissions;  // samples with no output
    MetricCounters counters;

    nlohmann::ordered_json to_json() const;
    std::string to_table() const;  // column order: sim_dir sim_im sim_out l1 sim_dino
};

struct EvalItem {
    const EditSample* sample = nullptr;
    std::optional<Tensor> output;
};

/// Computes all metrics per sample (omitting samples with no output),
/// aggregates overall and per category in sample-id order.
MetricReport evaluate(const std::vector<EvalItem>& items, const Embedder& emb);

}  // namespace rb
