#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "rb/tensor.hpp"

namespace rb {

// ---- parameter registry -----------------------------------------------------

/// Named, ordered collection of parameter tensors. Ordering is construction
/// order and fixed, so optimizer updates and checkpoints are deterministic.
struct ParamSet {
    std::vector<std::pair<std::string, Tensor>> items;

    void add(const std::string& name, const Tensor& t);
    void merge(const std::string& prefix, const ParamSet& other);
    Tensor find(const std::string& name) const;
    void zero_grads();
    double grad_norm() const;
    std::size_t total_params() const;
};

// ---- init helpers -------------------------------------------------------------

Tensor xavier_uniform(int d_out, int d_in, std::mt19937_64& eng, bool requires_grad = true);
Tensor normal_init(std::vector<int> shape, double stddev, std::mt19937_64& eng,
                   bool requires_grad = true);

// ---- layers -------------------------------------------------------------------

/// y = x . W^T + b with W stored [d_out, d_in].
struct Linear {
    Tensor w;
    Tensor b;  // undefined when bias-free

    static Linear make(int d_in, int d_out, std::mt19937_64& eng, bool bias = true);
    static Linear make_zero(int d_in, int d_out, bool bias = false);
    Tensor forward(const Tensor& x) const;
    ParamSet params(const std::string& prefix) const;
};

struct LayerNorm {
    Tensor gamma;
    Tensor beta;
    double eps = 1e-5;

    static LayerNorm make(int d);
    Tensor forward(const Tensor& x) const { return layernorm(x, gamma, beta, eps); }
    ParamSet params(const std::string& prefix) const;
};

/// Linear(d -> 4d) -> GELU -> Linear(4d -> d).
struct FeedForward {
    Linear in;
    Linear out;

    static FeedForward make(int d, std::mt19937_64& eng);
    Tensor forward(const Tensor& x) const;
    ParamSet params(const std::string& prefix) const;
};

// ---- LoRA ----------------------------------------------------------------------

/// Low-rank correction on a frozen base weight: effective W = W_base +
/// (alpha/rank) * B . A. B starts at zero, so the adapted layer equals the
/// frozen base exactly at init.
struct LoraAdapter {
    Tensor a;  // [rank, d_in], normal(0, 0.02)
    Tensor b;  // [d_out, rank], zeros
    int rank = 8;
    double alpha = 16.0;

    static LoraAdapter make(int d_in, int d_out, int rank, double alpha, std::mt19937_64& eng);
    ParamSet params(const std::string& prefix) const;
};

Tensor lora_forward(const Tensor& x, const Tensor& base_w, const LoraAdapter& adapter);
Tensor lora_merge(const Tensor& base_w, const LoraAdapter& adapter);

// ---- attention ------------------------------------------------------------------

/// Per-head attention weights captured from a forward call (values only).
struct AttentionTrace {
    std::vector<Tensor> head_weights;  // each [n_q, n_kv], rows sum to 1
};

/// Multi-head cross-attention. Projections apply as x . W^T; no biases and
/// no positional terms inside the block, so attention is permutation
/// invariant over key/value rows. Self-attention is the key_value == query
/// special case.
struct CrossAttentionBlock {
    int heads = 4;
    int d_model = 0;
    Tensor wq, wk, wv, wo;  // [d_model, d_model]
    std::optional<LoraAdapter> lq, lk, lv, lo;
    bool residual_norm = false;
    LayerNorm norm;  // used when residual_norm

    static CrossAttentionBlock make(int d_model, int heads, std::mt19937_64& eng,
                                    bool residual_norm = false);
    void attach_lora(int rank, double alpha, std::mt19937_64& eng);

    Tensor forward(const Tensor& query, const Tensor& key_value, bool causal = false,
                   AttentionTrace* trace = nullptr) const;
    ParamSet params(const std::string& prefix) const;
    ParamSet lora_params(const std::string& prefix) const;
};

// ---- optimizer -----------------------------------------------------------------

/// AdamW with decoupled weight decay over a fixed ParamSet.
struct AdamW {
    double lr = 1e-3;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t t = 0;
    ParamSet params;
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    static AdamW make(ParamSet params, double lr, double weight_decay);
    void step();
    void zero_grads() { params.zero_grads(); }
};

// ---- checkpoint archive -----------------------------------------------------------
// Named-tensor records ([u32 name len][name][RBT1 tensor]) terminated by a
// zero name length, then a trailing JSON manifest.

void write_archive(const std::string& path, const ParamSet& params,
                   const nlohmann::ordered_json& manifest);
std::pair<std::vector<std::pair<std::string, Tensor>>, nlohmann::ordered_json> read_archive(
    const std::string& path);

/// Copies archived values into matching names of dst; every dst name must be
/// present with identical shape.
void load_into(ParamSet& dst, const std::vector<std::pair<std::string, Tensor>>& src);

}  // namespace rb
