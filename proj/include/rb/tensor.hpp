#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "rb/errors.hpp"

namespace rb {

/// Dense row-major f64 tensor. Copies are shallow; the payload (values and
/// grad, both always the same length) is shared. grad is all-zero right
/// after creation and after zero_grad().
struct TensorData {
    std::vector<int> shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
    std::int64_t id = 0;
};

struct Tensor {
    std::shared_ptr<TensorData> d;

    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_values(std::vector<int> shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return d != nullptr; }
    const std::vector<int>& shape() const { return d->shape; }
    int rank() const { return static_cast<int>(d->shape.size()); }
    int dim(int axis) const { return d->shape[static_cast<std::size_t>(axis)]; }
    std::size_t numel() const { return d->values.size(); }
    bool requires_grad() const { return d->requires_grad; }
    std::int64_t id() const { return d->id; }

    std::vector<double>& values() { return d->values; }
    const std::vector<double>& values() const { return d->values; }
    std::vector<double>& grad() { return d->grad; }
    const std::vector<double>& grad() const { return d->grad; }

    // 2-D accessors.
    int rows() const { return d->shape[0]; }
    int cols() const { return d->shape[1]; }
    double& at(int r, int c) { return d->values[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return d->values[static_cast<std::size_t>(r) * cols() + c]; }

    double item() const;
    double grad_at(int r, int c) const { return d->grad[static_cast<std::size_t>(r) * cols() + c]; }

    void zero_grad();
    double grad_norm() const;
    Tensor clone(bool requires_grad = false) const;
};

std::string shape_str(const std::vector<int>& shape);
std::size_t shape_numel(const std::vector<int>& shape);

/// Linear record of executed ops. Replaying the backward rules in reverse
/// recorded order accumulates each gradient contribution exactly once.
/// Constructing a Tape activates it for the current thread; destruction
/// restores the previously active one. Graph building is single-threaded.
struct TapeNode {
    std::string op;
    std::vector<std::int64_t> inputs;
    std::int64_t output = 0;
    std::function<void()> backward;  // null for annotation-only nodes
};

class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::string op, std::vector<std::int64_t> inputs, std::int64_t output,
                std::function<void()> backward);
    void backward(const Tensor& loss);
    void clear() { nodes_.clear(); }
    const std::vector<TapeNode>& nodes() const { return nodes_; }

    static Tape* active();

  private:
    std::vector<TapeNode> nodes_;
    Tape* prev_ = nullptr;
};

/// Suspends tape recording for the current scope (inference / finite
/// differences).
class NoTape {
  public:
    NoTape();
    ~NoTape();
    NoTape(const NoTape&) = delete;
    NoTape& operator=(const NoTape&) = delete;

  private:
    Tape* saved_ = nullptr;
};

// ---- differentiable ops ---------------------------------------------------
// Outputs join the gradient graph only while a Tape is active and at least
// one input requires grad. No implicit broadcasting except scalar-with-tensor
// and the per-row vector add.

Tensor matmul(const Tensor& a, const Tensor& b);      // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);   // [m,k]x[n,k]^T -> [m,n]
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor add_rowvec(const Tensor& x, const Tensor& v);  // [n,d] + [d] per row
Tensor softmax_rows(const Tensor& x, bool causal = false);
Tensor log_softmax_rows(const Tensor& x);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps = 1e-5);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int begin, int end);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mean_rows(const Tensor& x);  // [n,d] -> [1,d]
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
Tensor select_items(const Tensor& x, const std::vector<std::pair<int, int>>& picks);

Tensor slice_rows(const Tensor& x, int begin, int end);
Tensor slice_cols(const Tensor& x, int begin, int end);

/// Marker node on the active tape; carries no backward rule. Used to make
/// block-level dataflow (e.g. cross-attention wiring) inspectable in tests.
void tape_annotate(const std::string& op, std::vector<std::int64_t> inputs,
                   std::int64_t output);

// ---- gradient auditor -----------------------------------------------------

/// Central-difference audit of reverse-mode gradients. f must return a
/// scalar tensor. Returns max over all input coordinates of
/// |analytic - numeric| / max(1, |analytic|).
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& inputs, double h = 1e-5);

/// Flushes subnormal floats to zero for the calling thread. Saturating
/// softmax weights and trained-down activations otherwise drift into the
/// subnormal range, where x86 cores slow down by an order of magnitude;
/// values that small are far below every tolerance in the system.
void flush_subnormals();

// ---- binary tensor file ("RBT1") -------------------------------------------
// Magic "RBT1", u32 rank, rank x u64 dims, little-endian f64 values.

void write_rbt(std::ostream& os, const Tensor& t);
Tensor read_rbt(std::istream& is);
void save_rbt(const std::string& path, const Tensor& t);
Tensor load_rbt(const std::string& path);

}  // namespace rb
