#include "rb/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#if defined(__SSE2__) || defined(_M_X64)
#include <immintrin.h>
#define RB_HAVE_SSE_CSR 1
#endif

namespace rb {

namespace {

std::atomic<std::int64_t> g_next_id{1};

thread_local Tape* g_active_tape = nullptr;

std::shared_ptr<TensorData> make_data(std::vector<int> shape, bool requires_grad) {
    for (int s : shape) {
        if (s <= 0) throw InvariantError("tensor dim must be positive, got shape " + shape_str(shape));
    }
    auto d = std::make_shared<TensorData>();
    std::size_t n = shape_numel(shape);
    d->shape = std::move(shape);
    d->values.assign(n, 0.0);
    d->grad.assign(n, 0.0);
    d->requires_grad = requires_grad;
    d->id = g_next_id.fetch_add(1);
    return d;
}

bool track(std::initializer_list<const Tensor*> ins) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : ins) {
        if ((*t).requires_grad()) return true;
    }
    return false;
}

void record(const char* op, std::initializer_list<const Tensor*> ins, Tensor& out,
            std::function<void()> backward) {
    out.d->requires_grad = true;
    std::vector<std::int64_t> ids;
    ids.reserve(ins.size());
    for (const Tensor* t : ins) ids.push_back((*t).id());
    Tape::active()->record(op, std::move(ids), out.id(), std::move(backward));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw InvariantError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

void check_2d(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw InvariantError(std::string(op) + ": expected rank-2 tensor, got " +
                             shape_str(t.shape()));
    }
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    return n;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    Tensor t;
    t.d = make_data(std::move(shape), requires_grad);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.values().begin(), t.values().end(), value);
    return t;
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<double> values,
                           bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw InvariantError("from_values: shape " + shape_str(shape) + " expects " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    Tensor t = zeros(std::move(shape), requires_grad);
    t.values() = std::move(values);
    return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_values({1}, {v}, requires_grad);
}

double Tensor::item() const {
    if (numel() != 1) throw InvariantError("item: tensor is not scalar, shape " + shape_str(shape()));
    return d->values[0];
}

void Tensor::zero_grad() {
    std::fill(d->grad.begin(), d->grad.end(), 0.0);
}

double Tensor::grad_norm() const {
    double s = 0.0;
    for (double g : d->grad) s += g * g;
    return std::sqrt(s);
}

Tensor Tensor::clone(bool requires_grad) const {
    Tensor t = zeros(shape(), requires_grad);
    t.values() = values();
    return t;
}

// ---- tape ------------------------------------------------------------------

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() {
    g_active_tape = prev_;
}

Tape* Tape::active() {
    return g_active_tape;
}

void Tape::record(std::string op, std::vector<std::int64_t> inputs, std::int64_t output,
                  std::function<void()> backward) {
    nodes_.push_back(TapeNode{std::move(op), std::move(inputs), output, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw InvariantError("backward: loss must be scalar, shape " + shape_str(loss.shape()));
    }
    loss.d->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->backward) it->backward();
    }
}

NoTape::NoTape() {
    saved_ = g_active_tape;
    g_active_tape = nullptr;
}

NoTape::~NoTape() {
    g_active_tape = saved_;
}

void tape_annotate(const std::string& op, std::vector<std::int64_t> inputs,
                   std::int64_t output) {
    if (Tape* t = Tape::active()) t->record(op, std::move(inputs), output, nullptr);
}

void flush_subnormals() {
#ifdef RB_HAVE_SSE_CSR
    _mm_setcsr(_mm_getcsr() | 0x8040);  // FTZ | DAZ
#endif
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    if (a.cols() != b.rows()) {
        throw InvariantError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            const double* prow = pb + static_cast<std::size_t>(kk) * n;
            double* orow = po + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * prow[j];
        }
    }
    if (track({&a, &b})) {
        record("matmul", {&a, &b}, out, [a = a, b = b, out = out]() mutable {
            const int m2 = a.rows(), k2 = a.cols(), n2 = b.cols();
            const double* go = out.grad().data();
            // dA = dC . B^T, as contiguous row dots
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                const double* pb2 = b.values().data();
                for (int i = 0; i < m2; ++i) {
                    const double* grow = go + static_cast<std::size_t>(i) * n2;
                    for (int kk = 0; kk < k2; ++kk) {
                        const double* brow = pb2 + static_cast<std::size_t>(kk) * n2;
                        double s = 0.0;
                        for (int j = 0; j < n2; ++j) s += grow[j] * brow[j];
                        ga[i * k2 + kk] += s;
                    }
                }
            }
            // dB = A^T . dC, contiguous axpy rows
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                const double* pa2 = a.values().data();
                for (int i = 0; i < m2; ++i) {
                    const double* grow = go + static_cast<std::size_t>(i) * n2;
                    for (int kk = 0; kk < k2; ++kk) {
                        const double av = pa2[i * k2 + kk];
                        double* brow = gb + static_cast<std::size_t>(kk) * n2;
                        for (int j = 0; j < n2; ++j) brow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check_2d(a, "matmul_nt");
    check_2d(b, "matmul_nt");
    if (a.cols() != b.cols()) {
        throw InvariantError("matmul_nt: inner dims differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    const int m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out = Tensor::zeros({m, n});
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (int i = 0; i < m; ++i) {
        const double* arow = pa + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
            const double* brow = pb + static_cast<std::size_t>(j) * k;
            double s = 0.0;
            for (int kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
            po[i * n + j] = s;
        }
    }
    if (track({&a, &b})) {
        record("matmul_nt", {&a, &b}, out, [a = a, b = b, out = out]() mutable {
            const int m2 = a.rows(), k2 = a.cols(), n2 = b.rows();
            const double* go = out.grad().data();
            // dA = dC . B, contiguous axpy rows
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                const double* pb2 = b.values().data();
                for (int i = 0; i < m2; ++i) {
                    double* garow = ga + static_cast<std::size_t>(i) * k2;
                    const double* grow = go + static_cast<std::size_t>(i) * n2;
                    for (int j = 0; j < n2; ++j) {
                        const double g = grow[j];
                        const double* brow = pb2 + static_cast<std::size_t>(j) * k2;
                        for (int kk = 0; kk < k2; ++kk) garow[kk] += g * brow[kk];
                    }
                }
            }
            // dB = dC^T . A, contiguous axpy rows
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                const double* pa2 = a.values().data();
                for (int i = 0; i < m2; ++i) {
                    const double* arow = pa2 + static_cast<std::size_t>(i) * k2;
                    const double* grow = go + static_cast<std::size_t>(i) * n2;
                    for (int j = 0; j < n2; ++j) {
                        const double g = grow[j];
                        double* brow = gb + static_cast<std::size_t>(j) * k2;
                        for (int kk = 0; kk < k2; ++kk) brow[kk] += g * arow[kk];
                    }
                }
            }
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] + b.values()[i];
    if (track({&a, &b})) {
        record("add", {&a, &b}, out, [a = a, b = b, out = out]() mutable {
            const std::size_t n2 = out.numel();
            if (a.requires_grad())
                for (std::size_t i = 0; i < n2; ++i) a.grad()[i] += out.grad()[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < n2; ++i) b.grad()[i] += out.grad()[i];
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] - b.values()[i];
    if (track({&a, &b})) {
        record("sub", {&a, &b}, out, [a = a, b = b, out = out]() mutable {
            const std::size_t n2 = out.numel();
            if (a.requires_grad())
                for (std::size_t i = 0; i < n2; ++i) a.grad()[i] += out.grad()[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < n2; ++i) b.grad()[i] -= out.grad()[i];
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * b.values()[i];
    if (track({&a, &b})) {
        record("mul", {&a, &b}, out, [a = a, b = b, out = out]() mutable {
            const std::size_t n2 = out.numel();
            if (a.requires_grad())
                for (std::size_t i = 0; i < n2; ++i) a.grad()[i] += out.grad()[i] * b.values()[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < n2; ++i) b.grad()[i] += out.grad()[i] * a.values()[i];
        });
    }
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] + s;
    if (track({&a})) {
        record("add_scalar", {&a}, out, [a = a, out = out]() mutable {
            const std::size_t n2 = out.numel();
            for (std::size_t i = 0; i < n2; ++i) a.grad()[i] += out.grad()[i];
        });
    }
    return out;
}

Tensor mul_scalar(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * s;
    if (track({&a})) {
        record("mul_scalar", {&a}, out, [a = a, out = out, s]() mutable {
            const std::size_t n2 = out.numel();
            for (std::size_t i = 0; i < n2; ++i) a.grad()[i] += out.grad()[i] * s;
        });
    }
    return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    check_2d(x, "add_rowvec");
    const int n = x.rows(), d = x.cols();
    if (static_cast<int>(v.numel()) != d) {
        throw InvariantError("add_rowvec: vector length " + std::to_string(v.numel()) +
                             " does not match row width " + std::to_string(d));
    }
    Tensor out = Tensor::zeros(x.shape());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.values()[i * d + j] = x.values()[i * d + j] + v.values()[j];
    if (track({&x, &v})) {
        record("add_rowvec", {&x, &v}, out, [x = x, v = v, out = out]() mutable {
            const int n2 = x.rows(), d2 = x.cols();
            if (x.requires_grad())
                for (std::size_t i = 0; i < x.numel(); ++i) x.grad()[i] += out.grad()[i];
            if (v.requires_grad())
                for (int i = 0; i < n2; ++i)
                    for (int j = 0; j < d2; ++j) v.grad()[j] += out.grad()[i * d2 + j];
        });
    }
    return out;
}

namespace {

// Softmax over the last axis, max-subtracted. The causal variant (square
// score matrices only) zeroes weights above the diagonal exactly: the
// additive -inf surrogate underflows exp() to 0.0 in f64.
Tensor softmax_impl(const Tensor& x, bool causal, bool log_form) {
    if (x.rank() < 1) throw InvariantError("softmax: rank must be >= 1");
    const int dlast = x.shape().back();
    const std::size_t rows = x.numel() / static_cast<std::size_t>(dlast);
    if (causal) {
        if (x.rank() != 2 || x.rows() != x.cols())
            throw InvariantError("softmax: causal mask requires square matrix, got " +
                                 shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.values().data() + r * dlast;
        double* o = out.values().data() + r * dlast;
        const int limit = causal ? static_cast<int>(r) + 1 : dlast;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < limit; ++j) mx = std::max(mx, in[j]);
        double denom = 0.0;
        for (int j = 0; j < limit; ++j) denom += std::exp(in[j] - mx);
        const double log_denom = std::log(denom);
        for (int j = 0; j < dlast; ++j) {
            if (j >= limit) {
                o[j] = log_form ? -std::numeric_limits<double>::infinity() : 0.0;
            } else if (log_form) {
                o[j] = in[j] - mx - log_denom;
            } else {
                o[j] = std::exp(in[j] - mx) / denom;
            }
        }
    }
    return out;
}

}  // namespace

Tensor softmax_rows(const Tensor& x, bool causal) {
    Tensor out = softmax_impl(x, causal, false);
    if (track({&x})) {
        record("softmax_rows", {&x}, out, [x = x, out = out]() mutable {
            const int dlast = x.shape().back();
            const std::size_t rows = x.numel() / static_cast<std::size_t>(dlast);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = out.values().data() + r * dlast;
                const double* gy = out.grad().data() + r * dlast;
                double* gx = x.grad().data() + r * dlast;
                double dot = 0.0;
                for (int j = 0; j < dlast; ++j) dot += gy[j] * y[j];
                for (int j = 0; j < dlast; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        });
    }
    return out;
}

Tensor log_softmax_rows(const Tensor& x) {
    Tensor out = softmax_impl(x, false, true);
    if (track({&x})) {
        record("log_softmax_rows", {&x}, out, [x = x, out = out]() mutable {
            const int dlast = x.shape().back();
            const std::size_t rows = x.numel() / static_cast<std::size_t>(dlast);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* ly = out.values().data() + r * dlast;
                const double* gy = out.grad().data() + r * dlast;
                double* gx = x.grad().data() + r * dlast;
                double gsum = 0.0;
                for (int j = 0; j < dlast; ++j) gsum += gy[j];
                for (int j = 0; j < dlast; ++j) gx[j] += gy[j] - std::exp(ly[j]) * gsum;
            }
        });
    }
    return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 1) throw InvariantError("layernorm: rank must be >= 1");
    const int dlast = x.shape().back();
    if (static_cast<int>(gamma.numel()) != dlast || static_cast<int>(beta.numel()) != dlast) {
        throw InvariantError("layernorm: affine params must have length " + std::to_string(dlast));
    }
    if (eps <= 0.0) throw InvariantError("layernorm: eps must be positive");
    const std::size_t rows = x.numel() / static_cast<std::size_t>(dlast);
    Tensor out = Tensor::zeros(x.shape());
    // keep per-row stats for the backward rule
    auto mean = std::make_shared<std::vector<double>>(rows);
    auto rstd = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.values().data() + r * dlast;
        double* o = out.values().data() + r * dlast;
        double m = 0.0;
        for (int j = 0; j < dlast; ++j) m += in[j];
        m /= dlast;
        double var = 0.0;
        for (int j = 0; j < dlast; ++j) var += (in[j] - m) * (in[j] - m);
        var /= dlast;
        const double rs = 1.0 / std::sqrt(var + eps);
        (*mean)[r] = m;
        (*rstd)[r] = rs;
        for (int j = 0; j < dlast; ++j)
            o[j] = (in[j] - m) * rs * gamma.values()[j] + beta.values()[j];
    }
    if (track({&x, &gamma, &beta})) {
        record("layernorm", {&x, &gamma, &beta}, out, [x = x, gamma = gamma, beta = beta, out = out, mean, rstd]() mutable {
            const int dlast = x.shape().back();
            const std::size_t rows = x.numel() / static_cast<std::size_t>(dlast);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* in = x.values().data() + r * dlast;
                const double* gy = out.grad().data() + r * dlast;
                const double m = (*mean)[r];
                const double rs = (*rstd)[r];
                if (gamma.requires_grad() || beta.requires_grad()) {
                    for (int j = 0; j < dlast; ++j) {
                        const double xhat = (in[j] - m) * rs;
                        if (gamma.requires_grad()) gamma.grad()[j] += gy[j] * xhat;
                        if (beta.requires_grad()) beta.grad()[j] += gy[j];
                    }
                }
                if (x.requires_grad()) {
                    double s1 = 0.0, s2 = 0.0;
                    for (int j = 0; j < dlast; ++j) {
                        const double gj = gy[j] * gamma.values()[j];
                        const double xhat = (in[j] - m) * rs;
                        s1 += gj;
                        s2 += gj * xhat;
                    }
                    s1 /= dlast;
                    s2 /= dlast;
                    double* gx = x.grad().data() + r * dlast;
                    for (int j = 0; j < dlast; ++j) {
                        const double gj = gy[j] * gamma.values()[j];
                        const double xhat = (in[j] - m) * rs;
                        gx[j] += rs * (gj - s1 - xhat * s2);
                    }
                }
            }
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw InvariantError("concat: empty part list");
    const int rank = parts[0].rank();
    if (axis < 0 || axis >= rank) throw InvariantError("concat: axis out of range");
    std::vector<int> out_shape = parts[0].shape();
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != rank) throw InvariantError("concat: rank mismatch");
        for (int ax = 0; ax < rank; ++ax) {
            if (ax != axis && p.dim(ax) != parts[0].dim(ax)) {
                throw InvariantError("concat: non-concat dim mismatch " + shape_str(p.shape()) +
                                     " vs " + shape_str(parts[0].shape()));
            }
        }
        total += p.dim(axis);
    }
    out_shape[axis] = total;

    std::size_t outer = 1, inner = 1;
    for (int ax = 0; ax < axis; ++ax) outer *= static_cast<std::size_t>(out_shape[ax]);
    for (int ax = axis + 1; ax < rank; ++ax) inner *= static_cast<std::size_t>(out_shape[ax]);

    Tensor out = Tensor::zeros(out_shape);
    std::size_t off = 0;  // offset along the concat axis
    for (const Tensor& p : parts) {
        const std::size_t pa = static_cast<std::size_t>(p.dim(axis));
        for (std::size_t o = 0; o < outer; ++o) {
            const double* src = p.values().data() + o * pa * inner;
            double* dst = out.values().data() +
                          (o * static_cast<std::size_t>(total) + off) * inner;
            std::memcpy(dst, src, pa * inner * sizeof(double));
        }
        off += pa;
    }

    bool any_grad = false;
    if (Tape::active()) {
        for (const Tensor& p : parts)
            if (p.requires_grad()) any_grad = true;
    }
    if (any_grad) {
        out.d->requires_grad = true;
        std::vector<std::int64_t> ids;
        for (const Tensor& p : parts) ids.push_back(p.id());
        std::vector<Tensor> held = parts;
        Tensor out_h = out;
        const std::size_t total_sz = static_cast<std::size_t>(total);
        Tape::active()->record("concat", std::move(ids), out.id(),
                               [held = held, out_h, outer, inner, total_sz, axis]() mutable {
            std::size_t off2 = 0;
            for (Tensor& p : held) {
                const std::size_t pa = static_cast<std::size_t>(p.dim(axis));
                if (p.requires_grad()) {
                    for (std::size_t o = 0; o < outer; ++o) {
                        const double* src = out_h.grad().data() + (o * total_sz + off2) * inner;
                        double* dst = p.grad().data() + o * pa * inner;
                        for (std::size_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
                    }
                }
                off2 += pa;
            }
        });
    }
    return out;
}

Tensor slice(const Tensor& x, int axis, int begin, int end) {
    const int rank = x.rank();
    if (axis < 0 || axis >= rank) throw InvariantError("slice: axis out of range");
    if (begin < 0 || end > x.dim(axis) || begin >= end) {
        throw InvariantError("slice: bad range [" + std::to_string(begin) + "," +
                             std::to_string(end) + ") on axis of size " +
                             std::to_string(x.dim(axis)));
    }
    std::vector<int> out_shape = x.shape();
    out_shape[axis] = end - begin;
    std::size_t outer = 1, inner = 1;
    for (int ax = 0; ax < axis; ++ax) outer *= static_cast<std::size_t>(x.dim(ax));
    for (int ax = axis + 1; ax < rank; ++ax) inner *= static_cast<std::size_t>(x.dim(ax));
    const std::size_t src_a = static_cast<std::size_t>(x.dim(axis));
    const std::size_t dst_a = static_cast<std::size_t>(end - begin);

    Tensor out = Tensor::zeros(out_shape);
    for (std::size_t o = 0; o < outer; ++o) {
        const double* src = x.values().data() + (o * src_a + begin) * inner;
        double* dst = out.values().data() + o * dst_a * inner;
        std::memcpy(dst, src, dst_a * inner * sizeof(double));
    }
    if (track({&x})) {
        record("slice", {&x}, out, [x = x, out = out, outer, inner, src_a, dst_a, begin]() mutable {
            for (std::size_t o = 0; o < outer; ++o) {
                const double* src = out.grad().data() + o * dst_a * inner;
                double* dst = x.grad().data() + (o * src_a + static_cast<std::size_t>(begin)) * inner;
                for (std::size_t i = 0; i < dst_a * inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& x, int begin, int end) {
    return slice(x, 0, begin, end);
}

Tensor slice_cols(const Tensor& x, int begin, int end) {
    check_2d(x, "slice_cols");
    return slice(x, 1, begin, end);
}

Tensor gelu(const Tensor& x) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x.values()[i];
        out.values()[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
    }
    if (track({&x})) {
        record("gelu", {&x}, out, [x = x, out = out]() mutable {
            const std::size_t n2 = x.numel();
            for (std::size_t i = 0; i < n2; ++i) {
                const double v = x.values()[i];
                const double u = kC * (v + kA * v * v * v);
                const double th = std::tanh(u);
                const double du = kC * (1.0 + 3.0 * kA * v * v);
                const double dgelu = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                x.grad()[i] += out.grad()[i] * dgelu;
            }
        });
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    Tensor out = Tensor::scalar(s);
    if (track({&x})) {
        record("sum_all", {&x}, out, [x = x, out = out]() mutable {
            const double g = out.grad()[0];
            for (std::size_t i = 0; i < x.numel(); ++i) x.grad()[i] += g;
        });
    }
    return out;
}

Tensor mean_all(const Tensor& x) {
    return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean_rows(const Tensor& x) {
    check_2d(x, "mean_rows");
    const int n = x.rows(), d = x.cols();
    Tensor out = Tensor::zeros({1, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.values()[j] += x.values()[i * d + j];
    for (int j = 0; j < d; ++j) out.values()[j] /= n;
    if (track({&x})) {
        record("mean_rows", {&x}, out, [x = x, out = out]() mutable {
            const int n2 = x.rows(), d2 = x.cols();
            const double inv = 1.0 / n2;
            for (int i = 0; i < n2; ++i)
                for (int j = 0; j < d2; ++j) x.grad()[i * d2 + j] += out.grad()[j] * inv;
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    check_2d(table, "gather_rows");
    const int n = static_cast<int>(ids.size());
    const int d = table.cols();
    if (n == 0) throw InvariantError("gather_rows: empty id list");
    for (int id : ids) {
        if (id < 0 || id >= table.rows())
            throw InvariantError("gather_rows: id " + std::to_string(id) + " out of range [0," +
                                 std::to_string(table.rows()) + ")");
    }
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i)
        std::memcpy(out.values().data() + static_cast<std::size_t>(i) * d,
                    table.values().data() + static_cast<std::size_t>(ids[i]) * d,
                    static_cast<std::size_t>(d) * sizeof(double));
    if (track({&table})) {
        std::vector<int> held = ids;
        record("gather_rows", {&table}, out, [table = table, out = out, held]() mutable {
            const int d2 = table.cols();
            for (std::size_t i = 0; i < held.size(); ++i) {
                const double* src = out.grad().data() + i * d2;
                double* dst = table.grad().data() + static_cast<std::size_t>(held[i]) * d2;
                for (int j = 0; j < d2; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

Tensor select_items(const Tensor& x, const std::vector<std::pair<int, int>>& picks) {
    check_2d(x, "select_items");
    if (picks.empty()) throw InvariantError("select_items: empty pick list");
    const int n = x.rows(), d = x.cols();
    Tensor out = Tensor::zeros({static_cast<int>(picks.size())});
    for (std::size_t i = 0; i < picks.size(); ++i) {
        const auto [r, c] = picks[i];
        if (r < 0 || r >= n || c < 0 || c >= d)
            throw InvariantError("select_items: index (" + std::to_string(r) + "," +
                                 std::to_string(c) + ") out of " + shape_str(x.shape()));
        out.values()[i] = x.at(r, c);
    }
    if (track({&x})) {
        std::vector<std::pair<int, int>> held = picks;
        record("select_items", {&x}, out, [x = x, out = out, held]() mutable {
            const int d2 = x.cols();
            for (std::size_t i = 0; i < held.size(); ++i)
                x.grad()[static_cast<std::size_t>(held[i].first) * d2 + held[i].second] +=
                    out.grad()[i];
        });
    }
    return out;
}

// ---- gradient auditor -------------------------------------------------------

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& inputs, double h) {
    std::vector<std::vector<double>> analytic;
    {
        for (const Tensor& t : inputs) t.d->grad.assign(t.numel(), 0.0);
        Tape tape;
        Tensor out = f(inputs);
        if (out.numel() != 1)
            throw InvariantError("grad_check: f must return a scalar, got " +
                                 shape_str(out.shape()));
        tape.backward(out);
        for (const Tensor& t : inputs) analytic.push_back(t.grad());
    }
    NoTape off;
    double max_err = 0.0;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor t = inputs[ti];
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double saved = t.values()[i];
            t.values()[i] = saved + h;
            const double fp = f(inputs).item();
            t.values()[i] = saved - h;
            const double fm = f(inputs).item();
            t.values()[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[ti][i];
            const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
            max_err = std::max(max_err, err);
        }
    }
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor t = inputs[ti];
        t.d->grad.assign(t.numel(), 0.0);
    }
    return max_err;
}

// ---- RBT1 io -----------------------------------------------------------------

void write_rbt(std::ostream& os, const Tensor& t) {
    os.write("RBT1", 4);
    const std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
    os.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
    for (int s : t.shape()) {
        const std::uint64_t d64 = static_cast<std::uint64_t>(s);
        os.write(reinterpret_cast<const char*>(&d64), sizeof(d64));
    }
    os.write(reinterpret_cast<const char*>(t.values().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!os) throw IoError("write_rbt: stream write failed");
}

Tensor read_rbt(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "RBT1", 4) != 0) throw IoError("read_rbt: bad magic");
    std::uint32_t rank = 0;
    is.read(reinterpret_cast<char*>(&rank), sizeof(rank));
    if (!is || rank > 8) throw IoError("read_rbt: bad rank");
    std::vector<int> shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) {
        std::uint64_t d64 = 0;
        is.read(reinterpret_cast<char*>(&d64), sizeof(d64));
        if (!is || d64 == 0 || d64 > (1ULL << 31)) throw IoError("read_rbt: bad dim");
        shape[i] = static_cast<int>(d64);
    }
    Tensor t = Tensor::zeros(shape);
    is.read(reinterpret_cast<char*>(t.values().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw IoError("read_rbt: truncated values");
    return t;
}

void save_rbt(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_rbt: cannot open " + path);
    write_rbt(os, t);
}

Tensor load_rbt(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_rbt: cannot open " + path);
    return read_rbt(is);
}

}  // namespace rb
