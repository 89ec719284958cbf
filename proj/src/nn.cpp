#include "rb/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "rb/errors.hpp"

namespace rb {

// ---- ParamSet ---------------------------------------------------------------

void ParamSet::add(const std::string& name, const Tensor& t) {
    for (const auto& [n, _] : items) {
        if (n == name) throw InvariantError("ParamSet: duplicate name " + name);
    }
    items.emplace_back(name, t);
}

void ParamSet::merge(const std::string& prefix, const ParamSet& other) {
    for (const auto& [n, t] : other.items) add(prefix.empty() ? n : prefix + "." + n, t);
}

Tensor ParamSet::find(const std::string& name) const {
    for (const auto& [n, t] : items)
        if (n == name) return t;
    throw InvariantError("ParamSet: no parameter named " + name);
}

void ParamSet::zero_grads() {
    for (auto& [_, t] : items) t.zero_grad();
}

double ParamSet::grad_norm() const {
    double s = 0.0;
    for (const auto& [_, t] : items)
        for (double g : t.grad()) s += g * g;
    return std::sqrt(s);
}

std::size_t ParamSet::total_params() const {
    std::size_t n = 0;
    for (const auto& [_, t] : items) n += t.numel();
    return n;
}

// ---- init ---------------------------------------------------------------------

Tensor xavier_uniform(int d_out, int d_in, std::mt19937_64& eng, bool requires_grad) {
    const double limit = std::sqrt(6.0 / (d_in + d_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor t = Tensor::zeros({d_out, d_in}, requires_grad);
    for (double& v : t.values()) v = dist(eng);
    return t;
}

Tensor normal_init(std::vector<int> shape, double stddev, std::mt19937_64& eng,
                   bool requires_grad) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.values()) v = dist(eng);
    return t;
}

// ---- Linear ---------------------------------------------------------------------

Linear Linear::make(int d_in, int d_out, std::mt19937_64& eng, bool bias) {
    Linear l;
    l.w = xavier_uniform(d_out, d_in, eng);
    if (bias) l.b = Tensor::zeros({d_out}, true);
    return l;
}

Linear Linear::make_zero(int d_in, int d_out, bool bias) {
    Linear l;
    l.w = Tensor::zeros({d_out, d_in}, true);
    if (bias) l.b = Tensor::zeros({d_out}, true);
    return l;
}

Tensor Linear::forward(const Tensor& x) const {
    Tensor y = matmul_nt(x, w);
    if (b.defined()) y = add_rowvec(y, b);
    return y;
}

ParamSet Linear::params(const std::string& prefix) const {
    ParamSet p;
    p.add(prefix + ".w", w);
    if (b.defined()) p.add(prefix + ".b", b);
    return p;
}

// ---- LayerNorm --------------------------------------------------------------------

LayerNorm LayerNorm::make(int d) {
    LayerNorm n;
    n.gamma = Tensor::full({d}, 1.0, true);
    n.beta = Tensor::zeros({d}, true);
    return n;
}

ParamSet LayerNorm::params(const std::string& prefix) const {
    ParamSet p;
    p.add(prefix + ".gamma", gamma);
    p.add(prefix + ".beta", beta);
    return p;
}

// ---- FeedForward ---------------------------------------------------------------------

FeedForward FeedForward::make(int d, std::mt19937_64& eng) {
    FeedForward f;
    f.in = Linear::make(d, 4 * d, eng);
    f.out = Linear::make(4 * d, d, eng);
    return f;
}

Tensor FeedForward::forward(const Tensor& x) const {
    return out.forward(gelu(in.forward(x)));
}

ParamSet FeedForward::params(const std::string& prefix) const {
    ParamSet p;
    p.merge(prefix + ".in", in.params(""));
    p.merge(prefix + ".out", out.params(""));
    return p;
}

// ---- LoRA -------------------------------------------------------------------------------

LoraAdapter LoraAdapter::make(int d_in, int d_out, int rank, double alpha,
                              std::mt19937_64& eng) {
    if (rank < 1) throw InvariantError("lora: rank must be >= 1");
    LoraAdapter ad;
    ad.rank = rank;
    ad.alpha = alpha;
    ad.a = normal_init({rank, d_in}, 0.02, eng);
    ad.b = Tensor::zeros({d_out, rank}, true);
    return ad;
}

ParamSet LoraAdapter::params(const std::string& prefix) const {
    ParamSet p;
    p.add(prefix + ".a", a);
    p.add(prefix + ".b", b);
    return p;
}

Tensor lora_forward(const Tensor& x, const Tensor& base_w, const LoraAdapter& adapter) {
    if (x.cols() != base_w.cols() || adapter.a.cols() != base_w.cols() ||
        adapter.b.rows() != base_w.rows() || adapter.b.cols() != adapter.a.rows()) {
        throw InvariantError("lora_forward: inconsistent dims x=" + shape_str(x.shape()) +
                             " base=" + shape_str(base_w.shape()) +
                             " a=" + shape_str(adapter.a.shape()) +
                             " b=" + shape_str(adapter.b.shape()));
    }
    Tensor base_out = matmul_nt(x, base_w);
    Tensor low = matmul_nt(x, adapter.a);        // [n, rank]
    Tensor corr = matmul_nt(low, adapter.b);     // [n, d_out]
    return add(base_out, mul_scalar(corr, adapter.alpha / adapter.rank));
}

Tensor lora_merge(const Tensor& base_w, const LoraAdapter& adapter) {
    if (adapter.a.cols() != base_w.cols() || adapter.b.rows() != base_w.rows() ||
        adapter.b.cols() != adapter.a.rows()) {
        throw InvariantError("lora_merge: inconsistent dims base=" + shape_str(base_w.shape()) +
                             " a=" + shape_str(adapter.a.shape()) +
                             " b=" + shape_str(adapter.b.shape()));
    }
    return add(base_w, mul_scalar(matmul(adapter.b, adapter.a), adapter.alpha / adapter.rank));
}

// ---- attention ------------------------------------------------------------------------------

CrossAttentionBlock CrossAttentionBlock::make(int d_model, int heads, std::mt19937_64& eng,
                                              bool residual_norm) {
    if (heads < 1 || d_model % heads != 0) {
        throw InvariantError("cross_attention: d_model " + std::to_string(d_model) +
                             " not divisible by heads " + std::to_string(heads));
    }
    CrossAttentionBlock blk;
    blk.heads = heads;
    blk.d_model = d_model;
    blk.wq = xavier_uniform(d_model, d_model, eng);
    blk.wk = xavier_uniform(d_model, d_model, eng);
    blk.wv = xavier_uniform(d_model, d_model, eng);
    blk.wo = xavier_uniform(d_model, d_model, eng);
    blk.residual_norm = residual_norm;
    if (residual_norm) blk.norm = LayerNorm::make(d_model);
    return blk;
}

void CrossAttentionBlock::attach_lora(int rank, double alpha, std::mt19937_64& eng) {
    lq = LoraAdapter::make(d_model, d_model, rank, alpha, eng);
    lk = LoraAdapter::make(d_model, d_model, rank, alpha, eng);
    lv = LoraAdapter::make(d_model, d_model, rank, alpha, eng);
    lo = LoraAdapter::make(d_model, d_model, rank, alpha, eng);
}

namespace {

Tensor project(const Tensor& x, const Tensor& w, const std::optional<LoraAdapter>& ad) {
    return ad ? lora_forward(x, w, *ad) : matmul_nt(x, w);
}

}  // namespace

Tensor CrossAttentionBlock::forward(const Tensor& query, const Tensor& key_value, bool causal,
                                    AttentionTrace* trace) const {
    if (query.cols() != d_model || key_value.cols() != d_model) {
        throw InvariantError("cross_attention: width mismatch, query " +
                             shape_str(query.shape()) + " kv " + shape_str(key_value.shape()) +
                             " vs d_model " + std::to_string(d_model));
    }
    const int dh = d_model / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor q = project(query, wq, lq);
    Tensor k = project(key_value, wk, lk);
    Tensor v = project(key_value, wv, lv);

    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor scores = mul_scalar(matmul_nt(qh, kh), scale);
        Tensor weights = softmax_rows(scores, causal);
        if (trace) trace->head_weights.push_back(weights.clone());
        head_outs.push_back(matmul(weights, vh));
    }
    Tensor merged = heads == 1 ? head_outs[0] : concat(head_outs, 1);
    Tensor out = project(merged, wo, lo);
    if (residual_norm) out = norm.forward(add(query, out));
    tape_annotate("cross_attention", {query.id(), key_value.id()}, out.id());
    return out;
}

ParamSet CrossAttentionBlock::params(const std::string& prefix) const {
    ParamSet p;
    p.add(prefix + ".wq", wq);
    p.add(prefix + ".wk", wk);
    p.add(prefix + ".wv", wv);
    p.add(prefix + ".wo", wo);
    if (residual_norm) p.merge(prefix + ".norm", norm.params(""));
    return p;
}

ParamSet CrossAttentionBlock::lora_params(const std::string& prefix) const {
    ParamSet p;
    if (lq) p.merge(prefix + ".lora_q", lq->params(""));
    if (lk) p.merge(prefix + ".lora_k", lk->params(""));
    if (lv) p.merge(prefix + ".lora_v", lv->params(""));
    if (lo) p.merge(prefix + ".lora_o", lo->params(""));
    return p;
}

// ---- AdamW -------------------------------------------------------------------------------------

AdamW AdamW::make(ParamSet params, double lr, double weight_decay) {
    AdamW opt;
    opt.lr = lr;
    opt.weight_decay = weight_decay;
    opt.params = std::move(params);
    opt.m.reserve(opt.params.items.size());
    opt.v.reserve(opt.params.items.size());
    for (const auto& [_, t] : opt.params.items) {
        opt.m.push_back(Tensor::zeros(t.shape()));
        opt.v.push_back(Tensor::zeros(t.shape()));
    }
    return opt;
}

void AdamW::step() {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t pi = 0; pi < params.items.size(); ++pi) {
        Tensor& p = params.items[pi].second;
        Tensor& mi = m[pi];
        Tensor& vi = v[pi];
        const std::size_t n = p.numel();
        for (std::size_t i = 0; i < n; ++i) {
            const double g = p.grad()[i];
            mi.values()[i] = beta1 * mi.values()[i] + (1.0 - beta1) * g;
            vi.values()[i] = beta2 * vi.values()[i] + (1.0 - beta2) * g * g;
            const double mhat = mi.values()[i] / bc1;
            const double vhat = vi.values()[i] / bc2;
            p.values()[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p.values()[i]);
        }
    }
}

// ---- checkpoint archive --------------------------------------------------------------------------

void write_archive(const std::string& path, const ParamSet& params,
                   const nlohmann::ordered_json& manifest) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("write_archive: cannot open " + path);
    for (const auto& [name, t] : params.items) {
        const std::uint32_t len = static_cast<std::uint32_t>(name.size());
        os.write(reinterpret_cast<const char*>(&len), sizeof(len));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_rbt(os, t);
    }
    const std::uint32_t sentinel = 0;
    os.write(reinterpret_cast<const char*>(&sentinel), sizeof(sentinel));
    const std::string m = manifest.dump(2);
    os.write(m.data(), static_cast<std::streamsize>(m.size()));
    if (!os) throw IoError("write_archive: write failed for " + path);
}

std::pair<std::vector<std::pair<std::string, Tensor>>, nlohmann::ordered_json> read_archive(
    const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("read_archive: cannot open " + path);
    std::vector<std::pair<std::string, Tensor>> entries;
    for (;;) {
        std::uint32_t len = 0;
        is.read(reinterpret_cast<char*>(&len), sizeof(len));
        if (!is) throw IoError("read_archive: truncated record header in " + path);
        if (len == 0) break;
        if (len > 4096) throw IoError("read_archive: implausible name length in " + path);
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (!is) throw IoError("read_archive: truncated name in " + path);
        entries.emplace_back(name, read_rbt(is));
    }
    std::string rest((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    nlohmann::ordered_json manifest;
    try {
        manifest = nlohmann::ordered_json::parse(rest);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("read_archive: bad manifest in " + path + ": " + e.what());
    }
    return {std::move(entries), std::move(manifest)};
}

void load_into(ParamSet& dst, const std::vector<std::pair<std::string, Tensor>>& src) {
    for (auto& [name, t] : dst.items) {
        bool found = false;
        for (const auto& [sname, st] : src) {
            if (sname != name) continue;
            if (st.shape() != t.shape()) {
                throw IoError("load_into: shape mismatch for " + name + ": " +
                              shape_str(st.shape()) + " vs " + shape_str(t.shape()));
            }
            t.values() = st.values();
            found = true;
            break;
        }
        if (!found) throw IoError("load_into: missing tensor " + name);
    }
}

}  // namespace rb
