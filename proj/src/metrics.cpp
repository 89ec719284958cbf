#include "rb/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "rb/errors.hpp"

namespace rb {

Tensor l2_normalize(const Tensor& v) {
    double n = 0.0;
    for (double x : v.values()) n += x * x;
    n = std::sqrt(n);
    Tensor out = v.clone();
    if (n < 1e-12) {
        out.values()[0] = 1.0;  // degenerate embedding; pin to a fixed axis
        for (std::size_t i = 1; i < out.numel(); ++i) out.values()[i] = 0.0;
        return out;
    }
    for (double& x : out.values()) x /= n;
    return out;
}

double metric_l1(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw InvariantError("metric_l1: dim mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(a.values()[i] - b.values()[i]);
    return s / static_cast<double>(a.numel());
}

double metric_sim(const Tensor& u, const Tensor& v, MetricCounters* counters) {
    if (u.numel() != v.numel()) throw InvariantError("metric_sim: length mismatch");
    auto norm = [](const Tensor& t) {
        double n = 0;
        for (double x : t.values()) n += x * x;
        return std::sqrt(n);
    };
    Tensor uu = u, vv = v;
    if (std::abs(norm(u) - 1.0) > 1e-9) {
        if (counters) ++counters->non_unit_inputs;
        uu = l2_normalize(u);
    }
    if (std::abs(norm(v) - 1.0) > 1e-9) {
        if (counters) ++counters->non_unit_inputs;
        vv = l2_normalize(v);
    }
    double dot = 0.0;
    for (std::size_t i = 0; i < uu.numel(); ++i) dot += uu.values()[i] * vv.values()[i];
    return std::clamp(dot, -1.0, 1.0);
}

DirResult metric_dir(const Tensor& src_img, const Tensor& out_img,
                     const std::string& src_caption, const std::string& out_caption,
                     const Embedder& emb, MetricCounters* counters) {
    Tensor di = sub(emb.embed_image(out_img), emb.embed_image(src_img));
    Tensor dt = sub(emb.embed_text(out_caption), emb.embed_text(src_caption));
    auto norm = [](const Tensor& t) {
        double n = 0;
        for (double x : t.values()) n += x * x;
        return std::sqrt(n);
    };
    const double ni = norm(di), nt = norm(dt);
    DirResult r;
    if (ni < 1e-9 || nt < 1e-9) {
        r.degenerate = true;
        r.value = 0.0;
        if (counters) ++counters->degenerate_dirs;
        return r;
    }
    double dot = 0.0;
    for (std::size_t i = 0; i < di.numel(); ++i) dot += di.values()[i] * dt.values()[i];
    r.value = std::clamp(dot / (ni * nt), -1.0, 1.0);
    return r;
}

// ---- report --------------------------------------------------------------------------

namespace {

void accumulate(MetricAggregate& agg, const SampleMetrics& row) {
    ++agg.count;
    agg.l1 += row.l1;
    agg.sim_im += row.sim_im;
    agg.sim_out += row.sim_out;
    agg.sim_dir += row.sim_dir;
    agg.sim_dino += row.sim_dino;
}

void finalize(MetricAggregate& agg) {
    if (agg.count == 0) return;
    agg.l1 /= agg.count;
    agg.sim_im /= agg.count;
    agg.sim_out /= agg.count;
    agg.sim_dir /= agg.count;
    agg.sim_dino /= agg.count;
}

nlohmann::ordered_json agg_json(const MetricAggregate& a) {
    nlohmann::ordered_json j;
    j["count"] = a.count;
    j["sim_dir"] = a.sim_dir;
    j["sim_im"] = a.sim_im;
    j["sim_out"] = a.sim_out;
    j["l1"] = a.l1;
    j["sim_dino"] = a.sim_dino;
    return j;
}

}  // namespace

MetricReport evaluate(const std::vector<EvalItem>& items, const Embedder& emb) {
    std::vector<const EvalItem*> ordered;
    ordered.reserve(items.size());
    for (const EvalItem& it : items) {
        if (!it.sample) throw InvariantError("evaluate: null sample");
        ordered.push_back(&it);
    }
    std::sort(ordered.begin(), ordered.end(), [](const EvalItem* a, const EvalItem* b) {
        return a->sample->sample_id < b->sample->sample_id;
    });

    MetricReport rep;
    for (const EvalItem* it : ordered) {
        const EditSample& s = *it->sample;
        if (!it->output) {
            rep.omissions.push_back(s.sample_id);
            continue;
        }
        const Tensor& out = *it->output;
        SampleMetrics row;
        row.sample_id = s.sample_id;
        row.category = category_name(s.category);
        row.l1 = metric_l1(out, s.target);
        row.sim_im = metric_sim(emb.embed_image(out), emb.embed_image(s.source), &rep.counters);
        row.sim_out =
            metric_sim(emb.embed_image(out), emb.embed_text(s.target_caption), &rep.counters);
        DirResult dir =
            metric_dir(s.source, out, s.source_caption, s.target_caption, emb, &rep.counters);
        row.sim_dir = dir.value;
        row.dir_degenerate = dir.degenerate;
        row.sim_dino = metric_sim(emb.embed_image(out), emb.embed_image(s.target), &rep.counters);
        rep.rows.push_back(row);
    }
    for (const SampleMetrics& row : rep.rows) {
        accumulate(rep.overall, row);
        accumulate(rep.per_category[row.category], row);
    }
    finalize(rep.overall);
    for (auto& [_, agg] : rep.per_category) finalize(agg);
    return rep;
}

nlohmann::ordered_json MetricReport::to_json() const {
    nlohmann::ordered_json j;
    nlohmann::ordered_json rows_j = nlohmann::ordered_json::array();
    for (const SampleMetrics& r : rows) {
        nlohmann::ordered_json rj;
        rj["sample_id"] = r.sample_id;
        rj["category"] = r.category;
        rj["sim_dir"] = r.sim_dir;
        rj["sim_im"] = r.sim_im;
        rj["sim_out"] = r.sim_out;
        rj["l1"] = r.l1;
        rj["sim_dino"] = r.sim_dino;
        rj["dir_degenerate"] = r.dir_degenerate;
        rows_j.push_back(rj);
    }
    j["rows"] = rows_j;
    j["overall"] = agg_json(overall);
    nlohmann::ordered_json cats;
    for (const auto& [name, agg] : per_category) cats[name] = agg_json(agg);
    j["per_category"] = cats;
    j["omissions"] = omissions;
    j["non_unit_inputs"] = counters.non_unit_inputs;
    j["degenerate_dirs"] = counters.degenerate_dirs;
    // judged metrics need external scorers; columns reserved, never filled here
    j["reserved"] = {{"clip_score", nullptr}, {"mllm_score", nullptr}, {"ins_align", nullptr}};
    return j;
}

std::string MetricReport::to_table() const {
    std::ostringstream os;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-10s %6s %10s %10s %10s %10s %10s\n", "category", "n",
                  "sim_dir", "sim_im", "sim_out", "l1", "sim_dino");
    os << buf;
    auto line = [&](const std::string& name, const MetricAggregate& a) {
        std::snprintf(buf, sizeof(buf), "%-10s %6ld %10.6f %10.6f %10.6f %10.6f %10.6f\n",
                      name.c_str(), a.count, a.sim_dir, a.sim_im, a.sim_out, a.l1, a.sim_dino);
        os << buf;
    };
    for (const auto& [name, agg] : per_category) line(name, agg);
    line("total", overall);
    if (!omissions.empty()) {
        os << "omitted samples:";
        for (int id : omissions) os << " " << id;
        os << "\n";
    }
    return os.str();
}

}  // namespace rb
