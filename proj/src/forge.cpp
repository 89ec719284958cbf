#include "rb/forge.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include "rb/errors.hpp"
#include "rb/rng.hpp"

namespace fs = std::filesystem;

namespace rb {

const std::array<Category, 4>& all_categories() {
    static const std::array<Category, 4> kAll = {Category::Physical, Category::Temporal,
                                                 Category::Causal, Category::Story};
    return kAll;
}

std::string category_name(Category c) {
    switch (c) {
        case Category::Physical: return "Physical";
        case Category::Temporal: return "Temporal";
        case Category::Causal: return "Causal";
        case Category::Story: return "Story";
    }
    return "Physical";
}

std::optional<Category> category_from_name(const std::string& name) {
    for (Category c : all_categories())
        if (category_name(c) == name) return c;
    return std::nullopt;
}

// ---- rendering -----------------------------------------------------------------

namespace {

double lum(const std::array<double, 3>& c) {
    return (c[0] + c[1] + c[2]) / 3.0;
}

void paint(Tensor& img, int h, int w, const Primitive& p) {
    const int c = img.dim(2);
    const int y0 = static_cast<int>(std::lround(p.cy - p.half_h));
    const int y1 = static_cast<int>(std::lround(p.cy + p.half_h)) - 1;
    for (int y = std::max(0, y0); y <= std::min(h - 1, y1); ++y) {
        const double xoff = p.shear * (y - p.cy);
        const int x0 = static_cast<int>(std::lround(p.cx - p.half_w + xoff));
        const int x1 = static_cast<int>(std::lround(p.cx + p.half_w + xoff)) - 1;
        for (int x = std::max(0, x0); x <= std::min(w - 1, x1); ++x) {
            if (p.shape == Primitive::Shape::Disk) {
                const double dy = (y - p.cy) / p.half_h;
                const double dx = (x - p.cx) / p.half_w;
                if (dx * dx + dy * dy > 1.0) continue;
            }
            double* px = img.values().data() + (static_cast<std::size_t>(y) * w + x) * c;
            for (int ch = 0; ch < c && ch < 3; ++ch) px[ch] = p.color[ch];
        }
    }
}

struct Palette {
    std::string name;
    std::array<double, 3> rgb;
};

const std::vector<Palette>& palette() {
    static const std::vector<Palette> kColors = {
        {"red", {0.85, 0.20, 0.18}},    {"green", {0.22, 0.75, 0.25}},
        {"blue", {0.25, 0.35, 0.88}},   {"yellow", {0.88, 0.82, 0.22}},
        {"white", {0.92, 0.92, 0.92}},  {"cyan", {0.20, 0.80, 0.80}},
        {"orange", {0.90, 0.55, 0.15}}, {"purple", {0.65, 0.25, 0.80}},
    };
    return kColors;
}

std::array<double, 3> clamp_color(std::array<double, 3> c) {
    for (double& v : c) v = std::clamp(v, 0.02, 0.98);
    return c;
}

std::string shape_word(Primitive::Shape s) {
    switch (s) {
        case Primitive::Shape::Square: return "square";
        case Primitive::Shape::Block: return "block";
        case Primitive::Shape::Disk: return "disk";
    }
    return "square";
}

// transform name -> past-tense clause used by instruction templates
struct TransformDef {
    std::string verb;  // imperative ("melt")
    std::string past;  // past tense ("melted")
};

TransformDef transform_def(const std::string& name) {
    if (name == "melted") return {"melt", "melted"};
    if (name == "tilted") return {"tilt", "tilted"};
    if (name == "shattered") return {"shatter", "shattered"};
    if (name == "aged") return {"age", "aged"};
    if (name == "grew") return {"grow", "grew"};
    if (name == "toppled") return {"topple", "toppled"};
    if (name == "burned") return {"burn", "burned"};
    if (name == "continued") return {"continue", "continued"};
    throw InvariantError("unknown transform " + name);
}

std::vector<std::string> compatible_transforms(Category cat, const Primitive& p) {
    switch (cat) {
        case Category::Physical: {
            std::vector<std::string> t = {"melted", "tilted"};
            if (p.half_w >= 3 && p.half_h >= 3 && p.shape != Primitive::Shape::Disk)
                t.push_back("shattered");
            return t;
        }
        case Category::Temporal: return {"aged", "grew"};
        case Category::Causal: {
            std::vector<std::string> t = {"burned"};
            if (p.shape == Primitive::Shape::Block) t.push_back("toppled");
            return t;
        }
        case Category::Story: return {"continued"};
    }
    return {"melted"};
}

// margin keeping subjects clear of the border band and of candidate jitter
constexpr int kMargin = 5;

Primitive random_primitive(std::mt19937_64& eng, int h, int w, Category cat) {
    std::uniform_int_distribution<int> shape_pick(0, 2);
    std::uniform_int_distribution<int> color_pick(0, static_cast<int>(palette().size()) - 1);
    Primitive p;
    const int s = cat == Category::Causal ? 1 : shape_pick(eng);  // causal favours blocks
    std::uniform_real_distribution<double> half_pick(2.0, 4.0);
    p.half_w = half_pick(eng);
    p.half_h = p.half_w;
    if (s == 0) {
        p.shape = Primitive::Shape::Square;
    } else if (s == 1) {
        p.shape = Primitive::Shape::Block;
        p.half_w = std::max(2.0, p.half_w - 1.0);
        p.half_h = p.half_w + 1.5;
    } else {
        p.shape = Primitive::Shape::Disk;
    }
    const Palette& col = palette()[static_cast<std::size_t>(color_pick(eng))];
    p.color = col.rgb;
    p.name = col.name + " " + shape_word(p.shape);
    const int max_half = static_cast<int>(std::ceil(std::max(p.half_w, p.half_h)));
    const int x_lo = max_half + kMargin, x_hi = w - 1 - max_half - kMargin;
    const int y_lo = max_half + kMargin, y_hi = h - 1 - max_half - kMargin;
    if (x_hi < x_lo || y_hi < y_lo)
        throw InvariantError("render_scene: image too small for subject placement");
    p.cx = std::uniform_int_distribution<int>(x_lo, x_hi)(eng);
    p.cy = std::uniform_int_distribution<int>(y_lo, y_hi)(eng);
    return p;
}

bool too_close(const Primitive& a, const Primitive& b) {
    const double gap_x = std::abs(a.cx - b.cx) - (a.half_w + b.half_w);
    const double gap_y = std::abs(a.cy - b.cy) - (a.half_h + b.half_h);
    return std::max(gap_x, gap_y) < 3.0;  // require a 3 px corridor
}

Primitive transformed(const Primitive& src, const std::string& name, int h, int w) {
    Primitive p = src;
    if (name == "melted") {
        const double bottom = src.cy + src.half_h;
        p.half_h = std::max(1.0, src.half_h * 0.35);
        p.half_w = std::min(src.half_w * 1.7, src.cx - 2.0);
        p.half_w = std::min(p.half_w, (w - 3.0) - src.cx);
        p.cy = bottom - p.half_h;
        p.shape = Primitive::Shape::Block;
        p.name = "melted " + src.name;
    } else if (name == "tilted") {
        p.shear = 0.45;
        p.name = "tilted " + src.name;
    } else if (name == "aged") {
        for (int i = 0; i < 3; ++i) p.color[i] = 0.45 * src.color[i] + 0.55 * 0.42;
        p.color = clamp_color(p.color);
        p.name = "aged " + src.name;
    } else if (name == "grew") {
        p.half_w = std::min(src.half_w * 1.5, std::min(src.cx, w - 1 - src.cx) - 2.0);
        p.half_h = std::min(src.half_h * 1.5, std::min(src.cy, h - 1 - src.cy) - 2.0);
        p.name = "grown " + src.name;
    } else if (name == "toppled") {
        const double bottom = src.cy + src.half_h;
        p.half_w = src.half_h;
        p.half_h = src.half_w;
        p.cy = bottom - p.half_h;
        p.cx = std::clamp(src.cx, p.half_w + 2.0, w - 3.0 - p.half_w);
        p.name = "toppled " + src.name;
    } else if (name == "burned") {
        for (int i = 0; i < 3; ++i) p.color[i] = 0.30 * src.color[i];
        p.color[0] += 0.20;
        p.color[1] += 0.16;
        p.color[2] += 0.12;
        p.color = clamp_color(p.color);
        p.name = "burned " + src.name;
    } else {
        throw InvariantError("transformed: unknown transform " + name);
    }
    return p;
}

}  // namespace

Tensor render(const SceneSpec& scene, int h, int w) {
    Tensor img = Tensor::zeros({h, w, 3});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double* px = img.values().data() + (static_cast<std::size_t>(y) * w + x) * 3;
            for (int ch = 0; ch < 3; ++ch) px[ch] = scene.background[ch];
        }
    for (const Primitive& p : scene.prims) paint(img, h, w, p);
    return img;
}

std::pair<Tensor, SceneMetadata> render_scene(Category category, std::uint64_t seed, int h,
                                              int w) {
    std::mt19937_64 eng(splitmix64(seed));
    SceneMetadata meta;

    // background with a slight seeded tint, dark enough to segment against
    std::uniform_real_distribution<double> tint(-0.02, 0.02);
    const double t = tint(eng);
    meta.source_scene.background = {0.12 + t, 0.12 + t, 0.13 + t};

    const int n_prims = category == Category::Story
                            ? 1
                            : std::uniform_int_distribution<int>(1, 3)(eng);
    for (int i = 0; i < n_prims; ++i) {
        for (int attempt = 0; attempt < 64; ++attempt) {
            Primitive p = random_primitive(eng, h, w, category);
            bool ok = true;
            for (const Primitive& q : meta.source_scene.prims)
                if (too_close(p, q)) ok = false;
            if (ok) {
                meta.source_scene.prims.push_back(p);
                break;
            }
        }
    }
    if (meta.source_scene.prims.empty())
        throw InvariantError("render_scene: failed to place any primitive");

    meta.subject = std::uniform_int_distribution<int>(
        0, static_cast<int>(meta.source_scene.prims.size()) - 1)(eng);
    const Primitive& subject = meta.source_scene.prims[static_cast<std::size_t>(meta.subject)];

    const std::vector<std::string> options = compatible_transforms(category, subject);
    meta.transform = options[std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(eng)];

    meta.target_scene = meta.source_scene;
    if (category == Category::Story) {
        // two-panel composition: before on the left, a continued state on
        // the right; the source scene is the single before panel
        auto place_in_panel = [&](Primitive p, double panel_lo, double panel_hi) {
            p.half_w = std::min(p.half_w, (panel_hi - panel_lo) / 2.0 - 2.0);
            const double lo = panel_lo + p.half_w + 1.0;
            const double hi = panel_hi - p.half_w - 1.0;
            p.cx = lo >= hi ? (panel_lo + panel_hi) / 2.0 : std::clamp(p.cx / 2.0 + panel_lo + (panel_hi - panel_lo) / 4.0, lo, hi);
            return p;
        };
        Primitive left = place_in_panel(subject, 1.0, w / 2.0 - 1.0);
        Primitive right = transformed(
            subject, std::uniform_int_distribution<int>(0, 1)(eng) ? "aged" : "grew", h, w);
        right = place_in_panel(right, w / 2.0 + 1.0, w - 1.0);
        meta.target_scene.prims = {left, right};
    } else if (meta.transform == "shattered") {
        std::vector<Primitive> shards;
        const double hw = subject.half_w, hh = subject.half_h;
        const std::array<std::pair<double, double>, 3> offs = {
            std::pair<double, double>{-hw, hh - 1.0},
            std::pair<double, double>{hw - 1.0, hh - 1.0},
            std::pair<double, double>{0.0, -hh + 1.0}};
        for (const auto& [dx, dy] : offs) {
            Primitive s = subject;
            s.shape = Primitive::Shape::Square;
            s.half_w = 1.0;
            s.half_h = 1.0;
            s.cx = subject.cx + dx;
            s.cy = subject.cy + dy;
            s.name = "shard of " + subject.name;
            shards.push_back(s);
        }
        meta.target_scene.prims.erase(meta.target_scene.prims.begin() + meta.subject);
        for (const Primitive& s : shards) meta.target_scene.prims.push_back(s);
    } else {
        meta.target_scene.prims[static_cast<std::size_t>(meta.subject)] =
            transformed(subject, meta.transform, h, w);
    }
    meta.object_count = static_cast<int>(meta.target_scene.prims.size());

    const TransformDef def = transform_def(meta.transform);
    meta.initial_instruction = def.verb + " the " + subject.name;

    auto scene_caption = [](const SceneSpec& s) {
        std::string cap = "a scene with";
        for (std::size_t i = 0; i < s.prims.size(); ++i) {
            cap += (i == 0 ? " a " : " and a ") + s.prims[i].name;
        }
        return cap;
    };
    meta.source_caption = scene_caption(meta.source_scene);
    meta.target_caption = scene_caption(meta.target_scene);

    return {render(meta.target_scene, h, w), meta};
}

std::string rewrite_hypothetical(const std::string& initial_instruction, Category category,
                                 std::uint64_t seed) {
    const std::vector<std::string> toks = tokenize_text(initial_instruction);
    std::string verb, object;
    if (toks.size() >= 3 && toks[1] == "the") {
        verb = toks[0];
        for (std::size_t i = 2; i < toks.size(); ++i) {
            if (toks[i].size() == 1 && !std::isalnum(static_cast<unsigned char>(toks[i][0])))
                continue;
            if (!object.empty()) object += " ";
            object += toks[i];
        }
    }
    if (verb.empty() || object.empty()) {
        return "What would happen if " + initial_instruction + "?";
    }
    std::string past;
    try {
        past = transform_def(verb == "melt"      ? "melted"
                             : verb == "tilt"    ? "tilted"
                             : verb == "shatter" ? "shattered"
                             : verb == "age"     ? "aged"
                             : verb == "grow"    ? "grew"
                             : verb == "topple"  ? "toppled"
                             : verb == "burn"    ? "burned"
                             : verb == "continue" ? "continued"
                                                  : "?")
                   .past;
    } catch (const InvariantError&) {
        return "What would happen if " + initial_instruction + "?";
    }
    const std::uint64_t pick = splitmix64(seed ^ 0x7e57ab1e5eedULL) % 2;
    switch (category) {
        case Category::Physical:
            return pick == 0 ? "What would happen if the " + object + " " + past + "?"
                             : "What would the " + object + " look like if it " + past + "?";
        case Category::Temporal:
            return pick == 0 ? "What would the " + object + " look like after it " + past + "?"
                             : "What would happen if the " + object + " " + past + " over time?";
        case Category::Causal:
            return pick == 0 ? "What would happen if the " + object + " " + past + "?"
                             : "What would happen if someone " + past + " the " + object + "?";
        case Category::Story:
            return "What would happen next in the story of the " + object + "?";
    }
    return "What would happen if " + initial_instruction + "?";
}

// ---- candidates --------------------------------------------------------------------

namespace {

struct Jitter {
    int dx = 0, dy = 0;
    double hue = 0.0;
    double size = 1.0;
};

// all 16 grid entries have distinct (dx, dy), so rendered candidates are
// pairwise distinct as long as the subject stays unclamped
const std::array<Jitter, 16>& jitter_grid() {
    static const std::array<Jitter, 16> kGrid = {{
        {0, 0, 0.00, 1.0},   {1, 0, 0.05, 1.0},   {-1, 0, -0.05, 1.0}, {0, 1, 0.05, 1.1},
        {0, -1, -0.05, 0.9}, {2, 0, 0.00, 1.0},   {-2, 0, 0.00, 1.0},  {0, 2, 0.00, 1.0},
        {0, -2, 0.00, 1.0},  {1, 1, 0.05, 1.0},   {-1, -1, -0.05, 1.0}, {2, 1, 0.00, 1.1},
        {-2, -1, 0.00, 0.9}, {1, 2, 0.05, 0.9},   {-1, 2, -0.05, 1.1}, {2, 2, 0.00, 1.0},
    }};
    return kGrid;
}

SceneSpec jittered_source(const SceneMetadata& meta, const Jitter& j, int h, int w) {
    SceneSpec scene = meta.source_scene;
    Primitive& subj = scene.prims[static_cast<std::size_t>(meta.subject)];
    subj.cx = std::clamp(subj.cx + j.dx, subj.half_w + 1.0, w - 2.0 - subj.half_w);
    subj.cy = std::clamp(subj.cy + j.dy, subj.half_h + 1.0, h - 2.0 - subj.half_h);
    subj.half_w *= j.size;
    subj.half_h *= j.size;
    subj.color = clamp_color({subj.color[0] + j.hue, subj.color[1] - j.hue / 2.0,
                              subj.color[2] - j.hue / 2.0});
    return scene;
}

}  // namespace

std::vector<Tensor> generate_source_candidates(const SceneMetadata& metadata, int m,
                                               std::uint64_t seed, int h, int w) {
    if (m < 1) throw InvariantError("generate_source_candidates: m must be >= 1");
    std::vector<Tensor> out;
    out.reserve(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        Jitter j;
        if (i < static_cast<int>(jitter_grid().size())) {
            j = jitter_grid()[static_cast<std::size_t>(i)];
        } else {
            std::mt19937_64 eng(derive_seed(seed, "candidate", static_cast<std::uint64_t>(i)));
            j.dx = std::uniform_int_distribution<int>(-2, 2)(eng);
            j.dy = std::uniform_int_distribution<int>(-2, 2)(eng);
            j.hue = std::uniform_real_distribution<double>(-0.05, 0.05)(eng);
            j.size = std::uniform_real_distribution<double>(0.9, 1.1)(eng);
        }
        out.push_back(render(jittered_source(metadata, j, h, w), h, w));
    }
    return out;
}

// ---- scoring ----------------------------------------------------------------------------

double psnr_db(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw InvariantError("psnr: shape mismatch");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = a.values()[i] - b.values()[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

namespace {

double border_median(const Tensor& img) {
    const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
    std::vector<double> vals;
    auto lum_at = [&](int y, int x) {
        const double* px = img.values().data() + (static_cast<std::size_t>(y) * w + x) * c;
        double s = 0;
        for (int ch = 0; ch < c; ++ch) s += px[ch];
        return s / c;
    };
    for (int x = 0; x < w; ++x) {
        vals.push_back(lum_at(0, x));
        vals.push_back(lum_at(h - 1, x));
    }
    for (int y = 1; y + 1 < h; ++y) {
        vals.push_back(lum_at(y, 0));
        vals.push_back(lum_at(y, w - 1));
    }
    std::sort(vals.begin(), vals.end());
    const std::size_t n = vals.size();
    return n % 2 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
}

constexpr double kPsnrCap = 50.0;

}  // namespace

std::vector<CandidateScore> score_candidates(const std::vector<Tensor>& candidates,
                                             const SceneMetadata& metadata, int h, int w,
                                             double w_rule, double w_psnr) {
    const Tensor reference = render(metadata.source_scene, h, w);
    const double bg_lum = lum(metadata.source_scene.background);
    const Primitive& subj = metadata.source_scene.prims[static_cast<std::size_t>(metadata.subject)];
    const int scy = static_cast<int>(std::lround(subj.cy));
    const int scx = static_cast<int>(std::lround(subj.cx));

    std::vector<CandidateScore> scores;
    scores.reserve(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const Tensor& cand = candidates[i];
        int passed = 0;
        const int total = 4;
        // object presence: component count matches the pre-edit scene
        SegmentationMap seg = segment_regions(cand);
        if (seg.n_r - 1 == static_cast<int>(metadata.source_scene.prims.size())) ++passed;
        // background match
        if (std::abs(border_median(cand) - bg_lum) < 0.02) ++passed;
        // transform-inverse plausibility: subject near its expected position
        const int c = cand.dim(2);
        const double* px = cand.values().data() + (static_cast<std::size_t>(scy) * w + scx) * c;
        double l = 0;
        for (int ch = 0; ch < c; ++ch) l += px[ch];
        l /= c;
        if (std::abs(l - bg_lum) > 0.1) ++passed;
        // subject color plausibility
        double max_dev = 0;
        for (int ch = 0; ch < std::min(c, 3); ++ch)
            max_dev = std::max(max_dev, std::abs(px[ch] - subj.color[ch]));
        if (max_dev < 0.15) ++passed;

        CandidateScore s;
        s.candidate_id = static_cast<int>(i);
        s.rule_score = static_cast<double>(passed) / total;
        s.psnr = psnr_db(cand, reference);
        const double norm_psnr = std::min(s.psnr, kPsnrCap) / kPsnrCap;
        s.combined = w_rule * s.rule_score + w_psnr * norm_psnr;
        scores.push_back(s);
    }
    return scores;
}

std::vector<CandidateScore> score_and_select(const std::vector<Tensor>& candidates,
                                             const SceneMetadata& metadata, int h, int w,
                                             int n, double w_rule, double w_psnr) {
    if (n > static_cast<int>(candidates.size()))
        throw InvariantError("score_and_select: n exceeds candidate count");
    std::vector<CandidateScore> scores =
        score_candidates(candidates, metadata, h, w, w_rule, w_psnr);
    std::sort(scores.begin(), scores.end(), [](const CandidateScore& a, const CandidateScore& b) {
        if (a.combined != b.combined) return a.combined > b.combined;
        return a.candidate_id < b.candidate_id;
    });
    scores.resize(static_cast<std::size_t>(n));
    return scores;
}

// ---- dataset -----------------------------------------------------------------------------------

void EditSample::validate() const {
    if (source.rank() != 3 || target.rank() != 3 || source.shape() != target.shape())
        throw InvariantError("sample " + std::to_string(sample_id) +
                             ": source/target dims differ");
    if (instruction.empty())
        throw InvariantError("sample " + std::to_string(sample_id) + ": empty instruction");
    for (double v : source.values())
        if (!(v >= 0.0 && v <= 1.0))
            throw InvariantError("sample " + std::to_string(sample_id) + ": source pixel out of range");
    for (double v : target.values())
        if (!(v >= 0.0 && v <= 1.0))
            throw InvariantError("sample " + std::to_string(sample_id) + ": target pixel out of range");
}

std::vector<Category> assign_categories(int count, const std::array<double, 4>& mix) {
    double total = 0;
    for (double wgt : mix) {
        if (wgt < 0) throw ConfigError("category mix: negative weight");
        total += wgt;
    }
    if (total <= 0) throw ConfigError("category mix: weights sum to zero");

    // largest-remainder quotas
    std::array<int, 4> quota{};
    std::array<double, 4> frac{};
    int assigned = 0;
    for (int i = 0; i < 4; ++i) {
        const double exact = count * mix[static_cast<std::size_t>(i)] / total;
        quota[static_cast<std::size_t>(i)] = static_cast<int>(exact);
        frac[static_cast<std::size_t>(i)] = exact - quota[static_cast<std::size_t>(i)];
        assigned += quota[static_cast<std::size_t>(i)];
    }
    while (assigned < count) {
        int best = 0;
        for (int i = 1; i < 4; ++i)
            if (frac[static_cast<std::size_t>(i)] > frac[static_cast<std::size_t>(best)]) best = i;
        ++quota[static_cast<std::size_t>(best)];
        frac[static_cast<std::size_t>(best)] = -1;
        ++assigned;
    }

    // round-robin interleave over remaining quotas
    std::vector<Category> out;
    out.reserve(static_cast<std::size_t>(count));
    std::array<int, 4> left = quota;
    while (static_cast<int>(out.size()) < count) {
        for (int i = 0; i < 4 && static_cast<int>(out.size()) < count; ++i) {
            if (left[static_cast<std::size_t>(i)] > 0) {
                out.push_back(all_categories()[static_cast<std::size_t>(i)]);
                --left[static_cast<std::size_t>(i)];
            }
        }
    }
    return out;
}

EditSample generate_sample(Category category, int sample_id, std::uint64_t sample_seed,
                           const ForgeOptions& opt) {
    auto [target, meta] = render_scene(category, sample_seed, opt.h, opt.w);
    EditSample s;
    s.sample_id = sample_id;
    s.seed = sample_seed;
    s.category = category;
    s.target = target;
    s.instruction = rewrite_hypothetical(meta.initial_instruction, category, sample_seed);
    s.initial_instruction = meta.initial_instruction;
    s.source_caption = meta.source_caption;
    s.target_caption = meta.target_caption;

    std::vector<Tensor> cands =
        generate_source_candidates(meta, opt.m_candidates, sample_seed, opt.h, opt.w);
    std::vector<CandidateScore> top =
        score_and_select(cands, meta, opt.h, opt.w, 1, opt.w_rule, opt.w_psnr);
    s.source = cands[static_cast<std::size_t>(top[0].candidate_id)];
    s.validate();
    return s;
}

std::vector<std::pair<int, int>> plan_split(const std::vector<int>& category_counts,
                                            double val_fraction, int val_cap) {
    std::vector<std::pair<int, int>> out;
    out.reserve(category_counts.size());
    for (int count : category_counts) {
        const int val = std::min(val_cap, static_cast<int>(val_fraction * count));
        out.emplace_back(count - val, val);
    }
    return out;
}

DatasetManifest build_dataset(const ForgeOptions& opt, const std::string& out_dir) {
    if (opt.count < 4) throw ConfigError("build_dataset: count must be >= 4 (one per category)");
    if (opt.h < 24 || opt.w < 24)
        throw ConfigError("build_dataset: images must be at least 24x24 for scene placement");
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "blobs", ec);
    if (ec) throw IoError("build_dataset: cannot create " + out_dir + ": " + ec.message());

    const std::vector<Category> cats = assign_categories(opt.count, opt.category_mix);
    std::array<int, 4> cat_index{};
    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(opt.count));
    std::vector<int> within(static_cast<std::size_t>(opt.count));
    for (int i = 0; i < opt.count; ++i) {
        const int ci = static_cast<int>(cats[static_cast<std::size_t>(i)]);
        within[static_cast<std::size_t>(i)] = cat_index[static_cast<std::size_t>(ci)];
        seeds[static_cast<std::size_t>(i)] =
            derive_seed(opt.master_seed, "data." + category_name(cats[static_cast<std::size_t>(i)]),
                        static_cast<std::uint64_t>(cat_index[static_cast<std::size_t>(ci)]));
        ++cat_index[static_cast<std::size_t>(ci)];
    }

    // per-sample generation is independent; a small pool fills a pre-sized
    // vector so output bytes never depend on scheduling
    std::vector<EditSample> samples(static_cast<std::size_t>(opt.count));
    int threads = opt.threads;
    if (const char* env = std::getenv("RB_THREADS")) threads = std::max(1, std::atoi(env));
    threads = std::min<int>(std::max(1, threads), opt.count);
    if (threads == 1) {
        for (int i = 0; i < opt.count; ++i)
            samples[static_cast<std::size_t>(i)] = generate_sample(
                cats[static_cast<std::size_t>(i)], i, seeds[static_cast<std::size_t>(i)], opt);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        for (int w = 0; w < threads; ++w) {
            pool.emplace_back([&] {
                for (;;) {
                    const int i = next.fetch_add(1);
                    if (i >= opt.count) return;
                    samples[static_cast<std::size_t>(i)] = generate_sample(
                        cats[static_cast<std::size_t>(i)], i, seeds[static_cast<std::size_t>(i)],
                        opt);
                }
            });
        }
        for (std::thread& th : pool) th.join();
    }

    // deterministic per-category split: seeded shuffle, first val_n out
    std::array<std::vector<int>, 4> by_cat;
    for (int i = 0; i < opt.count; ++i)
        by_cat[static_cast<std::size_t>(static_cast<int>(cats[static_cast<std::size_t>(i)]))]
            .push_back(i);
    DatasetManifest mani;
    nlohmann::ordered_json jcats;
    for (int ci = 0; ci < 4; ++ci) {
        std::vector<int>& ids = by_cat[static_cast<std::size_t>(ci)];
        const Category cat = all_categories()[static_cast<std::size_t>(ci)];
        const auto [train_n, val_n] =
            plan_split({static_cast<int>(ids.size())}, opt.val_fraction, opt.val_cap)[0];
        std::vector<int> shuffled = ids;
        std::mt19937_64 eng(derive_seed(opt.master_seed, "split." + category_name(cat)));
        std::shuffle(shuffled.begin(), shuffled.end(), eng);
        std::vector<int> val(shuffled.begin(), shuffled.begin() + val_n);
        std::vector<int> train(shuffled.begin() + val_n, shuffled.end());
        std::sort(val.begin(), val.end());
        std::sort(train.begin(), train.end());
        mani.train_ids.insert(mani.train_ids.end(), train.begin(), train.end());
        mani.val_ids.insert(mani.val_ids.end(), val.begin(), val.end());
        nlohmann::ordered_json jc;
        jc["count"] = ids.size();
        jc["train"] = train_n;
        jc["val"] = val_n;
        jc["train_ids"] = train;
        jc["val_ids"] = val;
        jcats[category_name(cat)] = jc;
    }
    std::sort(mani.train_ids.begin(), mani.train_ids.end());
    std::sort(mani.val_ids.begin(), mani.val_ids.end());

    // blobs and record lines in id order
    std::ostringstream lines;
    for (const EditSample& s : samples) {
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "%06d", s.sample_id);
        const std::string src_rel = std::string("blobs/") + idbuf + ".src.rbt";
        const std::string tgt_rel = std::string("blobs/") + idbuf + ".tgt.rbt";
        save_rbt((fs::path(out_dir) / src_rel).string(), s.source);
        save_rbt((fs::path(out_dir) / tgt_rel).string(), s.target);
        nlohmann::ordered_json rec;
        rec["sample_id"] = s.sample_id;
        rec["seed"] = s.seed;
        rec["category"] = category_name(s.category);
        rec["instruction"] = s.instruction;
        rec["initial_instruction"] = s.initial_instruction;
        rec["source_caption"] = s.source_caption;
        rec["target_caption"] = s.target_caption;
        rec["source_blob"] = src_rel;
        rec["target_blob"] = tgt_rel;
        lines << rec.dump() << "\n";
    }
    {
        std::ofstream os(fs::path(out_dir) / "samples.jsonl");
        if (!os) throw IoError("build_dataset: cannot write samples.jsonl in " + out_dir);
        os << lines.str();
    }

    nlohmann::ordered_json j;
    j["count"] = opt.count;
    j["master_seed"] = opt.master_seed;
    j["image"] = {opt.h, opt.w, opt.c};
    j["category_mix"] = opt.category_mix;
    j["m_candidates"] = opt.m_candidates;
    j["score_weights"] = {{"rule", opt.w_rule}, {"psnr", opt.w_psnr}};
    j["val_fraction"] = opt.val_fraction;
    j["val_cap"] = opt.val_cap;
    j["categories"] = jcats;
    mani.json = j;
    {
        std::ofstream os(fs::path(out_dir) / "manifest.json");
        if (!os) throw IoError("build_dataset: cannot write manifest.json in " + out_dir);
        os << j.dump(2) << "\n";
    }
    return mani;
}

LoadedDataset load_dataset(const std::string& dir) {
    LoadedDataset ds;
    {
        std::ifstream is(fs::path(dir) / "manifest.json");
        if (!is) throw IoError("load_dataset: cannot open manifest.json in " + dir);
        try {
            is >> ds.manifest;
        } catch (const nlohmann::json::parse_error& e) {
            throw IoError("load_dataset: bad manifest.json: " + std::string(e.what()));
        }
    }
    std::ifstream is(fs::path(dir) / "samples.jsonl");
    if (!is) throw IoError("load_dataset: cannot open samples.jsonl in " + dir);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::ordered_json rec;
        try {
            rec = nlohmann::ordered_json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw IoError("load_dataset: bad record line: " + std::string(e.what()));
        }
        EditSample s;
        s.sample_id = rec.at("sample_id").get<int>();
        s.seed = rec.at("seed").get<std::uint64_t>();
        const std::string cname = rec.at("category").get<std::string>();
        const auto cat = category_from_name(cname);
        if (!cat) throw InvariantError("load_dataset: invalid category " + cname);
        s.category = *cat;
        s.instruction = rec.at("instruction").get<std::string>();
        s.initial_instruction = rec.at("initial_instruction").get<std::string>();
        s.source_caption = rec.at("source_caption").get<std::string>();
        s.target_caption = rec.at("target_caption").get<std::string>();
        s.source = load_rbt((fs::path(dir) / rec.at("source_blob").get<std::string>()).string());
        s.target = load_rbt((fs::path(dir) / rec.at("target_blob").get<std::string>()).string());
        s.validate();
        ds.samples.push_back(std::move(s));
    }
    std::sort(ds.samples.begin(), ds.samples.end(),
              [](const EditSample& a, const EditSample& b) { return a.sample_id < b.sample_id; });
    for (const auto& [cname, jc] : ds.manifest.at("categories").items()) {
        for (const auto& id : jc.at("train_ids")) ds.train_ids.push_back(id.get<int>());
        for (const auto& id : jc.at("val_ids")) ds.val_ids.push_back(id.get<int>());
    }
    std::sort(ds.train_ids.begin(), ds.train_ids.end());
    std::sort(ds.val_ids.begin(), ds.val_ids.end());
    return ds;
}

}  // namespace rb
