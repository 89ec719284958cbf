#include "rb/frce.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "rb/errors.hpp"

namespace rb {

namespace {

double luminance(const Tensor& image, int y, int x) {
    const int c = image.dim(2);
    const double* px = image.values().data() + (static_cast<std::size_t>(y) * image.dim(1) + x) * c;
    double s = 0.0;
    for (int ch = 0; ch < c; ++ch) s += px[ch];
    return s / c;
}

double border_median_luminance(const Tensor& image) {
    const int h = image.dim(0), w = image.dim(1);
    std::vector<double> border;
    border.reserve(2 * (h + w));
    for (int x = 0; x < w; ++x) {
        border.push_back(luminance(image, 0, x));
        border.push_back(luminance(image, h - 1, x));
    }
    for (int y = 1; y + 1 < h; ++y) {
        border.push_back(luminance(image, y, 0));
        border.push_back(luminance(image, y, w - 1));
    }
    std::sort(border.begin(), border.end());
    const std::size_t n = border.size();
    return n % 2 ? border[n / 2] : 0.5 * (border[n / 2 - 1] + border[n / 2]);
}

}  // namespace

SegmentationMap segment_regions(const Tensor& image, double tau, int min_area) {
    if (image.rank() != 3) throw InvariantError("segment_regions: expected [H,W,C] image");
    const int h = image.dim(0), w = image.dim(1);
    const double bg = border_median_luminance(image);

    std::vector<char> fg(static_cast<std::size_t>(h) * w, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            fg[static_cast<std::size_t>(y) * w + x] = std::abs(luminance(image, y, x) - bg) > tau;

    SegmentationMap seg;
    seg.h = h;
    seg.w = w;
    seg.labels.assign(static_cast<std::size_t>(h) * w, 0);

    // 4-connectivity flood fill in scan order; component ids are provisional
    std::vector<int> comp(static_cast<std::size_t>(h) * w, -1);
    struct Component {
        int area = 0;
        int top_y = 0, top_x = 0;  // first pixel in scan order
        std::vector<int> pixels;
    };
    std::vector<Component> comps;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int idx = y * w + x;
            if (!fg[idx] || comp[idx] >= 0) continue;
            Component cur;
            cur.top_y = y;
            cur.top_x = x;
            std::vector<int> stack{idx};
            comp[idx] = static_cast<int>(comps.size());
            while (!stack.empty()) {
                const int p = stack.back();
                stack.pop_back();
                cur.pixels.push_back(p);
                ++cur.area;
                const int py = p / w, px = p % w;
                const int neigh[4][2] = {{py - 1, px}, {py + 1, px}, {py, px - 1}, {py, px + 1}};
                for (auto& [ny, nx] : neigh) {
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    const int q = ny * w + nx;
                    if (fg[q] && comp[q] < 0) {
                        comp[q] = static_cast<int>(comps.size());
                        stack.push_back(q);
                    }
                }
            }
            comps.push_back(std::move(cur));
        }
    }

    // drop small components, order the rest by their top-left pixel
    std::vector<int> keep;
    for (int i = 0; i < static_cast<int>(comps.size()); ++i)
        if (comps[i].area >= min_area) keep.push_back(i);
    std::sort(keep.begin(), keep.end(), [&](int a, int b) {
        if (comps[a].top_y != comps[b].top_y) return comps[a].top_y < comps[b].top_y;
        return comps[a].top_x < comps[b].top_x;
    });
    for (std::size_t li = 0; li < keep.size(); ++li)
        for (int p : comps[keep[li]].pixels) seg.labels[p] = static_cast<int>(li) + 1;
    seg.n_r = static_cast<int>(keep.size()) + 1;
    return seg;
}

// ---- patch extractor ----------------------------------------------------------------

PatchExtractor PatchExtractor::make(int d_enc, int d_llm, int window, int heads,
                                    std::mt19937_64& eng) {
    PatchExtractor pe;
    pe.window = window;
    pe.attn = CrossAttentionBlock::make(d_enc, heads, eng, /*residual_norm=*/true);
    pe.ff = FeedForward::make(d_enc, eng);
    pe.out = Linear::make(d_enc, d_llm, eng);
    return pe;
}

Tensor PatchExtractor::forward(const ImageTokens& tokens) const {
    const Tensor& fine = tokens.fine();
    const int g = tokens.fine_grid();
    if (g * g != fine.rows()) throw InvariantError("patch extractor: fine grid is not square");
    if (window < 1 || g % window != 0) {
        throw InvariantError("patch extractor: window " + std::to_string(window) +
                             " does not divide token grid " + std::to_string(g));
    }
    const int gw = g / window;
    std::vector<Tensor> rows;
    rows.reserve(static_cast<std::size_t>(gw) * gw);
    for (int wy = 0; wy < gw; ++wy) {
        for (int wx = 0; wx < gw; ++wx) {
            std::vector<int> ids;
            ids.reserve(static_cast<std::size_t>(window) * window);
            for (int dy = 0; dy < window; ++dy)
                for (int dx = 0; dx < window; ++dx)
                    ids.push_back((wy * window + dy) * g + (wx * window + dx));
            Tensor win = gather_rows(fine, ids);
            Tensor hproc = attn.forward(win, win);
            hproc = add(hproc, ff.forward(hproc));
            rows.push_back(out.forward(mean_rows(hproc)));
        }
    }
    return rows.size() == 1 ? rows[0] : concat(rows, 0);
}

ParamSet PatchExtractor::params(const std::string& prefix) const {
    ParamSet p;
    p.merge(prefix + ".attn", attn.params(""));
    p.merge(prefix + ".ff", ff.params(""));
    p.merge(prefix + ".out", out.params(""));
    return p;
}

// ---- region extractor ----------------------------------------------------------------

RegionExtractor RegionExtractor::make(int d_enc, int d_llm, int heads, std::mt19937_64& eng) {
    RegionExtractor re;
    re.ff = FeedForward::make(d_enc, eng);
    re.attn = CrossAttentionBlock::make(d_enc, heads, eng, /*residual_norm=*/true);
    re.out = Linear::make(d_enc, d_llm, eng);
    return re;
}

Tensor RegionExtractor::forward(const ImageTokens& tokens, const SegmentationMap& seg) const {
    if (seg.h != tokens.h || seg.w != tokens.w)
        throw InvariantError("region extractor: segmentation dims do not match image dims");
    const Tensor& fine = tokens.fine();
    const int g = tokens.fine_grid();
    const int p = tokens.patch_sizes[tokens.fine_index()];

    std::vector<Tensor> rows;
    rows.reserve(static_cast<std::size_t>(seg.n_r));
    for (int r = 0; r < seg.n_r; ++r) {
        std::vector<int> ids;
        for (int ty = 0; ty < g; ++ty) {
            for (int tx = 0; tx < g; ++tx) {
                const int cy = ty * p + p / 2;
                const int cx = tx * p + p / 2;
                if (seg.at(cy, cx) == r) ids.push_back(ty * g + tx);
            }
        }
        Tensor pooled;
        if (ids.empty()) {
            ++(*empty_region_fallbacks);
            pooled = mean_rows(fine);
        } else {
            pooled = mean_rows(gather_rows(fine, ids));
        }
        Tensor hproc = add(pooled, ff.forward(pooled));
        hproc = attn.forward(hproc, fine);
        rows.push_back(out.forward(hproc));
    }
    return rows.size() == 1 ? rows[0] : concat(rows, 0);
}

ParamSet RegionExtractor::params(const std::string& prefix) const {
    ParamSet ps;
    ps.merge(prefix + ".ff", ff.params(""));
    ps.merge(prefix + ".attn", attn.params(""));
    ps.merge(prefix + ".out", out.params(""));
    return ps;
}

// ---- object extraction ----------------------------------------------------------------

namespace {

const std::set<std::string>& stop_words() {
    static const std::set<std::string> kStop = {
        "a",    "an",   "and",  "at",   "be",     "been",  "being", "by",   "for",
        "from", "if",   "in",   "into", "is",     "it",    "its",   "next", "of",
        "off",  "on",   "onto", "or",   "room",   "someone", "story", "that", "the",
        "then", "this", "to",   "up",   "was",    "were",  "with",  "would", "what",
        "when", "down", "over", "temperature",    "while", "after", "before",
    };
    return kStop;
}

const std::set<std::string>& verb_words() {
    static const std::set<std::string> kVerbs = {
        "age",     "aged",     "ages",     "bloom",   "bloomed",  "break",    "broke",
        "broken",  "burn",     "burned",   "burns",   "burnt",    "continue", "continued",
        "crack",   "cracked",  "fall",     "fallen",  "fell",     "freeze",   "froze",
        "frozen",  "grew",     "grow",     "grown",   "grows",    "happen",   "happened",
        "happens", "knock",    "knocked",  "leaned",  "left",     "look",     "looked",
        "looks",   "like",     "melt",     "melted",  "melts",    "move",     "moved",
        "shatter", "shattered","spill",    "spilled", "split",    "tilt",     "tilted",
        "topple",  "toppled",  "turn",     "turned",  "unfold",   "unfolded",
    };
    return kVerbs;
}

bool is_word(const std::string& tok) {
    for (char ch : tok)
        if (!std::isalnum(static_cast<unsigned char>(ch))) return false;
    return true;
}

}  // namespace

std::vector<std::string> extract_object_words(const std::string& instruction) {
    std::vector<std::string> toks = tokenize_text(instruction);
    // strip the leading hypothetical frame; fillers elsewhere ("look like
    // if it ...") fall to the stop and verb lists below
    std::size_t cut = 0;
    if (toks.size() >= 3 && toks[0] == "what" && toks[1] == "would") {
        cut = 2;
        if (cut < toks.size() && toks[cut] == "happen") ++cut;
        if (cut < toks.size() && toks[cut] == "if") ++cut;
    }
    std::vector<std::string> kept;
    for (std::size_t i = cut; i < toks.size(); ++i) {
        const std::string& t = toks[i];
        if (!is_word(t)) continue;
        if (stop_words().count(t) || verb_words().count(t)) continue;
        kept.push_back(t);
    }
    return kept;
}

ObjectExtractor ObjectExtractor::make(int vocab_size, int d_llm, std::mt19937_64& eng) {
    ObjectExtractor oe;
    oe.table = normal_init({vocab_size, d_llm}, 0.02, eng);
    return oe;
}

std::pair<Tensor, std::vector<std::string>> ObjectExtractor::extract(
    const std::string& instruction, const Vocabulary& vocab) const {
    if (instruction.empty()) throw InvariantError("object extractor: empty instruction");
    std::vector<std::string> words = extract_object_words(instruction);
    std::vector<int> ids;
    for (const std::string& w : words) ids.push_back(vocab.lookup(w));
    if (ids.empty()) ids.push_back(Vocabulary::kUnk);
    return {gather_rows(table, ids), std::move(words)};
}

ParamSet ObjectExtractor::params(const std::string& prefix) const {
    ParamSet ps;
    ps.add(prefix + ".table", table);
    return ps;
}

// ---- ID controller ----------------------------------------------------------------------

IdController IdController::make(int d_llm, int heads, std::mt19937_64& eng) {
    IdController idc;
    idc.attn = CrossAttentionBlock::make(d_llm, heads, eng);
    idc.ff = FeedForward::make(d_llm, eng);
    return idc;
}

Tensor IdController::forward(const Tensor& r_v, const Tensor& object_tokens) const {
    Tensor mixed = add(object_tokens, attn.forward(object_tokens, r_v));
    return add(mixed, ff.forward(mixed));
}

ParamSet IdController::params(const std::string& prefix) const {
    ParamSet ps;
    ps.merge(prefix + ".attn", attn.params(""));
    ps.merge(prefix + ".ff", ff.params(""));
    return ps;
}

Tensor fuse_visual_cues(const Tensor& r_local, const Tensor& r_global) {
    if (r_local.cols() != r_global.cols()) {
        throw InvariantError("fuse_visual_cues: width mismatch " + shape_str(r_local.shape()) +
                             " vs " + shape_str(r_global.shape()));
    }
    return concat({r_local, r_global}, 0);
}

// ---- module ----------------------------------------------------------------------------------

FrceModule FrceModule::make(int d_enc, int d_llm, int vocab_size, int window, int heads,
                            double seg_tau, int seg_min_area, std::mt19937_64& eng) {
    FrceModule m;
    m.patch = PatchExtractor::make(d_enc, d_llm, window, heads, eng);
    m.region = RegionExtractor::make(d_enc, d_llm, heads, eng);
    m.object = ObjectExtractor::make(vocab_size, d_llm, eng);
    m.id_controller = IdController::make(d_llm, heads, eng);
    m.seg_tau = seg_tau;
    m.seg_min_area = seg_min_area;
    return m;
}

ReasoningCues FrceModule::forward(const ImageTokens& tokens, const Tensor& image,
                                  const std::string& instruction,
                                  const Vocabulary& vocab) const {
    ReasoningCues cues;
    cues.r_local = patch.forward(tokens);
    cues.seg = segment_regions(image, seg_tau, seg_min_area);
    cues.r_global = region.forward(tokens, cues.seg);
    cues.r_v = fuse_visual_cues(cues.r_local, cues.r_global);
    auto [obj, words] = object.extract(instruction, vocab);
    cues.object_words = std::move(words);
    cues.r_t = id_controller.forward(cues.r_v, obj);
    return cues;
}

ParamSet FrceModule::params(const std::string& prefix) const {
    ParamSet ps;
    ps.merge(prefix + ".patch", patch.params(""));
    ps.merge(prefix + ".region", region.params(""));
    ps.merge(prefix + ".object", object.params(""));
    ps.merge(prefix + ".id_controller", id_controller.params(""));
    return ps;
}

}  // namespace rb
