#include "rb/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include "rb/errors.hpp"

namespace rb {

// ---- vocabulary -----------------------------------------------------------------

int Vocabulary::img_id(int i) const {
    if (i < 0 || i >= r) throw InvariantError("vocab: guidance token index out of range");
    return first_img_id() + i;
}

int Vocabulary::lookup(const std::string& token) const {
    auto it = ids.find(token);
    return it == ids.end() ? kUnk : it->second;
}

nlohmann::ordered_json Vocabulary::to_json() const {
    nlohmann::ordered_json j;
    j["r"] = r;
    nlohmann::ordered_json map;
    for (int i = 0; i < size(); ++i) map[tokens[static_cast<std::size_t>(i)]] = i;
    j["token_to_id"] = map;
    return j;
}

Vocabulary Vocabulary::from_json(const nlohmann::ordered_json& j) {
    Vocabulary v;
    v.r = j.at("r").get<int>();
    const auto& map = j.at("token_to_id");
    v.tokens.resize(map.size());
    for (const auto& [tok, id] : map.items()) {
        const int i = id.get<int>();
        if (i < 0 || i >= static_cast<int>(map.size()))
            throw IoError("vocab: id out of range for token " + tok);
        v.tokens[static_cast<std::size_t>(i)] = tok;
    }
    for (int i = 0; i < v.size(); ++i) v.ids[v.tokens[static_cast<std::size_t>(i)]] = i;
    if (v.size() < 4 + v.r) throw IoError("vocab: table too small for specials plus reserved ids");
    return v;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("vocab: cannot open " + path);
    os << to_json().dump(2) << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("vocab: cannot open " + path);
    nlohmann::ordered_json j;
    try {
        is >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("vocab: bad json in " + path + ": " + e.what());
    }
    return from_json(j);
}

std::vector<std::string> tokenize_text(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (char ch : text) {
        const unsigned char u = static_cast<unsigned char>(ch);
        if (std::isalnum(u)) {
            cur.push_back(static_cast<char>(std::tolower(u)));
        } else if (std::isspace(u)) {
            flush();
        } else {
            flush();
            out.push_back(std::string(1, ch));
        }
    }
    flush();
    return out;
}

Vocabulary build_vocab(const std::vector<std::string>& corpus, int r) {
    if (corpus.empty()) throw InvariantError("build_vocab: empty corpus");
    if (r < 1) throw InvariantError("build_vocab: r must be >= 1");
    std::map<std::string, long> freq;  // ordered map gives the lexicographic tie-break
    for (const std::string& line : corpus)
        for (const std::string& tok : tokenize_text(line)) ++freq[tok];

    std::vector<std::pair<std::string, long>> entries(freq.begin(), freq.end());
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });

    Vocabulary v;
    v.r = r;
    v.tokens = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (const auto& [tok, _] : entries) v.tokens.push_back(tok);
    for (int i = 1; i <= r; ++i) v.tokens.push_back("[IMG_" + std::to_string(i) + "]");
    for (int i = 0; i < v.size(); ++i) v.ids[v.tokens[i]] = i;
    return v;
}

std::vector<int> encode_ids(const std::string& instruction, const Vocabulary& vocab,
                            int max_len) {
    if (max_len < 3) throw InvariantError("encode_ids: max_len must be >= 3");
    std::vector<std::string> toks = tokenize_text(instruction);
    if (toks.empty()) throw InvariantError("encode_ids: empty instruction");
    std::vector<int> ids;
    ids.push_back(Vocabulary::kBos);
    for (const std::string& t : toks) {
        if (static_cast<int>(ids.size()) == max_len - 1) break;
        ids.push_back(vocab.lookup(t));
    }
    ids.push_back(Vocabulary::kEos);
    return ids;
}

std::string decode_ids(const std::vector<int>& ids, const Vocabulary& vocab) {
    std::string out;
    for (int id : ids) {
        if (id == Vocabulary::kBos || id == Vocabulary::kEos || id == Vocabulary::kPad) continue;
        if (id < 0 || id >= vocab.size()) throw InvariantError("decode_ids: id out of range");
        if (!out.empty()) out.push_back(' ');
        out += vocab.tokens[static_cast<std::size_t>(id)];
    }
    return out;
}

// ---- image encoder ----------------------------------------------------------------

void validate_image(const Tensor& image, int h, int w, int c) {
    if (image.rank() != 3 || image.dim(0) != h || image.dim(1) != w || image.dim(2) != c) {
        throw InvariantError("image: expected shape [" + std::to_string(h) + "," +
                             std::to_string(w) + "," + std::to_string(c) + "], got " +
                             shape_str(image.shape()));
    }
    for (double v : image.values()) {
        if (!(v >= 0.0 && v <= 1.0))
            throw InvariantError("image: pixel value " + std::to_string(v) + " outside [0,1]");
    }
}

int ImageTokens::fine_index() const {
    int idx = 0;
    for (std::size_t i = 1; i < patch_sizes.size(); ++i)
        if (patch_sizes[i] < patch_sizes[idx]) idx = static_cast<int>(i);
    return idx;
}

ImageEncoder ImageEncoder::make(int h, int w, int c, std::vector<int> patch_sizes, int d_enc,
                                std::mt19937_64& eng) {
    if (patch_sizes.empty()) throw InvariantError("image encoder: no patch scales configured");
    for (int p : patch_sizes) {
        if (p < 1 || h % p != 0 || w % p != 0) {
            throw InvariantError("image encoder: patch size " + std::to_string(p) +
                                 " does not divide " + std::to_string(h) + "x" +
                                 std::to_string(w));
        }
    }
    ImageEncoder enc;
    enc.h = h;
    enc.w = w;
    enc.c = c;
    enc.d_enc = d_enc;
    enc.patch_sizes = std::move(patch_sizes);
    for (int p : enc.patch_sizes) {
        enc.proj.push_back(Linear::make(p * p * c, d_enc, eng));
        const int n_tokens = (h / p) * (w / p);
        enc.pos.push_back(normal_init({n_tokens, d_enc}, 0.02, eng));
    }
    return enc;
}

ImageTokens ImageEncoder::encode(const Tensor& image) const {
    validate_image(image, h, w, c);
    ImageTokens out;
    out.patch_sizes = patch_sizes;
    out.h = h;
    out.w = w;
    out.c = c;
    for (std::size_t si = 0; si < patch_sizes.size(); ++si) {
        const int p = patch_sizes[si];
        const int gy = h / p, gx = w / p;
        Tensor patches = Tensor::zeros({gy * gx, p * p * c});
        for (int ty = 0; ty < gy; ++ty) {
            for (int tx = 0; tx < gx; ++tx) {
                double* dst = patches.values().data() +
                              static_cast<std::size_t>(ty * gx + tx) * (p * p * c);
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        for (int ch = 0; ch < c; ++ch)
                            *dst++ = image.values()[((ty * p + dy) * w + (tx * p + dx)) * c + ch];
            }
        }
        out.per_scale.push_back(add(proj[si].forward(patches), pos[si]));
    }
    return out;
}

Tensor ImageEncoder::decode_fine(const Tensor& fine_tokens) const {
    const int fi = [&] {
        int idx = 0;
        for (std::size_t i = 1; i < patch_sizes.size(); ++i)
            if (patch_sizes[i] < patch_sizes[idx]) idx = static_cast<int>(i);
        return idx;
    }();
    const int p = patch_sizes[fi];
    const int gy = h / p, gx = w / p;
    if (fine_tokens.rank() != 2 || fine_tokens.rows() != gy * gx || fine_tokens.cols() != d_enc) {
        throw InvariantError("decode_fine: expected [" + std::to_string(gy * gx) + "," +
                             std::to_string(d_enc) + "], got " + shape_str(fine_tokens.shape()));
    }
    const Tensor& w_proj = proj[fi].w;  // [d_enc, p*p*c]
    const Tensor& b_proj = proj[fi].b;
    Tensor image = Tensor::zeros({h, w, c});
    for (int tok = 0; tok < gy * gx; ++tok) {
        const int ty = tok / gx, tx = tok % gx;
        // patch = (token - pos - b) . W
        std::vector<double> centered(static_cast<std::size_t>(d_enc));
        for (int j = 0; j < d_enc; ++j) {
            centered[j] = fine_tokens.at(tok, j) - pos[fi].at(tok, j) -
                          (b_proj.defined() ? b_proj.values()[j] : 0.0);
        }
        for (int k = 0; k < p * p * c; ++k) {
            double s = 0.0;
            for (int j = 0; j < d_enc; ++j) s += centered[j] * w_proj.at(j, k);
            const int dy = k / (p * c), rem = k % (p * c);
            const int dx = rem / c, ch = rem % c;
            image.values()[((ty * p + dy) * w + (tx * p + dx)) * c + ch] =
                std::clamp(s, 0.0, 1.0);
        }
    }
    return image;
}

ParamSet ImageEncoder::params(const std::string& prefix) const {
    ParamSet ps;
    for (std::size_t i = 0; i < proj.size(); ++i) {
        const std::string s = prefix + ".scale" + std::to_string(patch_sizes[i]);
        ps.merge(s + ".proj", proj[i].params(""));
        ps.add(s + ".pos", pos[i]);
    }
    return ps;
}

// ---- text encoder ---------------------------------------------------------------------

TextEncoder TextEncoder::make(int vocab_size, int d_enc, int max_len, std::mt19937_64& eng) {
    TextEncoder t;
    t.table = normal_init({vocab_size, d_enc}, 0.02, eng);
    t.pos = normal_init({max_len, d_enc}, 0.02, eng);
    t.max_len = max_len;
    return t;
}

Tensor TextEncoder::encode(const std::vector<int>& ids) const {
    if (ids.empty()) throw InvariantError("text encoder: empty id list");
    if (static_cast<int>(ids.size()) > max_len)
        throw InvariantError("text encoder: sequence longer than max_len");
    Tensor emb = gather_rows(table, ids);
    Tensor p = slice_rows(pos, 0, static_cast<int>(ids.size()));
    return add(emb, p);
}

ParamSet TextEncoder::params(const std::string& prefix) const {
    ParamSet ps;
    ps.add(prefix + ".table", table);
    ps.add(prefix + ".pos", pos);
    return ps;
}

// ---- image adapter ---------------------------------------------------------------------

ImageAdapter ImageAdapter::make(int d_enc, int d_llm, std::mt19937_64& eng) {
    ImageAdapter a;
    a.map = Linear::make(d_enc, d_llm, eng);
    return a;
}

Tensor concat_coarse_to_fine(const ImageTokens& tokens) {
    std::vector<std::size_t> order(tokens.per_scale.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return tokens.patch_sizes[a] > tokens.patch_sizes[b];
    });
    std::vector<Tensor> parts;
    parts.reserve(order.size());
    for (std::size_t i : order) parts.push_back(tokens.per_scale[i]);
    return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

Tensor ImageAdapter::forward(const ImageTokens& tokens) const {
    return map.forward(concat_coarse_to_fine(tokens));
}

ParamSet ImageAdapter::params(const std::string& prefix) const {
    return map.params(prefix + ".map");
}

}  // namespace rb
