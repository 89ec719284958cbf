#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "rb/nn.hpp"
#include "rb/tensor.hpp"

namespace rb {

// ---- vocabulary ---------------------------------------------------------------

/// Token table with PAD/BOS/EOS/UNK specials first and the r reserved
/// guidance-token ids ([IMG_1]..[IMG_r]) as the final contiguous range.
struct Vocabulary {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> ids;
    int r = 32;

    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;

    int size() const { return static_cast<int>(tokens.size()); }
    int first_img_id() const { return size() - r; }
    int img_id(int i) const;  // i in [0, r)
    bool is_img_id(int id) const { return id >= first_img_id() && id < size(); }
    int lookup(const std::string& token) const;

    nlohmann::ordered_json to_json() const;
    static Vocabulary from_json(const nlohmann::ordered_json& j);
    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);
};

/// Lowercase, split into word tokens and single-char punctuation tokens.
std::vector<std::string> tokenize_text(const std::string& text);

/// Frequency-sorted vocabulary (ties broken lexicographically), specials
/// first, r guidance ids appended last.
Vocabulary build_vocab(const std::vector<std::string>& corpus, int r);

/// BOS + token ids (UNK for out-of-vocabulary) + EOS, truncated so the
/// result never exceeds max_len rows. Empty instruction is an error.
std::vector<int> encode_ids(const std::string& instruction, const Vocabulary& vocab,
                            int max_len);

std::string decode_ids(const std::vector<int>& ids, const Vocabulary& vocab);

// ---- image encoder -----------------------------------------------------------

/// Per-scale patch token matrices in config order. The fine scale is the
/// smallest patch size; its token grid doubles as the editing latent.
struct ImageTokens {
    std::vector<Tensor> per_scale;  // each [n_s, d_enc]
    std::vector<int> patch_sizes;
    int h = 0, w = 0, c = 0;

    int fine_index() const;
    const Tensor& fine() const { return per_scale[fine_index()]; }
    int fine_grid() const { return h / patch_sizes[fine_index()]; }
};

struct ImageEncoder {
    int h = 0, w = 0, c = 0;
    int d_enc = 0;
    std::vector<int> patch_sizes;
    std::vector<Linear> proj;  // per scale, p*p*c -> d_enc
    std::vector<Tensor> pos;   // per scale, [n_s, d_enc] learned

    static ImageEncoder make(int h, int w, int c, std::vector<int> patch_sizes, int d_enc,
                             std::mt19937_64& eng);
    ImageTokens encode(const Tensor& image) const;  // image [H,W,C], values in [0,1]
    /// Inverse of the fine-scale patch projection (projection transpose);
    /// the toy image decoder for sampling.
    Tensor decode_fine(const Tensor& fine_tokens) const;  // -> [H,W,C]
    ParamSet params(const std::string& prefix) const;
};

void validate_image(const Tensor& image, int h, int w, int c);

// ---- text encoder ------------------------------------------------------------

struct TextEncoder {
    Tensor table;  // [vocab, d_enc]
    Tensor pos;    // [max_len, d_enc]
    int max_len = 0;

    static TextEncoder make(int vocab_size, int d_enc, int max_len, std::mt19937_64& eng);
    Tensor encode(const std::vector<int>& ids) const;  // [L, d_enc]
    ParamSet params(const std::string& prefix) const;
};

// ---- image adapter -----------------------------------------------------------

/// Maps encoder tokens into the guidance LM's latent space; scales
/// concatenated coarse-to-fine.
struct ImageAdapter {
    Linear map;  // d_enc -> d_llm

    static ImageAdapter make(int d_enc, int d_llm, std::mt19937_64& eng);
    Tensor forward(const ImageTokens& tokens) const;  // [sum n_s, d_llm]
    ParamSet params(const std::string& prefix) const;
};

/// Raw tokens concatenated coarse-to-fine (the E_I(I) feature block shared
/// by the adapter and the enhancer context).
Tensor concat_coarse_to_fine(const ImageTokens& tokens);

}  // namespace rb
