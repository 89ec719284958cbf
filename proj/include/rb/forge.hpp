#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "rb/frce.hpp"
#include "rb/tensor.hpp"

namespace rb {

enum class Category { Physical, Temporal, Causal, Story };

const std::array<Category, 4>& all_categories();
std::string category_name(Category c);
std::optional<Category> category_from_name(const std::string& name);

// ---- scenes ------------------------------------------------------------------

struct Primitive {
    enum class Shape { Square, Block, Disk };
    Shape shape = Shape::Square;
    double cx = 0, cy = 0;      // center, pixels
    double half_w = 2, half_h = 2;
    double shear = 0.0;         // per-row x offset factor (tilt)
    std::array<double, 3> color{0.8, 0.2, 0.2};
    std::string name;           // "red square"
};

struct SceneSpec {
    std::array<double, 3> background{0.12, 0.12, 0.13};
    std::vector<Primitive> prims;
};

/// Everything needed to invert the edit: the pre-edit scene, the post-edit
/// scene, and the applied transform.
struct SceneMetadata {
    SceneSpec source_scene;
    SceneSpec target_scene;
    std::string transform;  // "melted", "grew", ...
    int subject = 0;        // primitive index in source_scene
    std::string initial_instruction;  // "<verb> the <object>"
    std::string source_caption;
    std::string target_caption;
    int object_count = 0;  // rendered blobs in the target
};

Tensor render(const SceneSpec& scene, int h, int w);

/// Procedural target renderer: 1-3 separated colored primitives with a
/// category-specific end state applied to one subject.
std::pair<Tensor, SceneMetadata> render_scene(Category category, std::uint64_t seed, int h,
                                              int w);

/// Category-keyed hypothetical rewrite of "<verb> the <object>"; output
/// always starts with "What" and ends with "?". Unparseable input falls
/// back to "What would happen if <initial>?".
std::string rewrite_hypothetical(const std::string& initial_instruction, Category category,
                                 std::uint64_t seed);

/// Inverse-transform candidates: index 0 is the unjittered inverse, the
/// rest jitter the subject (position +-2 px, hue +-0.05, size +-10%) on a
/// fixed grid for i < 16 and seeded draws beyond.
std::vector<Tensor> generate_source_candidates(const SceneMetadata& metadata, int m,
                                               std::uint64_t seed, int h, int w);

// ---- scoring -------------------------------------------------------------------

struct CandidateScore {
    int candidate_id = 0;
    double rule_score = 0;  // fraction of consistency checks passed, in [0,1]
    double psnr = 0;        // dB vs the unjittered inverse reference
    double combined = 0;    // w_r * rule + w_p * normalized psnr
};

double psnr_db(const Tensor& a, const Tensor& b);

std::vector<CandidateScore> score_candidates(const std::vector<Tensor>& candidates,
                                             const SceneMetadata& metadata, int h, int w,
                                             double w_rule, double w_psnr);

/// Scores, sorts descending by combined score (candidate_id ascending as
/// the tie-break) and returns the top n.
std::vector<CandidateScore> score_and_select(const std::vector<Tensor>& candidates,
                                             const SceneMetadata& metadata, int h, int w,
                                             int n, double w_rule, double w_psnr);

// ---- dataset ----------------------------------------------------------------------

struct EditSample {
    Tensor source;  // [H,W,C] in [0,1]
    std::string instruction;
    Tensor target;  // [H,W,C]
    Category category = Category::Physical;
    int sample_id = 0;
    std::uint64_t seed = 0;
    std::string initial_instruction;
    std::string source_caption;
    std::string target_caption;

    void validate() const;
};

struct ForgeOptions {
    int h = 32, w = 32, c = 3;
    int count = 400;
    std::uint64_t master_seed = 7;
    std::array<double, 4> category_mix{0.25, 0.25, 0.25, 0.25};
    int m_candidates = 8;
    double w_rule = 0.5, w_psnr = 0.5;
    double val_fraction = 0.1;
    int val_cap = 400;
    int threads = 1;
};

/// Per-category (train, val) counts: val = min(val_cap, floor(val_fraction *
/// count)).
std::vector<std::pair<int, int>> plan_split(const std::vector<int>& category_counts,
                                            double val_fraction, int val_cap);

EditSample generate_sample(Category category, int sample_id, std::uint64_t sample_seed,
                           const ForgeOptions& opt);

/// Category of each sample id under quota interleaving (largest-remainder
/// quotas, round-robin order).
std::vector<Category> assign_categories(int count, const std::array<double, 4>& mix);

struct DatasetManifest {
    nlohmann::ordered_json json;
    std::vector<int> train_ids;
    std::vector<int> val_ids;
};

DatasetManifest build_dataset(const ForgeOptions& opt, const std::string& out_dir);

struct LoadedDataset {
    std::vector<EditSample> samples;  // by sample_id
    std::vector<int> train_ids;
    std::vector<int> val_ids;
    nlohmann::ordered_json manifest;
};

LoadedDataset load_dataset(const std::string& dir);

}  // namespace rb
