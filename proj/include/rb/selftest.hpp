#pragma once

#include <string>
#include <vector>

namespace rb {

struct SelfTestResult {
    std::string name;
    double max_err = 0.0;
    bool pass = false;
};

/// Gradient audit over every differentiable op and the composite
/// sub-graphs (ID controller, one enhancer, QFormer, denoiser, LoRA'd LM)
/// at toy dims, plus a handful of structural invariants. Each check runs
/// once per seed and reports its max relative error against central
/// differences.
std::vector<SelfTestResult> run_selftest(int seeds = 5, double tol = 1e-4);

}  // namespace rb
