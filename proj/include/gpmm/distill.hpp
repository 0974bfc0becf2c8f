#pragma once

// Data distillation: replace an expert's dataset by m of its own rows chosen
// to maximize the inducing-point lower bound (Monte Carlo subsets, then
// greedy single-point swaps).

#include <cstdint>
#include <vector>

#include "gpmm/gp_core.hpp"

namespace gpmm {

struct InducingSelection {
    int expert_id = -1;
    std::vector<int> indices; // sorted, distinct row indices
    double bound = 0.0;
    int trials_used = 0;
    int swaps_accepted = 0;
    int evaluations = 0;
};

struct SelectOptions {
    int trials = 16;
    /// Accepted swaps allowed; negative means 2m.
    int swap_budget = -1;
    /// Bound evaluations allowed during the swap phase; negative means max(64, 2m).
    int max_swap_evaluations = -1;
};

InducingSelection select_inducing(const Dataset& data, const KernelParams& params, int m,
                                  const SelectOptions& options, std::uint64_t seed);

inline InducingSelection select_inducing(const Dataset& data, const KernelParams& params, int m,
                                         int trials, std::uint64_t seed)
{
    SelectOptions options;
    options.trials = trials;
    return select_inducing(data, params, m, options, seed);
}

/// Keep only the selected rows. The posterior cache rebuilds lazily because
/// the dataset stamp changes.
void apply_distillation(GpModel& model, const InducingSelection& selection);

} // namespace gpmm
