#include "gpmm/distill.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "gpmm/errors.hpp"
#include "gpmm/random.hpp"

namespace gpmm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double score(const Dataset& data, const KernelParams& params, const std::vector<int>& subset)
{
    try {
        const double v = titsias_bound(data, subset, params);
        return std::isfinite(v) ? v : kNegInf;
    } catch (const NumericalDegeneracy&) {
        return kNegInf;
    }
}

} // namespace

InducingSelection select_inducing(const Dataset& data, const KernelParams& params, int m,
                                  const SelectOptions& options, std::uint64_t seed)
{
    const int n = data.rows();
    require(m >= 1 && m < n, "inducing count must satisfy 1 <= m < rows");
    require(options.trials >= 1, "inducing selection needs at least one trial");
    const int swap_budget = options.swap_budget >= 0 ? options.swap_budget : 2 * m;
    const int max_evals =
        options.max_swap_evaluations >= 0 ? options.max_swap_evaluations : std::max(64, 2 * m);

    Rng rng(derive_seed(seed, seed_stream::distill));
    std::vector<int> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);

    InducingSelection best;
    best.bound = kNegInf;
    for (int t = 0; t < options.trials; ++t) {
        std::shuffle(all.begin(), all.end(), rng);
        std::vector<int> candidate(all.begin(), all.begin() + m);
        std::sort(candidate.begin(), candidate.end());
        const double v = score(data, params, candidate);
        ++best.trials_used;
        if (v > best.bound) {
            best.bound = v;
            best.indices = std::move(candidate);
        }
    }
    if (!std::isfinite(best.bound))
        throw NumericalDegeneracy("every inducing candidate failed to evaluate");

    // Greedy single-point swaps: first improvement per slot, passes until a
    // pass makes no progress or a budget runs out.
    std::vector<int> chosen = best.indices;
    std::vector<char> in_set(static_cast<std::size_t>(n), 0);
    for (int r : chosen)
        in_set[static_cast<std::size_t>(r)] = 1;
    std::vector<int> slots(static_cast<std::size_t>(m));
    std::iota(slots.begin(), slots.end(), 0);

    bool exhausted = false;
    while (!exhausted && best.swaps_accepted < swap_budget) {
        bool improved = false;
        std::shuffle(slots.begin(), slots.end(), rng);
        for (int slot : slots) {
            std::vector<int> outside;
            outside.reserve(static_cast<std::size_t>(n - m));
            for (int r = 0; r < n; ++r)
                if (!in_set[static_cast<std::size_t>(r)])
                    outside.push_back(r);
            std::shuffle(outside.begin(), outside.end(), rng);
            for (int u : outside) {
                if (best.evaluations >= max_evals) {
                    exhausted = true;
                    break;
                }
                std::vector<int> trial = chosen;
                trial[static_cast<std::size_t>(slot)] = u;
                std::vector<int> sorted = trial;
                std::sort(sorted.begin(), sorted.end());
                const double v = score(data, params, sorted);
                ++best.evaluations;
                if (v > best.bound) {
                    in_set[static_cast<std::size_t>(chosen[static_cast<std::size_t>(slot)])] = 0;
                    in_set[static_cast<std::size_t>(u)] = 1;
                    chosen = std::move(trial);
                    best.bound = v;
                    ++best.swaps_accepted;
                    improved = true;
                    break;
                }
            }
            if (exhausted || best.swaps_accepted >= swap_budget)
                break;
        }
        if (!improved)
            break;
    }
    best.indices = chosen;
    std::sort(best.indices.begin(), best.indices.end());
    return best;
}

void apply_distillation(GpModel& model, const InducingSelection& selection)
{
    const int n = model.data().rows();
    require(!selection.indices.empty() && static_cast<int>(selection.indices.size()) < n,
            "selection must be a proper nonempty subset");
    for (std::size_t k = 0; k < selection.indices.size(); ++k) {
        const int r = selection.indices[k];
        require(r >= 0 && r < n, "selection index out of range");
        require(k == 0 || selection.indices[k - 1] < r, "selection indices must be sorted and distinct");
    }
    model.set_data(model.data().subset(selection.indices));
}

} // namespace gpmm
