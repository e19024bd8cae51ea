#ifndef PREVCURVE_VALIDATION_HPP
#define PREVCURVE_VALIDATION_HPP

// Synthetic-truth checks on a finished store: band coverage and
// brute-force spot checks of the aggregation.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "prevcurve/core_model.hpp"
#include "prevcurve/particle_store.hpp"
#include "prevcurve/query.hpp"
#include "prevcurve/random.hpp"
#include "prevcurve/synthetic.hpp"

namespace prevcurve {

inline constexpr double kCoverageLow = 0.85;
inline constexpr double kCoverageHigh = 0.95;
inline constexpr double kOracleTolerance = 1e-10;

struct ValidationOptions {
  std::size_t pairs = 500;
  double level = kDefaultBandLevel;
  std::size_t oracle_checks = 50;
  std::uint64_t seed = 1;
};

struct ValidationReport {
  std::size_t pairs = 0;
  std::size_t covered = 0;
  double coverage = 0.0;
  double level = kDefaultBandLevel;
  bool coverage_checked = false;
  std::string notice;
  std::size_t oracle_checks = 0;
  double max_oracle_error = 0.0;

  bool coverage_ok() const { return !coverage_checked || (coverage >= kCoverageLow && coverage <= kCoverageHigh); }
  bool oracle_ok() const { return max_oracle_error <= kOracleTolerance; }
  bool passed() const { return coverage_ok() && oracle_ok(); }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"pairs", pairs},
                        {"covered", covered},
                        {"coverage", coverage},
                        {"level", level},
                        {"coverage_checked", coverage_checked},
                        {"coverage_window", {kCoverageLow, kCoverageHigh}},
                        {"oracle_checks", oracle_checks},
                        {"max_oracle_error", max_oracle_error},
                        {"oracle_tolerance", kOracleTolerance},
                        {"passed", passed()}};
    if (!notice.empty()) j["notice"] = notice;
    return j;
  }
};

/// Brute-force aggregate: scan every cell, test membership, sum in double.
inline std::vector<double> brute_force_prevalence(const ParticleStore& store, std::size_t disease,
                                                  const ConditioningSet& cond) {
  const std::size_t P = store.particles();
  std::vector<double> num(P, 0.0);
  std::vector<double> den(P, 0.0);
  for (std::size_t cell = 0; cell < store.grid.size(); ++cell) {
    if (!cond.admits(store.grid, cell)) continue;
    const auto q = store.quantized(cell, disease);
    const auto w = store.cell_weights(cell);
    for (std::size_t b = 0; b < P; ++b) {
      num[b] += static_cast<double>(q[b]) * static_cast<double>(w[b]);
      den[b] += static_cast<double>(w[b]);
    }
  }
  for (std::size_t b = 0; b < P; ++b) num[b] = num[b] / den[b] / kQuantScale;
  return num;
}

/// A random conditioning: each dimension independently free, fixed, or a
/// random subset; retried until it admits at least one cell.
template <class Rng>
ConditioningSet random_conditioning(const GridIndex& grid, Rng& rng) {
  std::uniform_int_distribution<int> mode(0, 2);
  for (;;) {
    ConditioningSet cond(grid);
    for (std::size_t d = 0; d < grid.n_dimensions(); ++d) {
      const auto n = grid.dimension_sizes()[d];
      const int m = mode(rng);
      if (m == 1) {
        cond.fix(d, std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
      } else if (m == 2) {
        std::vector<std::size_t> levels;
        std::bernoulli_distribution keep(0.5);
        for (std::size_t v = 0; v < n; ++v) {
          if (keep(rng)) levels.push_back(v);
        }
        if (!levels.empty()) cond.restrict_to(d, levels);
      }
    }
    if (!cond.cells(grid).empty()) return cond;
  }
}

/// Coverage target for (cell, disease): the truth's predictive probability
/// for one fresh member of the cell, matching what a particle represents.
inline ValidationReport validate_store(const ParticleStore& store, const GroundTruth& truth,
                                       const ValidationOptions& opt = {}) {
  const QueryEngine engine(store);
  const auto& g = store.grid;
  const std::size_t nd = store.n_diseases();
  const std::size_t universe = g.size() * nd;
  ValidationReport rep;
  rep.level = opt.level;
  rep.pairs = std::min(opt.pairs, universe);

  auto pick = substream(opt.seed, Stream::Validation, 0);
  std::vector<std::size_t> chosen(universe);
  std::iota(chosen.begin(), chosen.end(), std::size_t{0});
  // Partial Fisher-Yates: the first `pairs` entries are a uniform sample without replacement.
  for (std::size_t i = 0; i < rep.pairs; ++i) {
    std::uniform_int_distribution<std::size_t> u(i, universe - 1);
    std::swap(chosen[i], chosen[u(pick)]);
  }
  chosen.resize(rep.pairs);

  bool any_width = false;
  std::normal_distribution<double> n01;
  for (std::size_t i = 0; i < rep.pairs; ++i) {
    const std::size_t cell = chosen[i] / nd;
    const std::size_t j = chosen[i] % nd;
    std::vector<double> particles(store.particles());
    for (std::size_t b = 0; b < particles.size(); ++b) particles[b] = store.probability(cell, j, b);
    const auto band = credible_band(particles, opt.level);
    if (band.hi > band.lo) any_width = true;
    auto rng = substream(opt.seed, Stream::Validation, i + 1);
    const double target = predictive_probability(truth.draw, g.profile(cell), n01(rng))[j];
    if (target >= band.lo && target <= band.hi) ++rep.covered;
  }
  rep.coverage = rep.pairs ? static_cast<double>(rep.covered) / static_cast<double>(rep.pairs) : 0.0;
  rep.coverage_checked = any_width && rep.pairs > 0;
  if (!any_width) rep.notice = "all bands have zero width (degenerate store); coverage check skipped";

  auto orng = substream(opt.seed, Stream::Validation, universe + 1);
  for (std::size_t k = 0; k < opt.oracle_checks; ++k) {
    const auto cond = random_conditioning(g, orng);
    const std::size_t j = k % nd;
    const auto fast = engine.aggregate(j, cond).prevalence;
    const auto slow = brute_force_prevalence(store, j, cond);
    for (std::size_t b = 0; b < fast.size(); ++b) {
      rep.max_oracle_error = std::max(rep.max_oracle_error, std::abs(fast[b] - slow[b]));
    }
    ++rep.oracle_checks;
  }
  return rep;
}

}  // namespace prevcurve

#endif  // PREVCURVE_VALIDATION_HPP
