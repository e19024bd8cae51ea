#ifndef PREVCURVE_WEIGHTS_HPP
#define PREVCURVE_WEIGHTS_HPP

// Post-stratification weights omega = p(x_rest | x_cond, data).
//
// The joint cell weight factorizes as
//   p(x) = p(demographics) * p(risk category | demographics)
// where the first factor comes from census-style margins and the second from
// a per-demographic-cell Dirichlet-multinomial posterior fitted to the survey.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prevcurve/config.hpp"
#include "prevcurve/container.hpp"
#include "prevcurve/error.hpp"
#include "prevcurve/grid.hpp"
#include "prevcurve/random.hpp"
#include "prevcurve/synthetic.hpp"

namespace prevcurve {

/// Per-dimension constraint: FREE (all levels), FIXED (one level) or SET
/// (a subset). An optional survey-year constraint restricts cohort + age.
class ConditioningSet {
public:
  enum class Mode { Free, Fixed, Set };

  ConditioningSet() = default;
  explicit ConditioningSet(const GridIndex& grid) {
    for (auto n : grid.dimension_sizes()) allowed_.emplace_back(n, 1);
  }

  std::size_t n_dimensions() const { return allowed_.size(); }

  ConditioningSet& fix(std::size_t dim, std::size_t level) { return restrict_to(dim, {level}); }

  ConditioningSet& restrict_to(std::size_t dim, const std::vector<std::size_t>& levels) {
    check_dim(dim);
    if (levels.empty()) fail(ErrorKind::InvalidArgument, "empty level set");
    std::vector<char> mask(allowed_[dim].size(), 0);
    for (auto v : levels) {
      if (v >= mask.size()) fail(ErrorKind::NotFound, "level outside grid");
      mask[v] = 1;
    }
    allowed_[dim] = std::move(mask);
    return *this;
  }

  ConditioningSet& free(std::size_t dim) {
    check_dim(dim);
    std::fill(allowed_[dim].begin(), allowed_[dim].end(), 1);
    return *this;
  }

  ConditioningSet& restrict_years(std::vector<int> years) {
    std::sort(years.begin(), years.end());
    years.erase(std::unique(years.begin(), years.end()), years.end());
    if (years_) {
      std::vector<int> both;
      std::set_intersection(years_->begin(), years_->end(), years.begin(), years.end(), std::back_inserter(both));
      years = std::move(both);
    }
    years_ = std::move(years);
    return *this;
  }

  const std::optional<std::vector<int>>& years() const { return years_; }

  Mode mode(std::size_t dim) const {
    check_dim(dim);
    const auto n = std::count(allowed_[dim].begin(), allowed_[dim].end(), 1);
    if (n == static_cast<std::ptrdiff_t>(allowed_[dim].size())) return Mode::Free;
    return n == 1 ? Mode::Fixed : Mode::Set;
  }

  bool allows(std::size_t dim, std::size_t level) const { return allowed_[dim][level] != 0; }

  std::vector<std::size_t> levels(std::size_t dim) const {
    check_dim(dim);
    std::vector<std::size_t> out;
    for (std::size_t v = 0; v < allowed_[dim].size(); ++v) {
      if (allowed_[dim][v]) out.push_back(v);
    }
    return out;
  }

  bool admits(const GridIndex& grid, std::size_t cell) const {
    for (std::size_t d = 0; d < allowed_.size(); ++d) {
      if (!allowed_[d][grid.level(cell, d)]) return false;
    }
    if (years_) return std::binary_search(years_->begin(), years_->end(), grid.year(cell));
    return true;
  }

  /// Conjunction of two conditionings on the same grid.
  ConditioningSet intersect(const ConditioningSet& other) const {
    if (other.allowed_.size() != allowed_.size()) fail(ErrorKind::InvalidArgument, "conditioning sets differ in shape");
    ConditioningSet out = *this;
    for (std::size_t d = 0; d < allowed_.size(); ++d) {
      for (std::size_t v = 0; v < allowed_[d].size(); ++v) out.allowed_[d][v] = allowed_[d][v] && other.allowed_[d][v];
    }
    if (other.years_) out.restrict_years(*other.years_);
    return out;
  }

  bool empty_domain() const {
    for (const auto& m : allowed_) {
      if (std::none_of(m.begin(), m.end(), [](char c) { return c != 0; })) return true;
    }
    return years_ && years_->empty();
  }

  /// Every cell id admitted, in increasing order. Loops only over allowed levels.
  std::vector<std::size_t> cells(const GridIndex& grid) const {
    std::vector<std::size_t> out;
    if (empty_domain()) return out;
    const auto locs = levels(0);
    const auto cohs = levels(1);
    const auto ages = levels(2);
    std::vector<std::size_t> bins;
    for (std::size_t b = 0; b < grid.n_binary_combos(); ++b) {
      bool ok = true;
      for (std::size_t d = 3; d < allowed_.size() && ok; ++d) ok = allowed_[d][grid.level(b, d)] != 0;
      if (ok) bins.push_back(b);
    }
    for (auto l : locs) {
      for (auto c : cohs) {
        for (auto a : ages) {
          if (years_) {
            const int y = grid.cohorts()[c] + grid.age_min() + static_cast<int>(a);
            if (!std::binary_search(years_->begin(), years_->end(), y)) continue;
          }
          const auto base = grid.cell_id(l, c, a, 0);
          for (auto b : bins) out.push_back(base + b);
        }
      }
    }
    return out;
  }

private:
  void check_dim(std::size_t dim) const {
    if (dim >= allowed_.size()) fail(ErrorKind::InvalidArgument, "dimension index out of range");
  }

  std::vector<std::vector<char>> allowed_;
  std::optional<std::vector<int>> years_;
};

struct EmpiricalWeights {
  std::vector<double> omega;  // empty when zero_support
  std::size_t matches = 0;
  bool zero_support = false;
};

inline bool in_demographic_cell(const GridIndex& grid, const CovariateProfile& p, const DemographicCell& cell) {
  return p.location == cell.location && p.cohort == grid.cohorts()[cell.cohort] && p.sex == cell.sex;
}

/// Relative frequencies of each risk category among survey records in `cell`.
inline EmpiricalWeights empirical_weights(const SurveySample& sample, const GridIndex& grid, const DemographicCell& cell) {
  const std::size_t ncat = grid.n_risk_categories();
  std::vector<std::size_t> joint(ncat, 0);
  std::size_t marginal = 0;
  for (const auto& p : sample.records) {
    if (!in_demographic_cell(grid, p, cell)) continue;
    ++marginal;
    ++joint[p.risk];
  }
  EmpiricalWeights out;
  out.matches = marginal;
  if (marginal == 0) {
    out.zero_support = true;
    return out;
  }
  out.omega.resize(ncat);
  for (std::size_t k = 0; k < ncat; ++k) out.omega[k] = static_cast<double>(joint[k]) / static_cast<double>(marginal);
  return out;
}

enum class WeightSupport : std::uint8_t { Observed = 0, RegionPooled = 1, NationalPooled = 2, PriorOnly = 3 };

inline const char* to_string(WeightSupport s) {
  switch (s) {
    case WeightSupport::Observed: return "observed";
    case WeightSupport::RegionPooled: return "region-pooled";
    case WeightSupport::NationalPooled: return "national-pooled";
    case WeightSupport::PriorOnly: return "prior-only";
  }
  return "?";
}

struct CellWeights {
  std::vector<double> mean;                     // closed-form posterior mean
  std::vector<std::vector<double>> replicates;  // W posterior draws
  std::vector<double> counts;                   // counts the posterior was fitted to
  WeightSupport support = WeightSupport::Observed;
};

/// Dirichlet(counts + alpha) posterior: closed-form mean and W draws.
template <class Rng>
CellWeights dirichlet_posterior(std::span<const double> counts, double alpha, std::size_t W, Rng& rng) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) fail(ErrorKind::InvalidArgument, "prior alpha must be positive");
  if (W < 1) fail(ErrorKind::InvalidArgument, "replicate count must be at least 1");
  CellWeights out;
  out.counts.assign(counts.begin(), counts.end());
  std::vector<double> post(counts.size());
  double total = 0.0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    post[k] = counts[k] + alpha;
    total += post[k];
  }
  out.mean.resize(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k) out.mean[k] = post[k] / total;
  out.replicates.reserve(W);
  for (std::size_t w = 0; w < W; ++w) out.replicates.push_back(detail::dirichlet(std::span<const double>(post), rng));
  return out;
}

inline std::vector<double> category_counts(const SurveySample& sample, const GridIndex& grid,
                                           const std::vector<DemographicCell>& cells) {
  std::vector<double> counts(grid.n_risk_categories(), 0.0);
  for (const auto& p : sample.records) {
    for (const auto& c : cells) {
      if (in_demographic_cell(grid, p, c)) {
        counts[p.risk] += 1.0;
        break;
      }
    }
  }
  return counts;
}

/// Posterior for one demographic cell without any pooling fallback. The
/// random stream depends only on (seed, demographic id).
inline CellWeights dirichlet_weight_posterior(const SurveySample& sample, const GridConfig& cfg,
                                              const DemographicCell& cell, double alpha, std::size_t W,
                                              std::uint64_t seed) {
  const GridIndex grid(cfg);
  const DemographicIndex demo(cfg);
  const auto counts = category_counts(sample, grid, {cell});
  auto rng = substream(seed, Stream::WeightPosterior, demo.id(cell));
  return dirichlet_posterior(std::span<const double>(counts), alpha, W, rng);
}

struct WeightTable {
  std::size_t n_categories = 0;
  std::size_t replicates = 0;
  double alpha = 0.5;
  std::uint64_t seed = 0;
  std::vector<CellWeights> cells;  // indexed by demographic id
};

/// Posterior per demographic cell. Cells with no survey records borrow the
/// counts of their region (same cohort and sex), then of the whole country.
inline WeightTable estimate_weight_table(const SurveySample& sample, const GridConfig& cfg, double alpha,
                                         std::size_t W, std::uint64_t seed) {
  const GridIndex grid(cfg);
  const DemographicIndex demo(cfg);
  const std::size_t ncat = grid.n_risk_categories();

  std::vector<std::vector<double>> counts(demo.size(), std::vector<double>(ncat, 0.0));
  for (const auto& p : sample.records) {
    const DemographicCell c{p.location, grid.cohort_index(p.cohort), p.sex};
    counts[demo.id(c)][p.risk] += 1.0;
  }
  auto total = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); };

  WeightTable table;
  table.n_categories = ncat;
  table.replicates = W;
  table.alpha = alpha;
  table.seed = seed;
  table.cells.resize(demo.size());
  for (std::size_t d = 0; d < demo.size(); ++d) {
    const auto cell = demo.cell(d);
    std::vector<double> use = counts[d];
    auto support = WeightSupport::Observed;
    if (total(use) == 0.0) {
      support = WeightSupport::RegionPooled;
      std::fill(use.begin(), use.end(), 0.0);
      for (auto l : cfg.locations_in_region(cfg.regions[cell.location])) {
        const auto& src = counts[demo.id({l, cell.cohort, cell.sex})];
        for (std::size_t k = 0; k < ncat; ++k) use[k] += src[k];
      }
    }
    if (total(use) == 0.0) {
      support = WeightSupport::NationalPooled;
      for (std::size_t l = 0; l < cfg.n_locations(); ++l) {
        const auto& src = counts[demo.id({l, cell.cohort, cell.sex})];
        for (std::size_t k = 0; k < ncat; ++k) use[k] += src[k];
      }
    }
    if (total(use) == 0.0) support = WeightSupport::PriorOnly;
    auto rng = substream(seed, Stream::WeightPosterior, d);
    table.cells[d] = dirichlet_posterior(std::span<const double>(use), alpha, W, rng);
    table.cells[d].support = support;
  }
  return table;
}

/// Full-grid joint weights, one vector per replicate plus the posterior-mean vector.
struct JointWeights {
  std::size_t n_cells = 0;
  std::size_t replicates = 0;
  std::vector<double> values;  // replicates x n_cells
  std::vector<double> mean;    // built from posterior means

  std::span<const double> replicate(std::size_t r) const {
    return std::span<const double>(values).subspan(r * n_cells, n_cells);
  }
};

/// p(x) = count(demographic cell) / total / n_ages * omega(risk | demographic cell).
inline JointWeights demographic_decomposition(const GridIndex& grid, const DemographicMargins& margins,
                                              const WeightTable& table) {
  if (margins.counts.size() != table.cells.size()) {
    fail(ErrorKind::InvalidArgument, "margins do not cover every demographic cell of the weight table");
  }
  if (table.n_categories != grid.n_risk_categories()) fail(ErrorKind::InvalidArgument, "weight table category mismatch");
  const auto total = static_cast<double>(margins.total());
  if (!(total > 0.0)) fail(ErrorKind::InvalidArgument, "margins total population is zero");
  JointWeights j;
  j.n_cells = grid.size();
  j.replicates = table.replicates;
  j.values.resize(j.replicates * j.n_cells);
  j.mean.resize(j.n_cells);
  const double per_age = 1.0 / static_cast<double>(grid.n_ages());
  for (std::size_t cell = 0; cell < grid.size(); ++cell) {
    const auto d = grid.demographic_id(cell);
    if (d >= margins.counts.size()) fail(ErrorKind::NotFound, "missing demographic cell " + std::to_string(d));
    const auto k = grid.risk_category(cell);
    const double share = static_cast<double>(margins.counts[d]) / total * per_age;
    const auto& cw = table.cells[d];
    j.mean[cell] = share * cw.mean[k];
    for (std::size_t r = 0; r < j.replicates; ++r) j.values[r * j.n_cells + cell] = share * cw.replicates[r][k];
  }
  return j;
}

/// Restriction of a joint weight vector to the admitted cells, renormalized.
inline std::vector<std::pair<std::size_t, double>> marginalize_weights(const GridIndex& grid,
                                                                       std::span<const double> joint,
                                                                       const ConditioningSet& cond) {
  if (joint.size() != grid.size()) fail(ErrorKind::InvalidArgument, "joint weight vector does not match grid");
  std::vector<std::pair<std::size_t, double>> out;
  double total = 0.0;
  for (auto cell : cond.cells(grid)) {
    out.emplace_back(cell, joint[cell]);
    total += joint[cell];
  }
  if (out.empty() || !(total > 0.0)) fail(ErrorKind::EmptySubgroup, "conditioning set has zero population weight");
  for (auto& [cell, w] : out) w /= total;
  return out;
}

// ---------------------------------------------------------------------------
// Files

/// Margins plus conditional tables: everything needed for p(x).
struct WeightsBundle {
  DemographicMargins margins;
  WeightTable table;
};

inline nlohmann::json weights_meta(const WeightsBundle& b) {
  nlohmann::json support = nlohmann::json::array();
  for (const auto& c : b.table.cells) support.push_back(static_cast<int>(c.support));
  return {{"n_demographic_cells", b.table.cells.size()},
          {"n_categories", b.table.n_categories},
          {"replicates", b.table.replicates},
          {"alpha", b.table.alpha},
          {"seed", b.table.seed},
          {"support", support}};
}

inline void serialize_weights(ByteWriter& w, const WeightsBundle& b) {
  w.put_span(std::span<const std::uint64_t>(b.margins.counts));
  for (const auto& c : b.table.cells) {
    w.put_span(std::span<const double>(c.counts));
    w.put_span(std::span<const double>(c.mean));
    for (const auto& r : c.replicates) w.put_span(std::span<const double>(r));
  }
}

inline WeightsBundle deserialize_weights(ByteReader& r, const nlohmann::json& meta, const GridConfig& cfg) {
  WeightsBundle b;
  std::size_t ndemo = 0;
  std::vector<int> support;
  try {
    ndemo = meta.at("n_demographic_cells").get<std::size_t>();
    b.table.n_categories = meta.at("n_categories").get<std::size_t>();
    b.table.replicates = meta.at("replicates").get<std::size_t>();
    b.table.alpha = meta.at("alpha").get<double>();
    b.table.seed = meta.at("seed").get<std::uint64_t>();
    support = meta.at("support").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::StoreCorrupt, std::string("bad weights metadata: ") + e.what());
  }
  b.margins.index = DemographicIndex(cfg);
  if (ndemo != b.margins.index.size() || support.size() != ndemo || b.table.n_categories != cfg.n_risk_categories()) {
    fail(ErrorKind::StoreCorrupt, "weights section does not match the grid");
  }
  b.margins.counts.resize(ndemo);
  r.get_into(std::span<std::uint64_t>(b.margins.counts));
  const auto ncat = b.table.n_categories;
  b.table.cells.resize(ndemo);
  for (std::size_t d = 0; d < ndemo; ++d) {
    auto& c = b.table.cells[d];
    c.support = static_cast<WeightSupport>(support[d]);
    c.counts.resize(ncat);
    c.mean.resize(ncat);
    r.get_into(std::span<double>(c.counts));
    r.get_into(std::span<double>(c.mean));
    c.replicates.assign(b.table.replicates, std::vector<double>(ncat));
    for (auto& rep : c.replicates) r.get_into(std::span<double>(rep));
  }
  return b;
}

inline void write_weights(const std::string& path, const GridConfig& cfg, const WeightsBundle& b) {
  auto meta = weights_meta(b);
  meta["grid"] = cfg.to_json();
  meta["grid_digest"] = cfg.digest();
  ByteWriter w;
  serialize_weights(w, b);
  write_container(path, ContainerKind::Weights, meta, w.bytes());
}

inline WeightsBundle read_weights(const std::string& path, const GridConfig& cfg) {
  const auto c = read_container(path, ContainerKind::Weights);
  if (c.meta.value("grid_digest", std::string{}) != cfg.digest()) {
    fail(ErrorKind::InputError, path + ": weights were estimated for a different grid");
  }
  ByteReader r(c.payload);
  auto b = deserialize_weights(r, c.meta, cfg);
  if (r.remaining() != 0) fail(ErrorKind::StoreCorrupt, path + ": trailing bytes in weights payload");
  return b;
}

namespace detail {

/// Type-7 quantile of an unsorted copy.
inline double quantile7(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace detail

/// Text dump: cell, category, mean, q05, q95.
inline void write_weights_debug(const std::string& path, const GridConfig& cfg, const WeightTable& t) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::InputError, "cannot write " + path);
  const DemographicIndex demo(cfg);
  out << "cell,category,mean,q05,q95\n" << std::setprecision(10);
  for (std::size_t d = 0; d < t.cells.size(); ++d) {
    const auto c = demo.cell(d);
    const std::string label = cfg.locations[c.location] + "/" + std::to_string(cfg.cohorts[c.cohort]) + "/" +
                              std::to_string(c.sex);
    for (std::size_t k = 0; k < t.n_categories; ++k) {
      std::vector<double> draws;
      for (const auto& r : t.cells[d].replicates) draws.push_back(r[k]);
      out << label << ',' << k << ',' << t.cells[d].mean[k] << ',' << detail::quantile7(draws, 0.05) << ','
          << detail::quantile7(draws, 0.95) << '\n';
    }
  }
}

}  // namespace prevcurve

#endif  // PREVCURVE_WEIGHTS_HPP
