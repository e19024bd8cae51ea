#ifndef PREVCURVE_QUERY_HPP
#define PREVCURVE_QUERY_HPP

// Subgroup prevalence by weighted summation over stored particles:
//
//   prevalence_b = sum_cells pi_b(cell) w_b(cell) / sum_cells w_b(cell)
//
// Each particle carries its own weight replicate, so the estimator is
// self-normalized per particle and weight uncertainty flows into the bands.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prevcurve/error.hpp"
#include "prevcurve/grid.hpp"
#include "prevcurve/particle_store.hpp"
#include "prevcurve/weights.hpp"

namespace prevcurve {

inline constexpr std::size_t kMaxStrata = 5;
inline constexpr double kDefaultBandLevel = 0.90;

struct Band {
  double lo = 0.0;
  double hi = 0.0;
};

/// Central interval at `level` using type-7 quantiles (linear interpolation
/// between order statistics).
inline Band credible_band(std::span<const double> particles, double level = kDefaultBandLevel) {
  if (particles.empty()) fail(ErrorKind::InvalidArgument, "credible band of an empty particle vector");
  if (!(level > 0.0 && level < 1.0)) fail(ErrorKind::InvalidArgument, "band level must lie in (0, 1)");
  std::vector<double> v(particles.begin(), particles.end());
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const double h = (static_cast<double>(v.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  const double tail = 0.5 * (1.0 - level);
  return {q(tail), q(1.0 - tail)};
}

/// Per-particle subgroup prevalence together with the summed weight.
struct Aggregate {
  std::vector<double> prevalence;
  std::vector<double> weight;
};

enum class View { ByYear, ByAge };
enum class Scale { Prevalence, Per100k, Absolute };

inline const char* to_string(View v) { return v == View::ByYear ? "year" : "age"; }
inline const char* to_string(Scale s) {
  switch (s) {
    case Scale::Prevalence: return "prevalence";
    case Scale::Per100k: return "per_100k";
    case Scale::Absolute: return "absolute";
  }
  return "?";
}

struct PrevalenceQuery {
  std::string disease;
  View view = View::ByYear;
  ConditioningSet conditioning;
  std::optional<std::size_t> stratify_by;
  bool bands = false;
  double band_level = kDefaultBandLevel;
  // false: every particle uses the posterior-mean weights (parameter uncertainty only)
  bool weight_uncertainty = true;
};

struct CurvePoint {
  int x = 0;  // year or age
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  double weight = 0.0;      // population share of the subgroup, averaged over particles
  double population = 0.0;  // expected head count from margins and mean weights
  Aggregate particles;
};

struct PrevalenceCurve {
  std::string label;
  std::optional<std::size_t> level;  // stratum level, if stratified
  std::vector<CurvePoint> points;
};

struct CurveSet {
  std::string disease;
  View view = View::ByYear;
  bool bands = false;
  double band_level = kDefaultBandLevel;
  Scale scale = Scale::Prevalence;
  std::optional<std::string> stratify_by;
  std::vector<PrevalenceCurve> series;
};

/// Read-only view over a store; safe to share across threads.
class QueryEngine {
public:
  /// `population_margins` replaces the embedded margins for head counts only;
  /// particle weights always come from the store.
  explicit QueryEngine(const ParticleStore& store, const DemographicMargins* population_margins = nullptr)
      : store_(store) {
    const auto joint = demographic_decomposition(store.grid, store.weights.margins, store.weights.table);
    mean_weights_ = joint.mean;
    const auto& margins = population_margins ? *population_margins : store.weights.margins;
    if (margins.counts.size() != store.weights.margins.counts.size()) {
      fail(ErrorKind::InputError, "population margins do not cover the store's demographic cells");
    }
    const auto& cells = store.weights.table.cells;
    headcount_.resize(store.grid.size());
    const double per_age = 1.0 / static_cast<double>(store.grid.n_ages());
    for (std::size_t cell = 0; cell < headcount_.size(); ++cell) {
      const auto d = store.grid.demographic_id(cell);
      headcount_[cell] = static_cast<double>(margins.counts[d]) * per_age * cells[d].mean[store.grid.risk_category(cell)];
    }
  }

  const ParticleStore& store() const { return store_; }
  const GridIndex& grid() const { return store_.grid; }
  const GridConfig& config() const { return store_.config; }

  Aggregate aggregate(std::size_t disease, const ConditioningSet& cond, bool weight_uncertainty = true) const {
    if (disease >= store_.n_diseases()) fail(ErrorKind::NotFound, "unknown disease index");
    const std::size_t P = store_.particles();
    std::vector<double> num(P, 0.0);
    std::vector<double> den(P, 0.0);
    const auto cells = cond.cells(store_.grid);
    if (cells.empty()) fail(ErrorKind::EmptySubgroup, "conditioning set selects no grid cell");
    for (const auto cell : cells) {
      const auto q = store_.quantized(cell, disease);
      if (weight_uncertainty) {
        const auto w = store_.cell_weights(cell);
        for (std::size_t b = 0; b < P; ++b) {
          const double wb = w[b];
          num[b] += static_cast<double>(q[b]) * wb;
          den[b] += wb;
        }
      } else {
        const double wb = static_cast<float>(mean_weights_[cell]);
        for (std::size_t b = 0; b < P; ++b) {
          num[b] += static_cast<double>(q[b]) * wb;
          den[b] += wb;
        }
      }
    }
    Aggregate out;
    out.prevalence.resize(P);
    for (std::size_t b = 0; b < P; ++b) {
      if (!(den[b] > 0.0)) fail(ErrorKind::EmptySubgroup, "conditioning set has zero population weight");
      out.prevalence[b] = num[b] / den[b] / kQuantScale;
    }
    out.weight = std::move(den);
    return out;
  }

  /// Expected head count of the subgroup: sum over cells of count(demographic cell) * mean omega.
  double population(const ConditioningSet& cond) const {
    double total = 0.0;
    for (const auto cell : cond.cells(store_.grid)) total += headcount_[cell];
    return total;
  }

  std::vector<std::string> level_labels(std::size_t dim) const {
    const auto& g = store_.grid;
    const auto& cfg = store_.config;
    std::vector<std::string> out;
    const auto n = g.dimension_sizes().at(dim);
    for (std::size_t v = 0; v < n; ++v) {
      if (dim == 0) {
        out.push_back(cfg.locations[v]);
      } else if (dim == 1) {
        out.push_back(std::to_string(cfg.cohorts[v]));
      } else if (dim == 2) {
        out.push_back(std::to_string(cfg.age_min + static_cast<int>(v)));
      } else {
        out.push_back(g.dimension_names()[dim] + "=" + std::to_string(v));
      }
    }
    return out;
  }

  CurveSet curve(const PrevalenceQuery& query) const {
    const auto& g = store_.grid;
    const auto& cfg = store_.config;
    const std::size_t disease = cfg.diseases.index_of(query.disease);
    if (!(query.band_level > 0.0 && query.band_level < 1.0)) {
      fail(ErrorKind::InvalidArgument, "band level must lie in (0, 1)");
    }
    if (query.conditioning.n_dimensions() != g.n_dimensions()) {
      fail(ErrorKind::InvalidArgument, "conditioning set does not match the grid");
    }

    CurveSet out;
    out.disease = query.disease;
    out.view = query.view;
    out.bands = query.bands;
    out.band_level = query.band_level;

    std::vector<std::optional<std::size_t>> strata{std::nullopt};
    if (query.stratify_by) {
      const auto dim = *query.stratify_by;
      if (dim >= g.n_dimensions()) fail(ErrorKind::InvalidArgument, "stratification dimension out of range");
      if (query.conditioning.mode(dim) == ConditioningSet::Mode::Fixed) {
        fail(ErrorKind::InvalidArgument, "cannot stratify by '" + g.dimension_names()[dim] + "': it is fixed by a filter");
      }
      const auto levels = query.conditioning.levels(dim);
      if (levels.size() > kMaxStrata) {
        const auto labels = level_labels(dim);
        std::string msg = "stratifying by '" + g.dimension_names()[dim] + "' gives " + std::to_string(levels.size()) +
                          " curves; at most 5 are shown. Restrict it with filters to at most 5 of:";
        for (auto v : levels) msg += " " + labels[v];
        fail(ErrorKind::TooManyLevels, msg);
      }
      out.stratify_by = g.dimension_names()[dim];
      strata.assign(levels.begin(), levels.end());
    }

    std::vector<int> axis;
    if (query.view == View::ByYear) {
      for (int y = cfg.year_min; y <= cfg.year_max; ++y) axis.push_back(y);
    } else {
      for (auto a : query.conditioning.levels(2)) axis.push_back(cfg.age_min + static_cast<int>(a));
    }

    const auto labels = query.stratify_by ? level_labels(*query.stratify_by) : std::vector<std::string>{};
    bool any_point = false;
    for (const auto& stratum : strata) {
      PrevalenceCurve series;
      series.level = stratum;
      series.label = stratum ? labels[*stratum] : std::string("all");
      ConditioningSet base = query.conditioning;
      if (stratum) base.fix(*query.stratify_by, *stratum);
      for (const int x : axis) {
        ConditioningSet point = base;
        if (query.view == View::ByYear) {
          point.restrict_years({x});
        } else {
          point = point.intersect(ConditioningSet(g).fix(2, static_cast<std::size_t>(x - cfg.age_min)));
        }
        if (point.cells(g).empty()) continue;  // no cohort reaches this year/age under the filters
        CurvePoint p;
        p.x = x;
        p.particles = aggregate(disease, point, query.weight_uncertainty);
        const auto& v = p.particles.prevalence;
        double sum = 0.0;
        for (double e : v) sum += e;
        p.mean = sum / static_cast<double>(v.size());
        double wsum = 0.0;
        for (double e : p.particles.weight) wsum += e;
        p.weight = wsum / static_cast<double>(v.size());
        p.population = population(point);
        if (query.bands) {
          const auto band = credible_band(v, query.band_level);
          p.lo = band.lo;
          p.hi = band.hi;
        }
        series.points.push_back(std::move(p));
      }
      any_point = any_point || !series.points.empty();
      out.series.push_back(std::move(series));
    }
    if (!any_point) fail(ErrorKind::EmptySubgroup, "no grid cell matches the filters on any curve point");
    return out;
  }

private:
  const ParticleStore& store_;
  std::vector<double> mean_weights_;
  std::vector<double> headcount_;
};

/// Free-function form of QueryEngine::aggregate, returning per-particle prevalences.
inline std::vector<double> aggregate_prevalence(const QueryEngine& engine, std::size_t disease,
                                                const ConditioningSet& cond, bool weight_uncertainty = true) {
  return engine.aggregate(disease, cond, weight_uncertainty).prevalence;
}

/// Rescales means and bands: PER_100K by 100,000, ABSOLUTE by the point's population.
inline CurveSet expected_cases(CurveSet curves, Scale scale) {
  if (curves.scale != Scale::Prevalence) fail(ErrorKind::InvalidArgument, "curve is already scaled");
  curves.scale = scale;
  if (scale == Scale::Prevalence) return curves;
  for (auto& s : curves.series) {
    for (auto& p : s.points) {
      double factor = 100000.0;
      if (scale == Scale::Absolute) {
        if (!(p.population > 0.0)) fail(ErrorKind::NotFound, "margins do not cover the subgroup at " + std::to_string(p.x));
        factor = p.population;
      }
      p.mean *= factor;
      p.lo *= factor;
      p.hi *= factor;
    }
  }
  return curves;
}

/// Aggregate-only JSON: series share the union axis; missing points are null.
inline nlohmann::json curve_to_json(const CurveSet& c, const GridConfig& cfg) {
  std::vector<int> axis;
  for (const auto& s : c.series) {
    for (const auto& p : s.points) axis.push_back(p.x);
  }
  std::sort(axis.begin(), axis.end());
  axis.erase(std::unique(axis.begin(), axis.end()), axis.end());

  nlohmann::json j;
  j["disease"] = c.disease;
  j["disease_name"] = cfg.diseases.names[cfg.diseases.index_of(c.disease)];
  j["view"] = to_string(c.view);
  j["axis"] = axis;
  j["scale"] = {{"kind", to_string(c.scale)}};
  if (c.scale == Scale::Per100k) j["scale"]["per"] = 100000;
  j["bands"] = c.bands;
  if (c.bands) j["band_level"] = c.band_level;
  j["stratify"] = c.stratify_by ? nlohmann::json(*c.stratify_by) : nlohmann::json(nullptr);
  auto& series = j["series"] = nlohmann::json::array();
  for (const auto& s : c.series) {
    nlohmann::json mean = nlohmann::json::array();
    nlohmann::json lo = nlohmann::json::array();
    nlohmann::json hi = nlohmann::json::array();
    nlohmann::json weight = nlohmann::json::array();
    nlohmann::json population = nlohmann::json::array();
    std::size_t k = 0;
    for (const int x : axis) {
      if (k < s.points.size() && s.points[k].x == x) {
        const auto& p = s.points[k++];
        mean.push_back(p.mean);
        lo.push_back(p.lo);
        hi.push_back(p.hi);
        weight.push_back(p.weight);
        population.push_back(p.population);
      } else {
        mean.push_back(nullptr);
        lo.push_back(nullptr);
        hi.push_back(nullptr);
        weight.push_back(nullptr);
        population.push_back(nullptr);
      }
    }
    nlohmann::json e = {{"label", s.label}, {"mean", mean}, {"weight", weight}, {"population", population}};
    if (c.bands) {
      e["lo"] = lo;
      e["hi"] = hi;
    }
    series.push_back(std::move(e));
  }
  return j;
}

}  // namespace prevcurve

#endif  // PREVCURVE_QUERY_HPP
