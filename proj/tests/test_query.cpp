#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "prevcurve/query.hpp"
#include "prevcurve/validation.hpp"

using namespace prevcurve;
using prevcurve::fixtures::build_store;
using prevcurve::fixtures::StoreOptions;

namespace {

const fixtures::Built& desk() {
  static const auto b = build_store({.seed = 3, .draws = 600, .particles = 60});
  return b;
}

// A 136,960-cell store with two particles: enough to check axes and level caps.
const fixtures::Built& supplement() {
  static const auto b = build_store({.config = "regional_extended.cfg", .seed = 4, .draws = 2, .particles = 2});
  return b;
}

PrevalenceQuery query(const GridIndex& g, const std::string& disease = "tumors") {
  PrevalenceQuery q;
  q.disease = disease;
  q.conditioning = ConditioningSet(g);
  return q;
}

CurvePoint point(int x, double mean, double lo, double hi) {
  CurvePoint p;
  p.x = x;
  p.mean = mean;
  p.lo = lo;
  p.hi = hi;
  return p;
}

}  // namespace

TEST(Band, ConstantVectorCollapses) {
  const std::vector<double> v(300, 0.37);
  const auto b = credible_band(v);
  EXPECT_EQ(b.lo, 0.37);
  EXPECT_EQ(b.hi, 0.37);
}

// Reference from numpy.quantile (linear method).
TEST(Band, TypeSevenQuantiles) {
  const std::vector<double> v = {0.3, 0.1, 0.7, 0.2, 0.9, 0.5};
  const auto b = credible_band(v, 0.9);
  EXPECT_NEAR(b.lo, 0.125, 1e-15);
  EXPECT_NEAR(b.hi, 0.85, 1e-15);
  const auto h = credible_band(v, 0.5);
  EXPECT_NEAR(h.lo, 0.225, 1e-15);
  EXPECT_NEAR(h.hi, 0.6499999999999999, 1e-15);
}

TEST(Band, LevelNearOneReachesExtremes) {
  const std::vector<double> v = {4, 1, 3, 2, 5};
  const auto b = credible_band(v, 1.0 - 1e-12);
  EXPECT_NEAR(b.lo, 1.0, 1e-9);
  EXPECT_NEAR(b.hi, 5.0, 1e-9);
  EXPECT_THROW(credible_band(v, 1.0), Error);
  EXPECT_THROW(credible_band(v, 0.0), Error);
}

TEST(Band, UniformOrderStatistics) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int good = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    std::vector<double> v(300);
    for (auto& x : v) x = u(rng);
    const auto b = credible_band(v, 0.90);
    if (std::abs(b.lo - 0.05) <= 0.04 && std::abs(b.hi - 0.95) <= 0.04) ++good;
  }
  EXPECT_GE(good, 950);
}

TEST(Band, NestedInLevel) {
  std::mt19937_64 rng(22);
  std::normal_distribution<double> n01;
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> v(300);
    for (auto& x : v) x = n01(rng);
    const auto inner = credible_band(v, 0.5);
    const auto outer = credible_band(v, 0.9);
    EXPECT_LE(outer.lo, inner.lo);
    EXPECT_GE(outer.hi, inner.hi);
  }
}

TEST(Aggregate, SingleCellReturnsItsParticles) {
  const auto& b = desk();
  const QueryEngine e(b.store);
  const auto& g = b.store.grid;
  for (std::size_t cell : {0u, 17u, 250u, 479u}) {
    ConditioningSet c(g);
    for (std::size_t d = 0; d < g.n_dimensions(); ++d) c.fix(d, g.level(cell, d));
    const auto agg = e.aggregate(2, c);
    for (std::size_t p = 0; p < b.store.particles(); ++p) {
      EXPECT_NEAR(agg.prevalence[p], b.store.probability(cell, 2, p), 1e-15);
    }
  }
}

TEST(Aggregate, EqualWeightsAverage) {
  auto cfg = parse_config_text(
                 "locations = A B\ncohorts = 1960\nage_min = 55\nage_max = 55\nyear_min = 2015\nyear_max = 2015\n"
                 "risk_factors =\ndiseases = d\nkernel_synthetic = 1 0.5 1\n")
                 .grid;
  ParticleStore s;
  s.config = cfg;
  s.grid = GridIndex(cfg);
  s.header.particles = 1;
  s.header.n_cells = 2;
  s.header.diseases = {"d"};
  s.allocate();
  s.weights.margins = {DemographicIndex(cfg), {10, 10}};
  s.weights.table.n_categories = 1;
  s.weights.table.replicates = 1;
  s.weights.table.cells.assign(2, CellWeights{{1.0}, {{1.0}}, {0.0}, WeightSupport::Observed});
  s.raw_probabilities() = {quantize_probability(0.2), quantize_probability(0.4)};
  s.raw_weights() = {0.5f, 0.5f};
  const QueryEngine e(s);
  EXPECT_NEAR(e.aggregate(0, ConditioningSet(s.grid)).prevalence[0], 0.3, 1e-15);
}

TEST(Aggregate, MatchesFullEnumeration) {
  const auto& b = desk();
  const QueryEngine e(b.store);
  std::mt19937_64 rng(23);
  for (int rep = 0; rep < 300; ++rep) {
    auto cond = random_conditioning(b.store.grid, rng);
    if (rep % 4 == 0) cond.restrict_years({2012 + rep % 7});
    if (cond.cells(b.store.grid).empty()) continue;
    const std::size_t j = rep % 4;
    const auto fast = e.aggregate(j, cond).prevalence;
    const auto slow = brute_force_prevalence(b.store, j, cond);
    for (std::size_t p = 0; p < fast.size(); ++p) ASSERT_NEAR(fast[p], slow[p], 1e-12);
  }
}

TEST(Aggregate, Convexity) {
  const auto& b = desk();
  const QueryEngine e(b.store);
  std::mt19937_64 rng(24);
  for (int rep = 0; rep < 200; ++rep) {
    const auto cond = random_conditioning(b.store.grid, rng);
    const auto cells = cond.cells(b.store.grid);
    const auto agg = e.aggregate(1, cond);
    for (std::size_t p = 0; p < agg.prevalence.size(); ++p) {
      double lo = 1.0, hi = 0.0;
      for (auto c : cells) {
        lo = std::min(lo, b.store.probability(c, 1, p));
        hi = std::max(hi, b.store.probability(c, 1, p));
      }
      EXPECT_GE(agg.prevalence[p], lo - 1e-15);
      EXPECT_LE(agg.prevalence[p], hi + 1e-15);
    }
  }
}

TEST(Aggregate, EmptySubgroupAndUnknownDisease) {
  const auto& b = desk();
  const QueryEngine e(b.store);
  ConditioningSet c(b.store.grid);
  c.fix(1, 2).restrict_years({2010});  // 1966 cohort is 50 only in 2016
  EXPECT_THROW(e.aggregate(0, c), Error);
  EXPECT_THROW(e.aggregate(9, ConditioningSet(b.store.grid)), Error);
}

TEST(Aggregate, MeanWeightModeUsesCommonWeights) {
  const auto& b = desk();
  const QueryEngine e(b.store);
  const auto agg = e.aggregate(0, ConditioningSet(b.store.grid), false);
  for (double w : agg.weight) EXPECT_EQ(w, agg.weight.front());
}

TEST(Curve, DeskYearAxisHasElevenPoints) {
  const auto& b = desk();
  const QueryEngine e(b.store);
  const auto c = e.curve(query(b.store.grid));
  ASSERT_EQ(c.series.size(), 1u);
  ASSERT_EQ(c.series[0].points.size(), 11u);
  EXPECT_EQ(c.series[0].points.front().x, 2010);
  EXPECT_EQ(c.series[0].points.back().x, 2020);
}

TEST(Curve, DeskAgeAxisHasFivePoints) {
  const auto& b = desk();
  const QueryEngine e(b.store);
  auto q = query(b.store.grid);
  q.view = View::ByAge;
  EXPECT_EQ(e.curve(q).series[0].points.size(), 5u);
}

TEST(Curve, SupplementAgeAxisHasSixteenPoints) {
  const auto& b = supplement();
  const QueryEngine e(b.store);
  auto q = query(b.store.grid);
  q.view = View::ByAge;
  q.conditioning.fix(0, 3);
  const auto c = e.curve(q);
  ASSERT_EQ(c.series[0].points.size(), 16u);
  EXPECT_EQ(c.series[0].points.front().x, 50);
  EXPECT_EQ(c.series[0].points.back().x, 65);
}

TEST(Curve, YearPointJoinsCohortAndAge) {
  const auto& b = desk();
  const QueryEngine e(b.store);
  const auto& g = b.store.grid;
  const auto c = e.curve(query(g));
  for (const auto& p : c.series[0].points) {
    ConditioningSet cond(g);
    cond.restrict_years({p.x});
    for (auto cell : cond.cells(g)) ASSERT_EQ(g.profile(cell).survey_year(), p.x);
    double mean = 0.0;
    for (double v : brute_force_prevalence(b.store, 2, cond)) mean += v;
    EXPECT_NEAR(p.mean, mean / b.store.particles(), 1e-12);
  }
}

TEST(Curve, StratifiedMixtureEqualsPooled) {
  const auto& b = desk();
  const QueryEngine e(b.store);
  for (const auto* dim : {"smoking", "cohort", "location"}) {
    auto q = query(b.store.grid);
    q.stratify_by = b.store.grid.dimension_index(dim);
    const auto strat = e.curve(q);
    q.stratify_by.reset();
    const auto pooled = e.curve(q);
    if (std::string(dim) == "smoking") {
      ASSERT_EQ(strat.series.size(), 2u);
    }
    for (const auto& pp : pooled.series[0].points) {
      for (std::size_t p = 0; p < b.store.particles(); ++p) {
        double num = 0.0, den = 0.0;
        for (const auto& s : strat.series) {
          for (const auto& sp : s.points) {
            if (sp.x != pp.x) continue;
            num += sp.particles.prevalence[p] * sp.particles.weight[p];
            den += sp.particles.weight[p];
          }
        }
        EXPECT_NEAR(num / den, pp.particles.prevalence[p], 1e-10);
      }
    }
  }
}

TEST(Curve, StratificationCap) {
  const auto& b = supplement();
  const QueryEngine e(b.store);
  auto q = query(b.store.grid);
  q.stratify_by = 2;  // 16 ages
  try {
    e.curve(q);
    FAIL() << "expected TOO-MANY-LEVELS";
  } catch (const Error& err) {
    EXPECT_EQ(err.kind(), ErrorKind::TooManyLevels);
    EXPECT_NE(std::string(err.what()).find("at most 5"), std::string::npos);
  }
  q.conditioning.restrict_to(2, {0, 1, 2, 3, 4});
  EXPECT_EQ(e.curve(q).series.size(), 5u);
  q.conditioning.restrict_to(2, {0, 1, 2, 3, 4, 5});
  EXPECT_THROW(e.curve(q), Error);
  q.stratify_by = 1;  // five cohorts
  EXPECT_EQ(e.curve(q).series.size(), 5u);
}

TEST(Curve, CannotStratifyFixedDimension) {
  const auto& b = desk();
  const QueryEngine e(b.store);
  auto q = query(b.store.grid);
  q.conditioning.fix(3, 1);
  q.stratify_by = 3;
  EXPECT_THROW(e.curve(q), Error);
}

TEST(Curve, BandsContainMean) {
  const auto& b = desk();
  const QueryEngine e(b.store);
  auto q = query(b.store.grid);
  q.bands = true;
  const auto curve = e.curve(q);
  for (const auto& p : curve.series[0].points) {
    EXPECT_LE(p.lo, p.mean);
    EXPECT_GE(p.hi, p.mean);
    EXPECT_LT(p.lo, p.hi);
  }
}

TEST(Curve, ZeroDispersionSingleReplicateGivesZeroWidth) {
  const auto b = build_store({.seed = 5, .draws = 100, .particles = 50, .dispersion = 0.0, .replicates = 1, .zero_gamma = true});
  const QueryEngine e(b.store);
  auto q = query(b.store.grid);
  q.bands = true;
  for (auto view : {View::ByYear, View::ByAge}) {
    q.view = view;
    const auto curve = e.curve(q);
    for (const auto& p : curve.series[0].points) EXPECT_EQ(p.hi - p.lo, 0.0);
  }
}

TEST(Scale, PerHundredThousand) {
  CurveSet c;
  c.series.push_back({"all", std::nullopt, {point(2017, 0.025, 0.02, 0.03), point(2018, 0.0, 0.0, 0.0)}});
  const auto s = expected_cases(c, Scale::Per100k);
  EXPECT_DOUBLE_EQ(s.series[0].points[0].mean, 2500.0);
  EXPECT_EQ(s.series[0].points[1].mean, 0.0);
  EXPECT_THROW(expected_cases(s, Scale::Absolute), Error);
}

TEST(Scale, AbsoluteUsesSubgroupPopulation) {
  const auto& b = desk();
  const QueryEngine e(b.store);
  const auto& g = b.store.grid;
  const auto& m = b.store.weights.margins;
  std::mt19937_64 rng(25);
  for (int rep = 0; rep < 50; ++rep) {
    auto q = query(g);
    q.conditioning = random_conditioning(g, rng);
    CurveSet prev;
    try {
      prev = e.curve(q);
    } catch (const Error&) {
      continue;
    }
    const auto abs = expected_cases(prev, Scale::Absolute);
    for (std::size_t k = 0; k < prev.series[0].points.size(); ++k) {
      const int year = prev.series[0].points[k].x;
      double pop = 0.0;
      for (std::size_t cell = 0; cell < g.size(); ++cell) {
        if (!q.conditioning.admits(g, cell) || g.year(cell) != year) continue;
        const auto d = g.demographic_id(cell);
        pop += static_cast<double>(m.counts[d]) / static_cast<double>(g.n_ages()) *
               b.store.weights.table.cells[d].mean[g.risk_category(cell)];
      }
      EXPECT_NEAR(abs.series[0].points[k].mean, prev.series[0].points[k].mean * pop, 1e-12 * abs.series[0].points[k].mean);
    }
  }
}

TEST(Scale, PopulationOverrideOnlyChangesHeadCounts) {
  const auto& b = desk();
  auto doubled = b.store.weights.margins;
  for (auto& c : doubled.counts) c *= 2;
  const QueryEngine plain(b.store);
  const QueryEngine over(b.store, &doubled);
  const auto q = query(b.store.grid);
  const auto a = plain.curve(q);
  const auto c = over.curve(q);
  for (std::size_t k = 0; k < a.series[0].points.size(); ++k) {
    EXPECT_EQ(a.series[0].points[k].mean, c.series[0].points[k].mean);
    EXPECT_DOUBLE_EQ(2 * a.series[0].points[k].population, c.series[0].points[k].population);
  }
}

TEST(Json, BandsOffOmitsLoHi) {
  const auto& b = desk();
  const QueryEngine e(b.store);
  auto q = query(b.store.grid);
  auto j = curve_to_json(e.curve(q), b.store.config);
  EXPECT_FALSE(j["series"][0].contains("lo"));
  EXPECT_FALSE(j.contains("band_level"));
  q.bands = true;
  j = curve_to_json(e.curve(q), b.store.config);
  EXPECT_TRUE(j["series"][0].contains("lo"));
  EXPECT_EQ(j["band_level"], 0.9);
  EXPECT_EQ(j["axis"].size(), 11u);
}

TEST(Json, MissingStratumPointsAreNull) {
  const auto& b = desk();
  const QueryEngine e(b.store);
  auto q = query(b.store.grid);
  q.stratify_by = 1;  // cohorts cover different years
  const auto j = curve_to_json(e.curve(q), b.store.config);
  ASSERT_EQ(j["series"].size(), 3u);
  EXPECT_EQ(j["series"][0]["label"], "1960");
  EXPECT_TRUE(j["series"][0]["mean"][0].is_number());   // 2010 = 1960 + 50
  EXPECT_TRUE(j["series"][2]["mean"][0].is_null());     // 1966 starts in 2016
}
