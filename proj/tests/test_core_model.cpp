#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "prevcurve/config.hpp"
#include "prevcurve/core_model.hpp"

using namespace prevcurve;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

CoefficientField random_field(std::mt19937_64& rng, bool has_sex = true, std::size_t n_risk = 3) {
  DesignLayout layout{50, 65, has_sex, n_risk};
  auto f = CoefficientField::zeros(layout, {1956, 1957, 1958, 1959, 1960}, 3, 6);
  std::normal_distribution<double> n01;
  for (auto& t : f.terms) {
    t.beta0 = n01(rng);
    t.lambda0 = std::abs(n01(rng));
    t.lambda1 = 0.1 * n01(rng);
    for (auto& v : t.xi0) v = n01(rng);
    for (auto& v : t.xi1) v = n01(rng);
  }
  return f;
}

ParameterDraw random_draw(std::mt19937_64& rng) {
  ParameterDraw d;
  d.field = random_field(rng);
  std::normal_distribution<double> n01;
  d.gamma = {n01(rng), n01(rng), n01(rng)};
  return d;
}

CovariateProfile random_profile(std::mt19937_64& rng) {
  CovariateProfile p;
  p.location = std::uniform_int_distribution<std::size_t>(0, 5)(rng);
  p.cohort = std::uniform_int_distribution<int>(1956, 1960)(rng);
  p.age = std::uniform_int_distribution<int>(50, 65)(rng);
  p.sex = std::uniform_int_distribution<unsigned>(0, 1)(rng);
  p.risk = std::uniform_int_distribution<unsigned>(0, 7)(rng);
  return p;
}

}  // namespace

// Reference values evaluated with mpmath at 30 significant digits; the
// double result may sit one ulp either side of the correctly rounded value.
TEST(InvLogit, MatchesHighPrecisionReference) {
  const double ulp2 = 2.0 * std::numeric_limits<double>::epsilon();
  const std::pair<double, double> cases[] = {{1.0, 0.7310585786300048792511592},
                                             {-1.0, 0.2689414213699951207488408},
                                             {2.5, 0.9241418199787564488066938},
                                             {-7.25, 0.0007096703991005881555106047},
                                             {20.0, 0.9999999979388463818097964}};
  for (const auto& [x, ref] : cases) EXPECT_NEAR(inv_logit(x), ref, ulp2 * ref) << x;
}

TEST(InvLogit, SymmetryPoint) { EXPECT_EQ(inv_logit(0.0), 0.5); }

TEST(InvLogit, ComplementsSumToOne) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-40.0, 40.0);
  for (int i = 0; i < 10000; ++i) {
    const double x = u(rng);
    EXPECT_LE(std::abs(inv_logit(x) + inv_logit(-x) - 1.0), 1e-15);
  }
}

TEST(InvLogit, ExtremeInputsStayInRange) {
  EXPECT_EQ(inv_logit(-800.0), 0.0);
  EXPECT_EQ(inv_logit(800.0), 1.0);
  EXPECT_THROW(inv_logit(std::numeric_limits<double>::quiet_NaN()), Error);
  EXPECT_THROW(inv_logit(kInf), Error);
}

TEST(Kernel, ZeroDistancesGiveAllOnes) {
  KernelSpec spec{{{"a", Eigen::MatrixXd::Zero(4, 4), 1.0}}};
  const auto c = kernel_correlation(spec);
  EXPECT_TRUE(c.isApprox(Eigen::MatrixXd::Ones(4, 4)));
}

TEST(Kernel, InfiniteOffDiagonalGivesIdentity) {
  Eigen::MatrixXd d = Eigen::MatrixXd::Constant(5, 5, kInf);
  d.diagonal().setZero();
  KernelSpec spec{{{"a", d, 1.0}}};
  const auto c = kernel_correlation(spec);
  EXPECT_EQ(c, Eigen::MatrixXd::Identity(5, 5));
}

TEST(Kernel, MixtureMatchesElementwiseFormula) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  Eigen::MatrixXd d1 = Eigen::MatrixXd::Zero(6, 6);
  Eigen::MatrixXd d2 = Eigen::MatrixXd::Zero(6, 6);
  for (int i = 0; i < 6; ++i) {
    for (int k = i + 1; k < 6; ++k) {
      d1(i, k) = d1(k, i) = u(rng);
      d2(i, k) = d2(k, i) = u(rng);
    }
  }
  KernelSpec spec{{{"a", d1, 0.3}, {"b", d2, 0.7}}};
  const auto m = kernel_mixture(spec);
  for (int i = 0; i < 6; ++i) {
    for (int k = 0; k < 6; ++k) {
      EXPECT_NEAR(m(i, k), 0.3 * std::exp(-d1(i, k)) + 0.7 * std::exp(-d2(i, k)), 1e-15);
    }
  }
}

// Non-PSD input; reference from an eigen-clip-and-rescale done in numpy.
TEST(Kernel, RepairsIndefiniteMixture) {
  Eigen::Matrix3d target;
  target << 1, .9, .1, .9, 1, .9, .1, .9, 1;
  Eigen::MatrixXd d = (-target.array().log()).matrix();
  KernelSpec spec{{{"a", d, 1.0}}};
  const auto c = kernel_correlation(spec);
  EXPECT_NEAR(c(0, 1), 0.7569364082167778, 1e-12);
  EXPECT_NEAR(c(1, 2), 0.7569364082167773, 1e-12);
  EXPECT_NEAR(c(0, 2), 0.14590545216823225, 1e-12);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(c);
  EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-12);
}

TEST(Kernel, RepairedOutputIsExactlySymmetricWithUnitDiagonal) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    KernelSpec spec{{{"a", synthetic_distance(9, seed, 0.2), 0.5}, {"b", synthetic_distance(9, seed + 100, 1.0), 0.5}}};
    const auto c = kernel_correlation(spec);
    EXPECT_EQ((c - c.transpose()).cwiseAbs().maxCoeff(), 0.0);
    for (int i = 0; i < 9; ++i) EXPECT_EQ(c(i, i), 1.0);
  }
}

TEST(Kernel, RejectsWeightsOffTheSimplex) {
  KernelSpec spec{{{"a", Eigen::MatrixXd::Zero(3, 3), 0.4}, {"b", Eigen::MatrixXd::Zero(3, 3), 0.4}}};
  EXPECT_THROW(kernel_correlation(spec), Error);
  KernelSpec asym{{{"a", Eigen::MatrixXd::Zero(3, 3), 1.0}}};
  asym.components[0].distance(0, 1) = 1.0;
  EXPECT_THROW(asym.validate(), Error);
}

TEST(Coefficient, BaseCohortDropsSlope) {
  std::mt19937_64 rng(5);
  const auto f = random_field(rng);
  for (std::size_t l = 0; l < 6; ++l) {
    const auto& t = f.term(1, 2);
    EXPECT_DOUBLE_EQ(coefficient_at(f, 1, 2, l, 1956), t.beta0 + t.lambda0 * t.xi0[l]);
  }
}

TEST(Coefficient, ZeroSlopeIsConstantOverCohorts) {
  std::mt19937_64 rng(6);
  auto f = random_field(rng);
  f.term(0, 0).lambda1 = 0.0;
  for (int c : f.cohorts) EXPECT_EQ(coefficient_at(f, 0, 0, 3, c), coefficient_at(f, 0, 0, 3, 1956));
}

TEST(Coefficient, MatchesScalarFormula) {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 200; ++rep) {
    const auto f = random_field(rng);
    const std::size_t j = rng() % 3, h = rng() % f.layout.n_covariates(), l = rng() % 6;
    const int c = f.cohorts[rng() % f.cohorts.size()];
    const auto& t = f.terms[j * f.layout.n_covariates() + h];
    const double expect = t.beta0 + t.lambda0 * t.xi0[l] + (c - 1956) * t.lambda1 * t.xi1[l];
    EXPECT_NEAR(coefficient_at(f, j, h, l, c), expect, 1e-14);
  }
}

TEST(Coefficient, AffineInCohort) {
  std::mt19937_64 rng(8);
  auto f = random_field(rng);
  // Dyadic values keep the arithmetic exact.
  for (auto& t : f.terms) {
    t.beta0 = 0.25;
    t.lambda0 = 0.5;
    t.lambda1 = 0.125;
    for (auto& v : t.xi0) v = 1.5;
    for (auto& v : t.xi1) v = -0.75;
  }
  for (std::size_t l = 0; l < 6; ++l) {
    const double a = coefficient_at(f, 2, 1, l, 1956);
    const double b = coefficient_at(f, 2, 1, l, 1957);
    const double c = coefficient_at(f, 2, 1, l, 1958);
    EXPECT_EQ(c - b, b - a);
  }
}

TEST(Coefficient, UnknownLocationOrCohortFails) {
  std::mt19937_64 rng(9);
  const auto f = random_field(rng);
  EXPECT_THROW(coefficient_at(f, 0, 0, 6, 1956), Error);
  EXPECT_THROW(coefficient_at(f, 0, 0, 0, 1970), Error);
}

TEST(Design, LayoutIsInterceptAgeThenBinaries) {
  DesignLayout layout{50, 65, true, 3};
  CovariateProfile p{0, 1956, 65, 1, 0b101};
  const auto x = design_vector(layout, p);
  ASSERT_EQ(x.size(), 6u);
  EXPECT_EQ(x[0], 1.0);
  EXPECT_DOUBLE_EQ(x[1], (65 - 57.5) / 7.5);
  EXPECT_EQ(x[2], 1.0);
  EXPECT_EQ(x[3], 1.0);
  EXPECT_EQ(x[4], 0.0);
  EXPECT_EQ(x[5], 1.0);
}

TEST(Predictor, ZeroParametersGiveZero) {
  std::mt19937_64 rng(10);
  ParameterDraw d;
  d.field = CoefficientField::zeros(DesignLayout{50, 65, true, 3}, {1956, 1957, 1958, 1959, 1960}, 3, 6);
  d.gamma = {0, 0, 0};
  for (int i = 0; i < 50; ++i) {
    const auto p = random_profile(rng);
    for (double v : linear_predictor(d, p, 1.7)) EXPECT_EQ(v, 0.0);
    for (double v : predictive_probability(d, p, -0.3)) EXPECT_EQ(v, 0.5);
  }
}

TEST(Predictor, InterceptOnlyIsConstant) {
  std::mt19937_64 rng(12);
  ParameterDraw d;
  d.field = CoefficientField::zeros(DesignLayout{50, 65, true, 3}, {1956, 1957, 1958, 1959, 1960}, 3, 6);
  d.gamma = {0, 0, 0};
  d.field.term(1, 0).beta0 = -1.25;
  for (int i = 0; i < 50; ++i) EXPECT_EQ(linear_predictor(d, random_profile(rng), 0.4)[1], -1.25);
}

TEST(Predictor, MatchesNaiveDoubleLoop) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n01;
  for (int rep = 0; rep < 300; ++rep) {
    const auto d = random_draw(rng);
    const auto p = random_profile(rng);
    const double eps = n01(rng);
    const auto eta = linear_predictor(d, p, eps);
    const auto pi = predictive_probability(d, p, eps);
    // Design vector written out by hand.
    std::vector<double> x = {1.0, (p.age - 57.5) / 7.5, double(p.sex), double(p.risk & 1), double((p.risk >> 1) & 1),
                             double((p.risk >> 2) & 1)};
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (std::size_t h = 0; h < x.size(); ++h) {
        const auto& t = d.field.terms[j * x.size() + h];
        const double beta = t.beta0 + t.lambda0 * t.xi0[p.location] + (p.cohort - 1956) * t.lambda1 * t.xi1[p.location];
        acc += beta * x[h];
      }
      acc += d.gamma[j] * eps;
      EXPECT_NEAR(eta[j], acc, 1e-12);
      EXPECT_NEAR(pi[j], 1.0 / (1.0 + std::exp(-acc)), 1e-15);
      EXPECT_GT(pi[j], 0.0);
      EXPECT_LT(pi[j], 1.0);
    }
  }
}

TEST(Predictor, MonotoneInPositiveCoefficient) {
  std::mt19937_64 rng(14);
  for (int rep = 0; rep < 100; ++rep) {
    auto d = random_draw(rng);
    auto p = random_profile(rng);
    // Force a positive effect of the first risk factor (column 3) everywhere.
    for (std::size_t j = 0; j < 3; ++j) {
      auto& t = d.field.term(j, 3);
      t.beta0 = 0.5;
      t.lambda0 = 0.0;
      t.lambda1 = 0.0;
    }
    p.risk &= ~1U;
    const auto lo = predictive_probability(d, p, 0.2);
    p.risk |= 1U;
    const auto hi = predictive_probability(d, p, 0.2);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_GT(hi[j], lo[j]);
  }
}

TEST(Predictor, RejectsProfilesOutsideTheGrid) {
  std::mt19937_64 rng(15);
  const auto d = random_draw(rng);
  CovariateProfile p{0, 1956, 66, 0, 0};
  EXPECT_THROW(linear_predictor(d, p, 0.0), Error);
  p.age = 60;
  p.risk = 8;
  EXPECT_THROW(linear_predictor(d, p, 0.0), Error);
  p.risk = 0;
  p.location = 6;
  EXPECT_THROW(linear_predictor(d, p, 0.0), Error);
}

TEST(ParameterDraw, FlattenAssignRoundTrip) {
  std::mt19937_64 rng(16);
  const auto d = random_draw(rng);
  const auto flat = d.flatten();
  EXPECT_EQ(flat.size(), d.parameter_count());
  ParameterDraw e = d;
  for (auto& t : e.field.terms) t.beta0 = 0.0;
  e.assign(flat);
  EXPECT_EQ(e, d);
}

TEST(Config, DeskConfigParses) {
  const auto cfg = load_config(std::string(PREVCURVE_SOURCE_DIR) + "/configs/desk.cfg");
  EXPECT_EQ(cfg.grid.n_locations(), 4u);
  EXPECT_EQ(cfg.grid.n_cohorts(), 3u);
  EXPECT_EQ(cfg.grid.n_ages(), 5u);
  EXPECT_EQ(cfg.grid.n_binary_combos(), 8u);
  EXPECT_EQ(cfg.generate.posterior_draws, 3000u);
  EXPECT_EQ(cfg.grid.diseases.names[0], "Cardiovascular diseases");
  const auto c = kernel_correlation(cfg.grid.kernel);
  EXPECT_NEAR(c(0, 1), 0.6 * std::exp(-0.5) + 0.4 * std::exp(-0.4), 1e-12);
  EXPECT_NEAR(c(0, 3), 0.4 * std::exp(-1.3), 1e-12);
}

TEST(Config, JsonRoundTripKeepsDigest) {
  const auto cfg = load_config(std::string(PREVCURVE_SOURCE_DIR) + "/configs/desk.cfg").grid;
  const auto back = GridConfig::from_json(nlohmann::json::parse(cfg.to_json().dump(2)));
  EXPECT_EQ(back.digest(), cfg.digest());
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  const std::string base =
      "locations = A B\ncohorts = 1960\nage_min = 50\nage_max = 51\nyear_min = 2010\nyear_max = 2011\n"
      "risk_factors = smoking\ndiseases = d1\nkernel_synthetic = 1 0.5 1\n";
  EXPECT_NO_THROW(parse_config_text(base));
  EXPECT_THROW(parse_config_text(base + "colour = blue\n"), Error);
  EXPECT_THROW(parse_config_text(base + "dispersion = lots\n"), Error);
  EXPECT_THROW(parse_config_text(base + "age_max = 40\n"), Error);
}
