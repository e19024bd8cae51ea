#ifndef PREVCURVE_SYNTHETIC_HPP
#define PREVCURVE_SYNTHETIC_HPP

// Desk-scale stand-ins for the fitted model and external registries: a known
// ground truth, posterior draws around it, census-style margins and a survey
// sample. Every generator is a pure function of its inputs and seed.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "prevcurve/config.hpp"
#include "prevcurve/container.hpp"
#include "prevcurve/core_model.hpp"
#include "prevcurve/error.hpp"
#include "prevcurve/grid.hpp"
#include "prevcurve/random.hpp"

namespace prevcurve {

struct GroundTruth {
  ParameterDraw draw;
  // Per demographic cell, probabilities over the risk categories.
  std::vector<std::vector<double>> weight_tables;
  std::uint64_t seed = 0;
};

/// B posterior draws stored row-major as flat parameter vectors.
struct PosteriorEnsemble {
  ParameterDraw shape;  // structure template; values are overwritten by draw()
  std::size_t n_params = 0;
  std::vector<double> values;
  std::uint64_t seed = 0;
  std::size_t original_size = 0;  // B before any thinning
  std::size_t stride = 1;
  double dispersion = 0.0;
  bool calibrated = false;

  std::size_t size() const { return n_params == 0 ? 0 : values.size() / n_params; }

  std::span<const double> row(std::size_t b) const {
    return std::span<const double>(values).subspan(b * n_params, n_params);
  }

  ParameterDraw draw(std::size_t b) const {
    ParameterDraw d = shape;
    d.assign(row(b));
    return d;
  }
};

struct DemographicMargins {
  DemographicIndex index;
  std::vector<std::uint64_t> counts;

  std::uint64_t total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }
};

struct SurveySample {
  std::vector<CovariateProfile> records;

  std::size_t size() const { return records.size(); }
};

namespace detail {

/// xi = P^T L sqrt(D) z for the pivoted factorization C = P^T L D L^T P.
/// Handles rank-deficient correlations exactly (all-ones gives identical entries).
class CorrelatedNormal {
public:
  explicit CorrelatedNormal(const Eigen::MatrixXd& corr) : ldlt_(corr) {
    sqrt_d_ = ldlt_.vectorD().cwiseMax(0.0).cwiseSqrt();
  }

  template <class Rng>
  std::vector<double> sample(Rng& rng) const {
    std::normal_distribution<double> n01;
    Eigen::VectorXd z(sqrt_d_.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = n01(rng);
    Eigen::VectorXd y = ldlt_.matrixL() * (sqrt_d_.asDiagonal() * z).eval();
    Eigen::VectorXd x = ldlt_.transpositionsP().transpose() * y;
    return std::vector<double>(x.data(), x.data() + x.size());
  }

private:
  Eigen::LDLT<Eigen::MatrixXd> ldlt_;
  Eigen::VectorXd sqrt_d_;
};

template <class Rng>
std::vector<double> dirichlet(std::span<const double> alpha, Rng& rng) {
  std::vector<double> out(alpha.size());
  double total = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    std::gamma_distribution<double> g(alpha[i], 1.0);
    out[i] = g(rng);
    total += out[i];
  }
  if (!(total > 0.0)) {
    // All gamma draws underflowed (tiny alpha); fall back to the largest alpha.
    std::fill(out.begin(), out.end(), 0.0);
    out[static_cast<std::size_t>(std::max_element(alpha.begin(), alpha.end()) - alpha.begin())] = 1.0;
    return out;
  }
  for (auto& v : out) v /= total;
  return out;
}

}  // namespace detail

/// Ground-truth parameters with spatially correlated xi fields.
inline GroundTruth generate_truth(const GridConfig& cfg, const GenerateSettings& s, std::uint64_t seed) {
  cfg.validate();
  const auto layout = cfg.layout();
  const std::size_t nd = cfg.diseases.size();
  const std::size_t na = cfg.n_locations();
  GroundTruth truth;
  truth.seed = seed;
  truth.draw.field = CoefficientField::zeros(layout, cfg.cohorts, nd, na);
  truth.draw.gamma.assign(nd, 0.0);

  const detail::CorrelatedNormal xi(kernel_correlation(cfg.kernel));
  auto rng = substream(seed, Stream::TruthCoefficients);
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> u01;
  for (std::size_t j = 0; j < nd; ++j) {
    for (std::size_t h = 0; h < layout.n_covariates(); ++h) {
      auto& t = truth.draw.field.term(j, h);
      t.beta0 = (h == 0 ? s.truth_intercept : 0.0) + s.truth_beta_scale * n01(rng);
      t.lambda0 = s.truth_lambda0_scale * (0.5 + u01(rng));
      t.lambda1 = s.truth_lambda1_scale * n01(rng);
      t.xi0 = xi.sample(rng);
      t.xi1 = xi.sample(rng);
    }
    truth.draw.gamma[j] = s.truth_gamma * (0.75 + 0.5 * u01(rng));
  }

  const DemographicIndex demo(cfg);
  const std::size_t ncat = cfg.n_risk_categories();
  auto wrng = substream(seed, Stream::TruthWeights);
  const std::vector<double> ones(ncat, 2.0);
  const auto base = detail::dirichlet(std::span<const double>(ones), wrng);
  std::vector<double> alpha(ncat);
  for (std::size_t k = 0; k < ncat; ++k) alpha[k] = s.truth_weight_concentration * base[k];
  truth.weight_tables.resize(demo.size());
  for (auto& table : truth.weight_tables) table = detail::dirichlet(std::span<const double>(alpha), wrng);
  return truth;
}

/// B draws, each the truth (or, when calibrated, a noisy pseudo-estimate of
/// it) plus independent N(0, dispersion^2) noise on every scalar parameter.
///
/// With `calibrated` the ensemble is centred at truth + dispersion * Z, which
/// mimics a posterior whose centre carries estimation error of the same scale
/// as its spread; central bands then cover the truth at their nominal rate.
inline PosteriorEnsemble draw_posterior_ensemble(const GroundTruth& truth, std::size_t B, double dispersion,
                                                 std::uint64_t seed, bool calibrated = false) {
  if (B < 1) fail(ErrorKind::InvalidArgument, "ensemble size must be at least 1");
  if (!(dispersion >= 0.0) || !std::isfinite(dispersion)) fail(ErrorKind::InvalidArgument, "dispersion must be >= 0");
  PosteriorEnsemble ens;
  ens.shape = truth.draw;
  const auto theta = truth.draw.flatten();
  ens.n_params = theta.size();
  ens.seed = seed;
  ens.original_size = B;
  ens.dispersion = dispersion;
  ens.calibrated = calibrated;

  std::vector<double> centre = theta;
  std::normal_distribution<double> n01;
  if (calibrated) {
    auto rng = substream(seed, Stream::Ensemble, 0);
    for (auto& v : centre) v += dispersion * n01(rng);
  }
  ens.values.resize(B * ens.n_params);
  for (std::size_t b = 0; b < B; ++b) {
    auto rng = substream(seed, Stream::Ensemble, b + 1);
    double* out = ens.values.data() + b * ens.n_params;
    for (std::size_t k = 0; k < ens.n_params; ++k) out[k] = centre[k] + dispersion * n01(rng);
  }
  return ens;
}

inline DemographicMargins generate_margins(const GridConfig& cfg, const GenerateSettings& s, std::uint64_t seed) {
  if (!(s.margins_mean >= 1.0)) fail(ErrorKind::InvalidArgument, "margins_mean must be >= 1");
  DemographicMargins m;
  m.index = DemographicIndex(cfg);
  m.counts.resize(m.index.size());
  auto rng = substream(seed, Stream::Margins);
  std::normal_distribution<double> n01;
  const double sigma2 = std::log1p(s.margins_cv * s.margins_cv);
  const double sigma = std::sqrt(sigma2);
  for (auto& c : m.counts) {
    double v = s.margins_mean;
    if (s.margins == MarginsRegime::LogNormal) v *= std::exp(sigma * n01(rng) - 0.5 * sigma2);
    c = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(v)));
  }
  return m;
}

/// Demographics proportional to margins, ages uniform within the cohort, risk
/// categories from the truth's conditional tables.
inline SurveySample generate_survey(const GridConfig& cfg, const GroundTruth& truth, const DemographicMargins& margins,
                                    std::size_t n_s, std::uint64_t seed) {
  if (n_s < 1) fail(ErrorKind::InvalidArgument, "survey size must be at least 1");
  if (margins.counts.empty() || margins.total() == 0) fail(ErrorKind::InvalidArgument, "margins are empty");
  if (truth.weight_tables.size() != margins.counts.size()) {
    fail(ErrorKind::InvalidArgument, "truth weight tables do not match the margins");
  }
  std::vector<double> mass(margins.counts.begin(), margins.counts.end());
  std::discrete_distribution<std::size_t> pick_demo(mass.begin(), mass.end());
  std::vector<std::discrete_distribution<std::uint32_t>> pick_risk;
  pick_risk.reserve(truth.weight_tables.size());
  for (const auto& t : truth.weight_tables) pick_risk.emplace_back(t.begin(), t.end());
  std::uniform_int_distribution<int> pick_age(cfg.age_min, cfg.age_max);

  auto rng = substream(seed, Stream::Survey);
  SurveySample sample;
  sample.records.reserve(n_s);
  for (std::size_t i = 0; i < n_s; ++i) {
    const auto d = pick_demo(rng);
    const auto cell = margins.index.cell(d);
    CovariateProfile p;
    p.location = cell.location;
    p.cohort = cfg.cohorts[cell.cohort];
    p.sex = cell.sex;
    p.age = pick_age(rng);
    p.risk = pick_risk[d](rng);
    sample.records.push_back(p);
  }
  return sample;
}

// ---------------------------------------------------------------------------
// Files

inline void write_margins_csv(const std::string& path, const GridConfig& cfg, const DemographicMargins& m) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::InputError, "cannot write " + path);
  out << "location,cohort,sex,count\n";
  for (std::size_t d = 0; d < m.counts.size(); ++d) {
    const auto c = m.index.cell(d);
    out << cfg.locations[c.location] << ',' << cfg.cohorts[c.cohort] << ',' << c.sex << ',' << m.counts[d] << '\n';
  }
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

inline DemographicMargins read_margins_csv(const std::string& path, const GridConfig& cfg) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::InputError, "cannot open " + path);
  DemographicMargins m;
  m.index = DemographicIndex(cfg);
  m.counts.assign(m.index.size(), 0);
  std::vector<bool> seen(m.index.size(), false);
  std::string line;
  std::getline(in, line);
  if (detail::trim(line) != "location,cohort,sex,count") fail(ErrorKind::InputError, path + ": unexpected margins header");
  GridIndex grid(cfg);
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 4) fail(ErrorKind::InputError, path + ":" + std::to_string(lineno) + ": expected 4 fields");
    try {
      DemographicCell c;
      c.location = cfg.location_index(f[0]);
      c.cohort = grid.cohort_index(detail::parse_number<int>("cohort", f[1]));
      c.sex = detail::parse_number<int>("sex", f[2]);
      const auto id = m.index.id(c);
      if (seen[id]) fail(ErrorKind::InputError, "duplicate margins row");
      seen[id] = true;
      m.counts[id] = detail::parse_number<std::size_t>("count", f[3]);
    } catch (const Error& e) {
      fail(ErrorKind::InputError, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  for (std::size_t d = 0; d < seen.size(); ++d) {
    if (!seen[d]) fail(ErrorKind::InputError, path + ": missing demographic cell " + std::to_string(d));
  }
  return m;
}

inline void write_survey_csv(const std::string& path, const GridConfig& cfg, const SurveySample& s) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::InputError, "cannot write " + path);
  out << "location,cohort,age,sex";
  for (const auto& r : cfg.risk_factors) out << ',' << r;
  out << '\n';
  for (const auto& p : s.records) {
    out << cfg.locations[p.location] << ',' << p.cohort << ',' << p.age << ',' << p.sex;
    for (std::size_t k = 0; k < cfg.risk_factors.size(); ++k) out << ',' << p.risk_factor(k);
    out << '\n';
  }
}

inline SurveySample read_survey_csv(const std::string& path, const GridConfig& cfg) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::InputError, "cannot open " + path);
  std::string expected = "location,cohort,age,sex";
  for (const auto& r : cfg.risk_factors) expected += "," + r;
  std::string line;
  std::getline(in, line);
  if (detail::trim(line) != expected) fail(ErrorKind::InputError, path + ": unexpected survey header");
  const GridIndex grid(cfg);
  SurveySample s;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 4 + cfg.risk_factors.size()) {
      fail(ErrorKind::InputError, path + ":" + std::to_string(lineno) + ": wrong field count");
    }
    try {
      CovariateProfile p;
      p.location = cfg.location_index(f[0]);
      p.cohort = detail::parse_number<int>("cohort", f[1]);
      p.age = detail::parse_number<int>("age", f[2]);
      p.sex = detail::parse_number<int>("sex", f[3]);
      for (std::size_t k = 0; k < cfg.risk_factors.size(); ++k) {
        const int v = detail::parse_number<int>(cfg.risk_factors[k], f[4 + k]);
        if (v != 0 && v != 1) fail(ErrorKind::InvalidArgument, "binary factor must be 0 or 1");
        p.risk |= static_cast<std::uint32_t>(v) << k;
      }
      grid.cell_id(p);  // on-grid check
      s.records.push_back(p);
    } catch (const Error& e) {
      fail(ErrorKind::InputError, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return s;
}

namespace detail {

inline nlohmann::json draw_shape_json(const ParameterDraw& d) {
  return {{"n_diseases", d.field.n_diseases},
          {"n_locations", d.field.n_locations},
          {"n_covariates", d.field.layout.n_covariates()},
          {"cohorts", d.field.cohorts},
          {"age_min", d.field.layout.age_min},
          {"age_max", d.field.layout.age_max},
          {"sex", d.field.layout.has_sex},
          {"n_risk", d.field.layout.n_risk}};
}

inline ParameterDraw draw_from_shape_json(const nlohmann::json& j) {
  DesignLayout layout{j.at("age_min").get<int>(), j.at("age_max").get<int>(), j.at("sex").get<bool>(),
                      j.at("n_risk").get<std::size_t>()};
  ParameterDraw d;
  d.field = CoefficientField::zeros(layout, j.at("cohorts").get<std::vector<int>>(), j.at("n_diseases").get<std::size_t>(),
                                    j.at("n_locations").get<std::size_t>());
  d.gamma.assign(d.field.n_diseases, 0.0);
  return d;
}

}  // namespace detail

inline void write_ensemble(const std::string& path, const GridConfig& cfg, const PosteriorEnsemble& e) {
  nlohmann::json meta = {{"grid", cfg.to_json()},
                         {"grid_digest", cfg.digest()},
                         {"shape", detail::draw_shape_json(e.shape)},
                         {"n_params", e.n_params},
                         {"draws", e.size()},
                         {"original_size", e.original_size},
                         {"stride", e.stride},
                         {"dispersion", e.dispersion},
                         {"calibrated", e.calibrated},
                         {"seed", e.seed}};
  ByteWriter w;
  w.put_span(std::span<const double>(e.values));
  write_container(path, ContainerKind::Ensemble, meta, w.bytes());
}

inline PosteriorEnsemble read_ensemble(const std::string& path, GridConfig* grid_out = nullptr) {
  const auto c = read_container(path, ContainerKind::Ensemble);
  PosteriorEnsemble e;
  try {
    e.shape = detail::draw_from_shape_json(c.meta.at("shape"));
    e.n_params = c.meta.at("n_params").get<std::size_t>();
    e.original_size = c.meta.at("original_size").get<std::size_t>();
    e.stride = c.meta.at("stride").get<std::size_t>();
    e.dispersion = c.meta.at("dispersion").get<double>();
    e.calibrated = c.meta.at("calibrated").get<bool>();
    e.seed = c.meta.at("seed").get<std::uint64_t>();
    if (grid_out) *grid_out = GridConfig::from_json(c.meta.at("grid"));
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorKind::StoreCorrupt, path + ": bad ensemble metadata: " + ex.what());
  }
  if (e.n_params != e.shape.parameter_count() || c.payload.size() % (8 * e.n_params) != 0) {
    fail(ErrorKind::StoreCorrupt, path + ": ensemble payload does not match its shape");
  }
  e.values.resize(c.payload.size() / 8);
  ByteReader r(c.payload);
  r.get_into(std::span<double>(e.values));
  return e;
}

inline void write_truth(const std::string& path, const GridConfig& cfg, const GroundTruth& t) {
  const std::size_t ncat = cfg.n_risk_categories();
  nlohmann::json meta = {{"grid", cfg.to_json()},
                         {"grid_digest", cfg.digest()},
                         {"shape", detail::draw_shape_json(t.draw)},
                         {"n_demographic_cells", t.weight_tables.size()},
                         {"n_categories", ncat},
                         {"seed", t.seed}};
  ByteWriter w;
  const auto theta = t.draw.flatten();
  w.put_span(std::span<const double>(theta));
  for (const auto& row : t.weight_tables) w.put_span(std::span<const double>(row));
  write_container(path, ContainerKind::Truth, meta, w.bytes());
}

inline GroundTruth read_truth(const std::string& path, GridConfig* grid_out = nullptr) {
  const auto c = read_container(path, ContainerKind::Truth);
  GroundTruth t;
  std::size_t ndemo = 0;
  std::size_t ncat = 0;
  try {
    t.draw = detail::draw_from_shape_json(c.meta.at("shape"));
    ndemo = c.meta.at("n_demographic_cells").get<std::size_t>();
    ncat = c.meta.at("n_categories").get<std::size_t>();
    t.seed = c.meta.at("seed").get<std::uint64_t>();
    if (grid_out) *grid_out = GridConfig::from_json(c.meta.at("grid"));
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorKind::StoreCorrupt, path + ": bad truth metadata: " + ex.what());
  }
  ByteReader r(c.payload);
  std::vector<double> theta(t.draw.parameter_count());
  r.get_into(std::span<double>(theta));
  t.draw.assign(theta);
  t.weight_tables.assign(ndemo, std::vector<double>(ncat));
  for (auto& row : t.weight_tables) r.get_into(std::span<double>(row));
  if (r.remaining() != 0) fail(ErrorKind::StoreCorrupt, path + ": trailing bytes in truth payload");
  return t;
}

}  // namespace prevcurve

#endif  // PREVCURVE_SYNTHETIC_HPP
