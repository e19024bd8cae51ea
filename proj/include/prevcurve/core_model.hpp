#ifndef PREVCURVE_CORE_MODEL_HPP
#define PREVCURVE_CORE_MODEL_HPP

// Multivariate logistic disease model with a cohort-linear, spatially
// correlated coefficient field.
//
//   pi_j  = inv_logit(eta_j)
//   eta_j = sum_h beta_jh(l, c) x_h + gamma_j * comorbidity
//   beta_jh(l, c) = beta0 + lambda0 xi0(l) + (c - c0) lambda1 xi1(l)

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "prevcurve/error.hpp"

namespace prevcurve {

struct DiseasePanel {
  std::vector<std::string> ids;
  std::vector<std::string> names;

  std::size_t size() const { return ids.size(); }

  std::size_t index_of(const std::string& id) const {
    auto it = std::find(ids.begin(), ids.end(), id);
    if (it == ids.end()) fail(ErrorKind::NotFound, "unknown disease '" + id + "'");
    return static_cast<std::size_t>(it - ids.begin());
  }

  void validate() const {
    if (ids.empty()) fail(ErrorKind::InvalidArgument, "disease panel is empty");
    if (names.size() != ids.size()) fail(ErrorKind::InvalidArgument, "disease names/ids length mismatch");
    std::set<std::string> seen(ids.begin(), ids.end());
    if (seen.size() != ids.size()) fail(ErrorKind::InvalidArgument, "duplicate disease id");
  }
};

/// Column layout of the design vector:
///   [intercept = 1, standardized age, sex (when present), risk factors...]
/// Age is centered at the span midpoint and scaled by the half-width.
struct DesignLayout {
  int age_min = 0;
  int age_max = 0;
  bool has_sex = false;
  std::size_t n_risk = 0;

  std::size_t n_binaries() const { return n_risk + (has_sex ? 1 : 0); }
  std::size_t n_covariates() const { return 2 + n_binaries(); }

  double standardized_age(int age) const {
    const double mid = 0.5 * (age_min + age_max);
    const double half = 0.5 * (age_max - age_min);
    return half > 0 ? (age - mid) / half : 0.0;
  }

  /// Comma-separated column names, recorded in store headers.
  std::string tag(const std::vector<std::string>& risk_names) const {
    std::string out = "intercept,age_std";
    if (has_sex) out += ",sex";
    for (const auto& r : risk_names) out += "," + r;
    return out;
  }

  bool operator==(const DesignLayout&) const = default;
};

/// One cell of the covariate grid. `risk` packs the risk factors, factor k at bit k.
struct CovariateProfile {
  std::size_t location = 0;
  int cohort = 0;
  int age = 0;
  int sex = 0;
  std::uint32_t risk = 0;

  int survey_year() const { return cohort + age; }
  int risk_factor(std::size_t k) const { return static_cast<int>((risk >> k) & 1U); }

  bool operator==(const CovariateProfile&) const = default;
};

inline std::vector<double> design_vector(const DesignLayout& layout, const CovariateProfile& p) {
  std::vector<double> x;
  x.reserve(layout.n_covariates());
  x.push_back(1.0);
  x.push_back(layout.standardized_age(p.age));
  if (layout.has_sex) x.push_back(static_cast<double>(p.sex));
  for (std::size_t k = 0; k < layout.n_risk; ++k) x.push_back(static_cast<double>(p.risk_factor(k)));
  return x;
}

struct KernelComponent {
  std::string source;  // file path or generator description
  Eigen::MatrixXd distance;
  double weight = 0.0;
};

struct KernelSpec {
  std::vector<KernelComponent> components;

  std::size_t n_locations() const {
    return components.empty() ? 0 : static_cast<std::size_t>(components.front().distance.rows());
  }

  void validate() const {
    if (components.empty()) fail(ErrorKind::InvalidArgument, "kernel spec has no components");
    double total = 0.0;
    const auto n = components.front().distance.rows();
    for (const auto& c : components) {
      if (!(c.weight >= 0.0) || !std::isfinite(c.weight)) {
        fail(ErrorKind::InvalidArgument, "kernel weight must be finite and non-negative");
      }
      total += c.weight;
      const auto& d = c.distance;
      if (d.rows() != n || d.cols() != n) fail(ErrorKind::InvalidArgument, "kernel distance matrices differ in size");
      for (Eigen::Index i = 0; i < n; ++i) {
        if (d(i, i) != 0.0) fail(ErrorKind::InvalidArgument, "kernel distance diagonal must be zero");
        for (Eigen::Index k = 0; k < n; ++k) {
          if (d(i, k) != d(k, i)) fail(ErrorKind::InvalidArgument, "kernel distance matrix is not symmetric");
          if (!(d(i, k) >= 0.0)) fail(ErrorKind::InvalidArgument, "kernel distance must be non-negative");
        }
      }
    }
    if (std::abs(total - 1.0) > 1e-9) fail(ErrorKind::InvalidArgument, "kernel weights must sum to 1");
  }
};

inline double inv_logit(double x) {
  if (!std::isfinite(x)) fail(ErrorKind::InvalidArgument, "inv_logit: non-finite input");
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Raw convex combination sum_m w_m exp(-D_m), no PSD repair.
inline Eigen::MatrixXd kernel_mixture(const KernelSpec& spec) {
  spec.validate();
  const auto n = static_cast<Eigen::Index>(spec.n_locations());
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (const auto& c : spec.components) {
    // std::exp keeps exp(-inf) == 0 exactly; the vectorized path returns a denormal.
    m += c.weight * c.distance.unaryExpr([](double d) { return std::exp(-d); });
  }
  return m;
}

/// Location correlation matrix. Negative eigenvalues of the raw mixture are
/// clipped at zero and the result rescaled to unit diagonal.
inline Eigen::MatrixXd kernel_correlation(const KernelSpec& spec) {
  Eigen::MatrixXd m = kernel_mixture(spec);
  const auto n = m.rows();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  if (eig.info() == Eigen::Success && eig.eigenvalues().minCoeff() < -1e-12) {
    Eigen::VectorXd lambda = eig.eigenvalues().cwiseMax(0.0);
    m = eig.eigenvectors() * lambda.asDiagonal() * eig.eigenvectors().transpose();
    Eigen::VectorXd scale = m.diagonal().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
    m = scale.asDiagonal() * m * scale.asDiagonal();
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    m(i, i) = 1.0;
    for (Eigen::Index k = i + 1; k < n; ++k) {
      const double v = std::clamp(0.5 * (m(i, k) + m(k, i)), 0.0, 1.0);
      m(i, k) = v;
      m(k, i) = v;
    }
  }
  return m;
}

struct CoefficientTerm {
  double beta0 = 0.0;
  double lambda0 = 0.0;
  double lambda1 = 0.0;
  std::vector<double> xi0;  // one entry per location
  std::vector<double> xi1;
};

/// Coefficient field for all (disease, covariate) pairs, row-major in disease.
struct CoefficientField {
  DesignLayout layout;
  std::vector<int> cohorts;  // valid cohort values; c0 = cohorts.front()
  std::size_t n_diseases = 0;
  std::size_t n_locations = 0;
  std::vector<CoefficientTerm> terms;

  int base_cohort() const { return cohorts.front(); }

  static CoefficientField zeros(const DesignLayout& layout, std::vector<int> cohorts, std::size_t n_diseases,
                                std::size_t n_locations) {
    CoefficientField f;
    f.layout = layout;
    f.cohorts = std::move(cohorts);
    f.n_diseases = n_diseases;
    f.n_locations = n_locations;
    f.terms.assign(n_diseases * layout.n_covariates(),
                   CoefficientTerm{0.0, 0.0, 0.0, std::vector<double>(n_locations, 0.0),
                                   std::vector<double>(n_locations, 0.0)});
    return f;
  }

  CoefficientTerm& term(std::size_t j, std::size_t h) { return terms[j * layout.n_covariates() + h]; }
  const CoefficientTerm& term(std::size_t j, std::size_t h) const { return terms[j * layout.n_covariates() + h]; }

  void validate() const {
    if (cohorts.empty()) fail(ErrorKind::InvalidArgument, "coefficient field has no cohorts");
    if (terms.size() != n_diseases * layout.n_covariates()) {
      fail(ErrorKind::InvalidArgument, "coefficient field term count mismatch");
    }
    for (const auto& t : terms) {
      if (t.xi0.size() != n_locations || t.xi1.size() != n_locations) {
        fail(ErrorKind::InvalidArgument, "xi field length differs from location count");
      }
      if (!std::isfinite(t.lambda0) || !std::isfinite(t.lambda1)) {
        fail(ErrorKind::InvalidArgument, "non-finite lambda scale");
      }
    }
  }
};

/// One posterior draw: everything needed to evaluate the linear predictor.
struct ParameterDraw {
  CoefficientField field;
  std::vector<double> gamma;  // comorbidity loadings, one per disease

  /// Scalars in a fixed order: per term (beta0, lambda0, lambda1, xi0..., xi1...), then gamma.
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const auto& t : field.terms) {
      out.push_back(t.beta0);
      out.push_back(t.lambda0);
      out.push_back(t.lambda1);
      out.insert(out.end(), t.xi0.begin(), t.xi0.end());
      out.insert(out.end(), t.xi1.begin(), t.xi1.end());
    }
    out.insert(out.end(), gamma.begin(), gamma.end());
    return out;
  }

  std::size_t parameter_count() const {
    return field.terms.size() * (3 + 2 * field.n_locations) + gamma.size();
  }

  /// Overwrite all scalars from `values` (same order as flatten()).
  void assign(std::span<const double> values) {
    if (values.size() != parameter_count()) fail(ErrorKind::InputError, "parameter vector length mismatch");
    std::size_t k = 0;
    for (auto& t : field.terms) {
      t.beta0 = values[k++];
      t.lambda0 = values[k++];
      t.lambda1 = values[k++];
      for (auto& v : t.xi0) v = values[k++];
      for (auto& v : t.xi1) v = values[k++];
    }
    for (auto& g : gamma) g = values[k++];
  }

  bool operator==(const ParameterDraw& other) const { return flatten() == other.flatten(); }
};

inline std::size_t cohort_position(const CoefficientField& field, int cohort) {
  auto it = std::find(field.cohorts.begin(), field.cohorts.end(), cohort);
  if (it == field.cohorts.end()) fail(ErrorKind::NotFound, "unknown cohort " + std::to_string(cohort));
  return static_cast<std::size_t>(it - field.cohorts.begin());
}

inline double coefficient_at(const CoefficientField& field, std::size_t j, std::size_t h, std::size_t l,
                             int cohort) {
  if (j >= field.n_diseases || h >= field.layout.n_covariates()) {
    fail(ErrorKind::InvalidArgument, "coefficient index out of range");
  }
  if (l >= field.n_locations) fail(ErrorKind::NotFound, "unknown location index " + std::to_string(l));
  cohort_position(field, cohort);
  const auto& t = field.term(j, h);
  return t.beta0 + t.lambda0 * t.xi0[l] + static_cast<double>(cohort - field.base_cohort()) * t.lambda1 * t.xi1[l];
}

inline void check_profile(const CoefficientField& field, const CovariateProfile& p) {
  if (p.location >= field.n_locations) fail(ErrorKind::NotFound, "profile location outside grid");
  cohort_position(field, p.cohort);
  if (p.age < field.layout.age_min || p.age > field.layout.age_max) {
    fail(ErrorKind::InvalidArgument, "profile age outside configured span");
  }
  if (p.sex != 0 && (p.sex != 1 || !field.layout.has_sex)) fail(ErrorKind::InvalidArgument, "invalid sex value");
  if (field.layout.n_risk < 32 && (p.risk >> field.layout.n_risk) != 0) {
    fail(ErrorKind::InvalidArgument, "risk code exceeds configured risk factors");
  }
}

/// eta = B(l, c) x + gamma * comorbidity.
inline std::vector<double> linear_predictor(const ParameterDraw& draw, const CovariateProfile& profile,
                                            double comorbidity) {
  const auto& field = draw.field;
  if (draw.gamma.size() != field.n_diseases) fail(ErrorKind::InvalidArgument, "gamma length differs from disease count");
  if (!std::isfinite(comorbidity)) fail(ErrorKind::InvalidArgument, "non-finite comorbidity score");
  check_profile(field, profile);
  const auto x = design_vector(field.layout, profile);
  const double dc = static_cast<double>(profile.cohort - field.base_cohort());
  const std::size_t l = profile.location;
  std::vector<double> eta(field.n_diseases, 0.0);
  for (std::size_t j = 0; j < field.n_diseases; ++j) {
    double acc = 0.0;
    for (std::size_t h = 0; h < x.size(); ++h) {
      const auto& t = field.term(j, h);
      acc += (t.beta0 + t.lambda0 * t.xi0[l] + dc * t.lambda1 * t.xi1[l]) * x[h];
    }
    eta[j] = acc + draw.gamma[j] * comorbidity;
  }
  return eta;
}

inline std::vector<double> predictive_probability(const ParameterDraw& draw, const CovariateProfile& profile,
                                                  double comorbidity) {
  auto eta = linear_predictor(draw, profile, comorbidity);
  for (auto& v : eta) v = inv_logit(v);
  return eta;
}

}  // namespace prevcurve

#endif  // PREVCURVE_CORE_MODEL_HPP
