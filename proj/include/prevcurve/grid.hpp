#ifndef PREVCURVE_GRID_HPP
#define PREVCURVE_GRID_HPP

#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "prevcurve/config.hpp"
#include "prevcurve/core_model.hpp"
#include "prevcurve/error.hpp"

namespace prevcurve {

/// Bijection between cell ids and covariate profiles.
///
/// Ordering is location-major, then cohort, age, and the binary code
/// `sex * 2^n_risk + risk`, with risk factor k at bit k.
class GridIndex {
public:
  GridIndex() = default;

  explicit GridIndex(const GridConfig& cfg)
      : cohorts_(cfg.cohorts),
        age_min_(cfg.age_min),
        n_locations_(cfg.n_locations()),
        n_cohorts_(cfg.n_cohorts()),
        n_ages_(cfg.n_ages()),
        has_sex_(cfg.has_sex),
        n_risk_(cfg.risk_factors.size()),
        n_binary_(cfg.n_binary_combos()) {
    const unsigned __int128 total = static_cast<unsigned __int128>(n_locations_) * n_cohorts_ * n_ages_ * n_binary_;
    if (total == 0 || total > std::numeric_limits<std::uint32_t>::max()) {
      fail(ErrorKind::InvalidArgument, "grid cardinality out of bounds");
    }
    size_ = static_cast<std::size_t>(total);

    dim_names_ = {"location", "cohort", "age"};
    dim_sizes_ = {n_locations_, n_cohorts_, n_ages_};
    if (has_sex_) {
      dim_names_.push_back("sex");
      dim_sizes_.push_back(2);
    }
    for (const auto& r : cfg.risk_factors) {
      dim_names_.push_back(r);
      dim_sizes_.push_back(2);
    }
  }

  std::size_t size() const { return size_; }
  std::size_t n_locations() const { return n_locations_; }
  std::size_t n_cohorts() const { return n_cohorts_; }
  std::size_t n_ages() const { return n_ages_; }
  std::size_t n_binary_combos() const { return n_binary_; }
  std::size_t n_risk_categories() const { return std::size_t{1} << n_risk_; }
  std::size_t n_risk_factors() const { return n_risk_; }
  bool has_sex() const { return has_sex_; }
  const std::vector<int>& cohorts() const { return cohorts_; }
  int age_min() const { return age_min_; }

  std::size_t n_dimensions() const { return dim_names_.size(); }
  const std::vector<std::string>& dimension_names() const { return dim_names_; }
  const std::vector<std::size_t>& dimension_sizes() const { return dim_sizes_; }

  std::size_t dimension_index(const std::string& name) const {
    for (std::size_t d = 0; d < dim_names_.size(); ++d) {
      if (dim_names_[d] == name) return d;
    }
    fail(ErrorKind::InvalidArgument, "unknown dimension '" + name + "'");
  }

  std::size_t cell_id(std::size_t location, std::size_t cohort_idx, std::size_t age_idx, std::size_t binary) const {
    return ((location * n_cohorts_ + cohort_idx) * n_ages_ + age_idx) * n_binary_ + binary;
  }

  std::size_t cell_id(const CovariateProfile& p) const {
    if (p.location >= n_locations_) fail(ErrorKind::NotFound, "profile location outside grid");
    const auto c = cohort_index(p.cohort);
    if (p.age < age_min_ || p.age >= age_min_ + static_cast<int>(n_ages_)) {
      fail(ErrorKind::InvalidArgument, "profile age outside grid");
    }
    if (p.sex < 0 || p.sex >= (has_sex_ ? 2 : 1)) fail(ErrorKind::InvalidArgument, "profile sex outside grid");
    if (p.risk >= n_risk_categories()) fail(ErrorKind::InvalidArgument, "profile risk code outside grid");
    const std::size_t bin = static_cast<std::size_t>(p.sex) * n_risk_categories() + p.risk;
    return cell_id(p.location, c, static_cast<std::size_t>(p.age - age_min_), bin);
  }

  CovariateProfile profile(std::size_t id) const {
    if (id >= size_) fail(ErrorKind::NotFound, "cell id out of range");
    CovariateProfile p;
    const std::size_t bin = id % n_binary_;
    id /= n_binary_;
    p.age = age_min_ + static_cast<int>(id % n_ages_);
    id /= n_ages_;
    p.cohort = cohorts_[id % n_cohorts_];
    p.location = id / n_cohorts_;
    p.sex = static_cast<int>(bin / n_risk_categories());
    p.risk = static_cast<std::uint32_t>(bin % n_risk_categories());
    return p;
  }

  /// Level index of `cell` along dimension `dim`.
  std::size_t level(std::size_t id, std::size_t dim) const {
    const std::size_t bin = id % n_binary_;
    switch (dim) {
      case 0: return id / (n_binary_ * n_ages_ * n_cohorts_);
      case 1: return (id / (n_binary_ * n_ages_)) % n_cohorts_;
      case 2: return (id / n_binary_) % n_ages_;
      default: break;
    }
    std::size_t k = dim - 3;
    if (has_sex_) {
      if (k == 0) return bin / n_risk_categories();
      --k;
    }
    return ((bin % n_risk_categories()) >> k) & 1U;
  }

  std::size_t cohort_index(int cohort) const {
    for (std::size_t i = 0; i < cohorts_.size(); ++i) {
      if (cohorts_[i] == cohort) return i;
    }
    fail(ErrorKind::NotFound, "unknown cohort " + std::to_string(cohort));
  }

  /// Survey year of a cell: cohort + age.
  int year(std::size_t id) const {
    return cohorts_[level(id, 1)] + age_min_ + static_cast<int>(level(id, 2));
  }

  /// Demographic cell (location, cohort, sex) that pools the ages of `id`.
  std::size_t demographic_id(std::size_t id) const {
    const std::size_t sex = has_sex_ ? (id % n_binary_) / n_risk_categories() : 0;
    return (level(id, 0) * n_cohorts_ + level(id, 1)) * (has_sex_ ? 2 : 1) + sex;
  }

  std::size_t risk_category(std::size_t id) const { return (id % n_binary_) % n_risk_categories(); }

private:
  std::vector<int> cohorts_;
  int age_min_ = 0;
  std::size_t n_locations_ = 0;
  std::size_t n_cohorts_ = 0;
  std::size_t n_ages_ = 0;
  bool has_sex_ = false;
  std::size_t n_risk_ = 0;
  std::size_t n_binary_ = 0;
  std::size_t size_ = 0;
  std::vector<std::string> dim_names_;
  std::vector<std::size_t> dim_sizes_;
};

inline GridIndex enumerate_grid(const GridConfig& cfg) { return GridIndex(cfg); }

/// Demographic cells (location, cohort, sex); ages pooled within a cohort.
struct DemographicCell {
  std::size_t location = 0;
  std::size_t cohort = 0;  // index into the cohort list
  int sex = 0;

  bool operator==(const DemographicCell&) const = default;
};

class DemographicIndex {
public:
  DemographicIndex() = default;
  explicit DemographicIndex(const GridConfig& cfg)
      : n_locations_(cfg.n_locations()), n_cohorts_(cfg.n_cohorts()), n_sex_(cfg.n_sex_levels()) {}

  std::size_t size() const { return n_locations_ * n_cohorts_ * n_sex_; }
  std::size_t n_sex_levels() const { return n_sex_; }

  std::size_t id(const DemographicCell& c) const {
    if (c.location >= n_locations_ || c.cohort >= n_cohorts_ || c.sex < 0 ||
        static_cast<std::size_t>(c.sex) >= n_sex_) {
      fail(ErrorKind::NotFound, "demographic cell outside grid");
    }
    return (c.location * n_cohorts_ + c.cohort) * n_sex_ + static_cast<std::size_t>(c.sex);
  }

  DemographicCell cell(std::size_t id) const {
    DemographicCell c;
    c.sex = static_cast<int>(id % n_sex_);
    id /= n_sex_;
    c.cohort = id % n_cohorts_;
    c.location = id / n_cohorts_;
    return c;
  }

private:
  std::size_t n_locations_ = 0;
  std::size_t n_cohorts_ = 0;
  std::size_t n_sex_ = 1;
};

}  // namespace prevcurve

#endif  // PREVCURVE_GRID_HPP
