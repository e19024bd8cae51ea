#ifndef PREVCURVE_CONFIG_HPP
#define PREVCURVE_CONFIG_HPP

// Key-value grid configuration.
//
//   # comment
//   locations = L01 L02 L03 L04
//   regions = North North South South
//   cohorts = 1960 1963 1966
//   age_min = 50
//   age_max = 54
//   year_min = 2010
//   year_max = 2020
//   sex = false
//   risk_factors = smoking education economic
//   diseases = cardio respiratory
//   disease_name.cardio = Cardiovascular diseases
//   kernel = geo_distance.txt 0.6           (dense matrix file, weight)
//   kernel_synthetic = 7 1.5 0.4            (coordinate seed, length scale, weight)
//
// Kernel file paths are resolved relative to the config file. Synthetic-data
// settings (posterior_draws, dispersion, ...) may share the same file.

#include <json.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "prevcurve/core_model.hpp"
#include "prevcurve/digest.hpp"
#include "prevcurve/error.hpp"
#include "prevcurve/random.hpp"

namespace prevcurve {

struct GridConfig {
  std::vector<std::string> locations;
  std::vector<std::string> regions;  // region of each location
  std::vector<int> cohorts;
  int age_min = 50;
  int age_max = 65;
  int year_min = 2010;
  int year_max = 2020;
  bool has_sex = false;
  std::vector<std::string> risk_factors;
  DiseasePanel diseases;
  KernelSpec kernel;

  std::size_t n_locations() const { return locations.size(); }
  std::size_t n_cohorts() const { return cohorts.size(); }
  std::size_t n_ages() const { return static_cast<std::size_t>(age_max - age_min + 1); }
  std::size_t n_sex_levels() const { return has_sex ? 2 : 1; }
  std::size_t n_risk_categories() const { return std::size_t{1} << risk_factors.size(); }
  std::size_t n_binary_combos() const { return n_sex_levels() * n_risk_categories(); }

  DesignLayout layout() const { return DesignLayout{age_min, age_max, has_sex, risk_factors.size()}; }

  std::size_t location_index(const std::string& id) const {
    auto it = std::find(locations.begin(), locations.end(), id);
    if (it == locations.end()) fail(ErrorKind::NotFound, "unknown location '" + id + "'");
    return static_cast<std::size_t>(it - locations.begin());
  }

  std::vector<std::string> region_names() const {
    std::vector<std::string> out;
    for (const auto& r : regions) {
      if (std::find(out.begin(), out.end(), r) == out.end()) out.push_back(r);
    }
    return out;
  }

  std::vector<std::size_t> locations_in_region(const std::string& region) const {
    std::vector<std::size_t> out;
    for (std::size_t l = 0; l < regions.size(); ++l) {
      if (regions[l] == region) out.push_back(l);
    }
    return out;
  }

  void validate() const {
    if (locations.empty()) fail(ErrorKind::InvalidArgument, "config: no locations");
    if (regions.size() != locations.size()) fail(ErrorKind::InvalidArgument, "config: regions must list one entry per location");
    if (cohorts.empty()) fail(ErrorKind::InvalidArgument, "config: no cohorts");
    if (!std::is_sorted(cohorts.begin(), cohorts.end()) ||
        std::adjacent_find(cohorts.begin(), cohorts.end()) != cohorts.end()) {
      fail(ErrorKind::InvalidArgument, "config: cohorts must be strictly increasing");
    }
    if (age_max < age_min) fail(ErrorKind::InvalidArgument, "config: age_max < age_min");
    if (year_max < year_min) fail(ErrorKind::InvalidArgument, "config: year_max < year_min");
    if (risk_factors.size() > 16) fail(ErrorKind::InvalidArgument, "config: too many risk factors");
    diseases.validate();
    kernel.validate();
    if (kernel.n_locations() != locations.size()) {
      fail(ErrorKind::InvalidArgument, "config: kernel matrices do not match the location count");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["locations"] = locations;
    j["regions"] = regions;
    j["cohorts"] = cohorts;
    j["age_min"] = age_min;
    j["age_max"] = age_max;
    j["year_min"] = year_min;
    j["year_max"] = year_max;
    j["sex"] = has_sex;
    j["risk_factors"] = risk_factors;
    j["diseases"] = diseases.ids;
    j["disease_names"] = diseases.names;
    auto& ks = j["kernel"] = nlohmann::json::array();
    for (const auto& c : kernel.components) {
      nlohmann::json rows = nlohmann::json::array();
      for (Eigen::Index r = 0; r < c.distance.rows(); ++r) {
        std::vector<double> row(c.distance.cols());
        for (Eigen::Index k = 0; k < c.distance.cols(); ++k) row[k] = c.distance(r, k);
        rows.push_back(row);
      }
      ks.push_back({{"source", c.source}, {"weight", c.weight}, {"distance", rows}});
    }
    return j;
  }

  static GridConfig from_json(const nlohmann::json& j) {
    GridConfig g;
    try {
      g.locations = j.at("locations").get<std::vector<std::string>>();
      g.regions = j.at("regions").get<std::vector<std::string>>();
      g.cohorts = j.at("cohorts").get<std::vector<int>>();
      g.age_min = j.at("age_min").get<int>();
      g.age_max = j.at("age_max").get<int>();
      g.year_min = j.at("year_min").get<int>();
      g.year_max = j.at("year_max").get<int>();
      g.has_sex = j.at("sex").get<bool>();
      g.risk_factors = j.at("risk_factors").get<std::vector<std::string>>();
      g.diseases.ids = j.at("diseases").get<std::vector<std::string>>();
      g.diseases.names = j.at("disease_names").get<std::vector<std::string>>();
      for (const auto& c : j.at("kernel")) {
        KernelComponent comp;
        comp.source = c.at("source").get<std::string>();
        comp.weight = c.at("weight").get<double>();
        const auto& rows = c.at("distance");
        const auto n = static_cast<Eigen::Index>(rows.size());
        comp.distance.resize(n, n);
        for (Eigen::Index r = 0; r < n; ++r) {
          const auto& row = rows.at(r);
          if (static_cast<Eigen::Index>(row.size()) != n) fail(ErrorKind::InputError, "kernel matrix not square");
          for (Eigen::Index k = 0; k < n; ++k) {
            // Infinite distances round-trip through JSON as null.
            comp.distance(r, k) = row.at(k).is_null() ? std::numeric_limits<double>::infinity()
                                                       : row.at(k).get<double>();
          }
        }
        g.kernel.components.push_back(std::move(comp));
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::InputError, std::string("grid config json: ") + e.what());
    }
    g.validate();
    return g;
  }

  std::string canonical_text() const { return to_json().dump(); }
  std::string digest() const { return sha256_hex(canonical_text()); }
};

enum class MarginsRegime { Uniform, LogNormal };

/// Knobs for the synthetic truth, ensemble, margins and survey.
struct GenerateSettings {
  std::size_t posterior_draws = 3000;
  double dispersion = 0.05;
  bool calibrated = true;
  std::size_t survey_size = 22000;
  MarginsRegime margins = MarginsRegime::LogNormal;
  double margins_mean = 20000.0;
  double margins_cv = 0.5;
  double weight_alpha = 0.5;
  std::size_t weight_replicates = 50;
  double truth_intercept = -2.0;
  double truth_beta_scale = 0.5;
  double truth_lambda0_scale = 0.3;
  double truth_lambda1_scale = 0.02;
  double truth_gamma = 1.2;
  double truth_weight_concentration = 20.0;

  nlohmann::json to_json() const {
    return {{"posterior_draws", posterior_draws},
            {"dispersion", dispersion},
            {"calibrated", calibrated},
            {"survey_size", survey_size},
            {"margins", margins == MarginsRegime::Uniform ? "uniform" : "lognormal"},
            {"margins_mean", margins_mean},
            {"margins_cv", margins_cv},
            {"weight_alpha", weight_alpha},
            {"weight_replicates", weight_replicates},
            {"truth_intercept", truth_intercept},
            {"truth_beta_scale", truth_beta_scale},
            {"truth_lambda0_scale", truth_lambda0_scale},
            {"truth_lambda1_scale", truth_lambda1_scale},
            {"truth_gamma", truth_gamma},
            {"truth_weight_concentration", truth_weight_concentration}};
  }
};

struct ConfigFile {
  GridConfig grid;
  GenerateSettings generate;
};

/// Dense whitespace-separated matrix, one row per line. `inf` is accepted.
inline Eigen::MatrixXd parse_dense_matrix(std::istream& in, const std::string& origin) {
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::vector<double> row;
    std::string tok;
    while (ls >> tok) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        fail(ErrorKind::InputError, origin + ": bad matrix entry '" + tok + "'");
      }
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    if (static_cast<Eigen::Index>(rows[r].size()) != n) fail(ErrorKind::InputError, origin + ": matrix is not square");
    for (Eigen::Index k = 0; k < n; ++k) m(r, k) = rows[r][k];
  }
  return m;
}

inline Eigen::MatrixXd read_dense_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::InputError, "cannot open matrix file " + path);
  return parse_dense_matrix(in, path);
}

/// Euclidean distances between seeded uniform points in the unit square,
/// divided by `length_scale`. exp(-D) of such a matrix is positive definite.
inline Eigen::MatrixXd synthetic_distance(std::size_t n, std::uint64_t seed, double length_scale) {
  auto rng = substream(seed, Stream::Kernel);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::pair<double, double>> pts(n);
  for (auto& p : pts) {
    p.first = u(rng);
    p.second = u(rng);
  }
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = i + 1; k < n; ++k) {
      const double v = std::hypot(pts[i].first - pts[k].first, pts[i].second - pts[k].second) / length_scale;
      d(i, k) = v;
      d(k, i) = v;
    }
  }
  return d;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    T out{};
    if constexpr (std::is_same_v<T, int>) {
      out = std::stoi(value, &used);
    } else if constexpr (std::is_same_v<T, std::size_t>) {
      if (!value.empty() && value.front() == '-') throw std::invalid_argument(value);
      out = static_cast<std::size_t>(std::stoull(value, &used));
    } else {
      out = std::stod(value, &used);
    }
    if (used != value.size()) throw std::invalid_argument(value);
    return out;
  } catch (const std::exception&) {
    fail(ErrorKind::InvalidArgument, "config: bad value for '" + key + "': '" + value + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "yes" || value == "1") return true;
  if (value == "false" || value == "no" || value == "0") return false;
  fail(ErrorKind::InvalidArgument, "config: bad boolean for '" + key + "': '" + value + "'");
}

}  // namespace detail

inline ConfigFile parse_config(std::istream& in, const std::filesystem::path& base_dir) {
  ConfigFile cfg;
  GridConfig& g = cfg.grid;
  GenerateSettings& s = cfg.generate;
  std::map<std::string, std::string> names;
  struct PendingKernel {
    std::size_t component;
    std::uint64_t seed;
    double length_scale;
  };
  std::vector<PendingKernel> synthetic;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::InvalidArgument, "config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto words = detail::split_ws(value);

    if (key == "locations") {
      g.locations = words;
    } else if (key == "regions") {
      g.regions = words;
    } else if (key == "cohorts") {
      g.cohorts.clear();
      for (const auto& w : words) g.cohorts.push_back(detail::parse_number<int>(key, w));
    } else if (key == "age_min") {
      g.age_min = detail::parse_number<int>(key, value);
    } else if (key == "age_max") {
      g.age_max = detail::parse_number<int>(key, value);
    } else if (key == "year_min") {
      g.year_min = detail::parse_number<int>(key, value);
    } else if (key == "year_max") {
      g.year_max = detail::parse_number<int>(key, value);
    } else if (key == "sex") {
      g.has_sex = detail::parse_bool(key, value);
    } else if (key == "risk_factors") {
      g.risk_factors = words;
    } else if (key == "diseases") {
      g.diseases.ids = words;
    } else if (key.rfind("disease_name.", 0) == 0) {
      names[key.substr(13)] = value;
    } else if (key == "kernel") {
      if (words.size() != 2) fail(ErrorKind::InvalidArgument, "config: kernel = <file> <weight>");
      const auto path = (base_dir / words[0]).string();
      g.kernel.components.push_back({words[0], read_dense_matrix(path), detail::parse_number<double>(key, words[1])});
    } else if (key == "kernel_synthetic") {
      if (words.size() != 3) fail(ErrorKind::InvalidArgument, "config: kernel_synthetic = <seed> <length_scale> <weight>");
      const auto seed = detail::parse_number<std::size_t>(key, words[0]);
      const auto scale = detail::parse_number<double>(key, words[1]);
      if (!(scale > 0)) fail(ErrorKind::InvalidArgument, "config: kernel length scale must be positive");
      // Location count may not be known yet; matrices are built after parsing.
      synthetic.push_back({g.kernel.components.size(), seed, scale});
      g.kernel.components.push_back({"synthetic:" + words[0] + ":" + words[1], Eigen::MatrixXd(),
                                     detail::parse_number<double>(key, words[2])});
    } else if (key == "posterior_draws") {
      s.posterior_draws = detail::parse_number<std::size_t>(key, value);
    } else if (key == "dispersion") {
      s.dispersion = detail::parse_number<double>(key, value);
    } else if (key == "calibrated") {
      s.calibrated = detail::parse_bool(key, value);
    } else if (key == "survey_size") {
      s.survey_size = detail::parse_number<std::size_t>(key, value);
    } else if (key == "margins") {
      if (value == "uniform") {
        s.margins = MarginsRegime::Uniform;
      } else if (value == "lognormal") {
        s.margins = MarginsRegime::LogNormal;
      } else {
        fail(ErrorKind::InvalidArgument, "config: margins must be uniform or lognormal");
      }
    } else if (key == "margins_mean") {
      s.margins_mean = detail::parse_number<double>(key, value);
    } else if (key == "margins_cv") {
      s.margins_cv = detail::parse_number<double>(key, value);
    } else if (key == "weight_alpha") {
      s.weight_alpha = detail::parse_number<double>(key, value);
    } else if (key == "weight_replicates") {
      s.weight_replicates = detail::parse_number<std::size_t>(key, value);
    } else if (key == "truth_intercept") {
      s.truth_intercept = detail::parse_number<double>(key, value);
    } else if (key == "truth_beta_scale") {
      s.truth_beta_scale = detail::parse_number<double>(key, value);
    } else if (key == "truth_lambda0_scale") {
      s.truth_lambda0_scale = detail::parse_number<double>(key, value);
    } else if (key == "truth_lambda1_scale") {
      s.truth_lambda1_scale = detail::parse_number<double>(key, value);
    } else if (key == "truth_gamma") {
      s.truth_gamma = detail::parse_number<double>(key, value);
    } else if (key == "truth_weight_concentration") {
      s.truth_weight_concentration = detail::parse_number<double>(key, value);
    } else {
      fail(ErrorKind::InvalidArgument, "config: unknown key '" + key + "'");
    }
  }

  if (g.regions.empty()) g.regions.assign(g.locations.size(), "all");
  for (const auto& k : synthetic) {
    g.kernel.components[k.component].distance = synthetic_distance(g.locations.size(), k.seed, k.length_scale);
  }
  g.diseases.names.clear();
  for (const auto& id : g.diseases.ids) {
    auto it = names.find(id);
    g.diseases.names.push_back(it == names.end() ? id : it->second);
  }
  g.validate();
  return cfg;
}

inline ConfigFile load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::InputError, "cannot open config " + path);
  return parse_config(in, std::filesystem::path(path).parent_path());
}

inline ConfigFile parse_config_text(const std::string& text, const std::filesystem::path& base_dir = {}) {
  std::istringstream in(text);
  return parse_config(in, base_dir);
}

}  // namespace prevcurve

#endif  // PREVCURVE_CONFIG_HPP
