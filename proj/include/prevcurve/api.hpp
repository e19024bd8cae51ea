#ifndef PREVCURVE_API_HPP
#define PREVCURVE_API_HPP

// HTTP/JSON interface over a loaded store.
//
//   GET /api/v1/metadata
//   GET /api/v1/prevalence?disease=..&view=year|age&f=<dim>:<value>...
//                         &stratify=<dim>&bands=true&level=0.9&scale=prevalence|per_100k|absolute
//   GET /healthz
//
// Only aggregated curves leave the service; per-cell particles are never exposed.

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <ctime>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "prevcurve/digest.hpp"
#include "prevcurve/error.hpp"
#include "prevcurve/particle_store.hpp"
#include "prevcurve/query.hpp"

// Last: <resolv.h>, pulled in by httplib, defines a _res macro that collides with Eigen.
#include <httplib.h>

namespace prevcurve {

inline constexpr const char* kLicense = "CC BY-NC-SA 4.0";

using QueryParams = std::multimap<std::string, std::string>;

/// Error tied to a named request parameter.
class ParameterError : public Error {
public:
  ParameterError(ErrorKind kind, std::string parameter, const std::string& what)
      : Error(kind, what), parameter_(std::move(parameter)) {}
  const std::string& parameter() const { return parameter_; }

private:
  std::string parameter_;
};

struct PrevalenceRequest {
  PrevalenceQuery query;
  Scale scale = Scale::Prevalence;
};

namespace detail {

inline std::optional<std::string> single_param(const QueryParams& params, const std::string& name) {
  const auto [b, e] = params.equal_range(name);
  if (b == e) return std::nullopt;
  if (std::next(b) != e) throw ParameterError(ErrorKind::InvalidArgument, name, "parameter '" + name + "' given more than once");
  return b->second;
}

inline bool parse_flag(const std::string& name, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ParameterError(ErrorKind::InvalidArgument, name, "parameter '" + name + "' must be true or false");
}

inline int parse_int_param(const std::string& name, const std::string& v) {
  try {
    std::size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ParameterError(ErrorKind::InvalidArgument, name, "value '" + v + "' is not an integer");
  }
}

}  // namespace detail

/// Validates query parameters against the store's grid.
inline PrevalenceRequest parse_prevalence_params(const QueryEngine& engine, const QueryParams& params) {
  static const std::vector<std::string> known = {"disease", "view", "f", "stratify", "bands", "level", "scale", "uncertainty"};
  for (const auto& [k, v] : params) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw ParameterError(ErrorKind::InvalidArgument, k, "unknown parameter '" + k + "'");
    }
  }
  const auto& g = engine.grid();
  const auto& cfg = engine.config();
  PrevalenceRequest req;
  auto& q = req.query;

  const auto disease = detail::single_param(params, "disease");
  if (!disease || disease->empty()) throw ParameterError(ErrorKind::InvalidArgument, "disease", "parameter 'disease' is required");
  try {
    cfg.diseases.index_of(*disease);
  } catch (const Error& e) {
    throw ParameterError(ErrorKind::NotFound, "disease", e.what());
  }
  q.disease = *disease;

  if (const auto view = detail::single_param(params, "view")) {
    if (*view == "year") {
      q.view = View::ByYear;
    } else if (*view == "age") {
      q.view = View::ByAge;
    } else {
      throw ParameterError(ErrorKind::InvalidArgument, "view", "view must be 'year' or 'age'");
    }
  }

  // Repeated filters on one dimension form a set; region expands to its locations.
  std::map<std::size_t, std::vector<std::size_t>> chosen;
  const auto [fb, fe] = params.equal_range("f");
  for (auto it = fb; it != fe; ++it) {
    const auto& raw = it->second;
    const auto colon = raw.find(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == raw.size()) {
      throw ParameterError(ErrorKind::InvalidArgument, "f", "filter '" + raw + "' must look like <dimension>:<value>");
    }
    const auto dim_name = raw.substr(0, colon);
    const auto value = raw.substr(colon + 1);
    if (dim_name == "region") {
      const auto locs = cfg.locations_in_region(value);
      if (locs.empty()) throw ParameterError(ErrorKind::NotFound, "f", "unknown region '" + value + "'");
      auto& dst = chosen[0];
      dst.insert(dst.end(), locs.begin(), locs.end());
      continue;
    }
    std::size_t dim = 0;
    try {
      dim = g.dimension_index(dim_name);
    } catch (const Error&) {
      throw ParameterError(ErrorKind::InvalidArgument, "f", "unknown filter dimension '" + dim_name + "'");
    }
    std::size_t level = 0;
    if (dim == 0) {
      try {
        level = cfg.location_index(value);
      } catch (const Error& e) {
        throw ParameterError(ErrorKind::NotFound, "f", e.what());
      }
    } else if (dim == 1) {
      const int cohort = detail::parse_int_param("f", value);
      try {
        level = g.cohort_index(cohort);
      } catch (const Error& e) {
        throw ParameterError(ErrorKind::NotFound, "f", e.what());
      }
    } else if (dim == 2) {
      const int age = detail::parse_int_param("f", value);
      if (age < cfg.age_min || age > cfg.age_max) {
        throw ParameterError(ErrorKind::NotFound, "f", "age " + value + " outside the configured span");
      }
      level = static_cast<std::size_t>(age - cfg.age_min);
    } else {
      const int v = detail::parse_int_param("f", value);
      if (v != 0 && v != 1) throw ParameterError(ErrorKind::InvalidArgument, "f", "binary filter '" + dim_name + "' takes 0 or 1");
      level = static_cast<std::size_t>(v);
    }
    chosen[dim].push_back(level);
  }
  q.conditioning = ConditioningSet(g);
  for (const auto& [dim, levels] : chosen) q.conditioning.restrict_to(dim, levels);

  if (const auto s = detail::single_param(params, "stratify"); s && !s->empty()) {
    try {
      q.stratify_by = g.dimension_index(*s);
    } catch (const Error&) {
      throw ParameterError(ErrorKind::InvalidArgument, "stratify", "unknown stratification dimension '" + *s + "'");
    }
  }
  if (const auto b = detail::single_param(params, "bands")) q.bands = detail::parse_flag("bands", *b);
  if (const auto u = detail::single_param(params, "uncertainty")) {
    if (*u == "full") {
      q.weight_uncertainty = true;
    } else if (*u == "parameters") {
      q.weight_uncertainty = false;
    } else {
      throw ParameterError(ErrorKind::InvalidArgument, "uncertainty", "uncertainty must be 'full' or 'parameters'");
    }
  }
  if (const auto l = detail::single_param(params, "level")) {
    double level = 0.0;
    try {
      std::size_t used = 0;
      level = std::stod(*l, &used);
      if (used != l->size()) throw std::invalid_argument(*l);
    } catch (const std::exception&) {
      throw ParameterError(ErrorKind::InvalidArgument, "level", "level must be a number");
    }
    if (!(level > 0.0 && level < 1.0)) throw ParameterError(ErrorKind::InvalidArgument, "level", "level must lie in (0, 1)");
    q.band_level = level;
  }
  if (const auto s = detail::single_param(params, "scale")) {
    if (*s == "prevalence") {
      req.scale = Scale::Prevalence;
    } else if (*s == "per_100k") {
      req.scale = Scale::Per100k;
    } else if (*s == "absolute") {
      req.scale = Scale::Absolute;
    } else {
      throw ParameterError(ErrorKind::InvalidArgument, "scale", "scale must be prevalence, per_100k or absolute");
    }
  }
  return req;
}

/// The response body shared by the HTTP endpoint and the CLI.
inline nlohmann::json prevalence_json(const QueryEngine& engine, const QueryParams& params) {
  const auto req = parse_prevalence_params(engine, params);
  auto curves = expected_cases(engine.curve(req.query), req.scale);
  return curve_to_json(curves, engine.config());
}

inline nlohmann::json metadata_json(const QueryEngine& engine) {
  const auto& cfg = engine.config();
  const auto& g = engine.grid();
  nlohmann::json j;
  j["license"] = kLicense;
  auto& diseases = j["diseases"] = nlohmann::json::array();
  for (std::size_t d = 0; d < cfg.diseases.size(); ++d) {
    diseases.push_back({{"id", cfg.diseases.ids[d]}, {"name", cfg.diseases.names[d]}});
  }
  auto& regions = j["regions"] = nlohmann::json::array();
  for (const auto& r : cfg.region_names()) {
    std::vector<std::string> locs;
    for (auto l : cfg.locations_in_region(r)) locs.push_back(cfg.locations[l]);
    regions.push_back({{"name", r}, {"locations", locs}});
  }
  j["locations"] = cfg.locations;
  j["cohorts"] = cfg.cohorts;
  j["age_span"] = {{"min", cfg.age_min}, {"max", cfg.age_max}};
  j["year_window"] = {{"min", cfg.year_min}, {"max", cfg.year_max}};
  auto& dims = j["dimensions"] = nlohmann::json::array();
  for (std::size_t d = 0; d < g.n_dimensions(); ++d) {
    dims.push_back({{"name", g.dimension_names()[d]},
                    {"levels", g.dimension_sizes()[d]},
                    {"stratifiable", g.dimension_sizes()[d] <= kMaxStrata}});
  }
  j["max_strata"] = kMaxStrata;
  j["views"] = {"year", "age"};
  j["scales"] = {"prevalence", "per_100k", "absolute"};
  j["default_band_level"] = kDefaultBandLevel;
  j["particles"] = engine.store().particles();
  j["cells"] = g.size();
  j["store_digest"] = engine.store().digest;
  return j;
}

struct ApiResponse {
  int status = 200;
  std::string body;
  std::vector<std::pair<std::string, std::string>> headers;
};

struct ApiConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string store_path;
  std::string margins_path;  // optional override of the store's embedded margins
  std::vector<std::string> allowed_origins;
  std::string request_log;
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof(out), "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

/// Stateless request handling; the only mutable state is the request log.
class ApiService {
public:
  ApiService(const QueryEngine& engine, std::string request_log = {})
      : engine_(engine), log_path_(std::move(request_log)), started_(std::chrono::steady_clock::now()) {
    metadata_body_ = metadata_json(engine_).dump();
  }

  ApiResponse handle(const std::string& path, const QueryParams& params, const std::string& if_none_match = {}) const {
    const auto t0 = std::chrono::steady_clock::now();
    ApiResponse res = dispatch(path, params);
    if (res.status == 200 && path != "/healthz") {
      const std::string etag = "\"" + engine_.store().digest.substr(0, 16) + "-" + request_key(path, params) + "\"";
      res.headers.emplace_back("ETag", etag);
      res.headers.emplace_back("Cache-Control", "public, max-age=300");
      if (!if_none_match.empty() && if_none_match == etag) {
        res.status = 304;
        res.body.clear();
      }
    }
    res.headers.emplace_back("X-Store-Digest", engine_.store().digest);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log(path, res.status, ms);
    return res;
  }

  const std::string& metadata_body() const { return metadata_body_; }

private:
  static std::string request_key(const std::string& path, const QueryParams& params) {
    std::string canon = path;
    for (const auto& [k, v] : params) canon += "&" + k + "=" + v;  // multimap order is deterministic
    return sha256_hex(canon).substr(0, 16);
  }

  static ApiResponse error_response(int status, const Error& e, const std::string& parameter = {}) {
    nlohmann::json body = {{"error", to_string(e.kind())}, {"message", e.what()}};
    if (!parameter.empty()) body["parameter"] = parameter;
    return {status, body.dump(), {}};
  }

  static int status_for(ErrorKind kind) {
    switch (kind) {
      case ErrorKind::InvalidArgument: return 400;
      case ErrorKind::NotFound: return 404;
      case ErrorKind::EmptySubgroup:
      case ErrorKind::TooManyLevels: return 422;
      default: return 500;
    }
  }

  ApiResponse dispatch(const std::string& path, const QueryParams& params) const {
    if (path == "/healthz") {
      const double uptime = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
      nlohmann::json body = {{"status", "ok"}, {"store_digest", engine_.store().digest}, {"uptime_s", uptime}};
      return {200, body.dump(), {}};
    }
    if (path == "/api/v1/metadata") return {200, metadata_body_, {}};
    if (path == "/api/v1/prevalence") {
      try {
        return {200, prevalence_json(engine_, params).dump(), {}};
      } catch (const ParameterError& e) {
        return error_response(status_for(e.kind()), e, e.parameter());
      } catch (const Error& e) {
        return error_response(status_for(e.kind()), e);
      }
    }
    return error_response(404, Error(ErrorKind::NotFound, "no such endpoint: " + path));
  }

  void log(const std::string& path, int status, double ms) const {
    if (log_path_.empty()) return;
    const nlohmann::json line = {{"timestamp", utc_timestamp()}, {"path", path}, {"latency_ms", ms}, {"status", status}};
    std::lock_guard lock(log_mutex_);
    std::ofstream out(log_path_, std::ios::app);
    out << line.dump() << '\n';
  }

  const QueryEngine& engine_;
  std::string log_path_;
  std::chrono::steady_clock::time_point started_;
  std::string metadata_body_;
  mutable std::mutex log_mutex_;
};

/// Binds the service to an httplib server; the caller owns start/stop.
inline void mount(httplib::Server& server, const ApiService& service, std::vector<std::string> allowed_origins = {}) {
  auto handler = [&service, origins = std::move(allowed_origins)](const httplib::Request& req, httplib::Response& res) {
    QueryParams params(req.params.begin(), req.params.end());
    const auto out = service.handle(req.path, params, req.get_header_value("If-None-Match"));
    res.status = out.status;
    for (const auto& [k, v] : out.headers) res.set_header(k, v);
    const auto origin = req.get_header_value("Origin");
    if (!origin.empty()) {
      for (const auto& o : origins) {
        if (o == "*" || o == origin) {
          res.set_header("Access-Control-Allow-Origin", o == "*" ? "*" : origin);
          res.set_header("Vary", "Origin");
          break;
        }
      }
    }
    if (out.status != 304) res.set_content(out.body, "application/json");
  };
  server.Get("/api/v1/metadata", handler);
  server.Get("/api/v1/prevalence", handler);
  server.Get("/healthz", handler);
}

}  // namespace prevcurve

#endif  // PREVCURVE_API_HPP
