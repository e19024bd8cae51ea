// prevcurve: generate -> weights -> precompute -> serve / query -> validate.
//
// Exit codes: 0 ok, 2 validation failure, 3 input error, 4 store corruption.

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "prevcurve/config.hpp"
#include "prevcurve/container.hpp"
#include "prevcurve/digest.hpp"
#include "prevcurve/particle_store.hpp"
#include "prevcurve/query.hpp"
#include "prevcurve/synthetic.hpp"
#include "prevcurve/validation.hpp"
#include "prevcurve/weights.hpp"
#include "prevcurve/api.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace prevcurve;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitInput = 3;
constexpr int kExitCorrupt = 4;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Grids come either as a .cfg text file or as the grid.json written by generate.
GridConfig read_grid(const std::string& path) {
  if (fs::path(path).extension() == ".json") {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::InputError, "cannot open grid " + path);
    try {
      return GridConfig::from_json(json::parse(in));
    } catch (const json::exception& e) {
      fail(ErrorKind::InputError, "grid " + path + ": " + e.what());
    }
  }
  return load_config(path).grid;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::InputError, "cannot write " + path.string());
    out << text;
    if (!out) fail(ErrorKind::InputError, "short write to " + path.string());
  }
  fs::rename(tmp, path);
}

/// Record of one subcommand run; config plus seeds reproduce it.
struct RunManifest {
  std::string subcommand;
  json config = json::object();
  json seeds = json::object();
  json inputs = json::object();
  json outputs = json::object();
  json timings = json::object();
  json extra = json::object();

  void input(const std::string& name, const fs::path& p) {
    inputs[name] = {{"path", p.string()}, {"sha256", sha256_file_hex(p.string())}};
  }
  void output(const std::string& name, const fs::path& p) {
    outputs[name] = {{"path", p.string()}, {"sha256", sha256_file_hex(p.string())}};
  }

  void write(const fs::path& path) const {
    json j = {{"subcommand", subcommand}, {"config", config}, {"seeds", seeds},
              {"inputs", inputs},         {"outputs", outputs}, {"timings_s", timings}};
    for (const auto& [k, v] : extra.items()) j[k] = v;
    write_text_atomic(path, j.dump(2) + "\n");
  }
};

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  std::string config;
  std::uint64_t seed = 1;
  std::string out;
};

int run_generate(const GenerateArgs& a) {
  const auto t0 = Clock::now();
  const auto cfg = load_config(a.config);
  const auto& grid = cfg.grid;
  const auto& s = cfg.generate;
  const fs::path out(a.out);
  fs::create_directories(out);
  RunManifest m;
  m.subcommand = "generate";
  m.config = {{"grid", grid.to_json()}, {"generate", s.to_json()}};
  m.seeds = {{"seed", a.seed}};
  m.input("config", a.config);

  auto t = Clock::now();
  const auto truth = generate_truth(grid, s, a.seed);
  const auto ensemble = draw_posterior_ensemble(truth, s.posterior_draws, s.dispersion, a.seed, s.calibrated);
  m.timings["posterior"] = seconds_since(t);
  t = Clock::now();
  const auto margins = generate_margins(grid, s, a.seed);
  const auto survey = generate_survey(grid, truth, margins, s.survey_size, a.seed);
  m.timings["survey"] = seconds_since(t);
  t = Clock::now();
  WeightsBundle bundle{margins, estimate_weight_table(survey, grid, s.weight_alpha, s.weight_replicates, a.seed)};
  m.timings["weights"] = seconds_since(t);

  write_text_atomic(out / "grid.json", grid.to_json().dump(2) + "\n");
  write_truth((out / "truth.bin").string(), grid, truth);
  write_ensemble((out / "ensemble.bin").string(), grid, ensemble);
  write_margins_csv((out / "margins.csv").string(), grid, margins);
  write_survey_csv((out / "survey.csv").string(), grid, survey);
  write_weights((out / "weights.bin").string(), grid, bundle);
  for (const auto* name : {"grid.json", "truth.bin", "ensemble.bin", "margins.csv", "survey.csv", "weights.bin"}) {
    m.output(fs::path(name).stem().string(), out / name);
  }
  const GridIndex index(grid);
  m.extra = {{"cells", index.size()},
             {"posterior_draws", ensemble.size()},
             {"survey_records", survey.size()},
             {"grid_digest", grid.digest()}};
  m.timings["total"] = seconds_since(t0);
  m.write(out / "manifest.json");
  std::cout << "generated " << index.size() << "-cell grid, " << ensemble.size() << " posterior draws, "
            << survey.size() << " survey records into " << out.string() << "\n";
  return kExitOk;
}

// ----------------------------------------------------------------- weights

struct WeightsArgs {
  std::string grid;
  std::string survey;
  std::string margins;
  double alpha = 0.5;
  std::size_t replicates = 50;
  std::uint64_t seed = 1;
  std::string out;
  std::string debug;
};

int run_weights(const WeightsArgs& a) {
  const auto t0 = Clock::now();
  const auto grid = read_grid(a.grid);
  const auto survey = read_survey_csv(a.survey, grid);
  const auto margins = read_margins_csv(a.margins, grid);
  WeightsBundle bundle{margins, estimate_weight_table(survey, grid, a.alpha, a.replicates, a.seed)};
  write_weights(a.out, grid, bundle);
  if (!a.debug.empty()) write_weights_debug(a.debug, grid, bundle.table);
  RunManifest m;
  m.subcommand = "weights";
  m.config = {{"grid_digest", grid.digest()}, {"alpha", a.alpha}, {"replicates", a.replicates}};
  m.seeds = {{"seed", a.seed}};
  m.input("grid", a.grid);
  m.input("survey", a.survey);
  m.input("margins", a.margins);
  m.output("weights", a.out);
  std::size_t fallback = 0;
  for (const auto& c : bundle.table.cells) fallback += c.support != WeightSupport::Observed;
  m.extra = {{"demographic_cells", bundle.table.cells.size()}, {"fallback_cells", fallback}};
  m.timings["total"] = seconds_since(t0);
  m.write(a.out + ".manifest.json");
  std::cout << "estimated weights for " << bundle.table.cells.size() << " demographic cells (" << fallback
            << " pooled)\n";
  return kExitOk;
}

// -------------------------------------------------------------- precompute

struct PrecomputeArgs {
  std::string grid;
  std::string ensemble;
  std::string weights;
  std::size_t particles = 300;
  std::uint64_t seed = 1;
  unsigned threads = 0;
  std::string out;
};

int run_precompute(const PrecomputeArgs& a) {
  const auto t0 = Clock::now();
  const auto grid = read_grid(a.grid);
  GridConfig ens_grid;
  const auto ensemble = read_ensemble(a.ensemble, &ens_grid);
  if (ens_grid.digest() != grid.digest()) fail(ErrorKind::InputError, "ensemble was generated for a different grid");
  const auto weights = read_weights(a.weights, grid);
  const auto thinned = thin_sample(ensemble, a.particles);
  const unsigned threads = a.threads ? a.threads : std::max(1U, std::thread::hardware_concurrency());

  auto t = Clock::now();
  auto store = precompute_store(grid, thinned, weights, a.seed, threads);
  const double compute_s = seconds_since(t);
  t = Clock::now();
  write_store(a.out, store);
  const double write_s = seconds_since(t);

  RunManifest m;
  m.subcommand = "precompute";
  m.config = {{"grid_digest", grid.digest()}, {"particles", a.particles}, {"threads", threads}};
  m.seeds = {{"seed", a.seed}};
  m.input("grid", a.grid);
  m.input("ensemble", a.ensemble);
  m.input("weights", a.weights);
  m.output("store", a.out);
  m.extra = {{"cells", store.header.n_cells},
             {"particles", store.particles()},
             {"stride", store.header.stride},
             {"store_digest", store.digest},
             {"bytes", fs::file_size(a.out)}};
  m.timings = {{"precompute", compute_s}, {"write", write_s}, {"total", seconds_since(t0)}};
  m.write(a.out + ".manifest.json");
  std::cout << "precomputed " << store.header.n_cells << " cells x " << store.particles() << " particles in "
            << std::fixed << std::setprecision(2) << compute_s << " s; store digest " << store.digest << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------- query

struct QueryArgs {
  std::string store;
  std::string disease;
  std::string view = "year";
  std::vector<std::string> filters;
  std::string stratify;
  bool bands = false;
  double level = kDefaultBandLevel;
  std::string scale = "prevalence";
  bool table = false;
  std::string margins;
};

std::string format_value(const json& v) {
  if (v.is_null()) return "-";
  std::ostringstream os;
  os << std::setprecision(6) << v.get<double>();
  return os.str();
}

void print_table(const json& body) {
  std::cout << "# " << body.at("disease_name").get<std::string>() << " by " << body.at("view").get<std::string>()
            << " (" << body.at("scale").at("kind").get<std::string>() << ")\n";
  const auto& axis = body.at("axis");
  const bool bands = body.at("bands").get<bool>();
  std::cout << std::left << std::setw(8) << "x";
  for (const auto& s : body.at("series")) {
    const auto label = s.at("label").get<std::string>();
    std::cout << std::setw(14) << (label.empty() ? "mean" : label);
    if (bands) std::cout << std::setw(14) << "lo" << std::setw(14) << "hi";
  }
  std::cout << "\n";
  for (std::size_t i = 0; i < axis.size(); ++i) {
    std::cout << std::setw(8) << axis[i].get<int>();
    for (const auto& s : body.at("series")) {
      std::cout << std::setw(14) << format_value(s.at("mean")[i]);
      if (bands) std::cout << std::setw(14) << format_value(s.at("lo")[i]) << std::setw(14) << format_value(s.at("hi")[i]);
    }
    std::cout << "\n";
  }
}

int run_query(const QueryArgs& a) {
  const auto store = read_store(a.store);
  std::optional<DemographicMargins> margins;
  if (!a.margins.empty()) margins = read_margins_csv(a.margins, store.config);
  const QueryEngine engine(store, margins ? &*margins : nullptr);
  QueryParams params;
  params.emplace("disease", a.disease);
  params.emplace("view", a.view);
  for (const auto& f : a.filters) params.emplace("f", f);
  if (!a.stratify.empty()) params.emplace("stratify", a.stratify);
  if (a.bands) {
    params.emplace("bands", "true");
    std::ostringstream lv;
    lv << std::setprecision(17) << a.level;
    params.emplace("level", lv.str());
  }
  params.emplace("scale", a.scale);
  const auto body = prevalence_json(engine, params);
  if (a.table) {
    print_table(body);
  } else {
    std::cout << body.dump() << "\n";
  }
  return kExitOk;
}

// ------------------------------------------------------------------- serve

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop.store(true); }

int run_serve(const ApiConfig& c) {
  const auto store = read_store(c.store_path);
  std::optional<DemographicMargins> margins;
  if (!c.margins_path.empty()) margins = read_margins_csv(c.margins_path, store.config);
  const QueryEngine engine(store, margins ? &*margins : nullptr);
  const ApiService service(engine, c.request_log);
  httplib::Server server;
  mount(server, service, c.allowed_origins);
  if (!server.bind_to_port(c.host, c.port)) fail(ErrorKind::InputError, "cannot bind " + c.host + ":" + std::to_string(c.port));
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  // stop() closes the listener and lets in-flight requests finish.
  std::thread watcher([&server] {
    while (!g_stop.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
  });
  std::cout << "serving " << store.header.n_cells << " cells on http://" << c.host << ":" << c.port
            << " (store " << store.digest.substr(0, 12) << ")" << std::endl;
  server.listen_after_bind();
  g_stop.store(true);
  watcher.join();
  std::cout << "stopped\n";
  return kExitOk;
}

// ---------------------------------------------------------------- validate

struct ValidateArgs {
  std::string store;
  std::string truth;
  std::string report;
  ValidationOptions options;
};

int run_validate(const ValidateArgs& a) {
  const auto t0 = Clock::now();
  const auto store = read_store(a.store);
  GridConfig truth_grid;
  const auto truth = read_truth(a.truth, &truth_grid);
  if (truth_grid.digest() != store.header.grid_digest) fail(ErrorKind::InputError, "truth was generated for a different grid");
  const auto rep = validate_store(store, truth, a.options);
  json j = rep.to_json();
  j["store_digest"] = store.digest;
  j["truth_sha256"] = sha256_file_hex(a.truth);
  j["seed"] = a.options.seed;
  if (!a.report.empty()) write_text_atomic(a.report, j.dump(2) + "\n");
  if (!rep.notice.empty()) std::cout << "notice: " << rep.notice << "\n";
  std::cout << std::fixed << std::setprecision(4) << "coverage " << rep.coverage << " (" << rep.covered << "/"
            << rep.pairs << ", window [" << kCoverageLow << ", " << kCoverageHigh << "])"
            << (rep.coverage_checked ? "" : " not checked") << "\n"
            << std::scientific << std::setprecision(2) << "oracle max error " << rep.max_oracle_error << " over "
            << rep.oracle_checks << " conditionings\n"
            << (rep.passed() ? "PASS" : "FAIL") << " in " << std::fixed << seconds_since(t0) << " s\n";
  return rep.passed() ? kExitOk : kExitValidation;
}

int exit_code_for(ErrorKind k) { return k == ErrorKind::StoreCorrupt ? kExitCorrupt : kExitInput; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Precomputed Bayesian prevalence curves: generate, precompute, serve, query, validate"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Synthetic truth, posterior ensemble, margins, survey and weights");
  g->add_option("--config", gen.config, "Grid configuration (.cfg)")->required()->check(CLI::ExistingFile);
  g->add_option("--seed", gen.seed, "Master seed")->capture_default_str();
  g->add_option("--out", gen.out, "Output directory")->required();

  WeightsArgs wa;
  auto* w = app.add_subcommand("weights", "Re-estimate the weight posterior from a survey and margins");
  w->add_option("--grid", wa.grid, "grid.json or .cfg")->required()->check(CLI::ExistingFile);
  w->add_option("--survey", wa.survey, "Survey CSV")->required()->check(CLI::ExistingFile);
  w->add_option("--margins", wa.margins, "Margins CSV")->required()->check(CLI::ExistingFile);
  w->add_option("--alpha", wa.alpha, "Dirichlet prior concentration")->capture_default_str();
  w->add_option("--replicates", wa.replicates, "Posterior weight replicates")->capture_default_str();
  w->add_option("--seed", wa.seed, "Seed")->capture_default_str();
  w->add_option("--out", wa.out, "Output weights file")->required();
  w->add_option("--debug-csv", wa.debug, "Also write per-cell means and 90% intervals");

  PrecomputeArgs pa;
  auto* p = app.add_subcommand("precompute", "Thin the ensemble and precompute particles for every cell");
  p->add_option("--grid", pa.grid, "grid.json or .cfg")->required()->check(CLI::ExistingFile);
  p->add_option("--ensemble", pa.ensemble, "Posterior ensemble")->required()->check(CLI::ExistingFile);
  p->add_option("--weights", pa.weights, "Weights file")->required()->check(CLI::ExistingFile);
  p->add_option("--particles", pa.particles, "Particles kept after thinning")->capture_default_str();
  p->add_option("--seed", pa.seed, "Particle seed")->capture_default_str();
  p->add_option("--threads", pa.threads, "Worker threads (0 = all cores)")->capture_default_str();
  p->add_option("--out", pa.out, "Output store")->required();

  ApiConfig sc;
  auto* s = app.add_subcommand("serve", "Serve the HTTP API over a store");
  s->add_option("--store", sc.store_path, "Particle store")->required()->check(CLI::ExistingFile);
  s->add_option("--host", sc.host, "Bind address")->capture_default_str();
  s->add_option("--port", sc.port, "Port")->capture_default_str();
  s->add_option("--margins", sc.margins_path, "Margins CSV for absolute counts")->check(CLI::ExistingFile);
  s->add_option("--allow-origin", sc.allowed_origins, "CORS origin (repeatable, * for any)");
  s->add_option("--request-log", sc.request_log, "Append JSON request log lines here");

  QueryArgs qa;
  auto* q = app.add_subcommand("query", "Print one prevalence curve");
  q->add_option("--store", qa.store, "Particle store")->required()->check(CLI::ExistingFile);
  q->add_option("--disease", qa.disease, "Disease id")->required();
  q->add_option("--view", qa.view, "year or age")->capture_default_str();
  q->add_option("--filter,-f", qa.filters, "dimension:value (repeatable)");
  q->add_option("--stratify", qa.stratify, "Dimension to stratify by");
  q->add_flag("--bands", qa.bands, "Include credible bands");
  q->add_option("--level", qa.level, "Band level")->capture_default_str();
  q->add_option("--scale", qa.scale, "prevalence, per_100k or absolute")->capture_default_str();
  q->add_option("--margins", qa.margins, "Margins CSV for absolute counts")->check(CLI::ExistingFile);
  auto* as_json = q->add_flag("--json", "JSON output (default)");
  q->add_flag("--table", qa.table, "Plain-text table")->excludes(as_json);

  ValidateArgs va;
  auto* v = app.add_subcommand("validate", "Check band coverage and aggregation against the synthetic truth");
  v->add_option("--store", va.store, "Particle store")->required()->check(CLI::ExistingFile);
  v->add_option("--truth", va.truth, "Ground truth file")->required()->check(CLI::ExistingFile);
  v->add_option("--report", va.report, "Write the JSON report here");
  v->add_option("--seed", va.options.seed, "Validation seed")->capture_default_str();
  v->add_option("--pairs", va.options.pairs, "Sampled (cell, disease) pairs")->capture_default_str();
  v->add_option("--level", va.options.level, "Band level")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (*g) return run_generate(gen);
    if (*w) return run_weights(wa);
    if (*p) return run_precompute(pa);
    if (*s) return run_serve(sc);
    if (*q) return run_query(qa);
    if (*v) return run_validate(va);
  } catch (const ParameterError& e) {
    std::cerr << "error: " << to_string(e.kind()) << " (" << e.parameter() << "): " << e.what() << "\n";
    return kExitInput;
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.kind()) << ": " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}
