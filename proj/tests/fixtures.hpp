#ifndef PREVCURVE_TEST_FIXTURES_HPP
#define PREVCURVE_TEST_FIXTURES_HPP

#include <cstdint>
#include <string>

#include "prevcurve/config.hpp"
#include "prevcurve/particle_store.hpp"
#include "prevcurve/synthetic.hpp"
#include "prevcurve/weights.hpp"

namespace prevcurve::fixtures {

inline ConfigFile config(const std::string& name) {
  return load_config(std::string(PREVCURVE_SOURCE_DIR) + "/configs/" + name);
}

struct StoreOptions {
  std::string config = "desk.cfg";
  std::uint64_t seed = 1;
  std::size_t draws = 3000;
  std::size_t particles = 300;
  double dispersion = -1.0;  // negative: take the config value
  std::size_t replicates = 0;  // 0: take the config value
  bool zero_gamma = false;
  std::size_t diseases = 0;  // 0: every disease in the config
  unsigned threads = 1;
};

struct Built {
  ConfigFile cfg;
  GroundTruth truth;
  ParticleStore store;
};

/// Runs the whole synthetic pipeline in memory.
inline Built build_store(const StoreOptions& o) {
  Built b{config(o.config), {}, {}};
  auto& s = b.cfg.generate;
  if (o.diseases) {
    b.cfg.grid.diseases.ids.resize(o.diseases);
    b.cfg.grid.diseases.names.resize(o.diseases);
  }
  if (o.dispersion >= 0.0) s.dispersion = o.dispersion;
  if (o.replicates) s.weight_replicates = o.replicates;
  b.truth = generate_truth(b.cfg.grid, s, o.seed);
  if (o.zero_gamma) b.truth.draw.gamma.assign(b.truth.draw.gamma.size(), 0.0);
  const auto ens = draw_posterior_ensemble(b.truth, o.draws, s.dispersion, o.seed, s.calibrated);
  WeightsBundle w;
  w.margins = generate_margins(b.cfg.grid, s, o.seed);
  const auto survey = generate_survey(b.cfg.grid, b.truth, w.margins, s.survey_size, o.seed);
  w.table = estimate_weight_table(survey, b.cfg.grid, s.weight_alpha, s.weight_replicates, o.seed);
  b.store = precompute_store(b.cfg.grid, thin_sample(ens, o.particles), w, o.seed, o.threads);
  return b;
}

}  // namespace prevcurve::fixtures

#endif  // PREVCURVE_TEST_FIXTURES_HPP
