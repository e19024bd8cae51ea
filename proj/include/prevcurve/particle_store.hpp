#ifndef PREVCURVE_PARTICLE_STORE_HPP
#define PREVCURVE_PARTICLE_STORE_HPP

// Precomputed joint particles p(y*, x | data) for every grid cell.
//
// Payload layout (inside the PREVSTOR container):
//   cell offset index   u64 x n_cells, byte offset of each block from blocks start
//   blocks              per cell: u16 probabilities [disease][particle],
//                                 f32 weights [particle]
//   weights section     margins + conditional weight tables
// Probabilities are 16-bit fixed point q / 65535.

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "prevcurve/config.hpp"
#include "prevcurve/container.hpp"
#include "prevcurve/core_model.hpp"
#include "prevcurve/error.hpp"
#include "prevcurve/grid.hpp"
#include "prevcurve/random.hpp"
#include "prevcurve/synthetic.hpp"
#include "prevcurve/weights.hpp"

namespace prevcurve {

inline constexpr double kQuantScale = 65535.0;

inline std::uint16_t quantize_probability(double p) {
  const double q = std::nearbyint(std::clamp(p, 0.0, 1.0) * kQuantScale);
  return static_cast<std::uint16_t>(q);
}

inline double dequantize_probability(std::uint16_t q) { return static_cast<double>(q) / kQuantScale; }

/// Evenly strided subsequence: stride floor(B/P), starting at index 0.
inline PosteriorEnsemble thin_sample(const PosteriorEnsemble& ens, std::size_t P) {
  const std::size_t B = ens.size();
  if (P < 1) fail(ErrorKind::InvalidArgument, "particle count must be at least 1");
  if (P > B) fail(ErrorKind::InvalidArgument, "cannot thin " + std::to_string(B) + " draws to " + std::to_string(P));
  const std::size_t stride = B / P;
  PosteriorEnsemble out = ens;
  out.values.clear();
  out.values.reserve(P * ens.n_params);
  for (std::size_t i = 0; i < P; ++i) {
    const auto row = ens.row(i * stride);
    out.values.insert(out.values.end(), row.begin(), row.end());
  }
  out.stride = ens.stride * stride;
  return out;
}

inline std::vector<std::size_t> thinning_indices(std::size_t B, std::size_t P) {
  if (P < 1 || P > B) fail(ErrorKind::InvalidArgument, "invalid thinning request");
  std::vector<std::size_t> idx(P);
  for (std::size_t i = 0; i < P; ++i) idx[i] = i * (B / P);
  return idx;
}

/// Unquantized particles of one cell.
struct ParticleBlock {
  std::size_t cell = 0;
  std::size_t n_diseases = 0;
  std::vector<double> probabilities;  // [disease][particle]
  std::vector<double> weights;        // [particle]

  std::size_t particles() const { return weights.size(); }
  double probability(std::size_t j, std::size_t b) const { return probabilities[j * particles() + b]; }
};

/// Particle b = predictive_probability(draw b, cell, eps_b) with a fresh
/// standard normal eps_b, paired with joint-weight replicate b mod W.
inline ParticleBlock precompute_cell(const GridIndex& grid, std::size_t cell, std::span<const ParameterDraw> draws,
                                     const JointWeights& joint, std::uint64_t seed) {
  if (cell >= grid.size()) fail(ErrorKind::NotFound, "cell id outside grid");
  if (joint.n_cells != grid.size() || joint.replicates == 0) {
    fail(ErrorKind::InputError, "cell " + std::to_string(cell) + ": no weight replicate available");
  }
  const auto profile = grid.profile(cell);
  const std::size_t P = draws.size();
  ParticleBlock block;
  block.cell = cell;
  block.n_diseases = draws.empty() ? 0 : draws.front().field.n_diseases;
  block.probabilities.resize(block.n_diseases * P);
  block.weights.resize(P);
  auto rng = substream(seed, Stream::Particles, cell);
  std::normal_distribution<double> n01;
  for (std::size_t b = 0; b < P; ++b) {
    const double eps = n01(rng);
    const auto pi = predictive_probability(draws[b], profile, eps);
    for (std::size_t j = 0; j < block.n_diseases; ++j) block.probabilities[j * P + b] = pi[j];
    const double w = joint.values[(b % joint.replicates) * joint.n_cells + cell];
    if (!std::isfinite(w) || w < 0.0) {
      fail(ErrorKind::InputError, "cell " + std::to_string(cell) + ": invalid weight for replicate " +
                                      std::to_string(b % joint.replicates));
    }
    block.weights[b] = w;
  }
  return block;
}

struct StoreHeader {
  std::string grid_digest;
  std::size_t particles = 0;
  std::size_t original_draws = 0;
  std::size_t stride = 1;
  std::vector<std::string> diseases;
  std::string layout_tag;
  std::uint64_t seed = 0;
  std::size_t n_cells = 0;
  std::size_t weight_replicates = 0;
  double dispersion = 0.0;
  bool calibrated = false;

  nlohmann::json to_json() const {
    return {{"grid_digest", grid_digest}, {"particles", particles},   {"original_draws", original_draws},
            {"stride", stride},           {"diseases", diseases},     {"layout", layout_tag},
            {"seed", seed},               {"n_cells", n_cells},       {"weight_replicates", weight_replicates},
            {"dispersion", dispersion},   {"calibrated", calibrated}};
  }

  static StoreHeader from_json(const nlohmann::json& j) {
    StoreHeader h;
    h.grid_digest = j.at("grid_digest").get<std::string>();
    h.particles = j.at("particles").get<std::size_t>();
    h.original_draws = j.at("original_draws").get<std::size_t>();
    h.stride = j.at("stride").get<std::size_t>();
    h.diseases = j.at("diseases").get<std::vector<std::string>>();
    h.layout_tag = j.at("layout").get<std::string>();
    h.seed = j.at("seed").get<std::uint64_t>();
    h.n_cells = j.at("n_cells").get<std::size_t>();
    h.weight_replicates = j.at("weight_replicates").get<std::size_t>();
    h.dispersion = j.at("dispersion").get<double>();
    h.calibrated = j.at("calibrated").get<bool>();
    return h;
  }
};

/// Loaded (or freshly computed) particle store. Immutable once built.
class ParticleStore {
public:
  StoreHeader header;
  GridConfig config;
  GridIndex grid;
  WeightsBundle weights;
  std::string digest;  // container header digest, set by write/read

  std::size_t n_diseases() const { return header.diseases.size(); }
  std::size_t particles() const { return header.particles; }

  std::span<const std::uint16_t> quantized(std::size_t cell, std::size_t j) const {
    const std::size_t P = particles();
    return std::span<const std::uint16_t>(probs_).subspan((cell * n_diseases() + j) * P, P);
  }

  std::span<const float> cell_weights(std::size_t cell) const {
    return std::span<const float>(weights_).subspan(cell * particles(), particles());
  }

  double probability(std::size_t cell, std::size_t j, std::size_t b) const {
    return dequantize_probability(quantized(cell, j)[b]);
  }

  void allocate() {
    probs_.assign(header.n_cells * n_diseases() * particles(), 0);
    weights_.assign(header.n_cells * particles(), 0.0f);
  }

  void store_block(const ParticleBlock& block) {
    const std::size_t P = particles();
    if (block.particles() != P || block.n_diseases != n_diseases()) fail(ErrorKind::InvalidArgument, "block shape mismatch");
    for (std::size_t j = 0; j < n_diseases(); ++j) {
      for (std::size_t b = 0; b < P; ++b) {
        probs_[(block.cell * n_diseases() + j) * P + b] = quantize_probability(block.probability(j, b));
      }
    }
    for (std::size_t b = 0; b < P; ++b) weights_[block.cell * P + b] = static_cast<float>(block.weights[b]);
  }

  std::vector<std::uint16_t>& raw_probabilities() { return probs_; }
  std::vector<float>& raw_weights() { return weights_; }
  const std::vector<std::uint16_t>& raw_probabilities() const { return probs_; }
  const std::vector<float>& raw_weights() const { return weights_; }

  std::size_t block_bytes() const { return particles() * (2 * n_diseases() + 4); }

private:
  std::vector<std::uint16_t> probs_;
  std::vector<float> weights_;
};

/// Precomputes every cell. Cells are handed out to `threads` workers; each
/// cell draws from its own substream, so the result does not depend on the
/// thread count.
inline ParticleStore precompute_store(const GridConfig& cfg, const PosteriorEnsemble& thinned,
                                      const WeightsBundle& weights, std::uint64_t seed, unsigned threads = 1) {
  cfg.validate();
  ParticleStore store;
  store.config = cfg;
  store.grid = GridIndex(cfg);
  store.weights = weights;
  auto& h = store.header;
  h.grid_digest = cfg.digest();
  h.particles = thinned.size();
  h.original_draws = thinned.original_size;
  h.stride = thinned.stride;
  h.diseases = cfg.diseases.ids;
  h.layout_tag = cfg.layout().tag(cfg.risk_factors);
  h.seed = seed;
  h.n_cells = store.grid.size();
  h.weight_replicates = weights.table.replicates;
  h.dispersion = thinned.dispersion;
  h.calibrated = thinned.calibrated;
  if (h.particles == 0) fail(ErrorKind::InvalidArgument, "empty ensemble");
  if (thinned.shape.field.n_diseases != cfg.diseases.size() || thinned.shape.field.n_locations != cfg.n_locations() ||
      thinned.shape.field.layout != cfg.layout()) {
    fail(ErrorKind::InputError, "ensemble does not match the grid configuration");
  }

  std::vector<ParameterDraw> draws;
  draws.reserve(h.particles);
  for (std::size_t b = 0; b < h.particles; ++b) draws.push_back(thinned.draw(b));
  const auto joint = demographic_decomposition(store.grid, weights.margins, weights.table);
  store.allocate();

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    try {
      for (;;) {
        const std::size_t cell = next.fetch_add(1);
        if (cell >= h.n_cells) break;
        store.store_block(precompute_cell(store.grid, cell, draws, joint, seed));
      }
    } catch (...) {
      std::lock_guard lock(error_mutex);
      if (!error) error = std::current_exception();
      next.store(h.n_cells);
    }
  };
  threads = std::max(1U, threads);
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return store;
}

inline void write_store(const std::string& path, ParticleStore& store) {
  const std::size_t n = store.header.n_cells;
  if (store.raw_probabilities().size() != n * store.n_diseases() * store.particles() ||
      store.raw_weights().size() != n * store.particles()) {
    fail(ErrorKind::InvalidArgument, "store blocks do not cover the grid exactly once");
  }
  const std::size_t P = store.particles();
  const std::size_t block = store.block_bytes();
  ByteWriter w;
  w.reserve(n * (8 + block) + 4096);
  for (std::size_t c = 0; c < n; ++c) w.put<std::uint64_t>(c * block);
  const std::size_t blocks_offset = w.size();
  for (std::size_t c = 0; c < n; ++c) {
    const auto probs = std::span<const std::uint16_t>(store.raw_probabilities()).subspan(c * store.n_diseases() * P,
                                                                                         store.n_diseases() * P);
    w.put_span(probs);
    w.put_span(store.cell_weights(c));
  }
  const std::size_t weights_offset = w.size();
  serialize_weights(w, store.weights);

  nlohmann::json meta = store.header.to_json();
  meta["grid"] = store.config.to_json();
  meta["weights"] = weights_meta(store.weights);
  meta["sections"] = {{"index_offset", 0},
                      {"blocks_offset", blocks_offset},
                      {"block_bytes", block},
                      {"weights_offset", weights_offset}};
  const auto c = write_container(path, ContainerKind::Particles, meta, w.bytes());
  store.digest = c.header_digest;
}

/// Loads and verifies a store. When `expected_grid_digest` is non-empty the
/// embedded grid must match it.
inline ParticleStore read_store(const std::string& path, const std::string& expected_grid_digest = {}) {
  const auto c = read_container(path, ContainerKind::Particles);
  ParticleStore store;
  std::size_t blocks_offset = 0;
  std::size_t block = 0;
  std::size_t weights_offset = 0;
  try {
    store.header = StoreHeader::from_json(c.meta);
    store.config = GridConfig::from_json(c.meta.at("grid"));
    const auto& s = c.meta.at("sections");
    blocks_offset = s.at("blocks_offset").get<std::size_t>();
    block = s.at("block_bytes").get<std::size_t>();
    weights_offset = s.at("weights_offset").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::StoreCorrupt, path + ": bad store metadata: " + e.what());
  } catch (const Error& e) {
    fail(ErrorKind::StoreCorrupt, path + ": " + e.what());
  }
  if (store.config.digest() != store.header.grid_digest) fail(ErrorKind::StoreCorrupt, path + ": grid digest mismatch");
  if (!expected_grid_digest.empty() && expected_grid_digest != store.header.grid_digest) {
    fail(ErrorKind::StoreCorrupt, path + ": store was built for a different grid configuration");
  }
  store.grid = GridIndex(store.config);
  const std::size_t n = store.header.n_cells;
  const std::size_t P = store.particles();
  if (n != store.grid.size() || block != store.block_bytes() || blocks_offset != 8 * n ||
      weights_offset != blocks_offset + n * block) {
    fail(ErrorKind::StoreCorrupt, path + ": section layout inconsistent with header");
  }
  ByteReader r(c.payload);
  for (std::size_t i = 0; i < n; ++i) {
    if (r.get<std::uint64_t>() != i * block) fail(ErrorKind::StoreCorrupt, path + ": cell offset index corrupted");
  }
  store.allocate();
  for (std::size_t i = 0; i < n; ++i) {
    r.get_into(std::span<std::uint16_t>(store.raw_probabilities()).subspan(i * store.n_diseases() * P, store.n_diseases() * P));
    r.get_into(std::span<float>(store.raw_weights()).subspan(i * P, P));
  }
  store.weights = deserialize_weights(r, c.meta.at("weights"), store.config);
  if (r.remaining() != 0) fail(ErrorKind::StoreCorrupt, path + ": trailing bytes in store payload");
  store.digest = c.header_digest;
  return store;
}

}  // namespace prevcurve

#endif  // PREVCURVE_PARTICLE_STORE_HPP
