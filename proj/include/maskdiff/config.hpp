#pragma once

// Run configuration. The file is JSON with the sections below; every section
// and every key is optional, but a key that is not listed here is an error.
//
//   seed                  u64, used when --seed is not given
//   run_dir               output directory
//   schedule   { kind ("log_linear"), eps }
//   synth      { vocab, levels, semantic, global, temporal, window, length,
//                emission ("uniform" | "one_hot" | "peaked" | "random"),
//                peak_mass, markov, markov_stay, train_count, heldout_count,
//                frame_dim, frame_noise }
//   model      { width, blocks, heads, mlp_ratio, time_dim, attention,
//                var_floor }
//   train      { learning_rate, batch_size, steps, slot_dropout, all_null,
//                curriculum ([[step, levels], ...]), beta1, beta2, adam_eps,
//                weight_decay, t_min, checkpoint_every, log_every }
//   rvq        { levels, vocab, iterations }
//   sample     { steps, count, guidance { full, semantic, global, temporal } }
//   refine     { threshold, steps }
//   eval       { conditions, samples_per_condition, steps, heldout_t_min,
//                gradient_coords }
//
// The model's sequence shape and condition widths come from `synth`: length
// L, levels R, vocab n, and the one-hot widths A, G, E with window U.

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "maskdiff/model.hpp"
#include "maskdiff/synthdata.hpp"
#include "maskdiff/training.hpp"

namespace maskdiff::config {

struct SynthSection {
  synth::ProcessConfig process;
  std::size_t length = 8;
  std::size_t train_count = 4096;
  std::size_t heldout_count = 512;
  /// Continuous frames written next to the tokens for the quantizer tools.
  std::size_t frame_dim = 8;
  double frame_noise = 0.05;
};

struct ModelSection {
  std::size_t width = 64;
  std::size_t blocks = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t time_dim = 32;
  bool attention = true;
  double var_floor = 1e-5;
};

struct TrainSection {
  train::TrainConfig cfg;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t log_every = 1;
};

struct RvqSection {
  std::size_t levels = 4;
  std::size_t vocab = 16;
  std::size_t iterations = 20;
};

struct GuidanceWeights {
  double full = 1.0;
  double semantic = 0.0;
  double global_style = 0.0;
  double temporal_style = 0.0;
};

struct SampleSection {
  std::size_t steps = 64;
  std::size_t count = 64;
  GuidanceWeights guidance;
};

struct RefineSection {
  double threshold = 0.9;
  std::size_t steps = 64;
};

struct EvalSection {
  std::size_t conditions = 4;
  std::size_t samples_per_condition = 500;
  std::size_t steps = 64;
  double heldout_t_min = 1e-3;
  std::size_t gradient_coords = 20;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string run_dir = "run";
  NoiseSchedule schedule;
  SynthSection synth;
  ModelSection model;
  TrainSection train;
  RvqSection rvq;
  SampleSection sample;
  RefineSection refine;
  EvalSection eval;

  /// Throws ConfigError on inconsistent values.
  void validate() const;
  ModelConfig model_config() const;
};

/// Parses a config document. A manifest written by the CLI is accepted too:
/// its embedded "config" object is used. Throws ConfigError on unknown keys
/// or wrongly typed values.
RunConfig from_json(const nlohmann::json& doc);
nlohmann::json to_json(const RunConfig& cfg);

/// Throws IoError ("config file not found: ...") when the path is missing.
RunConfig load(const std::filesystem::path& path);

/// FNV-1a 64 of the canonical (sorted-key, compact) JSON form.
std::uint64_t hash(const RunConfig& cfg);

}  // namespace maskdiff::config
