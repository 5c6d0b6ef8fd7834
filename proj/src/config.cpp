#include "maskdiff/config.hpp"

#include <fstream>
#include <set>

namespace maskdiff::config {
namespace {

using nlohmann::json;

// Reads typed keys out of one JSON object and rejects anything left over.
class Section {
 public:
  Section(const json& doc, std::string name) : name_(std::move(name)) {
    if (!doc.is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
    obj_ = &doc;
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = obj_->find(key);
    if (it == obj_->end()) return;
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        if (!it->is_number_unsigned()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, double>) {
        if (!it->is_number()) throw ConfigError("");
      }
      out = it->get<T>();
    } catch (const std::exception&) {
      throw ConfigError("config: bad value for '" + path(key) + "'");
    }
  }

  /// Nested object, or nullptr when absent.
  const json* child(const char* key) {
    seen_.insert(key);
    const auto it = obj_->find(key);
    return it == obj_->end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const {
    return name_.empty() ? key : name_ + "." + key;
  }

  void finish() const {
    for (const auto& [k, v] : obj_->items()) {
      if (!seen_.contains(k)) throw ConfigError("config: unknown key '" + path(k) + "'");
    }
  }

 private:
  const json* obj_ = nullptr;
  std::string name_;
  std::set<std::string> seen_;
};

void read_synth(const json& j, SynthSection& s) {
  Section sec(j, "synth");
  auto& p = s.process;
  sec.get("vocab", p.vocab);
  sec.get("levels", p.levels);
  sec.get("semantic", p.semantic);
  sec.get("global", p.global);
  sec.get("temporal", p.temporal);
  sec.get("window", p.window);
  std::string emission = synth::to_string(p.emission);
  sec.get("emission", emission);
  p.emission = synth::emission_kind_from_string(emission);
  sec.get("peak_mass", p.peak_mass);
  sec.get("markov", p.markov);
  sec.get("markov_stay", p.markov_stay);
  sec.get("length", s.length);
  sec.get("train_count", s.train_count);
  sec.get("heldout_count", s.heldout_count);
  sec.get("frame_dim", s.frame_dim);
  sec.get("frame_noise", s.frame_noise);
  sec.finish();
}

void read_model(const json& j, ModelSection& m) {
  Section sec(j, "model");
  sec.get("width", m.width);
  sec.get("blocks", m.blocks);
  sec.get("heads", m.heads);
  sec.get("mlp_ratio", m.mlp_ratio);
  sec.get("time_dim", m.time_dim);
  sec.get("attention", m.attention);
  sec.get("var_floor", m.var_floor);
  sec.finish();
}

void read_train(const json& j, TrainSection& t) {
  Section sec(j, "train");
  auto& c = t.cfg;
  sec.get("learning_rate", c.learning_rate);
  sec.get("batch_size", c.batch_size);
  sec.get("steps", c.steps);
  sec.get("slot_dropout", c.slot_dropout);
  sec.get("all_null", c.all_null);
  if (const json* cur = sec.child("curriculum")) {
    if (!cur->is_array()) throw ConfigError("config: train.curriculum must be an array");
    c.curriculum.clear();
    for (const auto& st : *cur) {
      if (!st.is_array() || st.size() != 2 || !st[0].is_number_unsigned() ||
          !st[1].is_number_unsigned()) {
        throw ConfigError("config: train.curriculum entries must be [step, levels]");
      }
      c.curriculum.push_back({st[0].get<std::size_t>(), st[1].get<std::size_t>()});
    }
  }
  sec.get("beta1", c.beta1);
  sec.get("beta2", c.beta2);
  sec.get("adam_eps", c.adam_eps);
  sec.get("weight_decay", c.weight_decay);
  sec.get("t_min", c.t_min);
  sec.get("checkpoint_every", t.checkpoint_every);
  sec.get("log_every", t.log_every);
  sec.finish();
}

void read_rvq(const json& j, RvqSection& r) {
  Section sec(j, "rvq");
  sec.get("levels", r.levels);
  sec.get("vocab", r.vocab);
  sec.get("iterations", r.iterations);
  sec.finish();
}

void read_sample(const json& j, SampleSection& s) {
  Section sec(j, "sample");
  sec.get("steps", s.steps);
  sec.get("count", s.count);
  if (const json* g = sec.child("guidance")) {
    Section gs(*g, "sample.guidance");
    gs.get("full", s.guidance.full);
    gs.get("semantic", s.guidance.semantic);
    gs.get("global", s.guidance.global_style);
    gs.get("temporal", s.guidance.temporal_style);
    gs.finish();
  }
  sec.finish();
}

void read_refine(const json& j, RefineSection& r) {
  Section sec(j, "refine");
  sec.get("threshold", r.threshold);
  sec.get("steps", r.steps);
  sec.finish();
}

void read_eval(const json& j, EvalSection& e) {
  Section sec(j, "eval");
  sec.get("conditions", e.conditions);
  sec.get("samples_per_condition", e.samples_per_condition);
  sec.get("steps", e.steps);
  sec.get("heldout_t_min", e.heldout_t_min);
  sec.get("gradient_coords", e.gradient_coords);
  sec.finish();
}

}  // namespace

void RunConfig::validate() const {
  schedule.validate();
  synth.process.validate();
  if (synth.length == 0 || synth.length % synth.process.window != 0) {
    throw ConfigError("config: synth.length must be a positive multiple of synth.window");
  }
  if (synth.frame_dim == 0) throw ConfigError("config: synth.frame_dim must be positive");
  if (!(synth.frame_noise >= 0.0)) throw ConfigError("config: synth.frame_noise must be >= 0");
  model_config().validate();
  train.cfg.validate(synth.process.levels);
  if (train.log_every == 0) throw ConfigError("config: train.log_every must be positive");
  if (rvq.levels == 0 || rvq.vocab == 0 || rvq.iterations == 0) {
    throw ConfigError("config: rvq levels, vocab and iterations must be positive");
  }
  if (sample.steps == 0 || refine.steps == 0 || eval.steps == 0) {
    throw ConfigError("config: sampler step counts must be positive");
  }
  if (!(refine.threshold >= 0.0 && refine.threshold <= 1.0)) {
    throw ConfigError("config: refine.threshold not in [0, 1]");
  }
  if (eval.samples_per_condition == 0) {
    throw ConfigError("config: eval.samples_per_condition must be positive");
  }
  if (run_dir.empty()) throw ConfigError("config: run_dir must not be empty");
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.length = synth.length;
  m.levels = synth.process.levels;
  m.vocab = synth.process.vocab;
  m.semantic_dim = synth.process.semantic;
  m.global_dim = synth.process.global;
  m.temporal_dim = synth.process.temporal;
  m.window = synth.process.window;
  m.width = model.width;
  m.blocks = model.blocks;
  m.heads = model.heads;
  m.mlp_ratio = model.mlp_ratio;
  m.time_dim = model.time_dim;
  m.attention = model.attention;
  m.var_floor = model.var_floor;
  m.schedule = schedule;
  return m;
}

RunConfig from_json(const nlohmann::json& input) {
  const json& doc = input.contains("manifest_version") && input.contains("config")
                        ? input.at("config")
                        : input;
  RunConfig cfg;
  Section top(doc, "");
  top.get("seed", cfg.seed);
  top.get("run_dir", cfg.run_dir);
  if (const json* s = top.child("schedule")) {
    Section sec(*s, "schedule");
    std::string kind = to_string(cfg.schedule.kind);
    sec.get("kind", kind);
    cfg.schedule.kind = schedule_kind_from_string(kind);
    sec.get("eps", cfg.schedule.eps);
    sec.finish();
  }
  if (const json* s = top.child("synth")) read_synth(*s, cfg.synth);
  if (const json* s = top.child("model")) read_model(*s, cfg.model);
  if (const json* s = top.child("train")) read_train(*s, cfg.train);
  if (const json* s = top.child("rvq")) read_rvq(*s, cfg.rvq);
  if (const json* s = top.child("sample")) read_sample(*s, cfg.sample);
  if (const json* s = top.child("refine")) read_refine(*s, cfg.refine);
  if (const json* s = top.child("eval")) read_eval(*s, cfg.eval);
  top.finish();
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const RunConfig& c) {
  const auto& p = c.synth.process;
  const auto& t = c.train.cfg;
  json curriculum = json::array();
  for (const auto& st : t.curriculum) curriculum.push_back({st.step, st.levels});
  return json{
      {"seed", c.seed},
      {"run_dir", c.run_dir},
      {"schedule", {{"kind", to_string(c.schedule.kind)}, {"eps", c.schedule.eps}}},
      {"synth",
       {{"vocab", p.vocab},
        {"levels", p.levels},
        {"semantic", p.semantic},
        {"global", p.global},
        {"temporal", p.temporal},
        {"window", p.window},
        {"emission", synth::to_string(p.emission)},
        {"peak_mass", p.peak_mass},
        {"markov", p.markov},
        {"markov_stay", p.markov_stay},
        {"length", c.synth.length},
        {"train_count", c.synth.train_count},
        {"heldout_count", c.synth.heldout_count},
        {"frame_dim", c.synth.frame_dim},
        {"frame_noise", c.synth.frame_noise}}},
      {"model",
       {{"width", c.model.width},
        {"blocks", c.model.blocks},
        {"heads", c.model.heads},
        {"mlp_ratio", c.model.mlp_ratio},
        {"time_dim", c.model.time_dim},
        {"attention", c.model.attention},
        {"var_floor", c.model.var_floor}}},
      {"train",
       {{"learning_rate", t.learning_rate},
        {"batch_size", t.batch_size},
        {"steps", t.steps},
        {"slot_dropout", t.slot_dropout},
        {"all_null", t.all_null},
        {"curriculum", curriculum},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"adam_eps", t.adam_eps},
        {"weight_decay", t.weight_decay},
        {"t_min", t.t_min},
        {"checkpoint_every", c.train.checkpoint_every},
        {"log_every", c.train.log_every}}},
      {"rvq", {{"levels", c.rvq.levels}, {"vocab", c.rvq.vocab}, {"iterations", c.rvq.iterations}}},
      {"sample",
       {{"steps", c.sample.steps},
        {"count", c.sample.count},
        {"guidance",
         {{"full", c.sample.guidance.full},
          {"semantic", c.sample.guidance.semantic},
          {"global", c.sample.guidance.global_style},
          {"temporal", c.sample.guidance.temporal_style}}}}},
      {"refine", {{"threshold", c.refine.threshold}, {"steps", c.refine.steps}}},
      {"eval",
       {{"conditions", c.eval.conditions},
        {"samples_per_condition", c.eval.samples_per_condition},
        {"steps", c.eval.steps},
        {"heldout_t_min", c.eval.heldout_t_min},
        {"gradient_coords", c.eval.gradient_coords}}},
  };
}

RunConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config file not found: " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(doc);
}

std::uint64_t hash(const RunConfig& cfg) {
  const std::string s = to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace maskdiff::config
