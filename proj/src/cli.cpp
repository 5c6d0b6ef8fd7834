#include "maskdiff/cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <optional>
#include <ostream>
#include <sstream>

#include "maskdiff/config.hpp"
#include "maskdiff/refine.hpp"
#include "maskdiff/rvq.hpp"

namespace maskdiff::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Seed streams; every artifact draws from its own derived seed.
enum Stream : std::uint64_t {
  kProcessStream = 1,
  kTrainDataStream = 2,
  kHeldoutStream = 3,
  kFrameStream = 4,
  kRvqStream = 5,
  kInitStream = 6,
  kTrainStream = 7,
  kSampleStream = 8,
  kRefineStream = 9,
  kEvalStream = 10,
};

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string run_dir;
};

struct Context {
  std::string command;
  config::RunConfig cfg;
  std::uint64_t seed = 0;
  fs::path dir;
  std::ostream& out;
  std::ostream& err;

  fs::path path(const std::string& rel) const { return dir / rel; }
};

// Exclusive marker for the run directory; removed when the command ends.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr) {
      throw IoError("run directory " + dir.string() + " is locked by another invocation (" +
                    path_.string() + ")");
    }
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

void write_manifest(const Context& ctx, const std::vector<std::string>& args) {
  config::RunConfig effective = ctx.cfg;
  effective.seed = ctx.seed;
  json m{{"manifest_version", 1},
         {"command", ctx.command},
         {"args", args},
         {"seed", ctx.seed},
         {"config_hash", hex(config::hash(effective))},
         {"versions",
          {{"maskdiff", kVersion},
           {"checkpoint_format", 1},
           {"codebook_format", 1},
           {"token_dataset_format", 1},
           {"condition_format", 1}}},
         {"config", config::to_json(effective)}};
  std::ofstream f(ctx.path("manifest." + ctx.command + ".json"));
  f << m.dump(2) << '\n';
  if (!f) throw IoError("cannot write manifest");
}

// Metrics: one JSON record per line plus a short human-readable summary.
class Report {
 public:
  explicit Report(const Context& ctx)
      : jsonl_(ctx.path("metrics." + ctx.command + ".jsonl")),
        summary_path_(ctx.path("summary." + ctx.command + ".txt")),
        out_(ctx.out) {
    if (!jsonl_) throw IoError("cannot write metrics file");
  }
  void record(const json& j) { jsonl_ << j.dump() << '\n'; }
  void line(const std::string& s) {
    summary_ << s << '\n';
    out_ << s << '\n';
  }
  ~Report() {
    std::ofstream f(summary_path_);
    f << summary_.str();
  }

 private:
  std::ofstream jsonl_;
  fs::path summary_path_;
  std::ostringstream summary_;
  std::ostream& out_;
};

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(6) << v;
  return s.str();
}

// --- shared loaders ---------------------------------------------------------

void save_process(const synth::Process& proc, const fs::path& path) {
  const auto& c = proc.config();
  json j{{"vocab", c.vocab},          {"levels", c.levels},           {"semantic", c.semantic},
         {"global", c.global},        {"temporal", c.temporal},       {"window", c.window},
         {"emission", synth::to_string(c.emission)}, {"peak_mass", c.peak_mass},
         {"markov", c.markov},        {"markov_stay", c.markov_stay},
         {"table", std::vector<double>(proc.table().begin(), proc.table().end())}};
  std::ofstream f(path);
  f << std::setprecision(17) << j.dump() << '\n';
  if (!f) throw IoError("cannot write " + path.string());
}

synth::Process load_process(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("process file not found: " + path.string() + " (run gen-data first)");
  const json j = json::parse(f);
  synth::ProcessConfig c;
  c.vocab = j.at("vocab");
  c.levels = j.at("levels");
  c.semantic = j.at("semantic");
  c.global = j.at("global");
  c.temporal = j.at("temporal");
  c.window = j.at("window");
  c.emission = synth::emission_kind_from_string(j.at("emission"));
  c.peak_mass = j.at("peak_mass");
  c.markov = j.at("markov");
  c.markov_stay = j.at("markov_stay");
  return synth::Process(c, j.at("table").get<std::vector<double>>());
}

std::vector<train::Example> load_examples(const fs::path& tokens, const fs::path& conds,
                                          const ModelConfig& mc) {
  auto grids = rvq::load_tokens(tokens);
  ConditionShape shape;
  auto bundles = load_conditions(conds, &shape);
  if (grids.size() != bundles.size()) {
    throw InvalidInput("dataset: " + tokens.string() + " and " + conds.string() +
                       " hold different sample counts");
  }
  std::vector<train::Example> out;
  for (std::size_t k = 0; k < grids.size(); ++k) {
    if (grids[k].length() != mc.length || grids[k].levels() != mc.levels ||
        grids[k].vocab() != mc.vocab) {
      throw ShapeError("dataset: grid shape does not match the configured model");
    }
    bundles[k].validate(mc.condition_shape());
    out.push_back({std::move(grids[k]), std::move(bundles[k])});
  }
  return out;
}

ScoreFn guided(const ScoreNetwork& net, const config::GuidanceWeights& w) {
  const bool plain = w.full == 1.0 && w.semantic == 0.0 && w.global_style == 0.0 &&
                     w.temporal_style == 0.0;
  if (plain) return as_score_fn(net);
  return [&net, w](const TokenGrid& xt, const ConditionBundle& cond, double t) {
    const ScoreField uncond = net.forward(xt, ConditionBundle::null(), t);
    std::vector<std::pair<ScoreField, double>> terms;
    if (w.full != 0.0) terms.emplace_back(net.forward(xt, cond, t), w.full);
    const std::pair<double, ConditionMask> slots[] = {
        {w.semantic, {true, false, false}},
        {w.global_style, {false, true, false}},
        {w.temporal_style, {false, false, true}}};
    for (const auto& [weight, keep] : slots) {
      if (weight != 0.0) terms.emplace_back(net.forward(xt, apply_mask(cond, keep), t), weight);
    }
    return guided_score(uncond, terms);
  };
}

// --- subcommands ------------------------------------------------------------

int gen_data(Context& ctx) {
  const auto& s = ctx.cfg.synth;
  Rng prng(derive_seed(ctx.seed, kProcessStream));
  const synth::Process proc = synth::Process::make(s.process, prng);
  fs::create_directories(ctx.path("data"));
  save_process(proc, ctx.path("data/process.json"));

  const auto shape = proc.condition_shape(s.length);
  auto write = [&](const std::string& name, const std::vector<synth::Sample>& samples) {
    std::vector<TokenGrid> grids;
    std::vector<ConditionBundle> conds;
    for (const auto& x : samples) {
      grids.push_back(x.grid);
      conds.push_back(x.cond);
    }
    rvq::save_tokens(grids, ctx.path("data/" + name + ".tokens"));
    save_conditions(conds, shape, ctx.path("data/" + name + ".cond"));
  };
  const auto train = synth::generate(proc, s.length, s.train_count, derive_seed(ctx.seed, kTrainDataStream));
  const auto held = synth::generate(proc, s.length, s.heldout_count, derive_seed(ctx.seed, kHeldoutStream));
  write("train", train);
  write("heldout", held);

  // Continuous frames: a random prototype per (level, token), shrinking with
  // depth, summed over levels, plus isotropic noise.
  Rng frng(derive_seed(ctx.seed, kFrameStream));
  const std::size_t n = s.process.vocab, R = s.process.levels, D = s.frame_dim;
  std::vector<Matrix> protos(R, Matrix(n, D));
  for (std::size_t r = 0; r < R; ++r)
    for (double& v : protos[r].flat()) v = frng.normal() * std::ldexp(1.0, -static_cast<int>(r));
  std::vector<Matrix> frames;
  for (const auto& x : train) {
    Matrix f(s.length, D);
    for (std::size_t i = 0; i < s.length; ++i)
      for (std::size_t d = 0; d < D; ++d) {
        double v = s.frame_noise * frng.normal();
        for (std::size_t r = 0; r < R; ++r) v += protos[r](x.grid.at(i, r), d);
        f(i, d) = v;
      }
    frames.push_back(std::move(f));
  }
  rvq::save_frames(frames, ctx.path("data/frames.bin"));

  Report rep(ctx);
  rep.record({{"train_count", train.size()}, {"heldout_count", held.size()},
              {"frames", frames.size()}, {"frame_dim", D}});
  rep.line("gen-data: " + std::to_string(train.size()) + " train / " +
           std::to_string(held.size()) + " held-out grids written to " +
           ctx.path("data").string());
  return 0;
}

int train_rvq(Context& ctx, const std::string& frames_arg) {
  const fs::path frames_path = frames_arg.empty() ? ctx.path("data/frames.bin") : fs::path(frames_arg);
  const Matrix rows = rvq::stack_rows(rvq::load_frames(frames_path));
  Rng rng(derive_seed(ctx.seed, kRvqStream));
  const auto cb = rvq::train(rows, {ctx.cfg.rvq.levels, ctx.cfg.rvq.vocab, ctx.cfg.rvq.iterations}, rng);
  fs::create_directories(ctx.path("rvq"));
  rvq::save(cb, ctx.path("rvq/codebooks.bin"));
  const auto energy = rvq::residual_energy(rows, cb);
  Report rep(ctx);
  rep.record({{"residual_energy", energy}});
  std::string s = "train-rvq: residual energy by level:";
  for (double e : energy) s += " " + fmt(e);
  rep.line(s);
  return 0;
}

int encode_cmd(Context& ctx, const std::string& frames_arg, const std::string& cb_arg,
               const std::string& out_arg) {
  const auto cb = rvq::load_codebooks(cb_arg.empty() ? ctx.path("rvq/codebooks.bin") : fs::path(cb_arg));
  const auto seqs = rvq::load_frames(frames_arg.empty() ? ctx.path("data/frames.bin") : fs::path(frames_arg));
  std::vector<TokenGrid> grids;
  for (const auto& f : seqs) grids.push_back(rvq::encode(f, cb));
  fs::create_directories(ctx.path("rvq"));
  const fs::path out = out_arg.empty() ? ctx.path("rvq/encoded.tokens") : fs::path(out_arg);
  rvq::save_tokens(grids, out);
  Report rep(ctx);
  rep.record({{"sequences", grids.size()}});
  rep.line("encode: " + std::to_string(grids.size()) + " sequences -> " + out.string());
  return 0;
}

int decode_cmd(Context& ctx, const std::string& tokens_arg, const std::string& cb_arg,
               const std::string& out_arg) {
  const auto cb = rvq::load_codebooks(cb_arg.empty() ? ctx.path("rvq/codebooks.bin") : fs::path(cb_arg));
  const auto grids = rvq::load_tokens(tokens_arg.empty() ? ctx.path("rvq/encoded.tokens") : fs::path(tokens_arg));
  std::vector<Matrix> seqs;
  for (const auto& g : grids) seqs.push_back(rvq::decode(g, cb));
  fs::create_directories(ctx.path("rvq"));
  const fs::path out = out_arg.empty() ? ctx.path("rvq/decoded.frames") : fs::path(out_arg);
  rvq::save_frames(seqs, out);
  Report rep(ctx);
  rep.record({{"sequences", seqs.size()}});
  rep.line("decode: " + std::to_string(seqs.size()) + " sequences -> " + out.string());
  return 0;
}

int train_cmd(Context& ctx) {
  const ModelConfig mc = ctx.cfg.model_config();
  const auto data = load_examples(ctx.path("data/train.tokens"), ctx.path("data/train.cond"), mc);
  ScoreNetwork net(mc);
  Rng init(derive_seed(ctx.seed, kInitStream));
  net.init(init);
  train::TrainConfig tc = ctx.cfg.train.cfg;
  tc.seed = derive_seed(ctx.seed, kTrainStream);

  fs::create_directories(ctx.path("checkpoints"));
  fs::create_directories(ctx.path("logs"));
  std::ofstream log(ctx.path("logs/train.jsonl"));
  const std::size_t every = ctx.cfg.train.checkpoint_every;
  const std::size_t log_every = ctx.cfg.train.log_every;
  double last = 0.0;
  train::fit(net, data, tc, [&](const train::LogRecord& rec, const ScoreNetwork& n) {
    last = rec.loss;
    if (rec.step % log_every == 0 || rec.step + 1 == tc.steps) {
      train::write_jsonl(rec, log);
      log.flush();
    }
    if (every > 0 && (rec.step + 1) % every == 0) {
      n.save(ctx.path("checkpoints/model.step" + std::to_string(rec.step + 1) + ".ckpt"));
    }
  });
  net.save(ctx.path("checkpoints/model.ckpt"));

  Report rep(ctx);
  json rec{{"steps", tc.steps}, {"final_loss", last}, {"parameters", net.parameter_count()}};
  std::string line = "train: " + std::to_string(tc.steps) + " steps, final batch loss " + fmt(last);
  if (fs::exists(ctx.path("data/heldout.tokens"))) {
    const auto held = load_examples(ctx.path("data/heldout.tokens"), ctx.path("data/heldout.cond"), mc);
    const double dse = train::heldout_dse(net, held, tc.t_min, derive_seed(ctx.seed, kEvalStream));
    rec["heldout_dse"] = dse;
    line += ", held-out DSE " + fmt(dse);
  }
  rep.record(rec);
  rep.line(line);
  return 0;
}

ScoreNetwork load_net(const Context& ctx, const std::string& ckpt_arg) {
  const ModelConfig mc = ctx.cfg.model_config();
  return ScoreNetwork::load(ckpt_arg.empty() ? ctx.path("checkpoints/model.ckpt") : fs::path(ckpt_arg), &mc);
}

std::vector<ConditionBundle> load_conds(const Context& ctx, const std::string& arg) {
  ConditionShape shape;
  auto conds = load_conditions(arg.empty() ? ctx.path("data/heldout.cond") : fs::path(arg), &shape);
  if (conds.empty()) throw InvalidInput("no conditions to sample with");
  for (const auto& c : conds) c.validate(ctx.cfg.model_config().condition_shape());
  return conds;
}

int sample_cmd(Context& ctx, const std::string& ckpt, const std::string& conds_arg,
               std::optional<std::size_t> count, std::optional<std::size_t> steps) {
  const ScoreNetwork net = load_net(ctx, ckpt);
  const auto pool = load_conds(ctx, conds_arg);
  const std::size_t n = count.value_or(ctx.cfg.sample.count);
  const std::size_t k_steps = steps.value_or(ctx.cfg.sample.steps);
  std::vector<ConditionBundle> conds(n);
  for (std::size_t k = 0; k < n; ++k) conds[k] = pool[k % pool.size()];
  const auto& mc = net.config();
  const auto grids = sample_batch(guided(net, ctx.cfg.sample.guidance), conds,
                                  {mc.length, mc.levels, mc.vocab}, k_steps, mc.schedule,
                                  derive_seed(ctx.seed, kSampleStream));
  rvq::save_tokens(grids, ctx.path("samples.tokens"));
  save_conditions(conds, mc.condition_shape(), ctx.path("samples.cond"));
  Report rep(ctx);
  rep.record({{"samples", n}, {"steps", k_steps}});
  rep.line("sample: " + std::to_string(n) + " grids (" + std::to_string(k_steps) +
           " Euler steps) -> " + ctx.path("samples.tokens").string());
  return 0;
}

int refine_cmd(Context& ctx, const std::string& ckpt, const std::string& input,
               const std::string& conds_arg, std::optional<double> threshold,
               std::optional<std::size_t> steps) {
  const ScoreNetwork net = load_net(ctx, ckpt);
  const auto grids = rvq::load_tokens(input.empty() ? ctx.path("samples.tokens") : fs::path(input));
  const auto conds = load_conds(ctx, conds_arg.empty() ? ctx.path("samples.cond").string() : conds_arg);
  if (conds.size() != grids.size()) throw InvalidInput("refine: token and condition counts differ");
  const double thr = threshold.value_or(ctx.cfg.refine.threshold);
  const std::size_t k_steps = steps.value_or(ctx.cfg.refine.steps);
  if (!(thr >= 0.0 && thr <= 1.0)) throw ConfigError("refine: threshold not in [0, 1]");
  if (k_steps == 0) throw ConfigError("refine: steps must be positive");

  const ScoreFn fn = as_score_fn(net);
  const auto& sched = net.config().schedule;
  std::vector<TokenGrid> out(grids.size());
  std::size_t flagged = 0, changed = 0;
  for (std::size_t k = 0; k < grids.size(); ++k) {
    const auto conf = refine::frame_confidence(grids[k], fn, conds[k], sched);
    const auto flags = refine::detect(grids[k], conf, thr);
    Rng rng(derive_seed(derive_seed(ctx.seed, kRefineStream), k));
    out[k] = refine::refine(grids[k], flags, fn, conds[k], sched, k_steps, rng);
    flagged += static_cast<std::size_t>(std::count(flags.begin(), flags.end(), 1));
    for (std::size_t c = 0; c < out[k].cells(); ++c)
      changed += out[k].tokens()[c] != grids[k].tokens()[c];
  }
  rvq::save_tokens(out, ctx.path("refined.tokens"));
  Report rep(ctx);
  rep.record({{"grids", grids.size()}, {"flagged_frames", flagged}, {"changed_cells", changed},
              {"threshold", thr}, {"steps", k_steps}});
  rep.line("refine: " + std::to_string(flagged) + " frames flagged, " + std::to_string(changed) +
           " cells changed -> " + ctx.path("refined.tokens").string());
  return 0;
}

// Central-difference check of the DSE gradient on random coordinates.
json gradient_check(ScoreNetwork& net, const train::Example& ex, std::size_t coords, Rng& rng) {
  const auto& sched = net.config().schedule;
  const double t = 0.5;
  const TokenGrid xt = corrupt(ex.grid, t, sched, rng);
  auto loss = [&] { return dse_loss(net.forward(xt, ex.cond, t), xt, ex.grid, t, sched); };
  std::vector<GradientItem> item{{xt, ex.cond, t, [&](const ScoreField& s, std::span<double> d) {
                                    return dse_loss_with_grad(s, xt, ex.grid, t, sched, d);
                                  }}};
  Gradients g;
  gradient(net, item, g);
  auto params = net.parameters();
  double worst = 0.0;
  for (std::size_t c = 0; c < coords; ++c) {
    const std::size_t p = rng.below(params.size());
    const std::size_t k = rng.below(params[p].value.size());
    double& th = params[p].value.data()[k];
    const double saved = th, h = 1e-5;
    th = saved + h;
    const double up = loss();
    th = saved - h;
    const double down = loss();
    th = saved;
    const double fd = (up - down) / (2 * h), an = g[p].data()[k];
    const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3});
    worst = std::max(worst, err);
  }
  return {{"coords", coords}, {"max_rel_error", worst}};
}

int eval_cmd(Context& ctx, const std::string& ckpt, bool oracle) {
  const auto& ec = ctx.cfg.eval;
  const synth::Process proc = load_process(ctx.path("data/process.json"));
  const ModelConfig mc = ctx.cfg.model_config();
  if (proc.config().vocab != mc.vocab || proc.config().levels != mc.levels) {
    throw ConfigError("eval: stored process does not match the configured model");
  }
  const auto held = load_examples(ctx.path("data/heldout.tokens"), ctx.path("data/heldout.cond"), mc);
  std::optional<ScoreNetwork> net;
  if (!oracle) net.emplace(load_net(ctx, ckpt));

  Report rep(ctx);
  const std::size_t conds = std::min(ec.conditions, held.size());
  double worst_tv = 0.0, worst_grid_tv = 0.0;
  bool enumerable = true;
  for (std::size_t c = 0; c < conds; ++c) {
    const synth::Labels labels = proc.decode(held[c].cond);
    std::optional<DataDistribution> dist;
    try {
      dist = synth::exact_conditional(proc, labels, mc.length);
    } catch (const BudgetError&) {
      enumerable = false;
    }
    ScoreFn fn;
    if (oracle) {
      if (!dist) throw BudgetError("eval --oracle: instance is not enumerable");
      fn = [&dist, &mc](const TokenGrid& xt, const ConditionBundle&, double t) {
        return exact_concrete_score(xt, t, *dist, mc.schedule);
      };
    } else {
      fn = as_score_fn(*net);
    }
    const std::vector<ConditionBundle> cb(ec.samples_per_condition, held[c].cond);
    const auto grids = sample_batch(fn, cb, {mc.length, mc.levels, mc.vocab}, ec.steps, mc.schedule,
                                    derive_seed(derive_seed(ctx.seed, kEvalStream), c));
    const auto exact = synth::first_frame_marginal(proc, labels);
    const auto emp = synth::first_frame_histogram(grids, mc.vocab);
    const double tv = synth::total_variation(emp, exact);
    worst_tv = std::max(worst_tv, tv);
    json rec{{"condition", c}, {"first_frame_tv", tv}, {"samples", grids.size()}};
    if (dist) {
      const double gtv = synth::total_variation(grids, *dist);
      const auto chi = synth::chi_square(grids, *dist);
      worst_grid_tv = std::max(worst_grid_tv, gtv);
      rec["grid_tv"] = gtv;
      rec["chi_square"] = chi.statistic;
      rec["chi_square_dof"] = chi.dof;
      rec["chi_square_p"] = chi.p_value;
    }
    rep.record(rec);
  }
  json summary{{"conditions", conds}, {"max_first_frame_tv", worst_tv}, {"oracle", oracle}};
  std::string line = "eval: max first-frame TV " + fmt(worst_tv);
  if (enumerable && conds > 0) {
    summary["max_grid_tv"] = worst_grid_tv;
    line += ", max grid TV " + fmt(worst_grid_tv);
  }
  if (net) {
    const double dse = train::heldout_dse(*net, held, ec.heldout_t_min, derive_seed(ctx.seed, kEvalStream));
    summary["heldout_dse"] = dse;
    line += ", held-out DSE " + fmt(dse);
    if (ec.gradient_coords > 0 && !held.empty()) {
      Rng rng(derive_seed(ctx.seed, kEvalStream + 1));
      const json gc = gradient_check(*net, held.front(), ec.gradient_coords, rng);
      summary["gradient_check"] = gc;
      line += ", gradient check max rel error " + fmt(gc["max_rel_error"].get<double>());
    }
  }
  rep.record(summary);
  rep.line(line);
  return 0;
}

// Exact-score battery on small fixed instances.
int oracle_check(Context& ctx) {
  const NoiseSchedule sched = ctx.cfg.schedule;
  Report rep(ctx);
  bool ok = true;
  auto result = [&](const std::string& name, bool pass, json detail) {
    ok = ok && pass;
    detail["check"] = name;
    detail["pass"] = pass;
    rep.record(detail);
    rep.line(std::string(pass ? "PASS " : "FAIL ") + name + " " + detail.dump());
  };

  {  // masked fraction matches the closed form
    Rng rng(derive_seed(ctx.seed, 1));
    double worst = 0.0;
    const TokenGrid x0(100, 100, 4, 0);
    for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      const TokenGrid xt = corrupt(x0, t, sched, rng);
      const double frac = static_cast<double>(xt.masked_count()) / static_cast<double>(xt.cells());
      worst = std::max(worst, std::abs(frac - mask_probability(sched, t)));
    }
    result("forward_marginal", worst <= 0.02, {{"max_abs_error", worst}});
  }

  synth::ProcessConfig pc;
  pc.vocab = 3;
  pc.levels = 1;
  pc.semantic = 1;
  pc.global = 1;
  pc.temporal = 1;
  pc.window = 2;
  pc.emission = synth::EmissionKind::Random;
  Rng prng(derive_seed(ctx.seed, 2));
  const synth::Process proc = synth::Process::make(pc, prng);
  const synth::Labels labels{{0, 0}, 0, {0}};
  const DataDistribution dist = synth::exact_conditional(proc, labels, 2);

  {  // exact score drives the DSE to zero on every clean grid and corruption
    Rng rng(derive_seed(ctx.seed, 3));
    double worst = 0.0;
    for (const auto& [x0, p] : dist.support) {
      for (double t : {0.2, 0.5, 0.9}) {
        const TokenGrid xt = corrupt(x0, t, sched, rng);
        const ScoreField s = exact_concrete_score(xt, t, DataDistribution::point_mass(x0), sched);
        worst = std::max(worst, dse_loss(s, xt, x0, t, sched));
      }
    }
    result("oracle_zero_loss", worst < 1e-10, {{"max_loss", worst}});
  }

  {  // exact-score sampling recovers the distribution
    const ScoreFn fn = [&dist, &sched](const TokenGrid& xt, const ConditionBundle&, double t) {
      return exact_concrete_score(xt, t, dist, sched);
    };
    const std::vector<ConditionBundle> conds(20000);
    const auto grids = sample_batch(fn, conds, {2, 1, 3}, 256, sched, derive_seed(ctx.seed, 4));
    const double tv = synth::total_variation(grids, dist);
    result("oracle_sampler_tv", tv <= 0.05, {{"tv", tv}, {"samples", grids.size()}});
  }
  if (!ok) {
    ctx.err << "oracle-check: at least one check failed\n";
    return 1;
  }
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Conditional masked discrete diffusion over residual-quantized token grids",
               "maskdiff"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  Common common;
  std::string frames, codebooks, tokens, output, checkpoint, conditions, input;
  std::optional<std::size_t> count, steps;
  std::optional<double> threshold;
  bool oracle = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON config file (defaults apply when omitted)");
    sub->add_option("--seed", common.seed, "Master seed (overrides the config's seed)");
    sub->add_option("--run-dir", common.run_dir, "Run directory (overrides the config's run_dir)");
    return sub;
  };
  auto* gen = add_common(app.add_subcommand("gen-data", "Generate a synthetic conditioned dataset"));
  auto* trvq = add_common(app.add_subcommand("train-rvq", "Train residual codebooks on frames"));
  trvq->add_option("--frames", frames, "Frames file");
  auto* enc = add_common(app.add_subcommand("encode", "Encode frames into token grids"));
  enc->add_option("--frames", frames, "Frames file");
  enc->add_option("--codebooks", codebooks, "Codebook file");
  enc->add_option("--out", output, "Output token dataset");
  auto* dec = add_common(app.add_subcommand("decode", "Decode token grids into frames"));
  dec->add_option("--tokens", tokens, "Token dataset");
  dec->add_option("--codebooks", codebooks, "Codebook file");
  dec->add_option("--out", output, "Output frames file");
  auto* trn = add_common(app.add_subcommand("train", "Train the score network"));
  auto* smp = add_common(app.add_subcommand("sample", "Sample token grids"));
  smp->add_option("--checkpoint", checkpoint, "Model checkpoint");
  smp->add_option("--conditions", conditions, "Condition sidecar to sample with");
  smp->add_option("--count", count, "Number of grids");
  smp->add_option("--steps", steps, "Euler steps (default 64)");
  auto* ref = add_common(app.add_subcommand("refine", "Detect low-confidence frames and re-infill them"));
  ref->add_option("--checkpoint", checkpoint, "Model checkpoint");
  ref->add_option("--input", input, "Token dataset to refine");
  ref->add_option("--conditions", conditions, "Matching condition sidecar");
  ref->add_option("--threshold", threshold, "Confidence threshold (default 0.9)");
  ref->add_option("--steps", steps, "Euler steps");
  auto* evl = add_common(app.add_subcommand("eval", "Compare sampled and exact distributions"));
  evl->add_option("--checkpoint", checkpoint, "Model checkpoint");
  evl->add_flag("--oracle", oracle, "Sample with the exact score instead of the network");
  auto* orc = add_common(app.add_subcommand("oracle-check", "Run the exact-score test battery"));

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    config::RunConfig cfg = common.config_path.empty() ? config::from_json(nlohmann::json::object())
                                                       : config::load(common.config_path);
    Context ctx{sub->get_name(), cfg, common.seed.value_or(cfg.seed),
                common.run_dir.empty() ? fs::path(cfg.run_dir) : fs::path(common.run_dir), out,
                err};
    fs::create_directories(ctx.dir);
    RunLock lock(ctx.dir);
    write_manifest(ctx, args);

    if (sub == gen) return gen_data(ctx);
    if (sub == trvq) return train_rvq(ctx, frames);
    if (sub == enc) return encode_cmd(ctx, frames, codebooks, output);
    if (sub == dec) return decode_cmd(ctx, tokens, codebooks, output);
    if (sub == trn) return train_cmd(ctx);
    if (sub == smp) return sample_cmd(ctx, checkpoint, conditions, count, steps);
    if (sub == ref) return refine_cmd(ctx, checkpoint, input, conditions, threshold, steps);
    if (sub == evl) return eval_cmd(ctx, checkpoint, oracle);
    if (sub == orc) return oracle_check(ctx);
    throw UnreachableState("unhandled subcommand");
  } catch (const NumericFault& e) {
    err << "numeric fault: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int k = 1; k < argc; ++k) args.emplace_back(argv[k]);
  return run(args, out, err);
}

}  // namespace maskdiff::cli
