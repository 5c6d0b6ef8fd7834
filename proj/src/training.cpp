#include "maskdiff/training.hpp"

#include <chrono>
#include <cmath>
#include <json.hpp>
#include <ostream>

namespace maskdiff::train {
namespace {

constexpr std::uint64_t kBatchStream = 0x6261746368ULL;  // "batch"

double norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
  return dot / (norm(a) * norm(b));
}

void check_batch(std::span<const Example> batch) {
  if (batch.empty()) throw InvalidInput("train_step: empty batch");
  const auto& g0 = batch.front().grid;
  for (const auto& ex : batch) {
    if (ex.grid.length() != g0.length() || ex.grid.levels() != g0.levels() ||
        ex.grid.vocab() != g0.vocab()) {
      throw ShapeError("train_step: batch grids differ in shape");
    }
    if (ex.grid.has_mask()) throw InvalidInput("train_step: training grid contains MASK");
  }
}

}  // namespace

std::vector<CurriculumStage> default_curriculum(std::size_t steps, std::size_t levels) {
  std::vector<CurriculumStage> out{{0, 1}};
  const CurriculumStage later[] = {{steps / 3, (levels + 1) / 2}, {2 * steps / 3, levels}};
  for (const auto& s : later) {
    if (s.step > out.back().step && s.levels > out.back().levels) out.push_back(s);
  }
  if (out.back().levels < levels) out.push_back({out.back().step + 1, levels});
  return out;
}

void TrainConfig::validate(std::size_t levels) const {
  auto need = [](bool ok, const char* msg) {
    if (!ok) throw ConfigError(std::string("train: ") + msg);
  };
  need(learning_rate >= 0.0 && std::isfinite(learning_rate), "learning_rate must be >= 0");
  need(batch_size > 0, "batch_size must be positive");
  need(slot_dropout >= 0.0 && slot_dropout <= 1.0, "slot_dropout not in [0, 1]");
  need(all_null >= 0.0 && all_null <= 1.0, "all_null not in [0, 1]");
  need(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas not in [0, 1)");
  need(adam_eps > 0.0, "adam_eps must be positive");
  need(weight_decay >= 0.0, "weight_decay must be >= 0");
  need(t_min > 0.0 && t_min < 1.0, "t_min not in (0, 1)");
  const auto st = stages(levels);
  need(!st.empty() && st.front().step == 0, "curriculum must start at step 0");
  for (std::size_t k = 0; k < st.size(); ++k) {
    need(st[k].levels >= 1 && st[k].levels <= levels, "curriculum levels not in [1, R]");
    if (k > 0) {
      need(st[k].step > st[k - 1].step, "curriculum thresholds must increase strictly");
      need(st[k].levels >= st[k - 1].levels, "curriculum levels must not decrease");
    }
  }
}

std::vector<CurriculumStage> TrainConfig::stages(std::size_t levels) const {
  return curriculum.empty() ? default_curriculum(steps, levels) : curriculum;
}

std::size_t TrainConfig::levels_at(std::size_t step, std::size_t levels) const {
  std::size_t r = 1;
  for (const auto& s : stages(levels))
    if (step >= s.step) r = s.levels;
  return std::min(r, levels);
}

ConditionMask draw_dropout(const TrainConfig& cfg, Rng& rng) {
  // Two independent draws per slot would not give the hierarchical law, so the
  // all-null event is decided first and short-circuits the per-slot draws.
  if (rng.bernoulli(cfg.all_null)) return ConditionMask::none();
  ConditionMask keep;
  keep.semantic = !rng.bernoulli(cfg.slot_dropout);
  keep.global_style = !rng.bernoulli(cfg.slot_dropout);
  keep.temporal_style = !rng.bernoulli(cfg.slot_dropout);
  return keep;
}

AdamW::AdamW(const ScoreNetwork& net) : m_(net.zero_gradients()), v_(net.zero_gradients()) {}

void AdamW::update(ScoreNetwork& net, const Gradients& grads, const TrainConfig& cfg) {
  auto params = net.parameters();
  if (grads.size() != params.size()) throw ShapeError("AdamW: gradient count mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    double* theta = params[p].value.data();
    const double* g = grads[p].data();
    double* m = m_[p].data();
    double* v = v_[p].data();
    for (std::size_t k = 0; k < params[p].value.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double step = (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.adam_eps);
      theta[k] -= cfg.learning_rate * (step + cfg.weight_decay * theta[k]);
    }
  }
}

std::vector<PreparedItem> prepare_batch(std::span<const Example> batch, const TrainConfig& cfg,
                                        std::size_t step, std::size_t levels,
                                        const NoiseSchedule& sched) {
  check_batch(batch);
  const std::size_t r_l = std::min(cfg.levels_at(step, levels), batch.front().grid.levels());
  const std::uint64_t step_seed = derive_seed(cfg.seed, step);
  std::vector<PreparedItem> items(batch.size());
  for (std::size_t k = 0; k < batch.size(); ++k) {
    Rng rng(derive_seed(step_seed, k));
    PreparedItem& it = items[k];
    it.t = rng.uniform(cfg.t_min, 1.0);
    it.x0 = batch[k].grid.truncated(r_l);
    it.cond = apply_mask(batch[k].cond, draw_dropout(cfg, rng));
    it.xt = corrupt(it.x0, it.t, sched, rng);
  }
  return items;
}

double batch_loss(const ScoreFn& score_fn, std::span<const PreparedItem> items,
                  const NoiseSchedule& sched) {
  if (items.empty()) throw InvalidInput("batch_loss: empty batch");
  double total = 0.0;
  for (const auto& it : items) {
    total += dse_loss(score_fn(it.xt, it.cond, it.t), it.xt, it.x0, it.t, sched);
  }
  return total / static_cast<double>(items.size());
}

double train_step(ScoreNetwork& net, AdamW& opt, std::span<const Example> batch,
                  const TrainConfig& cfg, std::size_t step) {
  const auto& mc = net.config();
  const auto items = prepare_batch(batch, cfg, step, mc.levels, mc.schedule);
  const double scale = 1.0 / static_cast<double>(items.size());

  std::vector<GradientItem> work;
  work.reserve(items.size());
  for (const auto& it : items) {
    const NoiseSchedule sched = mc.schedule;
    work.push_back(GradientItem{
        it.xt, it.cond, it.t,
        [&it, sched, scale](const ScoreField& s, std::span<double> dlog) {
          const double l = dse_loss_with_grad(s, it.xt, it.x0, it.t, sched, dlog);
          for (double& d : dlog) d *= scale;
          return l * scale;
        }});
  }
  Gradients grads;
  const double loss = gradient(net, work, grads);
  opt.update(net, grads, cfg);
  return loss;
}

void write_jsonl(const LogRecord& rec, std::ostream& out) {
  nlohmann::json j{{"step", rec.step},
                   {"loss", rec.loss},
                   {"levels", rec.levels},
                   {"wall_seconds", rec.wall_seconds}};
  out << j.dump() << '\n';
}

void fit(ScoreNetwork& net, std::span<const Example> data, const TrainConfig& cfg,
         const StepCallback& on_step) {
  cfg.validate(net.config().levels);
  if (data.empty()) throw InvalidInput("fit: empty dataset");
  AdamW opt(net);
  const auto start = std::chrono::steady_clock::now();
  std::vector<Example> batch(cfg.batch_size);
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    Rng rng(derive_seed(cfg.seed ^ kBatchStream, s));
    for (auto& ex : batch) ex = data[rng.below(data.size())];
    const double loss = train_step(net, opt, batch, cfg, s);
    if (on_step) {
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      on_step(LogRecord{s, loss, cfg.levels_at(s, net.config().levels), wall}, net);
    }
  }
}

double heldout_dse(const ScoreNetwork& net, std::span<const Example> data, double t_min,
                   std::uint64_t seed) {
  if (data.empty()) throw InvalidInput("heldout_dse: empty dataset");
  const auto& sched = net.config().schedule;
  double total = 0.0;
  for (std::size_t k = 0; k < data.size(); ++k) {
    Rng rng(derive_seed(seed, k));
    const double t = rng.uniform(t_min, 1.0);
    const TokenGrid xt = corrupt(data[k].grid, t, sched, rng);
    total += dse_loss(net.forward(xt, data[k].cond, t), xt, data[k].grid, t, sched);
  }
  return total / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------

double detector_loss(std::span<const double> probs, const std::vector<std::vector<double>>& pred,
                     const std::vector<std::vector<double>>& gt, double threshold) {
  if (probs.size() != pred.size() || probs.size() != gt.size()) {
    throw ShapeError("detector_loss: lists differ in length");
  }
  if (probs.empty()) throw InvalidInput("detector_loss: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (pred[i].size() != gt[i].size()) throw ShapeError("detector_loss: embedding size mismatch");
    if (norm(pred[i]) == 0.0 || norm(gt[i]) == 0.0) {
      throw InvalidInput("detector_loss: zero-norm embedding at index " + std::to_string(i));
    }
    if (!(probs[i] >= 0.0 && probs[i] <= 1.0)) {
      throw InvalidInput("detector_loss: probability outside [0, 1] at index " + std::to_string(i));
    }
    const bool y = cosine(pred[i], gt[i]) >= threshold;
    const double p = std::clamp(probs[i], kProbabilityFloor, 1.0 - kProbabilityFloor);
    total -= y ? std::log(p) : std::log1p(-p);
  }
  return total / static_cast<double>(probs.size());
}

double style_alignment_loss(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("style_alignment_loss: size mismatch");
  if (norm(a) == 0.0 || norm(b) == 0.0) throw InvalidInput("style_alignment_loss: zero-norm vector");
  double l1 = 0.0, l2 = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    l1 += std::abs(d);
    l2 += d * d;
  }
  const double n = static_cast<double>(a.size());
  return 1.0 - cosine(a, b) + l1 / n + std::sqrt(l2 / n);
}

Matrix temporal_smooth(const Matrix& logits, std::size_t window) {
  if (window == 0 || logits.rows() == 0 || logits.rows() % window != 0) {
    throw ShapeError("temporal_smooth: length must be a positive multiple of the window");
  }
  Matrix out(logits.rows() / window, logits.cols());
  for (std::size_t w = 0; w < out.rows(); ++w) {
    auto dst = out.row(w);
    for (std::size_t i = w * window; i < (w + 1) * window; ++i) {
      auto src = logits.row(i);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
    for (double& v : dst) v /= static_cast<double>(window);
  }
  return out;
}

}  // namespace maskdiff::train
