// Serial reference kernels against their OpenMP counterparts, plus one full
// network forward and batch gradient at the default desk shape.

#include <benchmark/benchmark.h>

#include "maskdiff/kernels.hpp"
#include "maskdiff/model.hpp"

using namespace maskdiff;

namespace {

Matrix random(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(r, c);
  for (double& v : m.flat()) v = rng.uniform(-1.0, 1.0);
  return m;
}

template <auto Kernel>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random(n, n, 1), b = random(n, n, 2);
  Matrix out;
  for (auto _ : state) {
    Kernel(a, b, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}

template <auto Kernel>
void BM_Attention(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  const Matrix q = random(len, 64, 3), k = random(len, 64, 4), v = random(len, 64, 5);
  Matrix out;
  std::vector<Matrix> probs;
  for (auto _ : state) {
    Kernel(q, k, v, 4, out, probs);
    benchmark::DoNotOptimize(out.data());
  }
}

template <auto Kernel>
void BM_Normalize(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const Matrix h = random(rows, 64, 6);
  Matrix out;
  kernels::RowStats stats;
  for (auto _ : state) {
    Kernel(h, 1e-5, out, stats);
    benchmark::DoNotOptimize(out.data());
  }
}

ModelConfig desk_config() {
  ModelConfig c;
  c.length = 8;
  c.levels = 2;
  c.vocab = 8;
  return c;
}

void BM_Forward(benchmark::State& state) {
  ScoreNetwork net(desk_config());
  Rng rng(7);
  net.init_uniform(rng, -0.1, 0.1);
  const TokenGrid xt(8, 2, 8);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(xt, {}, 0.5));
}

void BM_BatchGradient(benchmark::State& state) {
  const ModelConfig c = desk_config();
  ScoreNetwork net(c);
  Rng rng(8);
  net.init_uniform(rng, -0.1, 0.1);
  std::vector<GradientItem> items(static_cast<std::size_t>(state.range(0)));
  for (auto& it : items) {
    TokenGrid x0(8, 2, 8);
    for (auto& t : x0.tokens()) t = static_cast<Token>(rng.below(8));
    it.t = rng.uniform(0.05, 1.0);
    it.xt = corrupt(x0, it.t, c.schedule, rng);
    it.loss = [x0, xt = it.xt, t = it.t, s = c.schedule](const ScoreField& f, std::span<double> g) {
      return dse_loss_with_grad(f, xt, x0, t, s, g);
    };
  }
  Gradients g = net.zero_gradients();
  for (auto _ : state) benchmark::DoNotOptimize(gradient(net, items, g));
}

}  // namespace

BENCHMARK(BM_Matmul<kernels::serial::matmul>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Matmul<kernels::omp::matmul>)->Name("matmul/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_Attention<kernels::serial::attention>)->Name("attention/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Attention<kernels::omp::attention>)->Name("attention/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_Normalize<kernels::serial::normalize_rows>)->Name("normalize/serial")->Arg(1024);
BENCHMARK(BM_Normalize<kernels::omp::normalize_rows>)->Name("normalize/omp")->Arg(1024);
BENCHMARK(BM_Forward)->Name("network/forward");
BENCHMARK(BM_BatchGradient)->Name("network/gradient")->Arg(32)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
