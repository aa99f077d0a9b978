#include <benchmark/benchmark.h>

#include <cmath>
#include <random>

#include <modeldiff/diff_sae.hpp>
#include <modeldiff/hdbscan.hpp>
#include <modeldiff/kl_fork.hpp>
#include <modeldiff/pca.hpp>

using namespace modeldiff;

namespace {

Eigen::MatrixXd blobs(Eigen::Index n, Eigen::Index d, int centers, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double offset = 12.0 * static_cast<double>(i % centers);
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = offset + g(rng);
  }
  return m;
}

void BM_Hdbscan(benchmark::State& state) {
  auto pts = blobs(state.range(0), 16, 5, 1);
  for (auto _ : state) benchmark::DoNotOptimize(hdbscan(pts, {8, 8, false}));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Hdbscan)->RangeMultiplier(2)->Range(256, 4096)->Complexity()->Unit(benchmark::kMillisecond);

void BM_Pca(benchmark::State& state) {
  auto x = blobs(state.range(0), 1536, 4, 2);
  for (auto _ : state) benchmark::DoNotOptimize(reduce_dimensions(x, 128));
}
BENCHMARK(BM_Pca)->Arg(500)->Arg(2000)->Unit(benchmark::kMillisecond);

void BM_PositionalScore(benchmark::State& state) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  auto make = [&](int k, int shift) {
    std::vector<TokenLogprob> out;
    double z = 0.0;
    std::vector<double> p;
    for (int i = 0; i < k; ++i) z += p.emplace_back(u(rng));
    for (int i = 0; i < k; ++i) out.push_back({"tok" + std::to_string(i + shift), std::log(0.95 * p[i] / z)});
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.logprob > b.logprob; });
    return out;
  };
  const auto k = static_cast<int>(state.range(0));
  auto p1 = make(k, 0);
  auto p2 = make(k, k / 2);
  for (auto _ : state) benchmark::DoNotOptimize(positional_score(p1, p2));
}
BENCHMARK(BM_PositionalScore)->Arg(5)->Arg(20);

void BM_FeatureFrequencyDiff(benchmark::State& state) {
  std::mt19937_64 rng(4);
  auto make = [&] {
    ActivationDump d;
    for (std::size_t t = 0; t < 1000; ++t) {
      d.texts.push_back({"t" + std::to_string(t), 20, 400});
      for (int e = 0; e < 200; ++e) {
        d.entries.push_back({t, 20 + rng() % 380, static_cast<FeatureId>(rng() % 16384), 1.0});
      }
    }
    return d;
  };
  auto a = make();
  auto b = make();
  for (auto _ : state) {
    auto stats = feature_frequency_diff(pool_completion(a), pool_completion(b));
    benchmark::DoNotOptimize(select_candidates(std::move(stats), 100));
  }
}
BENCHMARK(BM_FeatureFrequencyDiff)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
