#include <benchmark/benchmark.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "negsteer/retrieval_index.hpp"
#include "negsteer/steering.hpp"
#include "negsteer/text_encoder.hpp"
#include "negsteer/tokenizer.hpp"

using namespace negsteer;

namespace {

std::filesystem::path fixture(const std::string& rel) { return std::filesystem::path(NEGSTEER_FIXTURE_DIR) / rel; }

std::vector<float> unit_vector(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> g;
  std::vector<double> raw(d);
  double n = 0;
  for (auto& x : raw) {
    x = g(rng);
    n += x * x;
  }
  std::vector<float> v(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = static_cast<float>(raw[i] / std::sqrt(n));
  return v;
}

void BM_TopK(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  EmbeddingIndex index;
  for (std::size_t i = 0; i < rows; ++i) index.add({"img" + std::to_string(i), unit_vector(rng, 512), ""});
  index.freeze();
  const auto q = unit_vector(rng, 512);
  for (auto _ : state) benchmark::DoNotOptimize(index.topk(q, 10));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(rows));
}
BENCHMARK(BM_TopK)->Arg(1000)->Arg(25000)->Unit(benchmark::kMillisecond);

void BM_SteerVector(benchmark::State& state) {
  std::mt19937_64 rng(2);
  const auto h = unit_vector(rng, 512), w = unit_vector(rng, 512);
  for (auto _ : state) benchmark::DoNotOptimize(steer_vector<float>(h, w, 0.13));
}
BENCHMARK(BM_SteerVector);

void BM_TinyForward(benchmark::State& state) {
  const auto weights = load_weights(fixture("tiny_clip/tiny_clip.safetensors"));
  const auto tok = Tokenizer::load(fixture("tiny_clip/vocab.json"), fixture("tiny_clip/merges.txt"),
                                   weights.config.context_length);
  const auto t = tok.encode("the cat sat not on the mat");
  for (auto _ : state) benchmark::DoNotOptimize(forward(t, weights));
}
BENCHMARK(BM_TinyForward);

void BM_Tokenize(benchmark::State& state) {
  const auto tok = Tokenizer::load(fixture("clip_bpe/vocab.json"), fixture("clip_bpe/merges.txt"), 77);
  const std::string text = "A photograph of a quiet street at dusk, without any cars or people in sight.";
  for (auto _ : state) benchmark::DoNotOptimize(tok.encode(text));
}
BENCHMARK(BM_Tokenize);

}  // namespace

BENCHMARK_MAIN();
