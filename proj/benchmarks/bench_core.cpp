#include <benchmark/benchmark.h>

#include "arimg/autodiff.hpp"
#include "arimg/data.hpp"
#include "arimg/image_tokenizer.hpp"
#include "arimg/inference.hpp"
#include "arimg/ops.hpp"
#include "arimg/parallel_sim.hpp"
#include "arimg/rng.hpp"
#include "arimg/seq2seq.hpp"
#include "arimg/textproc.hpp"

namespace {

using namespace arimg;

Tensor<float> randn(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  auto t = Tensor<float>::zeros(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.normal());
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = state.range(0);
  const auto a = randn({n, n}, 1), b = randn({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_Quantize(benchmark::State& state) {
  auto cb = randn({64, 8}, 3);
  const auto z = randn({state.range(0), 8}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(quantize(cb, z));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Quantize)->Arg(64)->Arg(2048);

void BM_Tokenize(benchmark::State& state) {
  const auto tok = build_tokenizer(TokenizerConfig{}, 5);
  const auto img = render(parse_caption("a red circle to the left of a blue square"));
  for (auto _ : state) benchmark::DoNotOptimize(tokenize(tok, img));
}
BENCHMARK(BM_Tokenize);

// One guided step: conditional and unconditional rows share the cache.
void BM_DecoderStep(benchmark::State& state) {
  const auto cfg = ModelConfig::preset("desk");
  const auto m = build_model(cfg, 6);
  std::vector<std::int32_t> text(2 * static_cast<std::size_t>(cfg.text_len), kPad);
  text[0] = kBos;
  const auto mem = encode_text_batch<float>(m, m.params.values(), text, 2);
  const std::vector<std::int32_t> bos(2, image_bos(cfg));
  const std::vector<std::int32_t> prev(2, 0);
  for (auto _ : state) {
    state.PauseTiming();
    DecoderCache cache(m, mem, {0, 1});
    cache.step(bos);
    state.ResumeTiming();
    for (int t = 1; t < cfg.image_len(); ++t) benchmark::DoNotOptimize(cache.step(prev));
  }
  state.SetItemsProcessed(state.iterations() * (cfg.image_len() - 1));
}
BENCHMARK(BM_DecoderStep)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const auto cfg = ModelConfig::preset("desk");
  const auto m = build_model(cfg, 7);
  const int B = 8;
  Rng data(8);
  std::vector<std::int32_t> text(static_cast<std::size_t>(B * cfg.text_len)),
      img(static_cast<std::size_t>(B * cfg.image_len()));
  for (auto& x : text) x = static_cast<std::int32_t>(data.below(static_cast<std::uint64_t>(cfg.text_vocab)));
  for (auto& x : img) x = static_cast<std::int32_t>(data.below(static_cast<std::uint64_t>(cfg.image_vocab)));
  for (auto _ : state) {
    Tape<float> tape;
    auto p = m.params.bind(tape);
    Rng rng(9);
    auto loss = forward_loss<float>(m, p, text, img, B, rng, 0.1);
    benchmark::DoNotOptimize(backward(loss));
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_SimulatePipeline(benchmark::State& state) {
  auto spec = PipelineSpec::full_scale();
  spec.microbatches = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(simulate_pipeline(spec));
}
BENCHMARK(BM_SimulatePipeline)->Arg(8)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
