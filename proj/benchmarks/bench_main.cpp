#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "schedlab/autodiff/ops.hpp"
#include "schedlab/autodiff/tape.hpp"
#include "schedlab/corpus/corpus.hpp"
#include "schedlab/eval/abx.hpp"
#include "schedlab/eval/retrieval.hpp"
#include "schedlab/model/model.hpp"
#include "schedlab/trainer/trainer.hpp"
#include "schedlab/util/rng.hpp"

using namespace schedlab;

namespace {

std::vector<float> uniform(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform() * 2.0 - 1.0);
  return v;
}

ad::Tensor<float> param(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  return ad::Tensor<float>::from({rows, cols}, uniform(rows * cols, seed), true);
}

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = param(n, n, 1), b = param(n, n, 2);
  for (auto _ : state) {
    ad::Tape<float> tape;
    auto y = ad::ops::sum(tape, ad::ops::matmul(tape, a, b));
    benchmark::DoNotOptimize(tape.backward(y));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_MatmulBackward)->Arg(64)->Arg(128)->Arg(256);

void BM_AttentionBackward(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 64;
  auto q = param(t, d, 3), k = param(t, d, 4), v = param(t, d, 5);
  for (auto _ : state) {
    ad::Tape<float> tape;
    auto y = ad::ops::sum(tape, ad::ops::multi_head_attention(tape, q, k, v, 4));
    benchmark::DoNotOptimize(tape.backward(y));
  }
}
BENCHMARK(BM_AttentionBackward)->Arg(25)->Arg(100)->Arg(400);

void BM_Dtw(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t dim = 64;
  eval::Segment x{uniform(n * dim, 6), n, dim, 0, 0};
  eval::Segment y{uniform(n * dim, 7), n, dim, 0, 0};
  for (auto _ : state) benchmark::DoNotOptimize(eval::dtw_distance(x, y));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}
BENCHMARK(BM_Dtw)->Arg(4)->Arg(16)->Arg(64);

void BM_RecallAtK(benchmark::State& state) {
  const std::size_t images = 200, captions = 1000, dim = 64;
  eval::EmbeddingSet a{uniform(captions * dim, 8), captions, dim};
  eval::EmbeddingSet b{uniform(images * dim, 9), images, dim};
  std::vector<std::uint32_t> pairing(captions);
  for (std::size_t i = 0; i < captions; ++i) pairing[i] = static_cast<std::uint32_t>(i % images);
  const std::vector<std::size_t> ks{1, 10};
  for (auto _ : state) benchmark::DoNotOptimize(eval::recall_at_k(a, b, pairing, ks));
}
BENCHMARK(BM_RecallAtK);

void BM_TrainStep(benchmark::State& state) {
  corpus::CorpusSpec spec;
  spec.n_train_images = 16;
  spec.n_test_images = 4;
  spec.captions_per_image = 1;
  auto corpus = corpus::generate_corpus(spec, 1);
  model::Model<float> m(model::preset("toy"), 2);
  const double alpha = static_cast<double>(state.range(0)) / 100.0;
  std::vector<std::uint32_t> batch;
  for (std::uint32_t i = 0; i < 8; ++i) batch.push_back(i);
  objectives::LossConfig loss;
  Rng rng(3);
  for (auto _ : state) {
    ad::Tape<float> tape;
    model::ForwardContext ctx{true, &rng, {}};
    auto out = trainer::batch_loss(tape, m, corpus, batch, alpha, loss, ctx, rng);
    benchmark::DoNotOptimize(tape.backward(out.total));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch.size()));
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(50)->Arg(100)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
