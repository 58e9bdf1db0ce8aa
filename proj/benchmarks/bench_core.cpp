#include <benchmark/benchmark.h>

#include "prat/gemm.hpp"
#include "prat/ops.hpp"
#include "prat/rng.hpp"
#include "prat/tensor.hpp"

using namespace prat;

static void BM_SgemmNN(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  const int k = static_cast<int>(state.range(1));
  const int n = static_cast<int>(state.range(2));
  Rng rng(1);
  Tensor a = Tensor::randn({m, k}, rng);
  Tensor b = Tensor::randn({k, n}, rng);
  Tensor c = Tensor::zeros({m, n});
  for (auto _ : state) {
    gemm::sgemm_nn(m, n, k, a.ptr(), b.ptr(), c.mutable_ptr());
    benchmark::DoNotOptimize(c.mutable_ptr());
  }
  state.SetItemsProcessed(state.iterations() * 2ll * m * n * k);
}
BENCHMARK(BM_SgemmNN)->Args({32, 1600, 1024})->Args({64, 800, 4096})->Args({64, 64, 64});

static void BM_Conv2dForward(benchmark::State& state) {
  const int batch = static_cast<int>(state.range(0));
  Rng rng(2);
  Tensor x = Tensor::randn({batch, 32, 32, 32}, rng);
  Tensor w = Tensor::randn({32, 32, 5, 5}, rng, 0.1f);
  for (auto _ : state) {
    Tensor y = ops::conv2d(x, w, Tensor(), 1, 2);
    benchmark::DoNotOptimize(y.mutable_ptr());
  }
  state.SetItemsProcessed(state.iterations() * 2ll * batch * 32 * 32 * 25 * 32 * 1024);
}
BENCHMARK(BM_Conv2dForward)->Arg(1)->Arg(16);

static void BM_AttentionForward(benchmark::State& state) {
  Rng rng(3);
  const int d = 64, t = 64, b = 16;
  Tensor wq = Tensor::randn({d, d}, rng, 0.1f), bq = Tensor::zeros({d});
  Tensor wk = Tensor::randn({d, d}, rng, 0.1f), bk = Tensor::zeros({d});
  Tensor wv = Tensor::randn({d, d}, rng, 0.1f), bv = Tensor::zeros({d});
  Tensor wo = Tensor::randn({d, d}, rng, 0.1f), bo = Tensor::zeros({d});
  Tensor x = Tensor::randn({b, t, d}, rng);
  for (auto _ : state) {
    auto out = ops::multi_head_attention(x, 4, wq, bq, wk, bk, wv, bv, wo, bo);
    benchmark::DoNotOptimize(out.out.mutable_ptr());
  }
}
BENCHMARK(BM_AttentionForward);

BENCHMARK_MAIN();
