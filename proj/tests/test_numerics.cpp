#include <gtest/gtest.h>

#include <cmath>

#include "prat/gemm.hpp"
#include "prat/ops.hpp"
#include "prat/tape.hpp"
#include "prat/tensor.hpp"

using namespace prat;
using namespace prat::ops;

namespace {

// Naive triple-loop reference, independent of the blocked kernels.
void gemm_ref(int m, int n, int k, const float* a, const float* b, float* c) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0;
      for (int p = 0; p < k; ++p) acc += static_cast<double>(a[i * k + p]) * b[p * n + j];
      c[i * n + j] = static_cast<float>(acc);
    }
  }
}

// Direct sliding-window cross-correlation oracle.
Tensor conv2d_ref(const Tensor& x, const Tensor& w, int stride, int pad) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  Tensor out = Tensor::zeros({n, o, ho, wo});
  for (int i = 0; i < n; ++i) {
    for (int oc = 0; oc < o; ++oc) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          double acc = 0;
          for (int ic = 0; ic < c; ++ic) {
            for (int ky = 0; ky < kh; ++ky) {
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = oy * stride + ky - pad;
                const int ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += static_cast<double>(x.ptr()[((i * c + ic) * h + iy) * wd + ix]) *
                       w.ptr()[((oc * c + ic) * kh + ky) * kw + kx];
              }
            }
          }
          out.mutable_ptr()[((i * o + oc) * ho + oy) * wo + ox] = static_cast<float>(acc);
        }
      }
    }
  }
  return out;
}

Tensor randt(Shape s, uint64_t seed, float scale_v = 1.f) {
  Rng rng(seed);
  return Tensor::randn(std::move(s), rng, scale_v);
}

// fixed weights so softmax losses are non-trivial
Tensor other_softmax_w() {
  static Tensor w = [] {
    Rng rng(777);
    return Tensor::randn({4, 6}, rng);
  }();
  return w;
}

}  // namespace

TEST(Tensor, InvariantsAndErrors) {
  Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.size(), 6);
  EXPECT_THROW(Tensor::from_data({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor::from_data({2}, {1.f, std::nanf("")}), NumericError);
  EXPECT_THROW(Tensor::from_data({1}, {INFINITY}), NumericError);
  EXPECT_THROW(Tensor::scalar(1.f).item() + Tensor::zeros({2}).item(), ContractError);
}

TEST(Gemm, MatchesNaiveReference) {
  Rng rng(11);
  for (auto [m, n, k] : {std::tuple{3, 5, 4}, {16, 64, 27}, {33, 130, 70}, {4, 257, 19}}) {
    Tensor a = Tensor::randn({m, k}, rng);
    Tensor b = Tensor::randn({k, n}, rng);
    std::vector<float> want(static_cast<size_t>(m) * n);
    gemm_ref(m, n, k, a.ptr(), b.ptr(), want.data());

    Tensor c_nn = Tensor::zeros({m, n});
    gemm::sgemm_nn(m, n, k, a.ptr(), b.ptr(), c_nn.mutable_ptr());
    for (size_t i = 0; i < want.size(); ++i) {
      ASSERT_NEAR(c_nn.ptr()[i], want[i], 1e-3f) << "nn " << m << "x" << n << "x" << k;
    }

    // nt: feed B transposed
    Tensor bt = Tensor::zeros({n, k});
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < n; ++j) bt.mutable_ptr()[j * k + i] = b.ptr()[i * n + j];
    }
    Tensor c_nt = Tensor::zeros({m, n});
    gemm::sgemm_nt(m, n, k, a.ptr(), bt.ptr(), c_nt.mutable_ptr());
    for (size_t i = 0; i < want.size(); ++i) {
      ASSERT_NEAR(c_nt.ptr()[i], want[i], 1e-3f) << "nt";
    }

    // tn: feed A transposed
    Tensor at = Tensor::zeros({k, m});
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < k; ++j) at.mutable_ptr()[j * m + i] = a.ptr()[i * k + j];
    }
    Tensor c_tn = Tensor::zeros({m, n});
    gemm::sgemm_tn(m, n, k, at.ptr(), b.ptr(), c_tn.mutable_ptr());
    for (size_t i = 0; i < want.size(); ++i) {
      ASSERT_NEAR(c_tn.ptr()[i], want[i], 1e-3f) << "tn";
    }
  }
}

TEST(Conv2d, IdentityKernel) {
  // 1x1x3x3 input, 1x1x1x1 kernel of value 1 -> output equals input
  Tensor x = Tensor::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w = Tensor::from_data({1, 1, 1, 1}, {1});
  Tensor y = conv2d(x, w, Tensor(), 1, 0);
  EXPECT_TRUE(bitwise_equal(y, reshape(x, y.shape())));
}

TEST(Conv2d, SlidingWindowOracle) {
  // input [[1,2],[3,4]], kernel [[1,0],[0,1]] -> [[5]]
  Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor w = Tensor::from_data({1, 1, 2, 2}, {1, 0, 0, 1});
  Tensor y = conv2d(x, w, Tensor(), 1, 0);
  ASSERT_EQ(y.size(), 1);
  EXPECT_FLOAT_EQ(y.item(), 5.f);
}

TEST(Conv2d, ShapeArithmeticAndErrors) {
  Tensor x = randt({2, 3, 32, 32}, 5);
  Tensor w = randt({8, 3, 3, 3}, 6, 0.1f);
  Tensor y = conv2d(x, w, Tensor(), 1, 1);
  EXPECT_EQ(y.shape(), (Shape{2, 8, 32, 32}));
  Tensor wbad = randt({8, 4, 3, 3}, 7);
  EXPECT_THROW(conv2d(x, wbad, Tensor(), 1, 1), DimensionError);
  EXPECT_THROW(conv2d(x, w, Tensor(), 3, 0), ConfigError);  // non-integral extent
}

TEST(Conv2d, MatchesReferenceOnRandomShapes) {
  Rng seeds(1234);
  for (int trial = 0; trial < 6; ++trial) {
    const int n = seeds.uniform_int(1, 2);
    const int c = seeds.uniform_int(1, 4);
    const int o = seeds.uniform_int(1, 5);
    const int k = seeds.uniform_int(1, 3) * 2 - 1;  // 1,3,5
    const int stride = seeds.uniform_int(1, 2);
    const int h = seeds.uniform_int(4, 9);
    const int pad = seeds.uniform_int(0, k / 2);
    if ((h + 2 * pad - k) % stride != 0) continue;
    Tensor x = randt({n, c, h, h}, 100 + static_cast<uint64_t>(trial));
    Tensor w = randt({o, c, k, k}, 200 + static_cast<uint64_t>(trial), 0.2f);
    Tensor got = conv2d(x, w, Tensor(), stride, pad);
    Tensor want = conv2d_ref(x, w, stride, pad);
    ASSERT_TRUE(got.same_shape(want));
    EXPECT_LT(max_abs_diff(got, want), 1e-3);
  }
}

TEST(Conv2d, DeltaKernelIsIdentityProperty) {
  for (uint64_t seed = 0; seed < 3; ++seed) {
    Tensor x = randt({1, 2, 6, 6}, 40 + seed);
    Tensor w = Tensor::zeros({2, 2, 3, 3});
    // delta at the center of each matching in/out channel pair
    for (int c = 0; c < 2; ++c) w.mutable_ptr()[((c * 2 + c) * 3 + 1) * 3 + 1] = 1.f;
    Tensor y = conv2d(x, w, Tensor(), 1, 1);
    EXPECT_LT(max_abs_diff(y, x), 1e-6);
  }
}

TEST(Backward, AnalyticDerivatives) {
  {
    // f(x) = x^2 at x=3 -> df/dx = 6
    Tape tape;
    Tensor x = Tensor::scalar(3.f);
    x.set_requires_grad(true);
    Tensor y = mul(x, x);
    GradientMap g = backward(y, tape);
    EXPECT_FLOAT_EQ(g.grad(x).item(), 6.f);
  }
  {
    // constant loss: untouched leaf receives zero gradient
    Tape tape;
    Tensor x = Tensor::scalar(2.f);
    x.set_requires_grad(true);
    Tensor c = Tensor::scalar(5.f);
    GradientMap g = backward(c, tape);
    EXPECT_FLOAT_EQ(g.grad(x).item(), 0.f);
  }
  {
    Tape tape;
    Tensor x = randt({3, 3}, 9);
    EXPECT_THROW(backward(x, tape), ContractError);  // non-scalar loss
  }
}

TEST(Backward, SigmoidNetworkMatchesFiniteDifferences) {
  // f(W) = sum(sigmoid(W x)) with random 4x4 W; float32 evaluation noise
  // bounds what central differences can resolve, so the tolerance matches
  // the acceptance-level 1e-3 rather than machine precision.
  Tensor x = randt({4, 1}, 21, 0.8f);
  auto f = [&x](const Tensor& w) { return sum(sigmoid(matmul(w, x))); };
  Tensor w = randt({4, 4}, 22, 0.8f);
  auto report = grad_check(f, w, 1e-3, 1e-3);
  EXPECT_TRUE(report.pass) << "max rel err " << report.max_rel_error;
}

TEST(GradCheck, SumExactAndQuadratic) {
  auto fsum = [](const Tensor& t) { return sum(t); };
  auto r1 = grad_check(fsum, randt({5}, 31), 1e-4, 1e-6);
  EXPECT_TRUE(r1.pass);
  EXPECT_LT(r1.max_rel_error, 1e-6);

  // f(x)=sum(x^2) at [1,2]: analytic [2,4]
  auto fsq = [](const Tensor& t) { return sum(mul(t, t)); };
  Tensor p = Tensor::from_data({2}, {1, 2});
  {
    Tape tape;
    Tensor x = p.clone();
    x.set_requires_grad(true);
    GradientMap g = backward(fsq(x), tape);
    EXPECT_NEAR(g.grad(x).ptr()[0], 2.f, 1e-6);
    EXPECT_NEAR(g.grad(x).ptr()[1], 4.f, 1e-6);
  }
  auto r2 = grad_check(fsq, p, 1e-4, 1e-3);
  EXPECT_TRUE(r2.pass);
}

TEST(GradCheck, TwoLayerGeluNetwork) {
  // float32 evaluation noise puts ~1e-3 beyond reach at small fd steps; the
  // acceptance tolerance for all grad checks is 1e-3 at fd_step 3e-3.
  Tensor w2 = randt({6, 1}, 52);
  Tensor x = randt({4, 1}, 53);
  auto f = [&](const Tensor& w1) {
    Tensor h = gelu(matmul(reshape(w1, {6, 4}), x));
    return sum(mul(w2, h));
  };
  auto report = grad_check(f, randt({24}, 54, 0.5f), 3e-3, 1e-3);
  EXPECT_TRUE(report.pass) << report.max_rel_error;
}

TEST(GradCheck, NonFiniteEvaluationRaises) {
  auto f = [](const Tensor& t) {
    Tensor s = sum(t);
    // log of a negative number once the probe crosses zero
    return Tensor::scalar(std::log(s.item()));
  };
  Tensor p = Tensor::from_data({1}, {1e-9f});
  EXPECT_THROW(grad_check(f, p, 1.0, 1e-3), NumericError);
}

namespace {

// positive weights bounded away from zero keep every coordinate's gradient
// measurable by finite differences
Tensor pos_weights(Shape s, uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::zeros(std::move(s));
  for (float& v : std::span(t.mutable_ptr(), static_cast<size_t>(t.size()))) {
    v = rng.uniform(0.5f, 1.5f);
  }
  return t;
}

}  // namespace

TEST(OpsGrad, PrimitivesAgreeWithFiniteDifferences) {
  // property: every primitive op passes a randomized FD check over seeds
  struct Case {
    const char* name;
    std::function<Tensor(const Tensor&)> f;
    Shape shape;
  };
  Tensor other = pos_weights({2, 3, 4, 4}, 1000);
  Tensor w4344 = pos_weights({2, 3, 4, 4}, 1001);
  Tensor w2644 = pos_weights({2, 6, 4, 4}, 1002);
  Tensor lngamma = Tensor::full({4}, 1.1f);
  Tensor lnbeta = Tensor::full({4}, 0.2f);
  // wide-spread ramp weights for normalization ops
  Tensor ramp54 = Tensor::from_data({5, 4}, [] {
    std::vector<float> v(20);
    for (size_t i = 0; i < v.size(); ++i) v[i] = 1.f + 0.9f * static_cast<float>(i % 7);
    return v;
  }());
  Tensor spread46 = Tensor::from_data({4, 6}, [] {
    std::vector<float> v(24);
    for (size_t i = 0; i < v.size(); ++i) v[i] = (i % 2 == 0 ? 3.f : -3.f) + 0.13f * (i % 5);
    return v;
  }());
  std::vector<Case> cases = {
      {"add", [&](const Tensor& t) { return sum(mul(add(t, other), w4344)); }, {2, 3, 4, 4}},
      {"sub", [&](const Tensor& t) { return sum(mul(sub(t, other), w4344)); }, {2, 3, 4, 4}},
      {"mul", [&](const Tensor& t) { return sum(mul(mul(t, other), w4344)); }, {2, 3, 4, 4}},
      {"scale", [&](const Tensor& t) { return sum(mul(scale(t, 1.7f), pos_weights({3, 5}, 1003))); },
       {3, 5}},
      {"relu_positive_region",
       [&](const Tensor& t) {
         return sum(mul(relu(add_scalar(t, 4.f)), pos_weights({4, 4}, 1004)));
       },
       {4, 4}},
      {"gelu", [&](const Tensor& t) { return sum(mul(gelu(add_scalar(t, 1.5f)), pos_weights({3, 7}, 1005))); },
       {3, 7}},
      {"sigmoid", [&](const Tensor& t) { return sum(mul(sigmoid(t), pos_weights({3, 4}, 1006))); },
       {3, 4}},
      {"tanh", [&](const Tensor& t) { return sum(mul(tanh_act(t), pos_weights({3, 4}, 1007))); },
       {3, 4}},
      {"softmax", [&](const Tensor& t) { return sum(mul(softmax_lastdim(t), spread46)); }, {4, 6}},
      {"log_softmax", [&](const Tensor& t) { return sum(mul(log_softmax_lastdim(t), spread46)); },
       {4, 6}},
      {"matmul_lhs",
       [&](const Tensor& t) { return sum(mul(matmul(t, pos_weights({4, 5}, 1009)), pos_weights({4, 5}, 1010))); },
       {4, 4}},
      {"matmul_rhs",
       [&](const Tensor& t) { return sum(mul(matmul(pos_weights({5, 4}, 1011), t), pos_weights({5, 3}, 1012))); },
       {4, 3}},
      {"mean", [](const Tensor& t) { return mean(t); }, {3, 3}},
      {"mse", [&](const Tensor& t) { return mse_mean(t, add_scalar(other, 2.f)); }, {2, 3, 4, 4}},
      {"avg_pool", [&](const Tensor& t) { return sum(mul(avg_pool2d(t, 2), pos_weights({1, 2, 2, 2}, 1013))); },
       {1, 2, 4, 4}},
      {"gap", [&](const Tensor& t) { return sum(mul(global_avg_pool(t), pos_weights({2, 3}, 1014))); },
       {2, 3, 4, 4}},
      {"upsample", [&](const Tensor& t) { return sum(mul(upsample_nearest(t, 2), pos_weights({1, 2, 6, 6}, 1015))); },
       {1, 2, 3, 3}},
      {"layer_norm",
       [&](const Tensor& t) { return sum(mul(layer_norm_lastdim(t, lngamma, lnbeta), ramp54)); },
       {5, 4}},
      {"patch_extract",
       [&](const Tensor& t) { return sum(mul(patch_extract(t, 2), pos_weights({1, 4, 12}, 1016))); },
       {1, 3, 4, 4}},
      {"concat",
       [&](const Tensor& t) { return sum(mul(concat_channels(t, other), w2644)); },
       {2, 3, 4, 4}},
      {"slice", [&](const Tensor& t) { return sum(mul(slice_channels(t, 1, 3), pos_weights({2, 2, 3, 3}, 1017))); },
       {2, 4, 3, 3}},
      {"clamp_interior", [&](const Tensor& t) { return sum(mul(clamp(t, -10.f, 10.f), pos_weights({3, 3}, 1018))); },
       {3, 3}},
      {"tokens_to_grid",
       [&](const Tensor& t) { return sum(mul(reshape(tokens_to_grid(t, 2, 2), {1, 3, 2, 2}), pos_weights({1, 3, 2, 2}, 1019))); },
       {1, 4, 3}},
      {"split_merge_heads",
       [&](const Tensor& t) { return sum(mul(merge_heads(split_heads(t, 2), 2), pos_weights({1, 3, 4}, 1020))); },
       {1, 3, 4}},
  };
  for (const auto& c : cases) {
    for (uint64_t seed = 0; seed < 3; ++seed) {
      Tensor p = randt(c.shape, 7000 + seed * 131, 0.7f);
      auto rep = grad_check(c.f, p, 3e-3, 1e-3, 24, seed, 0.05);
      EXPECT_TRUE(rep.pass) << c.name << " seed " << seed << " err " << rep.max_rel_error;
    }
  }
}

TEST(OpsGrad, ConvAndLinearAndBatchNorm) {
  // positive kernels and loss weights keep per-coordinate gradients away
  // from zero, where FD relative error is noise-dominated
  Tensor w = pos_weights({4, 3, 3, 3}, 301);
  Tensor b = randt({4}, 302, 0.1f);
  Tensor lw = pos_weights({2, 4, 6, 6}, 303);
  Tensor lws = pos_weights({2, 4, 3, 3}, 304);
  for (uint64_t seed = 0; seed < 3; ++seed) {
    Tensor x = randt({2, 3, 6, 6}, 300 + seed);
    auto fx = [&](const Tensor& t) { return sum(mul(conv2d(t, w, b, 1, 1), lw)); };
    auto r1 = grad_check(fx, x, 3e-3, 1e-3, 20, seed, 0.05);
    EXPECT_TRUE(r1.pass) << "conv input " << r1.max_rel_error;
    auto fw = [&](const Tensor& t) { return sum(mul(conv2d(add_scalar(x, 2.f), t, b, 1, 1), lw)); };
    auto r2 = grad_check(fw, w, 3e-3, 1e-3, 20, seed, 0.05);
    EXPECT_TRUE(r2.pass) << "conv kernel " << r2.max_rel_error;
    Tensor x7 = randt({2, 3, 7, 7}, 340 + seed);
    Tensor lws7 = pos_weights({2, 4, 4, 4}, 304);
    auto fs = [&](const Tensor& t) { return sum(mul(conv2d(t, w, Tensor(), 2, 1), lws7)); };
    auto r3 = grad_check(fs, x7, 3e-3, 1e-3, 20, seed, 0.05);
    EXPECT_TRUE(r3.pass) << "conv stride " << r3.max_rel_error;
    Tensor xin = pos_weights({5, 4}, 400 + seed);
    Tensor lwl = pos_weights({5, 3}, 401);
    auto fl = [&](const Tensor& t) {
      return sum(mul(linear(xin, reshape(t, {4, 3}), Tensor()), lwl));
    };
    auto r4 = grad_check(fl, randt({12}, 500 + seed), 3e-3, 1e-3, 12, seed, 0.05);
    EXPECT_TRUE(r4.pass) << "linear " << r4.max_rel_error;
    // batch norm (training mode) w.r.t. input, ramp weights spread the
    // per-channel gradient spectrum
    Tensor gm = Tensor::full({3}, 1.1f);
    gm.set_requires_grad(false);
    Tensor bt = Tensor::zeros({3});
    Tensor bn_w = Tensor::zeros({2, 3, 4, 4});
    for (int64_t i = 0; i < bn_w.size(); ++i) {
      bn_w.mutable_ptr()[i] = 0.7f + 0.85f * static_cast<float>(i % 9);
    }
    std::function<Tensor(const Tensor&)> fbn = [&](const Tensor& t) {
      Tensor rm = Tensor::zeros({3});
      Tensor rv = Tensor::full({3}, 1.f);
      Tensor y = batch_norm2d(t, gm, bt, rm, rv, 0.9f, 1e-5f, true);
      return sum(mul(y, bn_w));
    };
    auto r5 = grad_check(fbn, randt({2, 3, 4, 4}, 600 + seed), 3e-3, 1e-3, 24, seed, 0.05);
    EXPECT_TRUE(r5.pass) << "batch_norm " << r5.max_rel_error;
  }
}

TEST(Softmax, RowStochasticProperty) {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 1);
    const int rows = rng.uniform_int(1, 5);
    const int cols = rng.uniform_int(2, 9);
    Tensor x = Tensor::randn({rows, cols}, rng, 3.f);
    Tensor s = softmax_lastdim(x);
    for (int r = 0; r < rows; ++r) {
      double total = 0;
      for (int c = 0; c < cols; ++c) {
        const float v = s.ptr()[r * cols + c];
        EXPECT_GE(v, 0.f);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Attention, SingleTokenWeightIsOne) {
  Rng rng(91);
  const int d = 8;
  Tensor wq = Tensor::randn({d, d}, rng, 0.3f), bq = Tensor::zeros({d});
  Tensor wk = Tensor::randn({d, d}, rng, 0.3f), bk = Tensor::zeros({d});
  Tensor wv = Tensor::randn({d, d}, rng, 0.3f), bv = Tensor::zeros({d});
  Tensor wo = Tensor::randn({d, d}, rng, 0.3f), bo = Tensor::zeros({d});
  Tensor tok = Tensor::randn({1, d}, rng);
  auto out = multi_head_attention(tok, 2, wq, bq, wk, bk, wv, bv, wo, bo);
  ASSERT_EQ(out.probs.shape(), (Shape{2, 1, 1}));
  EXPECT_NEAR(out.probs.ptr()[0], 1.f, 1e-6);
  EXPECT_NEAR(out.probs.ptr()[1], 1.f, 1e-6);
  // output equals the output-projection of the value projection
  Tensor v = linear(tok, wv, bv);
  Tensor want = linear(v, wo, bo);
  EXPECT_LT(max_abs_diff(out.out, want), 1e-5);
}

TEST(Attention, IdenticalTokensGiveIdenticalRows) {
  Rng rng(92);
  const int d = 8;
  Tensor wq = Tensor::randn({d, d}, rng, 0.3f), bq = Tensor::zeros({d});
  Tensor wk = Tensor::randn({d, d}, rng, 0.3f), bk = Tensor::zeros({d});
  Tensor wv = Tensor::randn({d, d}, rng, 0.3f), bv = Tensor::zeros({d});
  Tensor wo = Tensor::randn({d, d}, rng, 0.3f), bo = Tensor::zeros({d});
  Tensor row = Tensor::randn({1, d}, rng);
  Tensor two = Tensor::zeros({2, d});
  std::copy_n(row.ptr(), d, two.mutable_ptr());
  std::copy_n(row.ptr(), d, two.mutable_ptr() + d);
  auto out = multi_head_attention(two, 2, wq, bq, wk, bk, wv, bv, wo, bo);
  for (int j = 0; j < d; ++j) {
    EXPECT_NEAR(out.out.ptr()[j], out.out.ptr()[d + j], 1e-6);
  }
}

TEST(Attention, MatchesDenseSingleHeadOracle) {
  // N_tok=3, D1=4, heads=1 vs an independent dense recomputation
  Rng rng(93);
  const int t = 3, d = 4;
  Tensor wq = Tensor::randn({d, d}, rng, 0.4f), bq = Tensor::randn({d}, rng, 0.1f);
  Tensor wk = Tensor::randn({d, d}, rng, 0.4f), bk = Tensor::randn({d}, rng, 0.1f);
  Tensor wv = Tensor::randn({d, d}, rng, 0.4f), bv = Tensor::randn({d}, rng, 0.1f);
  Tensor wo = Tensor::randn({d, d}, rng, 0.4f), bo = Tensor::randn({d}, rng, 0.1f);
  Tensor x = Tensor::randn({t, d}, rng);
  auto got = multi_head_attention(x, 1, wq, bq, wk, bk, wv, bv, wo, bo);

  // oracle in doubles
  auto lin = [&](const Tensor& in, const Tensor& w, const Tensor& b, int r, int c) {
    double acc = b.ptr()[c];
    for (int i = 0; i < d; ++i) acc += static_cast<double>(in.ptr()[r * d + i]) * w.ptr()[i * d + c];
    return acc;
  };
  double q[3][4], k[3][4], v[3][4];
  for (int r = 0; r < t; ++r) {
    for (int c = 0; c < d; ++c) {
      q[r][c] = lin(x, wq, bq, r, c);
      k[r][c] = lin(x, wk, bk, r, c);
      v[r][c] = lin(x, wv, bv, r, c);
    }
  }
  double ctx[3][4] = {};
  for (int r = 0; r < t; ++r) {
    double scores[3], mx = -1e300;
    for (int s = 0; s < t; ++s) {
      double acc = 0;
      for (int c = 0; c < d; ++c) acc += q[r][c] * k[s][c];
      scores[s] = acc / std::sqrt(4.0);
      mx = std::max(mx, scores[s]);
    }
    double denom = 0;
    for (int s = 0; s < t; ++s) denom += std::exp(scores[s] - mx);
    for (int s = 0; s < t; ++s) {
      const double p = std::exp(scores[s] - mx) / denom;
      for (int c = 0; c < d; ++c) ctx[r][c] += p * v[s][c];
    }
  }
  for (int r = 0; r < t; ++r) {
    for (int c = 0; c < d; ++c) {
      double acc = bo.ptr()[c];
      for (int i = 0; i < d; ++i) acc += ctx[r][i] * wo.ptr()[i * d + c];
      EXPECT_NEAR(got.out.ptr()[r * d + c], acc, 1e-6) << r << "," << c;
    }
  }
  EXPECT_THROW(multi_head_attention(x, 3, wq, bq, wk, bk, wv, bv, wo, bo), ConfigError);
}

TEST(Determinism, ForwardAndGemmRepeatable) {
  Tensor x = randt({2, 3, 8, 8}, 61);
  Tensor w = randt({4, 3, 3, 3}, 62, 0.2f);
  Tensor y1 = conv2d(x, w, Tensor(), 1, 1);
  Tensor y2 = conv2d(x, w, Tensor(), 1, 1);
  EXPECT_TRUE(bitwise_equal(y1, y2));
  Tensor s1 = softmax_lastdim(randt({7, 9}, 63));
  Tensor s2 = softmax_lastdim(randt({7, 9}, 63));
  EXPECT_TRUE(bitwise_equal(s1, s2));
}
