#include <doctest.h>

#include "oracles.hpp"

using namespace otfm;
using namespace otfm::ad;
using otfm::test::GradCheck;
using otfm::test::grad_check;
using otfm::test::random_tensor;

namespace {
constexpr double kTol = 2e-6;

void require_ok(const GradCheck& r) {
  CHECK(r.max_rel < kTol);
}
}  // namespace

TEST_CASE("elementwise forward values") {
  auto a = leaf<double>(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  auto b = leaf<double>(Tensor<double>({2, 2}, {5, 6, 7, 8}));
  CHECK(add(a, b)->v[2] == 10.0);
  CHECK(sub(a, b)->v[0] == -4.0);
  CHECK(mul(a, b)->v[3] == 32.0);
  CHECK(scale(a, 3.0)->v[1] == 6.0);
  CHECK(add_scalar(a, -1.0)->v[0] == 0.0);
  CHECK(neg(a)->v[3] == -4.0);
  CHECK(sum_all(a)->v[0] == 10.0);
  CHECK(mean_all(b)->v[0] == doctest::Approx(6.5));
}

TEST_CASE("shared subexpression accumulates both paths") {
  auto x = leaf<double>(Tensor<double>({1}, {3.0}), true);
  auto y = add(mul(x, x), mul(x, x));
  backward(y);
  CHECK(x->g[0] == doctest::Approx(12.0));
}

TEST_CASE("deep chain does not overflow the stack") {
  auto x = leaf<double>(Tensor<double>({1}, {1.0}), true);
  Var<double> y = x;
  for (int i = 0; i < 50000; ++i) y = add_scalar(y, 0.0);
  backward(y);
  CHECK(x->g[0] == 1.0);
}

TEST_CASE("gradcheck composite elementwise") {
  Rng rng(7);
  auto gc = grad_check(
      [](const std::vector<Var<double>>& in) {
        auto z = mul(add(in[0], in[1]), sub(in[0], scale(in[1], 0.5)));
        return mean_all(add(silu(z), gelu(in[0])));
      },
      {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})});
  require_ok(gc);
}

TEST_CASE("exp_clamp saturates and matches derivative inside") {
  auto x = leaf<double>(Tensor<double>({3}, {-40.0, 0.5, 40.0}));
  auto y = exp_clamp(x, 30.0);
  CHECK(y->v[0] == doctest::Approx(std::exp(-30.0)));
  CHECK(y->v[1] == doctest::Approx(std::exp(0.5)));
  CHECK(y->v[2] == doctest::Approx(std::exp(30.0)));

  auto xs = leaf<double>(Tensor<double>({1}, {40.0}), true);
  auto ys = sum_all(exp_clamp(xs, 30.0));
  backward(ys);
  CHECK(xs->g[0] == 0.0);  // flat outside the clamp

  Rng rng(3);
  require_ok(grad_check(
      [](const std::vector<Var<double>>& in) {
        return mean_all(exp_clamp(in[0], 30.0));
      },
      {random_tensor(rng, {4, 3}, -2.0, 2.0)}));
}

TEST_CASE("leaky_relu slope") {
  auto x = leaf<double>(Tensor<double>({2}, {-2.0, 3.0}));
  auto y = leaky_relu(x, 0.2);
  CHECK(y->v[0] == doctest::Approx(-0.4));
  CHECK(y->v[1] == doctest::Approx(3.0));
  Rng rng(11);
  require_ok(grad_check(
      [](const std::vector<Var<double>>& in) {
        return mean_all(leaky_relu(in[0], 0.2));
      },
      {random_tensor(rng, {5, 5}, 0.1, 2.0)}));
}

TEST_CASE("reductions per sample") {
  auto x = leaf<double>(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto m = mean_per_sample(x);
  CHECK(m->v.dim(0) == 2);
  CHECK(m->v[0] == doctest::Approx(2.0));
  CHECK(m->v[1] == doctest::Approx(5.0));

  auto y = leaf<double>(Tensor<double>({2, 3}, {1, 1, 1, 4, 4, 4}));
  auto e = mse_per_sample(x, y);
  CHECK(e->v[0] == doctest::Approx((0.0 + 1.0 + 4.0) / 3.0));
  CHECK(e->v[1] == doctest::Approx((0.0 + 1.0 + 4.0) / 3.0));

  Rng rng(5);
  require_ok(grad_check(
      [](const std::vector<Var<double>>& in) {
        return mean_all(mse_per_sample(in[0], in[1]));
      },
      {random_tensor(rng, {2, 8}), random_tensor(rng, {2, 8})}));
}

TEST_CASE("broadcast ops") {
  Rng rng(13);
  require_ok(grad_check(
      [](const std::vector<Var<double>>& in) {
        return mean_all(add_bias(in[0], in[1]));
      },
      {random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {3})}));
  require_ok(grad_check(
      [](const std::vector<Var<double>>& in) {
        return mean_all(mul(add_per_channel(in[0], in[1]), in[0]));
      },
      {random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {2, 3})}));
  require_ok(grad_check(
      [](const std::vector<Var<double>>& in) {
        return mean_all(mul_band_broadcast(in[0], in[1]));
      },
      {random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {2, 1, 4, 4})}));
  require_ok(grad_check(
      [](const std::vector<Var<double>>& in) {
        return mean_all(concat_channels(in[0], in[1]));
      },
      {random_tensor(rng, {2, 2, 3, 3}), random_tensor(rng, {2, 4, 3, 3})}));
  require_ok(grad_check(
      [](const std::vector<Var<double>>& in) {
        return mean_all(channel_slice(in[0], 1, 2));
      },
      {random_tensor(rng, {2, 4, 3, 3})}));
}

TEST_CASE("band_combine matches manual weighted sum") {
  Rng rng(17);
  Tensor<double> w = random_tensor(rng, {2, 3});
  Tensor<double> bias = random_tensor(rng, {2});
  Tensor<double> xv = random_tensor(rng, {2, 3, 2, 2});
  auto x = leaf<double>(xv, true);
  auto y = band_combine(x, w, bias);
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        double want = bias[n];
        for (int b = 0; b < 3; ++b) want += w[n * 3 + b] * xv.at4(n, b, i, j);
        CHECK(y->v.at4(n, 0, i, j) == doctest::Approx(want));
      }
  require_ok(grad_check(
      [&](const std::vector<Var<double>>& in) {
        return mean_all(band_combine(in[0], w, bias));
      },
      {xv}));
}

TEST_CASE("axpy_per_sample reconstructs endpoints") {
  Rng rng(19);
  Tensor<double> base = random_tensor(rng, {2, 3, 2, 2});
  Tensor<double> t({2}, {0.25, 1.0});
  Tensor<double> sv = random_tensor(rng, {2, 3, 2, 2});
  auto s = leaf<double>(sv, true);
  auto y = axpy_per_sample(base, t, s);
  CHECK(y->v.at4(1, 2, 1, 1) ==
        doctest::Approx(base.at4(1, 2, 1, 1) + 1.0 * sv.at4(1, 2, 1, 1)));
  CHECK(y->v.at4(0, 0, 0, 0) ==
        doctest::Approx(base.at4(0, 0, 0, 0) + 0.25 * sv.at4(0, 0, 0, 0)));
  require_ok(grad_check(
      [&](const std::vector<Var<double>>& in) {
        return mean_all(axpy_per_sample(base, t, in[0]));
      },
      {sv}));
}

TEST_CASE("linear matches manual matmul") {
  Rng rng(23);
  Tensor<double> xv = random_tensor(rng, {3, 4});
  Tensor<double> wv = random_tensor(rng, {2, 4});
  Tensor<double> bv = random_tensor(rng, {2});
  auto y = linear(leaf<double>(xv), leaf<double>(wv), leaf<double>(bv));
  for (int n = 0; n < 3; ++n)
    for (int o = 0; o < 2; ++o) {
      double want = bv[o];
      for (int d = 0; d < 4; ++d) want += xv[n * 4 + d] * wv[o * 4 + d];
      CHECK(y->v[n * 2 + o] == doctest::Approx(want));
    }
  require_ok(grad_check(
      [](const std::vector<Var<double>>& in) {
        return mean_all(silu(linear(in[0], in[1], in[2])));
      },
      {xv, wv, bv}));
}

TEST_CASE("conv2d matches brute force") {
  Rng rng(29);
  for (auto [stride, pad, k] : {std::tuple{1, 1, 3}, {2, 1, 3}, {1, 0, 1}, {2, 1, 4}}) {
    Tensor<double> xv = random_tensor(rng, {2, 3, 6, 5});
    Tensor<double> wv = random_tensor(rng, {4, 3, k, k});
    Tensor<double> bv = random_tensor(rng, {4});
    auto out = conv2d(leaf<double>(xv), leaf<double>(wv), leaf<double>(bv), stride, pad);
    Tensor<double> want = otfm::test::conv2d_brute(xv, wv, bv, stride, pad);
    REQUIRE(out->v.same_shape(want));
    for (std::int64_t i = 0; i < want.numel(); ++i)
      CHECK(out->v[i] == doctest::Approx(want[i]).epsilon(1e-9));
    require_ok(grad_check(
        [stride, pad](const std::vector<Var<double>>& in) {
          return mean_all(gelu(conv2d(in[0], in[1], in[2], stride, pad)));
        },
        {xv, wv, bv}));
  }
}

TEST_CASE("conv1d_axis_sym equals separable reference and keeps constants") {
  Rng rng(31);
  const std::vector<double> k1 = gaussian_kernel_1d(5, 1.1);
  Tensor<double> xv = random_tensor(rng, {1, 2, 6, 7}, 0.0, 1.0);
  auto rows = conv1d_axis_sym(leaf<double>(xv), k1, 2);
  auto both = conv1d_axis_sym(rows, k1, 3);

  std::vector<double> k2(25);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) k2[i * 5 + j] = k1[i] * k1[j];
  std::vector<double> img(xv.data(), xv.data() + xv.numel());
  auto want = otfm::test::conv2d_sym_brute(img, 2, 6, 7, k2, 5);
  for (std::int64_t i = 0; i < both->v.numel(); ++i)
    CHECK(both->v[i] == doctest::Approx(want[i]).epsilon(1e-10));

  Tensor<double> c = Tensor<double>::full({1, 1, 4, 4}, 0.37);
  auto cb = conv1d_axis_sym(leaf<double>(c), k1, 2);
  for (std::int64_t i = 0; i < cb->v.numel(); ++i)
    CHECK(cb->v[i] == doctest::Approx(0.37).epsilon(1e-12));

  require_ok(grad_check(
      [&k1](const std::vector<Var<double>>& in) {
        return mean_all(
            mul(conv1d_axis_sym(conv1d_axis_sym(in[0], k1, 2), k1, 3), in[0]));
      },
      {xv}));
}

TEST_CASE("kernel wider than axis folds correctly") {
  // 41-tap blur on a 16-pixel axis exercises multi-fold reflection.
  const std::vector<double> k1 = gaussian_kernel_1d(41, 3.0);
  Tensor<double> c = Tensor<double>::full({1, 1, 16, 16}, 0.5);
  auto out = conv1d_axis_sym(leaf<double>(c), k1, 3);
  for (std::int64_t i = 0; i < out->v.numel(); ++i)
    CHECK(out->v[i] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("resampling ops") {
  Rng rng(37);
  Tensor<double> xv = random_tensor(rng, {2, 2, 8, 8});

  auto dec = decimate_ad(leaf<double>(xv), 4);
  CHECK(dec->v.dim(2) == 2);
  CHECK(dec->v.at4(0, 0, 0, 0) == xv.at4(0, 0, 2, 2));
  CHECK(dec->v.at4(1, 1, 1, 1) == xv.at4(1, 1, 6, 6));

  auto up = upsample_nearest2(leaf<double>(xv));
  CHECK(up->v.dim(2) == 16);
  CHECK(up->v.at4(0, 1, 5, 7) == xv.at4(0, 1, 2, 3));

  auto pool = avgpool2(leaf<double>(xv));
  CHECK(pool->v.at4(0, 0, 0, 0) ==
        doctest::Approx(0.25 * (xv.at4(0, 0, 0, 0) + xv.at4(0, 0, 0, 1) +
                                xv.at4(0, 0, 1, 0) + xv.at4(0, 0, 1, 1))));

  for (auto fn : std::vector<otfm::test::GraphFn>{
           [](const std::vector<Var<double>>& in) {
             return mean_all(mul(decimate_ad(in[0], 2), decimate_ad(in[0], 2)));
           },
           [](const std::vector<Var<double>>& in) {
             return mean_all(gelu(upsample_nearest2(in[0])));
           },
           [](const std::vector<Var<double>>& in) {
             return mean_all(silu(avgpool2(in[0])));
           }})
    require_ok(grad_check(fn, {xv}));
}

TEST_CASE("layer_norm_ch normalizes channels per position") {
  Rng rng(41);
  Tensor<double> xv = random_tensor(rng, {2, 5, 3, 3});
  auto y = layer_norm_ch(leaf<double>(xv));
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double mu = 0.0, var = 0.0;
        for (int c = 0; c < 5; ++c) mu += y->v.at4(n, c, i, j);
        mu /= 5;
        for (int c = 0; c < 5; ++c) {
          double d = y->v.at4(n, c, i, j) - mu;
          var += d * d;
        }
        CHECK(mu == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(var / 5 == doctest::Approx(1.0).epsilon(1e-3));
      }
  require_ok(grad_check(
      [](const std::vector<Var<double>>& in) {
        return mean_all(mul(layer_norm_ch(in[0]), in[0]));
      },
      {xv}));
}

TEST_CASE("batch_norm train vs eval statistics") {
  Rng rng(43);
  Tensor<double> xv = random_tensor(rng, {3, 2, 4, 4}, 0.0, 2.0);
  auto gamma = leaf<double>(Tensor<double>::full({2}, 1.0));
  auto beta = leaf<double>(Tensor<double>::zeros({2}));

  BatchNormState<double> st(2);
  auto y = batch_norm(leaf<double>(xv), gamma, beta, &st, true);

  // Batch statistics: normalized output has zero mean, unit variance per channel.
  const std::int64_t m = 3 * 16;
  for (int c = 0; c < 2; ++c) {
    double mu = 0.0, var = 0.0;
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) mu += y->v.at4(n, c, i, j);
    mu /= double(m);
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          double d = y->v.at4(n, c, i, j) - mu;
          var += d * d;
        }
    CHECK(mu == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var / double(m) == doctest::Approx(1.0).epsilon(1e-3));
  }

  // Running stats moved toward batch stats with momentum 0.1.
  double mu0 = 0.0;
  for (int n = 0; n < 3; ++n)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) mu0 += xv.at4(n, 0, i, j);
  mu0 /= double(m);
  CHECK(st.running_mean[0] == doctest::Approx(0.1 * mu0).epsilon(1e-9));

  // Eval mode normalizes with the running buffers, not the batch.
  BatchNormState<double> fixed(2);
  fixed.running_mean[0] = 0.5;
  fixed.running_var[0] = 4.0;
  Tensor<double> one = Tensor<double>::full({1, 2, 1, 1}, 1.0);
  auto ye = batch_norm(leaf<double>(one), gamma, beta, &fixed, false);
  CHECK(ye->v[0] == doctest::Approx((1.0 - 0.5) / std::sqrt(4.0 + 1e-5)));
  CHECK(ye->v[1] == doctest::Approx((1.0 - 0.0) / std::sqrt(1.0 + 1e-5)));

  for (bool training : {true, false}) {
    BatchNormState<double> s2(2);
    s2.running_mean[0] = 0.3;
    s2.running_var[1] = 2.0;
    require_ok(grad_check(
        [&s2, training](const std::vector<Var<double>>& in) {
          return mean_all(
              mul(batch_norm(in[0], in[1], in[2], &s2, training), in[0]));
        },
        {xv, random_tensor(rng, {2}, 0.5, 1.5), random_tensor(rng, {2})}));
  }
}

TEST_CASE("neighborhood attention matches brute force") {
  Rng rng(47);
  Tensor<double> qv = random_tensor(rng, {2, 4, 5, 6});
  Tensor<double> kv = random_tensor(rng, {2, 4, 5, 6});
  Tensor<double> vv = random_tensor(rng, {2, 4, 5, 6});
  auto out = neighborhood_attention(leaf<double>(qv), leaf<double>(kv),
                                    leaf<double>(vv), 2, 3);
  Tensor<double> want = otfm::test::attention_brute(qv, kv, vv, 2, 3);
  for (std::int64_t i = 0; i < want.numel(); ++i)
    CHECK(out->v[i] == doctest::Approx(want[i]).epsilon(1e-10));
}

TEST_CASE("attention with uniform keys averages the window") {
  // Identical keys give uniform probabilities over exactly window^2 values.
  Rng rng(53);
  Tensor<double> qv = random_tensor(rng, {1, 2, 7, 7});
  Tensor<double> kv = Tensor<double>::full({1, 2, 7, 7}, 0.3);
  Tensor<double> vv = random_tensor(rng, {1, 2, 7, 7});
  auto out = neighborhood_attention(leaf<double>(qv), leaf<double>(kv),
                                    leaf<double>(vv), 1, 3);
  // Center query (3,3): window rows/cols 2..4.
  double want = 0.0;
  for (int i = 2; i <= 4; ++i)
    for (int j = 2; j <= 4; ++j) want += vv.at4(0, 0, i, j);
  want /= 9.0;
  CHECK(out->v.at4(0, 0, 3, 3) == doctest::Approx(want));
  // Corner query (0,0) window is shifted, still 3x3 at rows/cols 0..2.
  want = 0.0;
  for (int i = 0; i <= 2; ++i)
    for (int j = 0; j <= 2; ++j) want += vv.at4(0, 1, i, j);
  want /= 9.0;
  CHECK(out->v.at4(0, 1, 0, 0) == doctest::Approx(want));
}

TEST_CASE("attention gradcheck") {
  Rng rng(59);
  require_ok(grad_check(
      [](const std::vector<Var<double>>& in) {
        return mean_all(
            mul(neighborhood_attention(in[0], in[1], in[2], 2, 3), in[0]));
      },
      {random_tensor(rng, {1, 4, 4, 5}), random_tensor(rng, {1, 4, 4, 5}),
       random_tensor(rng, {1, 4, 4, 5})}));
}

TEST_CASE("detach blocks gradients") {
  auto x = leaf<double>(Tensor<double>({2}, {1.0, 2.0}), true);
  auto y = mean_all(mul(detach(x), x));
  backward(y);
  CHECK(x->g[0] == doctest::Approx(0.5));  // only the live factor contributes
  CHECK(x->g[1] == doctest::Approx(1.0));
}

TEST_CASE("rng determinism and state round trip") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  a.normal();
  Rng::State s = a.save_state();
  std::vector<double> want;
  for (int i = 0; i < 10; ++i) want.push_back(a.normal());
  Rng c(0);
  c.load_state(s);
  for (int i = 0; i < 10; ++i) CHECK(c.normal() == want[i]);
}
