#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "musp/nn.hpp"
#include "musp/rng.hpp"
#include "musp/tensor.hpp"
#include "oracles.hpp"

using musp::Rng;
using musp::Shape;
using musp::Tensor;

TEST_CASE("tensor construction enforces shape/data agreement") {
  CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), musp::ShapeError);
  CHECK_THROWS_AS(Tensor({0, 3}), musp::ShapeError);
  Tensor t({2, 2}, {1, 2, 3, 4});
  CHECK(t.size() == 4);
  CHECK(t.at({1, 0}) == 3.0);
}

TEST_CASE("conv2d: zero kernel passes only bias") {
  Tensor in({1, 1, 1}, {2.0});
  Tensor ker({3, 3, 1, 1});
  Tensor bias({1}, {3.0});
  Tensor out = musp::conv2d(in, ker, bias);
  CHECK(out.item() == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("conv2d: center-one kernel is the identity") {
  Tensor in = Tensor::full({3, 3, 1}, 1.0);
  Tensor ker({3, 3, 1, 1});
  ker.at({1, 1, 0, 0}) = 1.0;
  Tensor out = musp::conv2d(in, ker, Tensor({1}));
  for (double v : out.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("conv2d matches the six-nested-loop oracle") {
  Rng rng(7);
  Tensor in = oracle::random_tensor({4, 4, 2}, rng);
  Tensor ker = oracle::random_tensor({3, 3, 2, 3}, rng);
  Tensor bias = oracle::random_tensor({3}, rng);
  Tensor out = musp::conv2d(in, ker, bias);
  auto ref = oracle::conv2d(in.values(), 4, 4, 2, ker.values(), 3, bias.values());
  REQUIRE(out.size() == static_cast<int64_t>(ref.size()));
  for (size_t i = 0; i < ref.size(); ++i) CHECK(out.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("conv2d rejects channel mismatch with a shape diagnostic") {
  Tensor in({4, 4, 2});
  Tensor ker({3, 3, 3, 1});
  Tensor bias({1});
  CHECK_THROWS_AS(musp::conv2d(in, ker, bias), musp::ShapeError);
}

TEST_CASE("batched conv2d equals per-image conv2d") {
  Rng rng(11);
  Tensor batch = oracle::random_tensor({3, 5, 4, 2}, rng);
  Tensor ker = oracle::random_tensor({3, 3, 2, 4}, rng);
  Tensor bias = oracle::random_tensor({4}, rng);
  Tensor out = musp::conv2d(batch, ker, bias);
  for (int k = 0; k < 3; ++k) {
    Tensor img({5, 4, 2});
    std::copy(batch.data() + k * 40, batch.data() + (k + 1) * 40, img.data());
    Tensor ref = musp::conv2d(img, ker, bias);
    for (int i = 0; i < ref.size(); ++i) {
      CHECK(out.data()[k * ref.size() + i] == doctest::Approx(ref.data()[i]).epsilon(1e-15));
    }
  }
}

TEST_CASE("linear: identity weight and zero input cases") {
  Tensor w({3, 3});
  for (int i = 0; i < 3; ++i) w.at({i, i}) = 1.0;
  Tensor in({3}, {1.5, -2.0, 0.25});
  Tensor out = musp::linear(in, w, Tensor({3}));
  for (int i = 0; i < 3; ++i) CHECK(out.data()[i] == in.data()[i]);

  Rng rng(3);
  Tensor w2 = oracle::random_tensor({4, 2}, rng);
  Tensor b2 = oracle::random_tensor({2}, rng);
  Tensor zero({4});
  Tensor out2 = musp::linear(zero, w2, b2);
  for (int i = 0; i < 2; ++i) CHECK(out2.data()[i] == b2.data()[i]);
}

TEST_CASE("linear matches the naive dot-product oracle") {
  Rng rng(5);
  Tensor in = oracle::random_tensor({5}, rng);
  Tensor w = oracle::random_tensor({5, 3}, rng);
  Tensor b = oracle::random_tensor({3}, rng);
  Tensor out = musp::linear(in, w, b);
  auto ref = oracle::linear(in.values(), w.values(), 5, 3, b.values());
  for (int i = 0; i < 3; ++i) CHECK(out.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  CHECK_THROWS_AS(musp::linear(Tensor({4}), w, b), musp::ShapeError);
}

TEST_CASE("softmax: uniform, stability, and oracle cases") {
  Tensor eq = Tensor::full({5}, 1.7);
  Tensor out = musp::softmax(eq, 0);
  for (double v : out.values()) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));

  Tensor big({3}, {1000.0, 0.0, 0.0});
  Tensor sb = musp::softmax(big, 0);
  CHECK(sb.all_finite());
  CHECK(sb.data()[0] == doctest::Approx(1.0).epsilon(1e-12));

  Tensor z({3}, {0.1, 0.5, -0.2});
  Tensor sz = musp::softmax(z, 0);
  auto ref = oracle::softmax(z.values());
  double total = 0.0;
  for (int i = 0; i < 3; ++i) {
    CHECK(sz.data()[i] == doctest::Approx(ref[i]).epsilon(1e-14));
    total += sz.data()[i];
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and shift invariance holds on random tensors") {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = oracle::random_tensor({2, 3, 4}, rng, -3.0, 3.0);
    int axis = trial % 3;
    Tensor y = musp::softmax(x, axis);
    // sums along axis
    const auto& s = x.shape();
    int64_t inner = 1;
    for (int i = axis + 1; i < 3; ++i) inner *= s[i];
    int64_t len = s[axis];
    int64_t outer = x.size() / (inner * len);
    for (int64_t u = 0; u < outer; ++u)
      for (int64_t v = 0; v < inner; ++v) {
        double acc = 0.0;
        for (int64_t k = 0; k < len; ++k) acc += y.data()[u * len * inner + k * inner + v];
        CHECK(acc == doctest::Approx(1.0).epsilon(1e-12));
      }
    Tensor shifted = musp::scale(x, 1.0);
    for (auto& v : shifted.values()) v += 2.5;
    Tensor y2 = musp::softmax(shifted, axis);
    for (int64_t i = 0; i < y.size(); ++i) {
      CHECK(std::abs(y.data()[i] - y2.data()[i]) <= 1e-12);
    }
  }
}

TEST_CASE("sigmoid endpoints and saturation") {
  Tensor x({3}, {0.0, 1.0, -800.0});
  Tensor y = musp::sigmoid(x);
  CHECK(y.data()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y.data()[1] == doctest::Approx(0.7310585786300049).epsilon(1e-14));
  CHECK(y.data()[2] >= 0.0);
  CHECK(y.data()[2] <= 1e-9);
  CHECK(y.all_finite());
}

TEST_CASE("relu matches elementwise oracle") {
  Tensor x({3}, {-1.0, 0.0, 2.0});
  Tensor y = musp::relu(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 0.0);
  CHECK(y.data()[2] == 2.0);
  Rng rng(23);
  Tensor r = oracle::random_tensor({4, 5}, rng);
  Tensor yr = musp::relu(r);
  for (int64_t i = 0; i < r.size(); ++i) CHECK(yr.data()[i] == std::max(r.data()[i], 0.0));
}

TEST_CASE("batch_norm normalizes per channel in training mode") {
  Rng rng(31);
  musp::BatchNorm bn(3);
  Tensor x = oracle::random_tensor({8, 3}, rng, -2.0, 5.0);
  Tensor y = bn.forward(x, /*training=*/true);
  for (int ch = 0; ch < 3; ++ch) {
    double mean = 0.0, var = 0.0;
    for (int r = 0; r < 8; ++r) mean += y.at({r, ch});
    mean /= 8;
    for (int r = 0; r < 8; ++r) {
      double d = y.at({r, ch}) - mean;
      var += d * d;
    }
    var /= 8;
    CHECK(std::abs(mean) <= 1e-10);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("batch_norm symmetric two-sample batch and constant batch") {
  musp::BatchNorm bn(1);
  Tensor x({2, 1}, {-3.0, 3.0});
  Tensor y = bn.forward(x, true);
  CHECK(y.at({0, 0}) == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(y.at({1, 0}) == doctest::Approx(1.0).epsilon(1e-5));

  musp::BatchNorm bn2(2);
  for (auto& v : bn2.beta.values()) v = 0.7;
  Tensor cx = Tensor::full({4, 2}, 5.0);
  Tensor cy = bn2.forward(cx, true);
  for (double v : cy.values()) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));

  Tensor solo({1, 2});
  CHECK_THROWS_AS(bn2.forward(solo, true), musp::ConfigError);
}

TEST_CASE("backward: sum gives ones, zero-scaled loss gives zeros") {
  Rng rng(41);
  Tensor x = oracle::random_tensor({3, 4}, rng);
  x.set_requires_grad(true);
  musp::backward(musp::sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  x.zero_grad();
  Tensor loss = musp::scale(musp::sum(musp::mul(x, x)), 0.0);
  musp::backward(loss);
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward rejects non-scalar roots and accumulates across uses") {
  Tensor x({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  CHECK_THROWS_AS(musp::backward(musp::scale(x, 2.0)), musp::ShapeError);

  // y = sum(x) + sum(x) -> dy/dx = 2
  Tensor loss = musp::add(musp::sum(x), musp::sum(x));
  musp::backward(loss);
  for (double g : x.grad()) CHECK(g == 2.0);
}

TEST_CASE("computation record is topologically ordered") {
  Rng rng(43);
  Tensor x = oracle::random_tensor({4}, rng);
  x.set_requires_grad(true);
  Tensor w = oracle::random_tensor({4, 4}, rng);
  w.set_requires_grad(true);
  Tensor h = musp::relu(musp::linear(x, w, Tensor()));
  Tensor loss = musp::sum(musp::mul(h, h));
  musp::ComputationRecord rec(loss);
  const auto& order = rec.entries();
  REQUIRE(order.size() >= 4);
  CHECK(order.back().get() == loss.node().get());
  for (size_t k = 0; k < order.size(); ++k) {
    for (const auto& parent : order[k]->parents) {
      bool before = false;
      for (size_t j = 0; j < k; ++j) {
        if (order[j].get() == parent.get()) {
          before = true;
          break;
        }
      }
      CHECK(before);
    }
  }
}

TEST_CASE("primitive gradients match central finite differences") {
  Rng rng(47);
  for (int seed = 0; seed < 10; ++seed) {
    Rng local = rng.fork(seed);
    Tensor in = oracle::random_tensor({4, 4, 2}, local);
    Tensor ker = oracle::random_tensor({3, 3, 2, 3}, local);
    Tensor bias = oracle::random_tensor({3}, local);
    in.set_requires_grad(true);
    ker.set_requires_grad(true);
    bias.set_requires_grad(true);

    auto forward = [&]() {
      Tensor conv = musp::conv2d(in, ker, bias);
      Tensor act = musp::sigmoid(conv);
      Tensor pooled = musp::avg_pool2x2(act);
      Tensor sm = musp::softmax(pooled, 2);
      return musp::sum(musp::mul(sm, pooled)).item();
    };

    in.zero_grad();
    ker.zero_grad();
    bias.zero_grad();
    {
      Tensor conv = musp::conv2d(in, ker, bias);
      Tensor act = musp::sigmoid(conv);
      Tensor pooled = musp::avg_pool2x2(act);
      Tensor sm = musp::softmax(pooled, 2);
      musp::backward(musp::sum(musp::mul(sm, pooled)));
    }
    CHECK(oracle::fd_check(in.values(), in.grad(), forward, oracle::all_indices(in.values().size())) <= 1e-4);
    CHECK(oracle::fd_check(ker.values(), ker.grad(), forward, oracle::all_indices(ker.values().size())) <= 1e-4);
    CHECK(oracle::fd_check(bias.values(), bias.grad(), forward, oracle::all_indices(bias.values().size())) <= 1e-4);
  }
}

TEST_CASE("batch_norm gradients match finite differences") {
  Rng rng(53);
  Tensor x = oracle::random_tensor({6, 3}, rng);
  musp::BatchNorm bn(3);
  for (auto& v : bn.gamma.values()) v = rng.uniform(0.5, 1.5);
  for (auto& v : bn.beta.values()) v = rng.uniform(-0.5, 0.5);
  x.set_requires_grad(true);

  auto forward = [&]() {
    Tensor y = bn.forward(x, true, /*update_running=*/false);
    return musp::sum(musp::mul(y, y)).item();
  };
  x.zero_grad();
  bn.gamma.zero_grad();
  bn.beta.zero_grad();
  {
    Tensor y = bn.forward(x, true, false);
    musp::backward(musp::sum(musp::mul(y, y)));
  }
  CHECK(oracle::fd_check(x.values(), x.grad(), forward, oracle::all_indices(x.size())) <= 1e-4);
  CHECK(oracle::fd_check(bn.gamma.values(), bn.gamma.grad(), forward, oracle::all_indices(3)) <= 1e-4);
  CHECK(oracle::fd_check(bn.beta.values(), bn.beta.grad(), forward, oracle::all_indices(3)) <= 1e-4);
}

TEST_CASE("adam: zero gradient keeps parameters, first step moves by -lr*sign(g)") {
  std::vector<double> p{1.0, -2.0};
  std::vector<double> g{0.0, 0.0};
  std::vector<double> m(2, 0.0), v(2, 0.0);
  musp::adam_step(p, g, m, v, 1, 0.1, 0.0);
  CHECK(p[0] == 1.0);
  CHECK(p[1] == -2.0);

  std::vector<double> g2{0.3, -0.7};
  musp::adam_step(p, g2, m, v, 1, 0.1, 0.0);
  CHECK(p[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.1).epsilon(1e-6));
}

TEST_CASE("adam trajectory matches the scalar recurrence oracle") {
  double theta = 1.3;
  std::vector<double> p{theta};
  std::vector<double> m{0.0}, v{0.0};
  oracle::AdamScalar ref;
  double theta_ref = theta;
  for (int t = 1; t <= 3; ++t) {
    const double g = 2.0 * p[0];  // d/dx x^2
    const double g_ref = 2.0 * theta_ref;
    musp::adam_step(p, {g}, m, v, t, 0.05, 0.01);
    ref.step(theta_ref, g_ref, 0.05, 0.01);
    CHECK(p[0] == doctest::Approx(theta_ref).epsilon(1e-12));
  }
}

TEST_CASE("softmax_cross_entropy: uniform logits give ln(C), confident logits vanish") {
  Tensor logits({2, 4});
  Tensor loss = musp::softmax_cross_entropy(logits, {1, 3}, 0.0);
  CHECK(loss.item() == doctest::Approx(2.0 * std::log(4.0)).epsilon(1e-12));

  Tensor sure({1, 3});
  sure.at({0, 0}) = 80.0;
  Tensor l2 = musp::softmax_cross_entropy(sure, {0}, 0.0);
  CHECK(l2.item() <= 1e-9);

  CHECK_THROWS_AS(musp::softmax_cross_entropy(sure, {7}, 0.0), musp::ConfigError);
}

TEST_CASE("batch_hard_triplet: degenerate and inactive-hinge cases") {
  // all identical -> every anchor contributes exactly the margin
  Tensor emb = Tensor::full({4, 2}, 0.5);
  Tensor loss = musp::batch_hard_triplet(emb, {0, 0, 1, 1}, 0.3);
  CHECK(loss.item() == doctest::Approx(4 * 0.3).epsilon(1e-12));

  // coincident positives, far negatives -> zero
  Tensor far({4, 1}, {0.0, 0.0, 9.0, 9.0});
  Tensor l2 = musp::batch_hard_triplet(far, {0, 0, 1, 1}, 0.3);
  CHECK(l2.item() == 0.0);

  Tensor solo({2, 1}, {0.0, 1.0});
  CHECK_THROWS_AS(musp::batch_hard_triplet(solo, {0, 1}, 0.3), musp::ConfigError);
}

TEST_CASE("weighted_spatial_pool and attention_overlap gradients pass FD") {
  Rng rng(61);
  Tensor value = oracle::random_tensor({3, 3, 2}, rng);
  Tensor logits = oracle::random_tensor({3, 3, 3}, rng);
  value.set_requires_grad(true);
  logits.set_requires_grad(true);

  auto forward = [&]() {
    Tensor w = musp::softmax(logits, 2);
    Tensor pooled = musp::weighted_spatial_pool(value, w);
    Tensor overlap = musp::attention_overlap(w, 2);
    return musp::add(musp::sum(musp::mul(pooled, pooled)), overlap).item();
  };
  value.zero_grad();
  logits.zero_grad();
  {
    Tensor w = musp::softmax(logits, 2);
    Tensor pooled = musp::weighted_spatial_pool(value, w);
    Tensor overlap = musp::attention_overlap(w, 2);
    musp::backward(musp::add(musp::sum(musp::mul(pooled, pooled)), overlap));
  }
  CHECK(oracle::fd_check(value.values(), value.grad(), forward, oracle::all_indices(value.size())) <= 1e-4);
  CHECK(oracle::fd_check(logits.values(), logits.grad(), forward, oracle::all_indices(logits.size())) <= 1e-4);
}

TEST_CASE("loss primitive gradients pass FD") {
  Rng rng(67);
  Tensor logits = oracle::random_tensor({4, 3}, rng);
  logits.set_requires_grad(true);
  std::vector<int> labels{0, 2, 1, 2};

  auto fwd_ce = [&]() { return musp::softmax_cross_entropy(logits, labels, 0.1).item(); };
  logits.zero_grad();
  musp::backward(musp::softmax_cross_entropy(logits, labels, 0.1));
  CHECK(oracle::fd_check(logits.values(), logits.grad(), fwd_ce, oracle::all_indices(logits.size())) <= 1e-4);

  Tensor emb = oracle::random_tensor({6, 3}, rng);
  emb.set_requires_grad(true);
  std::vector<int> ids{0, 0, 1, 1, 2, 2};
  auto fwd_tri = [&]() { return musp::batch_hard_triplet(emb, ids, 0.4).item(); };
  emb.zero_grad();
  musp::backward(musp::batch_hard_triplet(emb, ids, 0.4));
  CHECK(oracle::fd_check(emb.values(), emb.grad(), fwd_tri, oracle::all_indices(emb.size())) <= 1e-4);
}

TEST_CASE("slice/reshape/spatial_mean behave and route gradients") {
  Rng rng(71);
  Tensor x = oracle::random_tensor({2, 3, 4}, rng);
  x.set_requires_grad(true);
  Tensor sl = musp::slice(x, 1, 1, 2);
  CHECK(sl.shape() == Shape{2, 2, 4});
  CHECK(sl.at({0, 0, 0}) == x.at({0, 1, 0}));

  Tensor rs = musp::reshape(sl, {4, 4});
  Tensor loss = musp::sum(rs);
  musp::backward(loss);
  // gradient: one for the sliced middle rows, zero for the rest
  for (int b = 0; b < 2; ++b)
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) {
        const double g = x.grad()[(b * 3 + r) * 4 + c];
        CHECK(g == ((r >= 1) ? 1.0 : 0.0));
      }

  Tensor fm = oracle::random_tensor({2, 2, 3}, rng);
  Tensor mean = musp::spatial_mean(fm);
  for (int ch = 0; ch < 3; ++ch) {
    double acc = 0.0;
    for (int y = 0; y < 2; ++y)
      for (int xx = 0; xx < 2; ++xx) acc += fm.at({y, xx, ch});
    CHECK(mean.data()[ch] == doctest::Approx(acc / 4.0).epsilon(1e-14));
  }
}

TEST_CASE("forward keeps values finite on large magnitudes") {
  Tensor x({4}, {700.0, -700.0, 1e300, -1e300});
  CHECK(musp::sigmoid(x).all_finite());
  Tensor sm = musp::softmax(x, 0);
  CHECK(sm.all_finite());
}
