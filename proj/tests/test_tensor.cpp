#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "sdl/rng.hpp"
#include "sdl/tape.hpp"

using namespace sdl;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int64_t> shape, double scl = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = scl * rng.normal();
  return t;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1e-3, std::abs(a), std::abs(b)});
}

// AD-vs-central-difference check for a scalar-valued function of x.
// The finite-difference side runs on an inference tape, so the value path
// is shared but the gradient path is fully independent.
void check_grad(const std::function<Tensor(Tape&, const Tensor&)>& fn, const Tensor& x,
                double tol = 1e-5) {
  Tape tape;
  Tensor xl = tape.leaf(x, true);
  Tensor loss = fn(tape, xl);
  REQUIRE(loss.is_scalar());
  auto grads = tape.backward(loss);
  const Tensor& g = grads.at(xl.node);
  Tensor gfd = finite_diff_grad(
      [&](const Tensor& p) {
        Tape t(Tape::Mode::inference);
        return fn(t, p).data[0];
      },
      x, 1e-6);
  double worst = 0.0;
  for (size_t i = 0; i < g.data.size(); ++i) worst = std::max(worst, rel_err(g.data[i], gfd.data[i]));
  CHECK(worst <= tol);
}

// scalarize an op output against fixed random weights
Tensor weighted_sum(Tape& t, const Tensor& y, const Tensor& w) { return t.sum(t.mul(y, w)); }

}  // namespace

TEST_CASE("matmul identity and orthogonal pick") {
  Tape t(Tape::Mode::inference);
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor r = t.matmul(eye, a);
  CHECK(r.data == a.data);

  Tensor row({1, 2}, {1, 0});
  Tensor col({2, 1}, {0, 5});
  CHECK(t.matmul(row, col).data[0] == 0.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(101);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {4, 2});
  Tape t(Tape::Mode::inference);
  Tensor r = t.matmul(a, b);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < 4; ++k) s += a.at2(i, k) * b.at2(k, j);
      CHECK(r.at2(i, j) == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("matmul shape mismatch") {
  Tape t;
  Tensor a({2, 3});
  Tensor b({2, 2});
  CHECK_THROWS_AS((void)t.matmul(a, b), SdlError);
  try {
    (void)t.matmul(a, b);
  } catch (const SdlError& e) {
    CHECK(e.code() == Err::ShapeMismatch);
  }
}

TEST_CASE("softmax closed forms") {
  Tape t(Tape::Mode::inference);
  Tensor z({1, 3}, {0, 0, 0});
  Tensor p = t.softmax(z, 1);
  for (double v : p.data) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Tensor big({1, 2}, {1000, 0});
  Tensor pb = t.softmax(big, 1);
  CHECK(pb.data[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pb.data[1] == doctest::Approx(0.0).epsilon(1e-12));

  Tensor ln2({1, 2}, {std::log(2.0), 0.0});
  Tensor pl = t.softmax(ln2, 1);
  CHECK(pl.data[0] == doctest::Approx(2.0 / 3).epsilon(1e-12));
  CHECK(pl.data[1] == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and shift invariance") {
  Rng rng(7);
  for (int it = 0; it < 20; ++it) {
    Tensor x = random_tensor(rng, {4, 6}, 3.0);
    Tape t(Tape::Mode::inference);
    Tensor p = t.softmax(x, 1);
    for (int64_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (int64_t j = 0; j < 6; ++j) s += p.at2(r, j);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    Tensor shifted = x;
    double c = rng.normal() * 10.0;
    for (int64_t j = 0; j < 6; ++j) shifted.at2(2, j) += c;
    Tensor p2 = t.softmax(shifted, 1);
    for (int64_t j = 0; j < 6; ++j)
      CHECK(std::abs(p.at2(2, j) - p2.at2(2, j)) <= 1e-12);
  }
}

TEST_CASE("softmax invalid axis") {
  Tape t;
  Tensor x({2, 2});
  CHECK_THROWS_AS((void)t.softmax(x, 2), SdlError);
}

TEST_CASE("layer_norm definition") {
  Tape t(Tape::Mode::inference);
  Tensor x({1, 3}, {1, 2, 3});
  Tensor gamma = Tensor::full({3}, 1.0);
  Tensor beta = Tensor::zeros({3});
  Tensor y = t.layer_norm(x, gamma, beta);
  double mu = (y.data[0] + y.data[1] + y.data[2]) / 3.0;
  double var = 0.0;
  for (double v : y.data) var += (v - mu) * (v - mu);
  var /= 3.0;
  CHECK(std::abs(mu) <= 1e-9);
  CHECK(std::abs(var - 1.0) <= 1e-4);  // eps=1e-5 against sigma^2=2/3

  // at large input scale the eps bias vanishes
  Tensor xs({1, 3}, {100, 200, 300});
  Tensor ys = t.layer_norm(xs, gamma, beta);
  double mus = (ys.data[0] + ys.data[1] + ys.data[2]) / 3.0;
  double vars = 0.0;
  for (double v : ys.data) vars += (v - mus) * (v - mus);
  vars /= 3.0;
  CHECK(std::abs(mus) <= 1e-9);
  CHECK(std::abs(vars - 1.0) <= 1e-8);
}

TEST_CASE("layer_norm constant vector and affine collapse") {
  Tape t(Tape::Mode::inference);
  Tensor x = Tensor::full({2, 4}, 5.0);
  Tensor y = t.layer_norm(x, Tensor::full({4}, 1.0), Tensor::zeros({4}));
  for (double v : y.data) CHECK(v == 0.0);

  Tensor z({1, 4}, {1, 7, -2, 0.5});
  Tensor yc = t.layer_norm(z, Tensor::zeros({4}), Tensor::full({4}, 3.25));
  for (double v : yc.data) CHECK(v == 3.25);

  CHECK_THROWS_AS((void)t.layer_norm(z, Tensor::zeros({3}), Tensor::zeros({4})), SdlError);
}

TEST_CASE("backward quadratic and self-target") {
  Tape t;
  Tensor x = t.leaf(Tensor({2}, {1, 2}), true);
  Tensor loss = t.sum(t.mul(x, x));
  auto grads = t.backward(loss);
  CHECK(grads.at(x.node).data[0] == doctest::Approx(2.0));
  CHECK(grads.at(x.node).data[1] == doctest::Approx(4.0));

  Tape t2;
  Tensor x2 = t2.leaf(Tensor({3}, {1, -1, 0.5}), true);
  Tensor l2 = t2.mse_loss(x2, x2);
  auto g2 = t2.backward(l2);
  CHECK(l2.data[0] == 0.0);
  for (double v : g2.at(x2.node).data) CHECK(v == 0.0);
}

TEST_CASE("backward error paths") {
  Tape t;
  Tensor x = t.leaf(Tensor({2}, {1, 2}), true);
  Tensor y = t.mul(x, x);
  CHECK_THROWS_AS((void)t.backward(y), SdlError);  // non-scalar

  Tape inf(Tape::Mode::inference);
  Tensor z = inf.leaf(Tensor::scalar(1.0), true);
  CHECK_THROWS_AS((void)inf.backward(z), SdlError);  // not recording
}

TEST_CASE("finite_diff_grad basics") {
  Tensor x({3}, {0.5, -1, 2});
  Tensor g = finite_diff_grad(
      [](const Tensor& p) {
        double s = 0.0;
        for (double v : p.data) s += v;
        return s;
      },
      x);
  for (double v : g.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-8));

  Tensor x3 = Tensor::scalar(3.0);
  Tensor g3 = finite_diff_grad([](const Tensor& p) { return p.data[0] * p.data[0]; }, x3);
  CHECK(std::abs(g3.data[0] - 6.0) <= 1e-8);

  CHECK_THROWS_AS((void)finite_diff_grad([](const Tensor&) { return std::nan(""); }, x3), SdlError);
}

TEST_CASE("cross-entropy gradient equals softmax minus one-hot") {
  Rng rng(13);
  Tensor z = random_tensor(rng, {4, 5}, 2.0);
  std::vector<int> labels = {1, 4, 0, 2};

  Tape t;
  Tensor zl = t.leaf(z, true);
  Tensor loss = t.cross_entropy(zl, labels);
  auto grads = t.backward(loss);
  const Tensor& g = grads.at(zl.node);

  Tape inf(Tape::Mode::inference);
  Tensor p = inf.softmax(z, 1);
  for (int64_t r = 0; r < 4; ++r)
    for (int64_t j = 0; j < 5; ++j) {
      double expect = (p.at2(r, j) - (labels[static_cast<size_t>(r)] == j ? 1.0 : 0.0)) / 4.0;
      CHECK(std::abs(g.at2(r, j) - expect) <= 1e-12);
    }

  // and the same analytic form against finite differences
  Tensor gfd = finite_diff_grad(
      [&](const Tensor& probe) {
        Tape ti(Tape::Mode::inference);
        return ti.cross_entropy(probe, labels).data[0];
      },
      z);
  for (size_t i = 0; i < gfd.data.size(); ++i) CHECK(std::abs(gfd.data[i] - g.data[i]) <= 1e-7);
}

TEST_CASE("gradient oracle over every differentiable op") {
  Rng rng(2024);
  const int instances = 20;
  for (int it = 0; it < instances; ++it) {
    // elementwise family
    {
      Tensor x = random_tensor(rng, {3, 4});
      Tensor other = random_tensor(rng, {3, 4});
      Tensor w = random_tensor(rng, {3, 4});
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.add(p, other), w); }, x);
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.sub(other, p), w); }, x);
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.mul(p, other), w); }, x);
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.scale(p, -1.7), w); }, x);
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.add_scalar(p, 0.3), w); },
                 x);
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.gelu(p), w); }, x);
    }
    // matmul both sides
    {
      Tensor a = random_tensor(rng, {3, 4});
      Tensor b = random_tensor(rng, {4, 2});
      Tensor w = random_tensor(rng, {3, 2});
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.matmul(p, b), w); }, a);
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.matmul(a, p), w); }, b);
    }
    // bias / tile broadcasting
    {
      Tensor x = random_tensor(rng, {6, 3});
      Tensor bias = random_tensor(rng, {3});
      Tensor e = random_tensor(rng, {2, 3});
      Tensor w = random_tensor(rng, {6, 3});
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.add_bias(x, p), w); },
                 bias);
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.add_bias(p, bias), w); },
                 x);
      check_grad(
          [&](Tape& t, const Tensor& p) { return weighted_sum(t, t.tile_rows_add(x, p), w); }, e);
    }
    // movement ops
    {
      Tensor x = random_tensor(rng, {4, 3});
      Tensor w = random_tensor(rng, {2, 6});
      check_grad(
          [&](Tape& t, const Tensor& p) { return weighted_sum(t, t.reshape(p, {2, 6}), w); }, x);
      Tensor wt = random_tensor(rng, {3, 4});
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.transpose(p), wt); }, x);
      auto idx = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{11, 0, 3, 3, 7, 5});
      Tensor wg = random_tensor(rng, {6});
      check_grad(
          [&](Tape& t, const Tensor& p) { return weighted_sum(t, t.gather(p, idx, {6}), wg); }, x);
      auto rsel = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{2, 2, 0});
      Tensor wr = random_tensor(rng, {3, 3});
      check_grad(
          [&](Tape& t, const Tensor& p) { return weighted_sum(t, t.gather_rows(p, rsel), wr); }, x);
      Tensor y = random_tensor(rng, {2, 3});
      Tensor wc = random_tensor(rng, {6, 3});
      check_grad(
          [&](Tape& t, const Tensor& p) {
            return weighted_sum(t, t.concat_rows({p, y}), wc);
          },
          x);
    }
    // normalization family
    {
      Tensor x = random_tensor(rng, {3, 5});
      Tensor w = random_tensor(rng, {3, 5});
      Tensor gamma = random_tensor(rng, {5});
      Tensor beta = random_tensor(rng, {5});
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.softmax(p, 1), w); }, x);
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.softmax(p, 0), w); }, x);
      check_grad(
          [&](Tape& t, const Tensor& p) { return weighted_sum(t, t.layer_norm(p, gamma, beta), w); },
          x);
      check_grad(
          [&](Tape& t, const Tensor& p) { return weighted_sum(t, t.layer_norm(x, p, beta), w); },
          gamma);
      check_grad(
          [&](Tape& t, const Tensor& p) { return weighted_sum(t, t.layer_norm(x, gamma, p), w); },
          beta);
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.row_normalize(p), w); },
                 x);
    }
    // reductions
    {
      Tensor x = random_tensor(rng, {2, 3, 4});
      check_grad([&](Tape& t, const Tensor& p) { return t.sum(p); }, x);
      check_grad([&](Tape& t, const Tensor& p) { return t.mean(p); }, x);
      Tensor w1 = random_tensor(rng, {2, 4});
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.sum_axis(p, 1), w1); },
                 x);
      check_grad([&](Tape& t, const Tensor& p) { return weighted_sum(t, t.mean_axis(p, 1), w1); },
                 x);
    }
    // losses
    {
      Tensor a = random_tensor(rng, {3, 4});
      Tensor b = random_tensor(rng, {3, 4});
      check_grad([&](Tape& t, const Tensor& p) { return t.mse_loss(p, b); }, a);
      check_grad([&](Tape& t, const Tensor& p) { return t.mse_loss(a, p); }, b);
      std::vector<int> labels = {2, 0, 3};
      std::vector<double> weights = {0.5, 1.0, 0.75};
      check_grad([&](Tape& t, const Tensor& p) { return t.cross_entropy(p, labels, weights); }, a);
      Tensor u = random_tensor(rng, {5});
      Tensor v = random_tensor(rng, {5});
      check_grad([&](Tape& t, const Tensor& p) { return t.cosine_similarity(p, v); }, u);
      check_grad([&](Tape& t, const Tensor& p) { return t.cosine_similarity(u, p); }, v);
    }
    // attention
    {
      Tensor q = random_tensor(rng, {3, 2});
      Tensor k = random_tensor(rng, {4, 2});
      Tensor v = random_tensor(rng, {4, 3});
      Tensor w = random_tensor(rng, {3, 3});
      check_grad(
          [&](Tape& t, const Tensor& p) { return weighted_sum(t, t.attention(p, k, v, 2), w); }, q);
      check_grad(
          [&](Tape& t, const Tensor& p) { return weighted_sum(t, t.attention(q, p, v, 2), w); }, k);
      check_grad(
          [&](Tape& t, const Tensor& p) { return weighted_sum(t, t.attention(q, k, p, 2), w); }, v);

      Tensor gq = random_tensor(rng, {8, 4});
      Tensor gk = random_tensor(rng, {8, 4});
      Tensor gv = random_tensor(rng, {8, 4});
      Tensor gw = random_tensor(rng, {8, 4});
      check_grad(
          [&](Tape& t, const Tensor& p) {
            return weighted_sum(t, t.grouped_attention(p, gk, gv, 2, 2), gw);
          },
          gq);
      check_grad(
          [&](Tape& t, const Tensor& p) {
            return weighted_sum(t, t.grouped_attention(gq, p, gv, 2, 2), gw);
          },
          gk);
      check_grad(
          [&](Tape& t, const Tensor& p) {
            return weighted_sum(t, t.grouped_attention(gq, gk, p, 2, 2), gw);
          },
          gv);
    }
  }
}

TEST_CASE("reshape and transpose round-trips are bit-identical") {
  Rng rng(55);
  Tensor x = random_tensor(rng, {5, 7});
  Tape t(Tape::Mode::inference);
  Tensor r = t.reshape(t.reshape(x, {7, 5}), {5, 7});
  CHECK(r.data == x.data);
  Tensor tt = t.transpose(t.transpose(x));
  CHECK(tt.data == x.data);
}

TEST_CASE("inference mode appends no nodes") {
  Tape t(Tape::Mode::inference);
  Rng rng(3);
  Tensor a = random_tensor(rng, {4, 4});
  Tensor b = random_tensor(rng, {4, 4});
  Tensor x = t.leaf(a, true);
  Tensor y = t.matmul(x, b);
  y = t.gelu(y);
  y = t.softmax(y, 1);
  (void)t.sum(y);
  CHECK(t.size() == 0);
}

TEST_CASE("non-finite forward values are rejected") {
  Tape t;
  Tensor big = Tensor::full({2, 2}, 1e308);
  CHECK_THROWS_AS((void)t.add(big, big), SdlError);
  try {
    (void)t.add(big, big);
  } catch (const SdlError& e) {
    CHECK(e.code() == Err::NonFiniteValue);
  }
}

TEST_CASE("gather index validation") {
  Tape t;
  Tensor x({2, 2}, {1, 2, 3, 4});
  auto idx = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{0, 4});
  CHECK_THROWS_AS((void)t.gather(x, idx, {2}), SdlError);
}

TEST_CASE("grouped attention with zero queries averages values") {
  Tape t(Tape::Mode::inference);
  Rng rng(17);
  Tensor q = Tensor::zeros({4, 2});
  Tensor k = random_tensor(rng, {4, 2});
  Tensor v = random_tensor(rng, {4, 2});
  Tensor out = t.grouped_attention(q, k, v, 1, 1);
  for (int64_t j = 0; j < 2; ++j) {
    double avg = 0.0;
    for (int64_t r = 0; r < 4; ++r) avg += v.at2(r, j);
    avg /= 4.0;
    for (int64_t r = 0; r < 4; ++r) CHECK(out.at2(r, j) == doctest::Approx(avg).epsilon(1e-12));
  }
}
