#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sdl/discovery.hpp"

using namespace sdl;

namespace {

double max_pairwise_cosine(const Tensor& atoms) {
  int64_t c = atoms.rows(), d = atoms.cols();
  double worst = -2.0;
  for (int64_t a = 0; a < c; ++a)
    for (int64_t b = a + 1; b < c; ++b) {
      double dot = 0, na = 0, nb = 0;
      for (int64_t j = 0; j < d; ++j) {
        dot += atoms.at2(a, j) * atoms.at2(b, j);
        na += atoms.at2(a, j) * atoms.at2(a, j);
        nb += atoms.at2(b, j) * atoms.at2(b, j);
      }
      worst = std::max(worst, dot / std::sqrt(na * nb));
    }
  return worst;
}

Tensor vec(std::vector<double> v) {
  int64_t n = static_cast<int64_t>(v.size());
  return Tensor({n}, std::move(v));
}

}  // namespace

TEST_CASE("dictionary init: unit rows, determinism, spread") {
  Dictionary d1 = init_dictionary(6, 64, 123);
  Dictionary d2 = init_dictionary(6, 64, 123);
  CHECK(d1.atoms.data == d2.atoms.data);
  Dictionary d3 = init_dictionary(6, 64, 124);
  CHECK(d1.atoms.data != d3.atoms.data);

  for (int64_t r = 0; r < 6; ++r) {
    double n2 = 0;
    for (int64_t j = 0; j < 64; ++j) n2 += d1.atoms.at2(r, j) * d1.atoms.at2(r, j);
    CHECK(std::abs(std::sqrt(n2) - 1.0) <= 1e-12);
  }

  // random unit vectors at this dimension stay well separated
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Dictionary d = init_dictionary(6, 64, seed);
    CHECK(std::abs(max_pairwise_cosine(d.atoms)) < 0.5);
  }

  CHECK_THROWS_AS(init_dictionary(1, 16, 0), SdlError);
  CHECK_THROWS_AS(init_dictionary(4, 0, 0), SdlError);
}

TEST_CASE("feature update arithmetic") {
  Dictionary dict = init_dictionary(3, 2, 7);
  dict.atoms = Tensor({3, 2}, {1, 0, 0, 1, -1, 0});
  SdmConfig cfg;
  cfg.gate_epoch = 2;

  Tensor f = vec({1, 0});
  cfg.alpha = 0.0;
  Tensor same = feature_update(f, dict, 1, cfg, 5);
  CHECK(same.data == f.data);

  cfg.alpha = 0.9;
  Tensor mixed = feature_update(f, dict, 1, cfg, 5);
  CHECK(mixed.data[0] == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(mixed.data[1] == doctest::Approx(0.9).epsilon(1e-15));

  cfg.alpha = 1.0;
  Tensor atom = feature_update(f, dict, 1, cfg, 5);
  CHECK(atom.data[0] == 0.0);
  CHECK(atom.data[1] == 1.0);

  CHECK_THROWS_AS((void)feature_update(f, dict, 1, cfg, 1), SdlError);  // gate closed
  CHECK_THROWS_AS((void)feature_update(f, dict, 9, cfg, 5), SdlError);  // unknown class
}

TEST_CASE("feature update contracts toward the atom exactly") {
  Rng rng(5);
  Dictionary dict = init_dictionary(4, 8, 3);
  SdmConfig cfg;
  cfg.gate_epoch = 0;
  for (int it = 0; it < 50; ++it) {
    Tensor f({8});
    for (double& v : f.data) v = rng.normal();
    cfg.alpha = rng.uniform();
    int y = static_cast<int>(rng.uniform_int(4));
    Tensor updated = feature_update(f, dict, y, cfg, 0);
    double before = 0, after = 0;
    for (int64_t j = 0; j < 8; ++j) {
      before += (f.data[static_cast<size_t>(j)] - dict.atoms.at2(y, j)) *
                (f.data[static_cast<size_t>(j)] - dict.atoms.at2(y, j));
      after += (updated.data[static_cast<size_t>(j)] - dict.atoms.at2(y, j)) *
               (updated.data[static_cast<size_t>(j)] - dict.atoms.at2(y, j));
    }
    CHECK(std::abs(std::sqrt(after) - (1.0 - cfg.alpha) * std::sqrt(before)) <= 1e-9);
  }
}

TEST_CASE("uncertainty spans identical, orthogonal, antipodal") {
  Tensor s = vec({0.5, 0.5, 0.5, 0.5});
  CHECK(uncertainty(s, s) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(uncertainty(vec({1, -1, 0, 0}), s) == doctest::Approx(1.0).epsilon(1e-12));
  Tensor neg = vec({-0.5, -0.5, -0.5, -0.5});
  CHECK(uncertainty(neg, s) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK_THROWS_AS((void)uncertainty(vec({0, 0, 0, 0}), s), SdlError);
}

TEST_CASE("uncertainty is scale invariant") {
  Rng rng(8);
  for (int it = 0; it < 100; ++it) {
    Tensor f({6}), s({6});
    for (double& v : f.data) v = rng.normal();
    for (double& v : s.data) v = rng.normal();
    double c = std::exp(3.0 * rng.normal());
    Tensor scaled = f;
    for (double& v : scaled.data) v *= c;
    CHECK(std::abs(uncertainty(f, s) - uncertainty(scaled, s)) <= 1e-12);
  }
}

TEST_CASE("sample weight clamps as written") {
  CHECK(sample_weight(0.0) == 1.0);
  CHECK(sample_weight(0.3) == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(sample_weight(1.7) == 0.5);
  CHECK_THROWS_AS((void)sample_weight(-0.5), SdlError);
  CHECK_THROWS_AS((void)sample_weight(2.5), SdlError);

  Rng rng(4);
  double prev_mu = 0.0, prev_w = 1.0;
  for (int it = 0; it < 1000; ++it) {
    double mu = rng.uniform() * 2.0;
    double w = sample_weight(mu);
    CHECK(w >= 0.5);
    CHECK(w <= 1.0);
    if (mu >= prev_mu) CHECK(w <= prev_w + 1e-15);  // monotone non-increasing
    prev_mu = mu;
    prev_w = w;
  }
}

TEST_CASE("dictionary update touches exactly one row") {
  Dictionary dict = init_dictionary(5, 12, 9);
  Dictionary before = dict;
  Rng rng(2);
  Tensor f({12});
  for (double& v : f.data) v = rng.normal();

  dictionary_update(dict, f, 3, 0.25);
  for (int64_t r = 0; r < 5; ++r)
    for (int64_t j = 0; j < 12; ++j) {
      if (r == 3)
        CHECK(dict.atoms.at2(r, j) ==
              doctest::Approx(0.75 * before.atoms.at2(r, j) + 0.25 * f.data[static_cast<size_t>(j)])
                  .epsilon(1e-15));
      else
        CHECK(dict.atoms.at2(r, j) == before.atoms.at2(r, j));
    }

  // beta = 0 leaves the dictionary unchanged, beta = 1 replaces the row
  Dictionary d0 = before;
  dictionary_update(d0, f, 2, 0.0);
  CHECK(d0.atoms.data == before.atoms.data);
  Dictionary d1 = before;
  dictionary_update(d1, f, 2, 1.0);
  for (int64_t j = 0; j < 12; ++j) CHECK(d1.atoms.at2(2, j) == f.data[static_cast<size_t>(j)]);

  Dictionary pair = init_dictionary(2, 2, 0);
  pair.atoms = Tensor({2, 2}, {1, 0, 1, 0});
  CHECK_THROWS_AS(dictionary_update(pair, Tensor({2}, {1, 0}), 0, 1.0), SdlError);
  CHECK_THROWS_AS(dictionary_update(d1, f, 7, 0.1), SdlError);
}

TEST_CASE("hand arithmetic of the update equations") {
  Dictionary dict = init_dictionary(2, 2, 1);
  dict.atoms = Tensor({2, 2}, {1, 0, 0, 1});
  dictionary_update(dict, vec({0, 1}), 0, 0.1);
  CHECK(dict.atoms.at2(0, 0) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(dict.atoms.at2(0, 1) == doctest::Approx(0.1).epsilon(1e-15));
}

TEST_CASE("beta schedule endpoints and midpoint") {
  SdmConfig cfg;
  CHECK(beta_schedule(0, 100, cfg) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(beta_schedule(99, 100, cfg) == doctest::Approx(0.01).epsilon(1e-15));
  double mid = 0.1 - 0.09 * (50.0 / 99.0);  // the stated interpolation
  CHECK(beta_schedule(50, 100, cfg) == doctest::Approx(mid).epsilon(1e-15));
  CHECK(std::abs(beta_schedule(50, 100, cfg) - 0.05454545454545455) <= 1e-15);
  CHECK_THROWS_AS((void)beta_schedule(100, 100, cfg), SdlError);
  CHECK_THROWS_AS((void)beta_schedule(-1, 100, cfg), SdlError);
}

TEST_CASE("dictionary loss closed forms") {
  SdmConfig cfg;  // s=30, delta=0.35
  Dictionary anti;
  anti.atoms = Tensor({2, 3}, {1, 0, 0, -1, 0, 0});
  CHECK(dict_loss_value(anti, cfg) <= 1e-12);  // log(1+e^{-49.5})

  Dictionary same;
  same.atoms = Tensor({2, 3}, {1, 0, 0, 2, 0, 0});  // same direction, different norms
  double expect = std::log(1.0 + std::exp(30.0 * 0.35));
  CHECK(dict_loss_value(same, cfg) == doctest::Approx(expect).epsilon(1e-9));
  CHECK(dict_loss_value(same, cfg) == doctest::Approx(10.5).epsilon(1e-4));

  Dictionary zero;
  zero.atoms = Tensor({2, 3}, {1, 0, 0, 0, 0, 0});
  CHECK_THROWS_AS((void)dict_loss_value(zero, cfg), SdlError);
}

TEST_CASE("margin multiplier is inert at the self-angle") {
  SdmConfig a, b;
  a.margin_mult = 1.0;
  b.margin_mult = 4.0;
  Dictionary d = init_dictionary(6, 16, 77);
  CHECK(dict_loss_value(d, a) == dict_loss_value(d, b));
}

TEST_CASE("dictionary loss gradient passes finite differences") {
  Rng rng(6);
  SdmConfig cfg;
  Tensor atoms({6, 16});
  for (double& v : atoms.data) v = rng.normal();

  Tape tape;
  Tensor leaf = tape.leaf(atoms, true);
  Tensor loss = dict_loss(tape, leaf, cfg);
  auto grads = tape.backward(loss);
  const Tensor& g = grads.at(leaf.node);

  Tensor gfd = finite_diff_grad(
      [&](const Tensor& p) {
        Tape t(Tape::Mode::inference);
        return dict_loss(t, p, cfg).data[0];
      },
      atoms, 1e-6);
  for (size_t i = 0; i < g.data.size(); ++i) {
    double rel = std::abs(g.data[i] - gfd.data[i]) /
                 std::max({1e-3, std::abs(g.data[i]), std::abs(gfd.data[i])});
    CHECK(rel <= 1e-5);
  }
}

TEST_CASE("gradient descent on the dictionary loss repels the atoms") {
  SdmConfig cfg;
  Dictionary dict = init_dictionary(6, 16, 4242);
  double before = max_pairwise_cosine(dict.atoms);

  for (int step = 0; step < 200; ++step) {
    Tape tape;
    Tensor leaf = tape.leaf(dict.atoms, true);
    Tensor loss = dict_loss(tape, leaf, cfg);
    auto grads = tape.backward(loss);
    const Tensor& g = grads.at(leaf.node);
    for (size_t i = 0; i < dict.atoms.data.size(); ++i) dict.atoms.data[i] -= 0.01 * g.data[i];
  }
  double after = max_pairwise_cosine(dict.atoms);
  CHECK(after < before);
}

TEST_CASE("discovery pass: gate semantics and fixed point") {
  SdmConfig cfg;
  cfg.gate_epoch = 4;
  Dictionary dict = init_dictionary(3, 4, 50);
  Dictionary dict_before = dict;

  Rng rng(12);
  Tensor features({5, 4});
  for (double& v : features.data) v = rng.normal();
  std::vector<int> labels = {0, 1, 2, 1, 0};

  // gate closed: features bit-equal, weights all one, EMA still applied
  Dictionary d1 = dict;
  SdPassResult closed = sample_discovery_pass(features, labels, d1, 2, 40, cfg, -1);
  CHECK(closed.features.data == features.data);
  for (double w : closed.weights) CHECK(w == 1.0);
  CHECK(d1.atoms.data != dict_before.atoms.data);
  CHECK(d1.last_update_epoch == 2);

  // feature equal to its atom: weight 1 and the atom is a fixed point
  Dictionary d2 = init_dictionary(3, 4, 51);
  Tensor at({1, 4});
  for (int64_t j = 0; j < 4; ++j) at.at2(0, j) = d2.atoms.at2(1, j);
  Dictionary d2_before = d2;
  SdPassResult fixed = sample_discovery_pass(at, {1}, d2, 10, 40, cfg, -1);
  CHECK(fixed.weights[0] == 1.0);
  CHECK(fixed.mu[0] <= 1e-12);
  for (int64_t j = 0; j < 4; ++j)
    CHECK(d2.atoms.at2(1, j) == doctest::Approx(d2_before.atoms.at2(1, j)).epsilon(1e-12));
}

TEST_CASE("three-item pass equals the sequential hand computation") {
  SdmConfig cfg;
  cfg.gate_epoch = 0;
  cfg.alpha = 0.9;
  const int total_epochs = 10, epoch = 5;
  double beta = beta_schedule(epoch, total_epochs, cfg);

  Dictionary dict;
  dict.atoms = Tensor({2, 2}, {1, 0, 0, 1});
  Tensor features({3, 2}, {0.6, 0.8, 1.0, 0.0, -0.5, 0.5});
  std::vector<int> labels = {0, 1, 0};

  // sequential reference following the three steps per item
  double atoms[2][2] = {{1, 0}, {0, 1}};
  double exp_w[3], exp_feat[3][2];
  for (int i = 0; i < 3; ++i) {
    int y = labels[static_cast<size_t>(i)];
    double f0 = features.at2(i, 0), f1 = features.at2(i, 1);
    double u0 = 0.1 * f0 + 0.9 * atoms[y][0];
    double u1 = 0.1 * f1 + 0.9 * atoms[y][1];
    exp_feat[i][0] = u0;
    exp_feat[i][1] = u1;
    double dot = u0 * atoms[y][0] + u1 * atoms[y][1];
    double mu = 1.0 - dot / (std::sqrt(u0 * u0 + u1 * u1) *
                             std::sqrt(atoms[y][0] * atoms[y][0] + atoms[y][1] * atoms[y][1]));
    exp_w[i] = std::min(1.0, std::max(0.5, 1.0 - mu));
    atoms[y][0] = (1 - beta) * atoms[y][0] + beta * f0;
    atoms[y][1] = (1 - beta) * atoms[y][1] + beta * f1;
  }

  SdPassResult pass = sample_discovery_pass(features, labels, dict, epoch, total_epochs, cfg, -1);
  for (int i = 0; i < 3; ++i) {
    CHECK(pass.weights[static_cast<size_t>(i)] == doctest::Approx(exp_w[i]).epsilon(1e-12));
    CHECK(pass.features.at2(i, 0) == doctest::Approx(exp_feat[i][0]).epsilon(1e-12));
    CHECK(pass.features.at2(i, 1) == doctest::Approx(exp_feat[i][1]).epsilon(1e-12));
  }
  for (int r = 0; r < 2; ++r)
    for (int j = 0; j < 2; ++j)
      CHECK(dict.atoms.at2(r, j) == doctest::Approx(atoms[r][j]).epsilon(1e-12));
}

TEST_CASE("background rows never touch the dictionary") {
  SdmConfig cfg;
  cfg.gate_epoch = 0;
  Dictionary dict = init_dictionary(3, 4, 66);
  Dictionary before = dict;

  Rng rng(3);
  Tensor features({2, 4});
  for (double& v : features.data) v = rng.normal();
  SdPassResult pass = sample_discovery_pass(features, {2, 2}, dict, 5, 10, cfg, /*background=*/2);
  CHECK(dict.atoms.data == before.atoms.data);
  for (double w : pass.weights) CHECK(w == 1.0);
  CHECK(pass.features.data == features.data);
}
