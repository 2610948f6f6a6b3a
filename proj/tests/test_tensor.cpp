#include <doctest.h>

#include <cmath>
#include <vector>

#include "mergelab/tensor.hpp"

using namespace mergelab;

namespace {

Tensor rand_tensor(std::vector<int> shape, Rng& rng, bool rg = true) {
  return Tensor::randn(std::move(shape), rng, 1.0, rg);
}

// Weighted-sum loss so output grads are non-uniform (a plain sum() makes
// softmax gradients vanish identically).
Tensor weighted(const Tensor& t, const Tensor& weights) { return sum(mul(t, weights)); }

}  // namespace

TEST_CASE("matmul basics") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor v = Tensor::from_data({2, 1}, {3, 4});
  Tensor r = matmul(eye, v);
  CHECK(r.data() == std::vector<double>{3, 4});

  Tensor a = Tensor::from_data({1, 2}, {1, 2});
  Tensor b = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(a, b).value() == 11.0);

  Tensor bad = Tensor::from_data({3, 1}, {1, 2, 3});
  CHECK_THROWS_WITH_AS(matmul(a, bad), doctest::Contains("[1x2]"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(matmul(a, bad), doctest::Contains("[3x1]"), std::invalid_argument);
}

TEST_CASE("matmul gradient vs finite differences") {
  Rng rng(7);
  Tensor a = rand_tensor({3, 4}, rng);
  Tensor b = rand_tensor({4, 2}, rng);
  double err = grad_check([&] { return sum(matmul(a, b)); }, {a, b}, 1e-6);
  CHECK(err < 1e-6);
}

TEST_CASE("layer_norm basics") {
  Tensor gamma = Tensor::full({4}, 1.0);
  Tensor beta = Tensor::zeros({4});
  Tensor c = Tensor::from_data({4}, {5, 5, 5, 5});
  Tensor out = layer_norm(c, gamma, beta, 1e-5);
  for (double v : out.data()) CHECK(v == 0.0);

  Tensor g2 = Tensor::full({2}, 1.0);
  Tensor b2 = Tensor::zeros({2});
  Tensor x = Tensor::from_data({2}, {1, -1});
  Tensor out2 = layer_norm(x, g2, b2, 1e-14);
  CHECK(out2.data()[0] == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(out2.data()[1] == doctest::Approx(-1.0).epsilon(1e-10));

  CHECK_THROWS_AS(layer_norm(Tensor::from_data({1}, {3.0}), Tensor::full({1}, 1.0),
                             Tensor::zeros({1}), 1e-5),
                  std::invalid_argument);
}

TEST_CASE("layer_norm gradient vs finite differences") {
  Rng rng(11);
  Tensor x = rand_tensor({2, 8}, rng);
  Tensor gamma = rand_tensor({8}, rng);
  Tensor beta = rand_tensor({8}, rng);
  Tensor w = rand_tensor({2, 8}, rng, false);
  double err = grad_check([&] { return weighted(layer_norm(x, gamma, beta, 1e-5), w); },
                          {x, gamma, beta}, 1e-6);
  CHECK(err < 1e-5);
}

TEST_CASE("layer_norm normalizes before affine") {
  Rng rng(3);
  Tensor x = rand_tensor({5, 16}, rng, false);
  Tensor gamma = Tensor::full({16}, 1.0);
  Tensor beta = Tensor::zeros({16});
  Tensor out = layer_norm(x, gamma, beta, 1e-12);
  for (int r = 0; r < 5; ++r) {
    double mu = 0, var = 0;
    for (int j = 0; j < 16; ++j) mu += out.at(r, j);
    mu /= 16;
    for (int j = 0; j < 16; ++j) var += (out.at(r, j) - mu) * (out.at(r, j) - mu);
    var /= 16;
    CHECK(std::abs(mu) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-8);
  }
}

TEST_CASE("softmax basics") {
  Tensor a = softmax(Tensor::from_data({2}, {0, 0}));
  CHECK(a.data()[0] == 0.5);
  Tensor b = softmax(Tensor::from_data({2}, {1000, 1000}));
  CHECK(b.data()[0] == 0.5);
  CHECK(b.data()[1] == 0.5);
  Tensor c = softmax(Tensor::from_data({3}, {std::log(1.0), std::log(2.0), std::log(3.0)}));
  CHECK(c.data()[0] == doctest::Approx(1.0 / 6).epsilon(1e-14));
  CHECK(c.data()[1] == doctest::Approx(2.0 / 6).epsilon(1e-14));
  CHECK(c.data()[2] == doctest::Approx(3.0 / 6).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::randn({4, 7}, rng, 10.0);
    Tensor p = softmax(x);
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int j = 0; j < 7; ++j) s += p.at(r, j);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("backward quadratic and unreachable leaf") {
  Tensor w = Tensor::from_data({3}, {1, 2, 3}, true);
  Tensor u = Tensor::from_data({3}, {5, 5, 5}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.watch(u);  // never used by any primitive
    Tensor loss = sum(mul(w, w));
    backward(loss, tape);
  }
  CHECK(w.grad() == std::vector<double>{2, 4, 6});
  CHECK(u.grad() == std::vector<double>{0, 0, 0});
}

TEST_CASE("backward requires scalar loss") {
  Tensor w = Tensor::from_data({2}, {1, 2}, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = mul(w, w);
  CHECK_THROWS_AS(backward(y, tape), std::invalid_argument);
}

TEST_CASE("grad_check exact for quadratic") {
  Rng rng(13);
  Tensor w = rand_tensor({6}, rng);
  double err = grad_check([&] { return scale(sum(mul(w, w)), 0.5); }, {w}, 1e-6);
  CHECK(err < 1e-9);
}

TEST_CASE("every primitive matches finite differences over seeds") {
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    Tensor a = rand_tensor({3, 5}, rng);
    Tensor b = rand_tensor({3, 5}, rng);
    Tensor w = rand_tensor({3, 5}, rng, false);

    auto check = [&](const std::function<Tensor()>& f, std::vector<Tensor> params,
                     double tol = 1e-4) {
      double err = grad_check(f, params, 1e-6);
      CHECK(err < tol);
    };

    check([&] { return weighted(add(a, b), w); }, {a, b});
    check([&] { return weighted(sub(a, b), w); }, {a, b});
    check([&] { return weighted(mul(a, b), w); }, {a, b});
    check([&] { return weighted(scale(a, 1.7), w); }, {a});
    Tensor s = Tensor::scalar(0.8, true);
    check([&] { return weighted(scale_by(a, s), w); }, {a, s});
    check([&] { return pick(a, 7); }, {a});
    check([&] { return weighted(reshape(a, {5, 3}), reshape(w, {5, 3})); }, {a});
    check([&] { return weighted(transpose(a), transpose(w)); }, {a});

    Tensor m1 = rand_tensor({3, 4}, rng);
    Tensor m2 = rand_tensor({4, 5}, rng);
    Tensor wm = rand_tensor({3, 5}, rng, false);
    check([&] { return weighted(matmul(m1, m2), wm); }, {m1, m2});

    Tensor bias = rand_tensor({5}, rng);
    check([&] { return weighted(add_row_bias(a, bias), w); }, {a, bias});

    Tensor table = rand_tensor({6, 4}, rng);
    Tensor wg = rand_tensor({3, 4}, rng, false);
    check([&] { return weighted(gather_rows(table, {1, 5, 1}), wg); }, {table});

    check([&] { return weighted(concat_rows({slice_rows(a, 0, 1), slice_rows(a, 1, 3)}), w); },
          {a});
    check([&] { return weighted(concat_cols({slice_cols(a, 0, 2), slice_cols(a, 2, 5)}), w); },
          {a});

    Tensor gamma = rand_tensor({5}, rng);
    Tensor beta = rand_tensor({5}, rng);
    check([&] { return weighted(layer_norm(a, gamma, beta, 1e-5), w); }, {a, gamma, beta});
    check([&] { return weighted(softmax(a), w); }, {a});
    check([&] { return weighted(gelu(a), w); }, {a});

    // keep relu/abs inputs away from their kinks
    std::vector<double> off(15);
    for (auto& v : off) v = (rng.uniform() * 2.0 - 1.0);
    for (auto& v : off) v += (v >= 0 ? 0.2 : -0.2);
    Tensor far = Tensor::from_data({3, 5}, off, true);
    check([&] { return weighted(relu(far), w); }, {far});
    check([&] { return weighted(abs_elem(far), w); }, {far});

    std::vector<double> pos(15);
    for (auto& v : pos) v = 0.5 + rng.uniform();
    Tensor positive = Tensor::from_data({3, 5}, pos, true);
    check([&] { return weighted(log_elem(positive), w); }, {positive});

    check([&] { return sum(a); }, {a});
    check([&] { return mean(a); }, {a});

    Tensor logits = rand_tensor({1, 6}, rng);
    check([&] { return cross_entropy(logits, 2); }, {logits});
    std::vector<double> targets = {1, 0, 0, 1, 0, 1};
    check([&] { return bce_with_logits(logits, targets); }, {logits});
  }
}

TEST_CASE("abs subgradient at zero is zero") {
  Tensor x = Tensor::from_data({3}, {0.0, -2.0, 3.0}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    backward(sum(abs_elem(x)), tape);
  }
  CHECK(x.grad() == std::vector<double>{0, -1, 1});
}

TEST_CASE("forward passes are deterministic") {
  Rng rng1(42), rng2(42);
  Tensor a1 = rand_tensor({4, 6}, rng1, false);
  Tensor a2 = rand_tensor({4, 6}, rng2, false);
  Tensor g1 = rand_tensor({6}, rng1, false), g2 = rand_tensor({6}, rng2, false);
  Tensor bb1 = rand_tensor({6}, rng1, false), bb2 = rand_tensor({6}, rng2, false);
  Tensor o1 = softmax(layer_norm(a1, g1, bb1, 1e-5));
  Tensor o2 = softmax(layer_norm(a2, g2, bb2, 1e-5));
  CHECK(o1.data() == o2.data());
}

TEST_CASE("no recording without an active tape") {
  Tensor a = Tensor::from_data({2}, {1, 2}, true);
  Tensor out = mul(a, a);
  CHECK_FALSE(out.requires_grad());
}
