#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "acal/rng.hpp"
#include "acal/tensor.hpp"

using namespace acal;

TEST_CASE("tensor construction round-trips values") {
  const Tensor t = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(t.shape() == Shape{2, 2});
  CHECK(t.at(0) == 1.0);
  CHECK(t.at(3) == 4.0);

  const Tensor z = Tensor::from({3}, {0, 0, 0});
  double sum = 0;
  for (double v : z.values()) sum += v;
  CHECK(sum == 0.0);
}

TEST_CASE("tensor construction rejects bad input") {
  CHECK_THROWS_AS(Tensor::from({2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::from({0}, {}), ShapeError);
  CHECK_THROWS_AS(Tensor::from({1}, {std::nan("")}), ValueError);
  CHECK_THROWS_AS(Tensor::from({2}, {1.0, std::numeric_limits<double>::infinity()}),
                  ValueError);
}

TEST_CASE("matmul matches the summation oracle") {
  const Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, {5, 6, 7, 8});
  const Tensor r = matmul(id, m);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.at(i) == m.at(i));

  // [[1,2]] x [[3],[4]] summed by hand: 1*3 + 2*4
  const Tensor a = Tensor::from({1, 2}, {1, 2});
  const Tensor b = Tensor::from({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == doctest::Approx(11.0));

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("conv2d identity kernel and all-ones oracle") {
  const Tensor x = Tensor::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Tensor k1 = Tensor::from({1, 1, 1, 1}, {1});
  const Tensor y = conv2d(x, k1, 1, 0);
  CHECK(y.shape() == Shape{1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) CHECK(y.at(i) == x.at(i));

  const Tensor ones = Tensor::full({1, 3, 3}, 1.0);
  const Tensor k2 = Tensor::full({1, 1, 2, 2}, 1.0);
  const Tensor s = conv2d(ones, k2, 1, 0);
  CHECK(s.shape() == Shape{1, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) CHECK(s.at(i) == doctest::Approx(4.0));

  CHECK(conv2d(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), 1, 1).shape() ==
        Shape{1, 4, 4});
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 0),
                  ShapeError);
}

TEST_CASE("conv2d output extents follow the floor formula") {
  rng::Stream s(11);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t h = 1 + s.below(10), w = 1 + s.below(10);
    const std::size_t kh = 1 + s.below(4), kw = 1 + s.below(4);
    const std::size_t stride = 1 + s.below(3), pad = s.below(3);
    if (h + 2 * pad < kh || w + 2 * pad < kw) {
      CHECK_THROWS_AS(conv2d(Tensor::zeros({1, h, w}), Tensor::zeros({2, 1, kh, kw}),
                             stride, pad),
                      ShapeError);
      continue;
    }
    const Tensor y =
        conv2d(Tensor::zeros({1, h, w}), Tensor::zeros({2, 1, kh, kw}), stride, pad);
    CHECK(y.shape()[1] == (h + 2 * pad - kh) / stride + 1);
    CHECK(y.shape()[2] == (w + 2 * pad - kw) / stride + 1);
  }
}

TEST_CASE("elementwise fixed points and high-precision scalars") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == doctest::Approx(0.5));
  CHECK(relu(Tensor::scalar(-3.0)).item() == 0.0);
  CHECK(relu(Tensor::scalar(3.0)).item() == 3.0);
  // ln(0.5) to double precision
  CHECK(log(Tensor::scalar(0.5)).item() ==
        doctest::Approx(-0.6931471805599453).epsilon(1e-12));

  CHECK_THROWS_AS(log(Tensor::scalar(0.0)), ValueError);
  CHECK_THROWS_AS(log(Tensor::scalar(-1.0)), ValueError);
  CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST_CASE("elementwise dispatcher enforces arity") {
  const Tensor a = Tensor::from({2}, {1, 2});
  const Tensor b = Tensor::from({2}, {3, 4});
  CHECK(elementwise(ElemKind::add, a, &b).at(1) == 6.0);
  CHECK(elementwise(ElemKind::neg, a).at(0) == -1.0);
  CHECK_THROWS_AS(elementwise(ElemKind::add, a), ContractError);
  CHECK_THROWS_AS(elementwise(ElemKind::relu, a, &b), ContractError);
}

TEST_CASE("softmax cross entropy examples") {
  // ln 2 at the symmetric point
  CHECK(softmax_cross_entropy(Tensor::from({1, 2}, {0, 0}), {0}).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // -log(e/(e+1)) computed to double precision
  CHECK(softmax_cross_entropy(Tensor::from({1, 2}, {1, 0}), {0}).item() ==
        doctest::Approx(0.3132616875182228).epsilon(1e-9));
  // stabilisation: huge logits stay finite
  const double huge = softmax_cross_entropy(Tensor::from({1, 2}, {1000, 0}), {0}).item();
  CHECK(std::isfinite(huge));
  CHECK(huge == doctest::Approx(0.0));

  CHECK_THROWS_AS(softmax_cross_entropy(Tensor::zeros({1, 3}), {3}), IndexError);
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor::zeros({1, 3}), {-1}), IndexError);
}

TEST_CASE("softmax cross entropy is non-negative and ln K at uniform logits") {
  rng::Stream s(5);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t B = 1 + s.below(4), K = 2 + s.below(6);
    std::vector<double> logits(B * K);
    for (double& v : logits) v = s.uniform(-4, 4);
    std::vector<int> labels(B);
    for (auto& l : labels) l = static_cast<int>(s.below(K));
    const double loss =
        softmax_cross_entropy(Tensor::from({B, K}, logits), labels).item();
    CHECK(loss >= 0.0);

    const double u =
        softmax_cross_entropy(Tensor::full({B, K}, 0.7), labels).item();
    CHECK(u == doctest::Approx(std::log(static_cast<double>(K))).epsilon(1e-12));
  }
}

TEST_CASE("l1 distance examples and symmetry") {
  const Tensor a = Tensor::from({2}, {1, 2});
  const Tensor b = Tensor::from({2}, {0, 4});
  CHECK(l1_distance(a, a).item() == 0.0);
  CHECK(l1_distance(a, b).item() == doctest::Approx(1.5));
  CHECK_THROWS_AS(l1_distance(a, Tensor::zeros({3})), ShapeError);

  rng::Stream s(17);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> xs(6), ys(6);
    for (double& v : xs) v = s.uniform(-2, 2);
    for (double& v : ys) v = s.uniform(-2, 2);
    const Tensor x = Tensor::from({6}, xs), y = Tensor::from({6}, ys);
    CHECK(l1_distance(x, y).item() == l1_distance(y, x).item());
    CHECK(l1_distance(x, x).item() == 0.0);
    if (xs != ys) CHECK(l1_distance(x, y).item() > 0.0);
  }
}

TEST_CASE("backward on sum of squares and reachability") {
  const Tensor w = Tensor::param({1}, {3.0});
  const Tensor loss = mean_all(mul(w, w));
  const GradientMap g = backward(loss);
  CHECK(g.at(w).at(0) == doctest::Approx(6.0));

  // a leaf the loss does not depend on stays absent
  const Tensor unused = Tensor::param({1}, {1.0});
  CHECK_FALSE(g.contains(unused));

  CHECK_THROWS_AS(backward(Tensor::from({2}, {1, 2}).with_grad()), ContractError);
  CHECK_THROWS_AS(backward(Tensor::scalar(1.0)), ContractError);
}

TEST_CASE("plain tensors never appear in gradient maps") {
  const Tensor w = Tensor::param({2}, {1.0, 2.0});
  const Tensor c = Tensor::from({2}, {3.0, 4.0});
  const GradientMap g = backward(mean_all(mul(w, c)));
  CHECK(g.size() == 1);
  CHECK(g.contains(w));
  CHECK_FALSE(g.contains(c));
  CHECK_THROWS_AS(g.at(c), ContractError);
}

TEST_CASE("backward twice over the same inputs is bit-identical") {
  rng::Stream s(23);
  std::vector<double> xv(18), kv(8);
  for (double& v : xv) v = s.uniform(-1, 1);
  for (double& v : kv) v = s.uniform(-1, 1);
  auto run = [&] {
    const Tensor x = Tensor::from({2, 3, 3}, xv);
    const Tensor k = Tensor::param({1, 2, 2, 2}, kv);
    const Tensor loss = mean_all(relu(conv2d(x, k, 1, 0)));
    return backward(loss).at(k);
  };
  const Tensor g1 = run(), g2 = run();
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1.at(i) == g2.at(i));
}

TEST_CASE("clamp counts events and gates gradients") {
  std::size_t clamped = 0;
  const Tensor x = Tensor::param({4}, {-2.0, 0.5, 0.9, 3.0});
  const Tensor y = clamp(x, 0.0, 1.0, &clamped);
  CHECK(clamped == 2);
  CHECK(y.at(0) == 0.0);
  CHECK(y.at(3) == 1.0);
  const GradientMap g = backward(mean_all(y));
  CHECK(g.at(x).at(0) == 0.0);
  CHECK(g.at(x).at(1) == doctest::Approx(0.25));
  CHECK(g.at(x).at(3) == 0.0);
}

TEST_CASE("structure ops keep shapes honest") {
  const Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(reshape(x, {3, 2}).at(4) == 5.0);
  CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);

  const Tensor t = tile(Tensor::from({2}, {7, 8}), 3);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.at(4) == 7.0);

  const Tensor pooled = max_pool2d(Tensor::from({1, 2, 2}, {1, 5, 3, 2}), 2);
  CHECK(pooled.shape() == Shape{1, 1, 1});
  CHECK(pooled.at(0) == 5.0);

  const Tensor up = upsample_nearest(Tensor::from({1, 1, 1}, {4}), 2);
  CHECK(up.shape() == Shape{1, 2, 2});
  CHECK(up.at(3) == 4.0);

  CHECK(mean_all(Tensor::from({4}, {1, 2, 3, 4})).item() == doctest::Approx(2.5));
  CHECK(scale(Tensor::scalar(2.0), -1.5).item() == doctest::Approx(-3.0));
}

TEST_CASE("detach cuts the graph") {
  const Tensor w = Tensor::param({1}, {2.0});
  const Tensor mid = mul(w, w);
  const Tensor cut = mid.detach();
  CHECK_FALSE(cut.tracked());
  const Tensor loss = mean_all(mul(cut, cut));
  CHECK_FALSE(loss.tracked());
}
