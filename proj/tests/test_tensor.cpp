#include <cmath>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "r3/rng.hpp"
#include "r3/serialize.hpp"
#include "r3/tensor.hpp"

using r3::Tensor;

namespace {

Tensor rand_tensor(const r3::Shape& shape, r3::Rng& rng, double stddev = 1.0) {
  return Tensor::randn(shape, rng, stddev);
}

}  // namespace

TEST_CASE("rng determinism and state round trip") {
  r3::Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  auto saved = a.state();
  std::vector<double> first;
  for (int i = 0; i < 16; ++i) first.push_back(a.uniform());
  a.set_state(saved);
  for (int i = 0; i < 16; ++i) CHECK(a.uniform() == first[i]);

  r3::Rng c(7);
  for (int i = 0; i < 10000; ++i) {
    double u = c.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  for (int i = 0; i < 1000; ++i) {
    auto v = c.uniform_int(13);
    CHECK(v < 13);
  }

  double mu = 0.0, m2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double x = c.normal();
    mu += x;
    m2 += x * x;
  }
  mu /= n;
  CHECK(std::fabs(mu) < 0.05);
  CHECK(std::fabs(m2 / n - 1.0) < 0.05);
}

TEST_CASE("binary serialization round trip and truncation error") {
  std::stringstream ss;
  r3::write_u32(ss, 0xdeadbeefu);
  r3::write_u64(ss, 0x0123456789abcdefull);
  r3::write_f64(ss, -3.25e-7);
  r3::write_string(ss, "hello world");
  r3::write_f64_vec(ss, {1.0, -2.5, 1e300});

  CHECK(r3::read_u32(ss) == 0xdeadbeefu);
  CHECK(r3::read_u64(ss) == 0x0123456789abcdefull);
  CHECK(r3::read_f64(ss) == -3.25e-7);
  CHECK(r3::read_string(ss) == "hello world");
  std::vector<double> vec;
  r3::read_f64_vec(ss, vec, 3);
  REQUIRE(vec.size() == 3);
  CHECK(vec[2] == 1e300);

  std::stringstream trunc;
  r3::write_u32(trunc, 5);
  std::string raw = trunc.str();
  std::stringstream cut(raw.substr(0, 2));
  CHECK_THROWS_AS(r3::read_u32(cut), std::runtime_error);
}

TEST_CASE("matmul identity and projector") {
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto x = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto y = r3::matmul(eye, x);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.at(i) == x.at(i));

  auto proj = Tensor::from_data({2, 2}, {1, 0, 0, 0});
  auto b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  auto p = r3::matmul(proj, b);
  CHECK(p.at(0, 0) == 5);
  CHECK(p.at(0, 1) == 6);
  CHECK(p.at(1, 0) == 0);
  CHECK(p.at(1, 1) == 0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  r3::Rng rng(101);
  auto a = rand_tensor({3, 4}, rng);
  auto b = rand_tensor({4, 2}, rng);
  auto c = r3::matmul(a, b);
  auto ref = oracle::matmul(a.data(), b.data(), 3, 4, 2);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    CHECK(std::fabs(c.at(i) - ref[i]) <= 1e-12);
  }

  // property sweep across shapes up to 16x16
  for (std::size_t m : {1u, 5u, 16u}) {
    for (std::size_t k : {1u, 7u, 16u}) {
      for (std::size_t n : {1u, 3u, 16u}) {
        auto aa = rand_tensor({m, k}, rng);
        auto bb = rand_tensor({k, n}, rng);
        auto cc = r3::matmul(aa, bb);
        auto rr = oracle::matmul(aa.data(), bb.data(), m, k, n);
        for (std::size_t i = 0; i < rr.size(); ++i) {
          CHECK(std::fabs(cc.at(i) - rr[i]) <= 1e-12);
        }
      }
    }
  }

  CHECK_THROWS_AS(r3::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})),
                  std::invalid_argument);
}

TEST_CASE("softmax frozen examples") {
  auto s1 = r3::softmax(Tensor::from_data({2}, {0, 0}), 0);
  CHECK(s1.at(0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s1.at(1) == doctest::Approx(0.5).epsilon(1e-12));

  auto s2 = r3::softmax(Tensor::from_data({1}, {7}), 0);
  CHECK(s2.at(0) == doctest::Approx(1.0).epsilon(1e-12));

  auto s3 = r3::softmax(
      Tensor::from_data({2}, {std::log(1.0), std::log(3.0)}), 0);
  CHECK(s3.at(0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(s3.at(1) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and shift invariance") {
  r3::Rng rng(5);
  auto x = rand_tensor({6, 9}, rng, 3.0);
  auto s = r3::softmax(x, 1);
  for (std::size_t i = 0; i < 6; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      double v = s.at(i, j);
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      total += v;
    }
    CHECK(std::fabs(total - 1.0) <= 1e-12);
  }

  auto shifted = r3::softmax(r3::add_scalar(x, 17.5), 1);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(std::fabs(shifted.at(i) - s.at(i)) <= 1e-12);
  }

  auto bad = Tensor::from_data({2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(r3::softmax(bad, 0), std::runtime_error);
}

TEST_CASE("softmax over axis 0 of a matrix") {
  auto x = Tensor::from_data({2, 2}, {0, 10, 0, 10});
  auto s = r3::softmax(x, 0);
  CHECK(s.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.at(1, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.at(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("elementwise identities and broadcast") {
  r3::Rng rng(9);
  auto x = rand_tensor({3, 4}, rng);
  auto ones = Tensor::ones({3, 4});
  auto zeros = Tensor::zeros({3, 4});

  auto mx = r3::mul(ones, x);
  auto zx = r3::mul(zeros, x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(mx.at(i) == x.at(i));
    CHECK(zx.at(i) == 0.0);
  }

  auto s = r3::add(Tensor::from_data({2}, {1, 2}), Tensor::from_data({2}, {3, 4}));
  CHECK(s.at(0) == 4);
  CHECK(s.at(1) == 6);

  // row vector broadcast across leading axis
  auto row = Tensor::from_data({4}, {1, 2, 3, 4});
  auto bs = r3::add(x, row);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(bs.at(i, j) == doctest::Approx(x.at(i, j) + row.at(j)));
    }
  }
  auto diff = r3::sub(x, row);
  CHECK(diff.at(1, 2) == doctest::Approx(x.at(1, 2) - 3.0));

  CHECK_THROWS_AS(r3::add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})),
                  std::invalid_argument);
}

TEST_CASE("layer_norm frozen examples") {
  auto gain = Tensor::ones({4});
  auto bias = Tensor::zeros({4});

  auto flat = r3::layer_norm(Tensor::full({1, 4}, 3.7), gain, bias, 1e-5);
  for (std::size_t i = 0; i < 4; ++i) CHECK(flat.at(i) == 0.0);

  auto g2 = Tensor::ones({2});
  auto b2 = Tensor::zeros({2});
  auto pm = r3::layer_norm(Tensor::from_data({1, 2}, {1, -1}), g2, b2, 1e-12);
  CHECK(pm.at(0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(pm.at(1) == doctest::Approx(-1.0).epsilon(1e-9));

  r3::Rng rng(31);
  auto g16 = Tensor::ones({16});
  auto b16 = Tensor::zeros({16});
  auto x = rand_tensor({1, 16}, rng, 2.0);
  auto y = r3::layer_norm(x, g16, b16, 1e-12);
  double mu = 0.0;
  for (std::size_t j = 0; j < 16; ++j) mu += y.at(j);
  mu /= 16.0;
  double var = 0.0;
  for (std::size_t j = 0; j < 16; ++j) var += (y.at(j) - mu) * (y.at(j) - mu);
  var /= 16.0;
  CHECK(std::fabs(mu) <= 1e-10);
  CHECK(std::fabs(var - 1.0) <= 1e-6);
}

TEST_CASE("layer_norm affine parameters apply after normalization") {
  auto gain = Tensor::from_data({2}, {2, 2});
  auto bias = Tensor::from_data({2}, {10, 10});
  auto y = r3::layer_norm(Tensor::from_data({1, 2}, {1, -1}), gain, bias, 1e-12);
  CHECK(y.at(0) == doctest::Approx(12.0).epsilon(1e-9));
  CHECK(y.at(1) == doctest::Approx(8.0).epsilon(1e-9));
}

TEST_CASE("dropout contract") {
  r3::Rng rng(77);
  auto x = Tensor::ones({100, 100});

  auto id0 = r3::dropout(x, 0.0, rng, true);
  auto id1 = r3::dropout(x, 0.5, rng, false);
  for (std::size_t i = 0; i < 64; ++i) {
    CHECK(id0.at(i) == 1.0);
    CHECK(id1.at(i) == 1.0);
  }

  r3::Rng d1(123), d2(123);
  auto a = r3::dropout(x, 0.5, d1, true);
  auto b = r3::dropout(x, 0.5, d2, true);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(a.at(i) == b.at(i));  // same seed, bitwise identical mask
    if (a.at(i) != 0.0) {
      CHECK(a.at(i) == 2.0);  // survivors scaled by 1/(1-rate)
      ++kept;
    }
  }
  double frac = static_cast<double>(kept) / static_cast<double>(x.size());
  CHECK(std::fabs(frac - 0.5) <= 0.02);

  CHECK_THROWS_AS(r3::dropout(x, 1.0, rng, true), std::invalid_argument);
}

TEST_CASE("backward linear and quadratic") {
  auto x = Tensor::from_data({4}, {1, 2, 3, 4});
  x.set_requires_grad(true);
  auto loss = r3::sum(x);
  r3::backward(loss);
  for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == 1.0);

  auto y = Tensor::from_data({4}, {1, 2, 3, 4});
  y.set_requires_grad(true);
  auto loss2 = r3::sum(r3::mul(y, y));
  r3::backward(loss2);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.grad()[i] == 2.0 * y.at(i));

  CHECK_THROWS_AS(r3::backward(loss2), std::logic_error);  // repeated call
  auto vec = Tensor::from_data({3}, {1, 2, 3});
  vec.set_requires_grad(true);
  auto nonscalar = r3::mul(vec, vec);
  CHECK_THROWS_AS(r3::backward(nonscalar), std::logic_error);
}

TEST_CASE("gradient accumulates across shared subexpressions") {
  auto x = Tensor::from_data({2}, {3, 5});
  x.set_requires_grad(true);
  auto y = r3::add(x, x);  // dy/dx = 2
  r3::backward(r3::sum(y));
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("finite differences: linear map is near-exact") {
  r3::Rng rng(3);
  auto x = rand_tensor({5}, rng);
  double err = r3::finite_diff_check(
      [](const Tensor& t) { return r3::sum(t); }, x, 1e-4);
  CHECK(err < 1e-9);
}

TEST_CASE("finite differences: softmax-then-dot") {
  r3::Rng rng(11);
  auto x = rand_tensor({7}, rng);
  auto w = rand_tensor({7}, rng);
  double err = r3::finite_diff_check(
      [&](const Tensor& t) { return r3::sum(r3::mul(r3::softmax(t, 0), w)); },
      x, 1e-4);
  CHECK(err < 1e-5);
}

TEST_CASE("finite differences: deep composite chain") {
  r3::Rng rng(13);
  auto w1 = rand_tensor({6, 8}, rng, 0.5);
  auto w2 = rand_tensor({8, 4}, rng, 0.5);
  auto gain = Tensor::ones({8});
  auto bias = Tensor::zeros({8});
  w1.set_requires_grad(true);
  w2.set_requires_grad(true);
  gain.set_requires_grad(true);
  bias.set_requires_grad(true);

  auto x = rand_tensor({3, 6}, rng);
  double err = r3::finite_diff_check(
      [&](const Tensor& t) {
        auto h = r3::matmul(t, w1);
        h = r3::layer_norm(h, gain, bias, 1e-5);
        h = r3::relu(h);
        auto o = r3::softmax(r3::matmul(h, w2), 1);
        return r3::mean(r3::mul(o, o));
      },
      x, 1e-4);
  CHECK(err <= 1e-4);
}

TEST_CASE("finite differences: transpose, slice, concat, gather, normalize") {
  r3::Rng rng(17);
  auto table = rand_tensor({5, 4}, rng);
  table.set_requires_grad(true);
  std::vector<int> idx{4, 0, 2, 2};

  auto x = rand_tensor({4, 6}, rng);
  double err = r3::finite_diff_check(
      [&](const Tensor& t) {
        auto left = r3::slice_cols(t, 0, 3);
        auto right = r3::slice_cols(t, 3, 3);
        auto joined = r3::concat_cols({right, left});
        auto g = r3::gather_rows(table, idx);
        auto prod = r3::matmul(r3::transpose(joined), g);  // 6x4
        auto nn = r3::normalize_rows(prod);
        return r3::mean(r3::mul(nn, nn));
      },
      x, 1e-4);
  CHECK(err <= 1e-4);

  // and through the gathered table itself
  auto x2 = rand_tensor({5, 4}, rng);
  double err2 = r3::finite_diff_check(
      [&](const Tensor& t) {
        auto g = r3::gather_rows(t, idx);
        return r3::sum(r3::mul(g, g));
      },
      x2, 1e-4);
  CHECK(err2 <= 1e-4);
}

TEST_CASE("normalize_rows values and zero-row passthrough") {
  auto x = Tensor::from_data({2, 2}, {3, 4, 0, 0});
  auto y = r3::normalize_rows(x);
  CHECK(y.at(0, 0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(y.at(0, 1) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(y.at(1, 0) == 0.0);
  CHECK(y.at(1, 1) == 0.0);
}

TEST_CASE("straight_through forwards values and routes gradient to x") {
  auto x = Tensor::from_data({3}, {1, 2, 3});
  auto v = Tensor::from_data({3}, {10, 20, 30});
  x.set_requires_grad(true);
  v.set_requires_grad(true);
  auto st = r3::straight_through(x, v);
  for (std::size_t i = 0; i < 3; ++i) CHECK(st.at(i) == v.at(i));
  auto w = Tensor::from_data({3}, {2, 3, 4});
  r3::backward(r3::sum(r3::mul(st, w)));
  for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == w.at(i));
  CHECK_FALSE(v.has_grad());
}

TEST_CASE("detach cuts the graph") {
  auto x = Tensor::from_data({2}, {1, 2});
  x.set_requires_grad(true);
  auto d = r3::detach(x);
  auto loss = r3::sum(r3::mul(d, d));
  CHECK_FALSE(loss.requires_grad());
}

TEST_CASE("cross entropy values, masking, and gradient") {
  // two rows, vocab 3; uniform logits -> ce = ln 3
  auto logits = Tensor::zeros({2, 3});
  std::size_t count = 0;
  auto ce = r3::cross_entropy_mean(logits, {0, 2}, &count);
  CHECK(count == 2);
  CHECK(ce.value() == doctest::Approx(std::log(3.0)).epsilon(1e-12));

  // ignored rows drop out of the mean
  auto l2 = Tensor::from_data({2, 2}, {100.0, 0.0, 0.0, 0.0});
  std::size_t c2 = 0;
  auto ce2 = r3::cross_entropy_mean(l2, {0, -1}, &c2);
  CHECK(c2 == 1);
  CHECK(ce2.value() == doctest::Approx(0.0).epsilon(1e-12));

  // certain prediction -> exactly zero loss (margin drives exp to underflow)
  auto l3 = Tensor::from_data({1, 2}, {2000.0, 0.0});
  auto ce3 = r3::cross_entropy_mean(l3, {0});
  CHECK(ce3.value() == 0.0);

  CHECK_THROWS_AS(r3::cross_entropy_mean(Tensor::zeros({1, 2}), {-1}),
                  std::invalid_argument);

  r3::Rng rng(23);
  auto x = rand_tensor({4, 5}, rng);
  std::vector<int> targets{1, -1, 4, 0};
  double err = r3::finite_diff_check(
      [&](const Tensor& t) { return r3::cross_entropy_mean(t, targets); }, x,
      1e-4);
  CHECK(err <= 1e-6);
}

TEST_CASE("scale, add_scalar, reshape, mean basics") {
  auto x = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto s = r3::scale(x, -2.0);
  CHECK(s.at(3) == -8.0);
  auto p = r3::add_scalar(x, 10.0);
  CHECK(p.at(0) == 11.0);
  auto r = r3::reshape(x, {4});
  CHECK(r.shape() == r3::Shape{4});
  CHECK(r.at(2) == 3.0);
  CHECK_THROWS_AS(r3::reshape(x, {5}), std::invalid_argument);
  CHECK(r3::mean(x).value() == doctest::Approx(2.5));

  r3::Rng rng(29);
  auto z = rand_tensor({3, 3}, rng);
  double err = r3::finite_diff_check(
      [](const Tensor& t) {
        return r3::mean(r3::add_scalar(r3::scale(r3::relu(t), 3.0), 1.0));
      },
      z, 1e-4);
  CHECK(err <= 1e-6);
}

TEST_CASE("no-grad guard suppresses graph construction") {
  auto x = Tensor::from_data({2}, {1, 2});
  x.set_requires_grad(true);
  r3::NoGradGuard guard;
  auto y = r3::mul(x, x);
  CHECK_FALSE(y.requires_grad());
}
