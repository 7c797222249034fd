#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "oracles.hpp"
#include "r3/positional.hpp"

using r3::BiasTable;
using r3::Box;
using r3::SpatioTemporalTables;
using r3::Tensor;
using r3::VoxelToken;

TEST_CASE("spatiotemporal index worked examples") {
  auto a = r3::spatiotemporal_index(0, Box{0, 0, 1, 1}, 4, 50);
  CHECK(a.t_idx == 0);
  CHECK(a.rc_idx == 10);  // center (0.5,0.5) -> cell (2,2)
  CHECK(a.rs_idx == 15);  // sides 1.0 -> floor clamps to cell (3,3)

  auto b = r3::spatiotemporal_index(3, Box{0, 0, 0.5, 0.5}, 4, 50);
  CHECK(b.t_idx == 3);
  CHECK(b.rc_idx == 5);
  CHECK(b.rs_idx == 10);

  CHECK_THROWS_AS(r3::spatiotemporal_index(50, Box{0, 0, 1, 1}, 4, 50),
                  std::out_of_range);
  CHECK_THROWS_AS(r3::spatiotemporal_index(-1, Box{0, 0, 1, 1}, 4, 50),
                  std::out_of_range);
  CHECK_THROWS_AS(r3::spatiotemporal_index(0, Box{0, 0, 1.2, 1}, 4, 50),
                  std::out_of_range);
  CHECK_THROWS_AS(r3::spatiotemporal_index(0, Box{0.6, 0, 0.5, 1}, 4, 50),
                  std::out_of_range);
}

TEST_CASE("spatiotemporal indices stay in range under fuzzing") {
  r3::Rng rng(404);
  const int n = 4, t_max = 50;
  for (int i = 0; i < 10000; ++i) {
    double xa = rng.uniform(), xb = rng.uniform();
    double ya = rng.uniform(), yb = rng.uniform();
    Box box{std::min(xa, xb), std::min(ya, yb), std::max(xa, xb),
            std::max(ya, yb)};
    int t = static_cast<int>(rng.uniform_int(t_max));
    auto ix = r3::spatiotemporal_index(t, box, n, t_max);
    CHECK(ix.t_idx >= 0);
    CHECK(ix.t_idx < t_max);
    CHECK(ix.rc_idx >= 0);
    CHECK(ix.rc_idx < n * n);
    CHECK(ix.rs_idx >= 0);
    CHECK(ix.rs_idx < n * n);
  }
}

TEST_CASE("grid translation shifts center cell and preserves size cell") {
  const int n = 4;
  Box base{0.05, 0.1, 0.2, 0.15};  // sits inside cell (0,0)
  auto ref = r3::spatiotemporal_index(0, base, n, 50);
  for (int dx = 0; dx < 4; ++dx) {
    for (int dy = 0; dy < 4; ++dy) {
      Box moved{base.x0 + dx * 0.25, base.y0 + dy * 0.25, base.x1 + dx * 0.25,
                base.y1 + dy * 0.25};
      if (moved.x1 > 1.0 || moved.y1 > 1.0) continue;
      auto ix = r3::spatiotemporal_index(0, moved, n, 50);
      CHECK(ix.rc_idx == ref.rc_idx + dy * n + dx);
      CHECK(ix.rs_idx == ref.rs_idx);
    }
  }
}

TEST_CASE("video position rows sum the three tables") {
  SpatioTemporalTables tables;
  tables.n_grid = 4;
  tables.t_max = 50;
  tables.l_text = 50;
  const std::size_t d = 4;
  tables.e_t = Tensor::zeros({50, d});
  tables.e_rc = Tensor::zeros({16, d});
  tables.e_rs = Tensor::zeros({16, d});
  tables.e_text = Tensor::zeros({50, d});

  std::vector<VoxelToken> toks{{0, Box{0, 0, 1, 1}},   // rows (0, 10, 15)
                               {0, Box{0, 0, 1, 1}}};  // identical token

  // zero tables -> zero rows
  auto zero = r3::encode_video_positions(toks, tables);
  for (std::size_t i = 0; i < zero.size(); ++i) CHECK(zero.at(i) == 0.0);

  // one-hot tables: each hit row contributes its own basis vector
  tables.e_t.data()[0 * d + 0] = 1.0;    // row 0 -> e0
  tables.e_rc.data()[10 * d + 1] = 1.0;  // row 10 -> e1
  tables.e_rs.data()[15 * d + 2] = 1.0;  // row 15 -> e2
  auto enc = r3::encode_video_positions(toks, tables);
  REQUIRE(enc.shape() == r3::Shape{2, d});
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(enc.at(i, 0) == 1.0);
    CHECK(enc.at(i, 1) == 1.0);
    CHECK(enc.at(i, 2) == 1.0);
    CHECK(enc.at(i, 3) == 0.0);
  }
  for (std::size_t j = 0; j < d; ++j) CHECK(enc.at(0, j) == enc.at(1, j));
}

TEST_CASE("video position gradient reaches all three tables") {
  r3::Rng rng(7);
  auto tables = SpatioTemporalTables::make(8, 4, 50, 50, rng);
  std::vector<VoxelToken> toks{{5, Box{0.3, 0.3, 0.6, 0.9}}};
  auto ix = r3::spatiotemporal_index(5, toks[0].box, 4, 50);

  auto enc = r3::encode_video_positions(toks, tables);
  r3::backward(r3::sum(enc));
  auto row_grad_sum = [](const Tensor& t, int row) {
    double s = 0.0;
    for (std::size_t j = 0; j < t.cols(); ++j) {
      s += t.grad()[static_cast<std::size_t>(row) * t.cols() + j];
    }
    return s;
  };
  CHECK(row_grad_sum(tables.e_t, ix.t_idx) == 8.0);
  CHECK(row_grad_sum(tables.e_rc, ix.rc_idx) == 8.0);
  CHECK(row_grad_sum(tables.e_rs, ix.rs_idx) == 8.0);
  CHECK(row_grad_sum(tables.e_t, ix.t_idx + 1) == 0.0);
}

TEST_CASE("text positions read only the text table") {
  r3::Rng rng(8);
  auto tables = SpatioTemporalTables::make(8, 4, 50, 50, rng);

  auto one = r3::encode_text_positions(1, tables);
  REQUIRE(one.shape() == r3::Shape{1, 8});
  for (std::size_t j = 0; j < 8; ++j) CHECK(one.at(0, j) == tables.e_text.at(0, j));

  tables.e_text = Tensor::zeros({50, 8});
  auto z = r3::encode_text_positions(10, tables);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(z.at(i) == 0.0);

  CHECK_THROWS_AS(r3::encode_text_positions(51, tables), std::out_of_range);
}

TEST_CASE("relative bucket worked cases") {
  CHECK(r3::relative_bucket(0, 32, 128, true) == 0);
  CHECK(r3::relative_bucket(0, 32, 128, false) == 0);

  int b1 = r3::relative_bucket(1, 32, 128, true);
  int b2 = r3::relative_bucket(2, 32, 128, true);
  CHECK(b1 != b2);

  CHECK(r3::relative_bucket(100, 32, 128, true) ==
        r3::relative_bucket(101, 32, 128, true));
  CHECK(r3::relative_bucket(-100, 32, 128, true) ==
        r3::relative_bucket(-101, 32, 128, true));

  // causal: future keys collapse to bucket 0
  CHECK(r3::relative_bucket(1, 32, 128, false) == 0);
  CHECK(r3::relative_bucket(25, 32, 128, false) == 0);
  CHECK(r3::relative_bucket(-1, 32, 128, false) == 1);

  // exact region: |offset| < 8 gets its own bucket
  for (int off = 0; off < 8; ++off) {
    CHECK(r3::relative_bucket(-off, 32, 128, true) == off);
  }

  // saturation far past max_distance
  CHECK(r3::relative_bucket(-100000, 32, 128, true) == 15);
  CHECK(r3::relative_bucket(100000, 32, 128, true) == 31);
  CHECK(r3::relative_bucket(-100000, 32, 128, false) == 31);
}

TEST_CASE("relative bucket agrees with reference transcription") {
  for (int rp = -1000; rp <= 1000; ++rp) {
    CHECK(r3::relative_bucket(rp, 32, 128, true) ==
          oracle::relative_bucket_ref(rp, true, 32, 128));
    CHECK(r3::relative_bucket(rp, 32, 128, false) ==
          oracle::relative_bucket_ref(rp, false, 32, 128));
  }
}

TEST_CASE("bias matrix lookups") {
  r3::Rng rng(15);

  BiasTable zero = BiasTable::make(2, true, rng);
  zero.buckets = Tensor::zeros({32, 2});
  auto zb = r3::bias_matrix(3, 3, zero);
  REQUIRE(zb.size() == 2);
  for (const auto& head : zb) {
    for (std::size_t i = 0; i < head.size(); ++i) CHECK(head.at(i) == 0.0);
  }

  BiasTable t = BiasTable::make(2, true, rng);
  auto single = r3::bias_matrix(1, 1, t);
  CHECK(single[0].at(0, 0) == t.buckets.at(0, 0));  // offset 0 -> bucket 0
  CHECK(single[1].at(0, 0) == t.buckets.at(0, 1));

  // 3x3 hand-indexed: offset j-i -> bucket via the adopted scheme
  auto m = r3::bias_matrix(3, 3, t);
  for (std::size_t h = 0; h < 2; ++h) {
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        int bucket = oracle::relative_bucket_ref(j - i, true, 32, 128);
        CHECK(m[h].at(i, j) ==
              t.buckets.at(static_cast<std::size_t>(bucket), h));
      }
    }
  }

  // entries depend only on j - i: compare shifted windows
  auto big = r3::bias_matrix(12, 12, t);
  for (std::size_t i = 0; i + 3 < 12; ++i) {
    for (std::size_t j = 0; j + 3 < 12; ++j) {
      CHECK(big[0].at(i, j) == big[0].at(i + 3, j + 3));
    }
  }

  CHECK_THROWS_AS(r3::bias_matrix(0, 3, t), std::invalid_argument);
}

TEST_CASE("bias matrix gradient accumulates per bucket occurrence") {
  r3::Rng rng(16);
  BiasTable t = BiasTable::make(1, false, rng);
  auto m = r3::bias_matrix(4, 4, t);
  r3::backward(r3::sum(m[0]));
  // causal 4x4: offsets j-i>0 (6 cells) land in bucket 0 along with the
  // diagonal (4 cells); buckets 1..3 get 3, 2, 1 cells.
  const auto& g = t.buckets.grad();
  CHECK(g[0] == 10.0);
  CHECK(g[1] == 3.0);
  CHECK(g[2] == 2.0);
  CHECK(g[3] == 1.0);
}
