#include "r3/positional.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace r3 {

namespace {

int floor_cell(double v, int n) {
  int cell = static_cast<int>(std::floor(v * n));
  if (cell >= n) cell = n - 1;  // closed upper boundary (v == 1)
  if (cell < 0) cell = 0;
  return cell;
}

}  // namespace

Indices3 spatiotemporal_index(int t, const Box& box, int n_grid, int t_max) {
  if (t < 0 || t >= t_max) {
    throw std::out_of_range("spatiotemporal_index: t=" + std::to_string(t) +
                            " outside [0, " + std::to_string(t_max) + ")");
  }
  auto in_unit = [](double lo, double hi) {
    return 0.0 <= lo && lo <= hi && hi <= 1.0;
  };
  if (!in_unit(box.x0, box.x1) || !in_unit(box.y0, box.y1)) {
    throw std::out_of_range("spatiotemporal_index: box outside unit square");
  }
  const double cy = 0.5 * (box.y0 + box.y1);
  const double cx = 0.5 * (box.x0 + box.x1);
  const double ly = std::fabs(box.y1 - box.y0);
  const double lx = std::fabs(box.x1 - box.x0);
  Indices3 out;
  out.t_idx = t;
  out.rc_idx = floor_cell(cy, n_grid) * n_grid + floor_cell(cx, n_grid);
  out.rs_idx = floor_cell(ly, n_grid) * n_grid + floor_cell(lx, n_grid);
  return out;
}

SpatioTemporalTables SpatioTemporalTables::make(std::size_t d_model, int n_grid,
                                                int t_max, int l_text, Rng& rng,
                                                double stddev) {
  SpatioTemporalTables t;
  t.n_grid = n_grid;
  t.t_max = t_max;
  t.l_text = l_text;
  const auto cells = static_cast<std::size_t>(n_grid) * n_grid;
  t.e_t = Tensor::randn({static_cast<std::size_t>(t_max), d_model}, rng, stddev);
  t.e_rc = Tensor::randn({cells, d_model}, rng, stddev);
  t.e_rs = Tensor::randn({cells, d_model}, rng, stddev);
  t.e_text =
      Tensor::randn({static_cast<std::size_t>(l_text), d_model}, rng, stddev);
  for (Tensor* p : {&t.e_t, &t.e_rc, &t.e_rs, &t.e_text}) {
    p->set_requires_grad(true);
  }
  return t;
}

Tensor encode_video_positions(const std::vector<VoxelToken>& tokens,
                              const SpatioTemporalTables& tables) {
  std::vector<int> ti, rci, rsi;
  ti.reserve(tokens.size());
  rci.reserve(tokens.size());
  rsi.reserve(tokens.size());
  for (const auto& tok : tokens) {
    Indices3 ix =
        spatiotemporal_index(tok.t, tok.box, tables.n_grid, tables.t_max);
    ti.push_back(ix.t_idx);
    rci.push_back(ix.rc_idx);
    rsi.push_back(ix.rs_idx);
  }
  return add(add(gather_rows(tables.e_t, ti), gather_rows(tables.e_rc, rci)),
             gather_rows(tables.e_rs, rsi));
}

Tensor encode_text_positions(std::size_t length,
                             const SpatioTemporalTables& tables) {
  if (length > static_cast<std::size_t>(tables.l_text)) {
    throw std::out_of_range("encode_text_positions: length " +
                            std::to_string(length) + " exceeds table size " +
                            std::to_string(tables.l_text));
  }
  std::vector<int> rows(length);
  for (std::size_t i = 0; i < length; ++i) rows[i] = static_cast<int>(i);
  return gather_rows(tables.e_text, rows);
}

int relative_bucket(int offset, int num_buckets, int max_distance,
                    bool bidirectional) {
  // offset = key position - query position; n counts how far back the key is
  int n = -offset;
  int bucket = 0;
  if (bidirectional) {
    num_buckets /= 2;
    if (n < 0) {
      bucket += num_buckets;
      n = -n;
    }
  } else {
    n = std::max(n, 0);
  }
  const int max_exact = num_buckets / 2;
  if (n < max_exact) return bucket + n;
  int large = max_exact +
              static_cast<int>(std::log(static_cast<double>(n) / max_exact) /
                               std::log(static_cast<double>(max_distance) /
                                        max_exact) *
                               (num_buckets - max_exact));
  return bucket + std::min(large, num_buckets - 1);
}

BiasTable BiasTable::make(std::size_t heads, bool bidirectional, Rng& rng,
                          int num_buckets, int max_distance, double stddev) {
  BiasTable t;
  t.num_buckets = num_buckets;
  t.max_distance = max_distance;
  t.bidirectional = bidirectional;
  t.buckets =
      Tensor::randn({static_cast<std::size_t>(num_buckets), heads}, rng, stddev);
  t.buckets.set_requires_grad(true);
  return t;
}

std::vector<Tensor> bias_matrix(std::size_t len_q, std::size_t len_k,
                                const BiasTable& table) {
  if (len_q == 0 || len_k == 0) {
    throw std::invalid_argument("bias_matrix: lengths must be positive");
  }
  std::vector<int> cells(len_q * len_k);
  for (std::size_t i = 0; i < len_q; ++i) {
    for (std::size_t j = 0; j < len_k; ++j) {
      cells[i * len_k + j] = relative_bucket(
          static_cast<int>(j) - static_cast<int>(i), table.num_buckets,
          table.max_distance, table.bidirectional);
    }
  }
  Tensor rows = gather_rows(table.buckets, cells);  // (len_q*len_k) x H
  const std::size_t heads = table.buckets.cols();
  std::vector<Tensor> out;
  out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    out.push_back(reshape(slice_cols(rows, h, 1), {len_q, len_k}));
  }
  return out;
}

}  // namespace r3
