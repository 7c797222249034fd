#pragma once

#include <cstddef>
#include <vector>

#include "r3/rng.hpp"
#include "r3/tensor.hpp"
#include "r3/token.hpp"

namespace r3 {

// Bucketed indices for one video token: temporal slot, region-center cell,
// region-size cell. Center/size cells live on an N x N grid.
struct Indices3 {
  int t_idx = 0;
  int rc_idx = 0;
  int rs_idx = 0;
};

// Computes (t, floor(Cy*N)*N + floor(Cx*N), floor(Ly*N)*N + floor(Lx*N))
// where C is the box center and L its side lengths; floors clamp to N-1 so
// the closed upper boundary stays in-table.
Indices3 spatiotemporal_index(int t, const Box& box, int n_grid, int t_max);

// Learnable lookup tables for absolute positions. Video rows are the sum of
// a temporal row, a region-center row, and a region-size row; text tokens
// use their own temporal table.
struct SpatioTemporalTables {
  Tensor e_t;     // t_max x d_model
  Tensor e_rc;    // n_grid^2 x d_model
  Tensor e_rs;    // n_grid^2 x d_model
  Tensor e_text;  // l_text x d_model
  int n_grid = 4;
  int t_max = 50;
  int l_text = 50;

  static SpatioTemporalTables make(std::size_t d_model, int n_grid, int t_max,
                                   int l_text, Rng& rng, double stddev = 0.02);
};

Tensor encode_video_positions(const std::vector<VoxelToken>& tokens,
                              const SpatioTemporalTables& tables);

Tensor encode_text_positions(std::size_t length,
                             const SpatioTemporalTables& tables);

// Maps a relative offset (key position minus query position) to one of
// num_buckets ids: exact for small distances, logarithmically spaced up to
// max_distance, saturating beyond. Bidirectional mode splits the range by
// sign; causal mode sends all future offsets to bucket 0.
int relative_bucket(int offset, int num_buckets, int max_distance,
                    bool bidirectional);

// One learnable scalar per (bucket, head). Three of these exist per model:
// encoder self-attention, decoder self-attention, decoder cross-attention.
struct BiasTable {
  Tensor buckets;  // num_buckets x heads
  int num_buckets = 32;
  int max_distance = 128;
  bool bidirectional = true;

  static BiasTable make(std::size_t heads, bool bidirectional, Rng& rng,
                        int num_buckets = 32, int max_distance = 128,
                        double stddev = 0.02);
};

// Per-head len_q x len_k bias matrices; entry (i, j) reads the table row for
// relative_bucket(j - i). Gradient flows back into the bucket table.
std::vector<Tensor> bias_matrix(std::size_t len_q, std::size_t len_k,
                                const BiasTable& table);

}  // namespace r3
