#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "r3/rng.hpp"
#include "r3/tensor.hpp"

namespace r3 {

// Learnable role dictionary, one per attention layer, shared by all heads.
// Rows are stored raw and L2-normalized at lookup so loss gradients update
// the raw rows directly.
struct RoleCodebook {
  Tensor e;  // K x d_k
  double similarity_dropout_rate = 0.1;

  static RoleCodebook make(std::size_t k, std::size_t d_k, Rng& rng,
                           double similarity_dropout_rate = 0.1,
                           double stddev = 0.02);
};

// Per-head projection weights for one branch (no bias terms). The two
// branches of a layer never share these.
struct BranchWeights {
  std::vector<Tensor> wq, wk, wv;  // H entries, each d_model x d_k

  static BranchWeights make(std::size_t d_model, std::size_t heads,
                            std::size_t d_k, Rng& rng, double stddev = 0.02);
};

struct HeadProjections {
  std::vector<Tensor> q, k, v;  // H entries, each len x d_k
};

HeadProjections project_qkv(const Tensor& q_in, const Tensor& k_in,
                            const Tensor& v_in, const BranchWeights& w);

// Scaled dot-product attention: softmax(Q K^T / sqrt(d_k)) V, optionally
// causally masked.
Tensor special_relativity(const Tensor& q, const Tensor& k, const Tensor& v,
                          bool causal = false);

// Bias-modulated attention: softmax(Q K^T + bias) V with no sqrt(d_k)
// normalization; the bias carries all positional information.
Tensor general_relativity(const Tensor& q, const Tensor& k, const Tensor& v,
                          const Tensor& bias, bool causal);

// One head's role assignment. z_q forwards the selected (normalized)
// codebook rows; its backward is the identity onto x. loss_sum is the
// token-summed dictionary + commitment loss (caller averages).
struct QuantizeResult {
  Tensor z_q;                // len x d_k
  std::vector<int> indices;  // len
  Tensor loss_sum;           // scalar
};

// Gradient-check seam. Quantization is only piecewise differentiable: the
// role argmax is hard and the loss stop-gradients freeze values, so a naive
// finite-difference probe of the raw forward measures a different function
// than the one backward() differentiates. Capturing a freeze on the base
// run and replaying it pins the argmax choices and the stop-gradient
// snapshots across probe evaluations; the probed function then IS the
// estimator the backward pass implements, and finite differences apply.
struct QuantizeFreeze {
  std::vector<int> indices;
  Tensor xn_const;     // normalized input rows at the base point
  Tensor e_sel_const;  // selected normalized codebook rows at the base point
  Tensor ste_offset;   // e_sel - x at the base point: replayed z_q = x + offset
};

struct FreezePlan {
  bool capturing = true;
  std::size_t cursor = 0;  // replay position when !capturing
  std::vector<QuantizeFreeze> slots;
};

QuantizeResult quantize(const Tensor& x, const RoleCodebook& codebook,
                        bool training, Rng& rng, double beta = 0.25,
                        FreezePlan* plan = nullptr);

// Per-head Hadamard binding of the two branches, heads concatenated and
// linearly merged: R = concat_h(Z^h ⊙ G^h) W_o.
Tensor r3_bind(const std::vector<Tensor>& z_heads,
               const std::vector<Tensor>& g_heads, const Tensor& w_o);

// Role-usage diagnostics over a batch of selections.
struct CodebookStats {
  std::vector<std::size_t> histogram;  // K counts
  double perplexity = 0.0;             // exp(entropy) of empirical usage
};

CodebookStats codebook_stats(const std::vector<int>& indices, std::size_t k);

// What the special branch contributes to the Hadamard binding.
enum class SrMode {
  quantized,  // bind the straight-through role vectors (the full mechanism)
  raw,        // bind the pre-quantization attention output (ablation)
  ones,       // bind nothing: layer degenerates to the bias branch alone
};

SrMode sr_mode_from_string(const std::string& s);
std::string sr_mode_to_string(SrMode m);

// One full attention layer: two independently projected branches bound by a
// Hadamard product. Positional embeddings enter only the special branch;
// the general branch sees only the relative bias.
class R3AttentionLayer {
 public:
  R3AttentionLayer(std::size_t d_model, std::size_t heads, std::size_t d_k,
                   std::size_t k_roles, double similarity_dropout, double beta,
                   Rng& rng);

  struct Output {
    Tensor out;                            // len_q x d_model
    std::vector<std::vector<int>> roles;   // H x len_q (empty in ones mode)
    Tensor loss_sum;                       // scalar, token-head-summed
    std::size_t token_heads = 0;           // divisor contribution (len_q * H)
  };

  // q_pos/k_pos may be undefined Tensors when a stream carries no absolute
  // positions; bias holds one len_q x len_k matrix per head.
  Output forward(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                 const Tensor& q_pos, const Tensor& k_pos,
                 const std::vector<Tensor>& bias, bool causal, SrMode mode,
                 bool training, Rng& rng, FreezePlan* plan = nullptr) const;

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Tensor&)>& fn);

  std::size_t heads() const { return heads_; }
  std::size_t d_k() const { return d_k_; }
  const RoleCodebook& codebook() const { return codebook_; }
  double beta() const { return beta_; }

 private:
  std::size_t d_model_, heads_, d_k_;
  double beta_;
  BranchWeights special_, general_;
  Tensor w_o_;  // (H*d_k) x d_model
  RoleCodebook codebook_;
};

}  // namespace r3
