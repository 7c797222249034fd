#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "r3/attention.hpp"
#include "r3/positional.hpp"
#include "r3/rng.hpp"
#include "r3/tensor.hpp"
#include "r3/token.hpp"

namespace r3 {

// Special token ids, fixed across the whole pipeline. Beginning-of-sentence
// reuses the pad id.
constexpr int kPadId = 0;
constexpr int kEosId = 1;
constexpr int kMaskId = 2;

struct R3Config {
  std::size_t d_model = 128;
  std::size_t d_k = 32;
  std::size_t heads = 4;
  std::size_t k_roles = 64;
  double beta = 0.25;
  int n_grid = 4;
  int t_video = 50;
  int l_text = 50;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t vocab_size = 0;  // set from the vocabulary
  std::size_t d_feat = 32;
  std::size_t ff_width = 256;
  double mask_rate = 0.15;
  double dropout = 0.1;
  double similarity_dropout = 0.1;
  double learning_rate = 3e-4;
  std::uint64_t seed = 1;

  void validate() const;  // throws std::invalid_argument on bad combinations

  // key=value lines, one per field; used by checkpoints and run configs
  std::string to_text() const;
  static R3Config from_text(const std::string& text);
};

// One training/eval example. Features are a plain len_v x d_feat value
// tensor; the caption is token ids ending with eos.
struct CaptionExample {
  std::vector<VoxelToken> video;
  Tensor features;
  std::vector<int> caption;
};

// Replaces non-special caption positions by the mask id with the given
// probability. Deterministic under the rng state.
std::vector<int> mask_text(const std::vector<int>& ids, double rate, Rng& rng);

// Role selections of one quantize site during a forward pass.
struct SiteOutput {
  std::string site;                     // "enc0", "dec1.self", "dec0.cross", ...
  std::vector<std::vector<int>> roles;  // heads x positions
  Tensor loss_sum;                      // token-head-summed quantization loss
  std::size_t token_heads = 0;
};

struct ForwardResult {
  Tensor logits;                  // len_t x vocab
  Tensor enc_states;              // len_v x d_model
  std::vector<SiteOutput> sites;  // every quantize site, fixed order
};

struct LossRecord {
  Tensor total, ce, l_q;  // scalars on the graph
  std::size_t tokens = 0;  // ce-active positions
};

// Greedy generation output: emitted ids (eos excluded) plus, per emitted
// token, the role chosen at the predicting position of every decoder site,
// and the per-video-token roles of every encoder site.
struct Generation {
  std::vector<int> ids;
  std::vector<std::map<std::string, std::vector<int>>> step_roles;  // per token: site -> head roles
  std::map<std::string, std::vector<std::vector<int>>> encoder_roles;  // site -> heads x len_v
};

// Full encoder-decoder captioner. Every forward is per-example (variable
// lengths, no padding positions anywhere).
class R3Model {
 public:
  R3Model(const R3Config& config, Rng& init_rng);

  const R3Config& config() const { return config_; }

  // Video side. Throws on an empty token list.
  struct Encoded {
    Tensor states;     // len_v x d_model
    Tensor video_pos;  // len_v x d_model (reused by cross attention)
  };
  Encoded encode(const std::vector<VoxelToken>& video, const Tensor& features,
                 SrMode mode, bool training, Rng& rng,
                 std::vector<SiteOutput>* sites = nullptr,
                 FreezePlan* plan = nullptr) const;

  // Text side: input ids are shifted right internally (bos = pad id).
  Tensor decoder_forward(const std::vector<int>& masked_ids,
                         const Encoded& enc, SrMode mode, bool training,
                         Rng& rng, std::vector<SiteOutput>* sites = nullptr,
                         FreezePlan* plan = nullptr) const;

  ForwardResult forward(const CaptionExample& ex,
                        const std::vector<int>& masked_caption, SrMode mode,
                        bool training, Rng& rng,
                        FreezePlan* plan = nullptr) const;

  // Joint objective on explicit masked inputs: ce averaged over all caption
  // positions of the batch, plus the per-example-averaged sum of per-site
  // mean quantization losses. total = ce + l_q.
  LossRecord loss_on(const std::vector<CaptionExample>& batch,
                     const std::vector<std::vector<int>>& masked, SrMode mode,
                     bool training, Rng& rng, FreezePlan* plan = nullptr) const;

  // Masks each caption with config.mask_rate, then loss_on.
  LossRecord training_loss(const std::vector<CaptionExample>& batch,
                           SrMode mode, bool training, Rng& rng) const;

  Generation generate_greedy(const std::vector<VoxelToken>& video,
                             const Tensor& features, std::size_t max_len,
                             SrMode mode) const;

  // Deterministic traversal of every learnable tensor.
  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);

  std::vector<Tensor*> params();  // traversal order
  std::vector<std::string> param_names();

 private:
  struct EncoderLayer {
    R3AttentionLayer attn;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor ff_w1, ff_b1, ff_w2, ff_b2;
  };
  struct DecoderLayer {
    R3AttentionLayer self_attn;
    R3AttentionLayer cross_attn;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
    Tensor ff_w1, ff_b1, ff_w2, ff_b2;
  };

  Tensor feed_forward(const Tensor& x, const Tensor& w1, const Tensor& b1,
                      const Tensor& w2, const Tensor& b2) const;
  Tensor sublayer(const Tensor& x, const Tensor& delta, const Tensor& g,
                  const Tensor& b, bool training, Rng& rng) const;

  R3Config config_;
  SpatioTemporalTables tables_;
  BiasTable bias_enc_, bias_dec_self_, bias_dec_cross_;
  Tensor feat_w_, feat_b_;
  Tensor embed_;  // vocab x d_model
  std::vector<EncoderLayer> enc_;
  std::vector<DecoderLayer> dec_;
  Tensor head_w_, head_b_;
};

// Adam with a fixed learning rate; moments live here, aligned with the
// model's parameter traversal order.
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(const std::vector<Tensor*>& params);  // applies grads in place
  std::uint64_t steps_taken() const { return t_; }

  // checkpoint plumbing
  void save(std::ostream& os) const;
  void load(std::istream& is, const std::vector<Tensor*>& params);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Owns the deterministic training loop state: model parameters, optimizer
// moments, the training rng stream, and the step counter.
class Trainer {
 public:
  Trainer(R3Model& model, double learning_rate, std::uint64_t seed);

  struct StepRecord {
    std::uint64_t step = 0;
    double total = 0.0, ce = 0.0, l_q = 0.0;
  };

  // One optimization step; throws on non-finite loss.
  StepRecord train_step(const std::vector<CaptionExample>& batch, SrMode mode);

  std::uint64_t step() const { return step_; }
  Rng& rng() { return rng_; }

  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);  // must match the model shape

 private:
  R3Model& model_;
  std::vector<Tensor*> params_;
  std::vector<std::string> names_;
  Adam adam_;
  Rng rng_;
  std::uint64_t step_ = 0;
};

}  // namespace r3
