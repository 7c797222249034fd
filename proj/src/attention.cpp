#include "r3/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace r3 {

namespace {

constexpr double kMaskValue = -1e30;  // exp() underflows to exactly 0

Tensor causal_mask(std::size_t len_q, std::size_t len_k) {
  if (len_q != len_k) {
    throw std::invalid_argument(
        "causal attention requires a square score matrix, got " +
        std::to_string(len_q) + "x" + std::to_string(len_k));
  }
  std::vector<double> m(len_q * len_k, 0.0);
  for (std::size_t i = 0; i < len_q; ++i) {
    for (std::size_t j = i + 1; j < len_k; ++j) m[i * len_k + j] = kMaskValue;
  }
  return Tensor::from_data({len_q, len_k}, std::move(m));
}

void check_context(const Tensor& k, const Tensor& v, const char* op) {
  if (k.rows() == 0) {
    throw std::invalid_argument(std::string(op) + ": empty key/value context");
  }
  if (k.rows() != v.rows()) {
    throw std::invalid_argument(std::string(op) + ": key length " +
                                std::to_string(k.rows()) +
                                " != value length " + std::to_string(v.rows()));
  }
}

}  // namespace

RoleCodebook RoleCodebook::make(std::size_t k, std::size_t d_k, Rng& rng,
                                double similarity_dropout_rate, double stddev) {
  RoleCodebook c;
  c.e = Tensor::randn({k, d_k}, rng, stddev);
  c.e.set_requires_grad(true);
  c.similarity_dropout_rate = similarity_dropout_rate;
  return c;
}

BranchWeights BranchWeights::make(std::size_t d_model, std::size_t heads,
                                  std::size_t d_k, Rng& rng, double stddev) {
  BranchWeights w;
  for (std::size_t h = 0; h < heads; ++h) {
    w.wq.push_back(Tensor::randn({d_model, d_k}, rng, stddev));
    w.wk.push_back(Tensor::randn({d_model, d_k}, rng, stddev));
    w.wv.push_back(Tensor::randn({d_model, d_k}, rng, stddev));
    w.wq.back().set_requires_grad(true);
    w.wk.back().set_requires_grad(true);
    w.wv.back().set_requires_grad(true);
  }
  return w;
}

HeadProjections project_qkv(const Tensor& q_in, const Tensor& k_in,
                            const Tensor& v_in, const BranchWeights& w) {
  HeadProjections p;
  for (std::size_t h = 0; h < w.wq.size(); ++h) {
    p.q.push_back(matmul(q_in, w.wq[h]));
    p.k.push_back(matmul(k_in, w.wk[h]));
    p.v.push_back(matmul(v_in, w.wv[h]));
  }
  return p;
}

Tensor special_relativity(const Tensor& q, const Tensor& k, const Tensor& v,
                          bool causal) {
  check_context(k, v, "special_relativity");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt);
  if (causal) scores = add(scores, causal_mask(q.rows(), k.rows()));
  return matmul(softmax(scores, 1), v);
}

Tensor general_relativity(const Tensor& q, const Tensor& k, const Tensor& v,
                          const Tensor& bias, bool causal) {
  check_context(k, v, "general_relativity");
  if (bias.shape() != Shape{q.rows(), k.rows()}) {
    throw std::invalid_argument("general_relativity: bias shape " +
                                shape_str(bias.shape()) +
                                " does not match scores " +
                                shape_str({q.rows(), k.rows()}));
  }
  Tensor scores = add(matmul(q, transpose(k)), bias);
  if (causal) scores = add(scores, causal_mask(q.rows(), k.rows()));
  return matmul(softmax(scores, 1), v);
}

QuantizeResult quantize(const Tensor& x, const RoleCodebook& codebook,
                        bool training, Rng& rng, double beta,
                        FreezePlan* plan) {
  if (x.cols() != codebook.e.cols()) {
    throw std::invalid_argument("quantize: input width " +
                                std::to_string(x.cols()) +
                                " != codebook width " +
                                std::to_string(codebook.e.cols()));
  }
  const std::size_t len = x.rows(), d = x.cols(), k = codebook.e.rows();

  Tensor xn = normalize_rows(x);
  Tensor en = normalize_rows(codebook.e);

  const QuantizeFreeze* replay = nullptr;
  if (plan && !plan->capturing) {
    if (plan->cursor >= plan->slots.size()) {
      throw std::logic_error("quantize: freeze replay ran past its capture");
    }
    replay = &plan->slots[plan->cursor++];
  }

  std::vector<int> indices;
  if (replay) {
    indices = replay->indices;
  } else {
    // Role choice is a hard argmax over similarities; it never carries
    // gradient, so the scores are computed outside the graph.
    const auto& xv = xn.data();
    const auto& ev = en.data();
    const double rate = codebook.similarity_dropout_rate;
    const bool drop = training && rate > 0.0;
    indices.resize(len);
    std::vector<char> kept(drop ? k : 0);
    for (std::size_t i = 0; i < len; ++i) {
      bool any_kept = false;
      if (drop) {
        for (std::size_t j = 0; j < k; ++j) {
          kept[j] = rng.uniform() >= rate ? 1 : 0;
          any_kept = any_kept || kept[j];
        }
      }
      int best = -1;
      double best_sim = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        // a token whose every similarity is dropped falls back to the full set
        if (drop && any_kept && !kept[j]) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += ev[j * d + c] * xv[i * d + c];
        if (best < 0 || s > best_sim) {  // strict >: ties keep the lowest index
          best = static_cast<int>(j);
          best_sim = s;
        }
      }
      indices[i] = best;
    }
  }

  Tensor e_sel = gather_rows(en, indices);

  QuantizeResult out;
  out.indices = indices;
  // Under replay every stop-gradient slot is pinned to its base-point
  // snapshot and the straight-through output becomes x + const, so probes
  // measure exactly the function backward() differentiates.
  Tensor sg_xn = replay ? replay->xn_const : detach(xn);
  Tensor sg_e = replay ? replay->e_sel_const : detach(e_sel);
  out.z_q = replay ? add(x, replay->ste_offset) : straight_through(x, e_sel);
  Tensor d_dict = sub(sg_xn, e_sel);   // updates the dictionary rows
  Tensor d_commit = sub(sg_e, xn);     // pulls x toward its role
  out.loss_sum =
      add(sum(mul(d_dict, d_dict)), scale(sum(mul(d_commit, d_commit)), beta));

  if (plan && plan->capturing) {
    plan->slots.push_back(QuantizeFreeze{indices, detach(xn), detach(e_sel),
                                         detach(sub(e_sel, x))});
  }
  return out;
}

Tensor r3_bind(const std::vector<Tensor>& z_heads,
               const std::vector<Tensor>& g_heads, const Tensor& w_o) {
  if (z_heads.size() != g_heads.size() || z_heads.empty()) {
    throw std::invalid_argument("r3_bind: branch head counts disagree");
  }
  std::vector<Tensor> bound;
  bound.reserve(z_heads.size());
  for (std::size_t h = 0; h < z_heads.size(); ++h) {
    if (z_heads[h].shape() != g_heads[h].shape()) {
      throw std::invalid_argument("r3_bind: head " + std::to_string(h) +
                                  " shapes disagree, " +
                                  shape_str(z_heads[h].shape()) + " vs " +
                                  shape_str(g_heads[h].shape()));
    }
    bound.push_back(mul(z_heads[h], g_heads[h]));
  }
  return matmul(concat_cols(bound), w_o);
}

CodebookStats codebook_stats(const std::vector<int>& indices, std::size_t k) {
  if (indices.empty()) {
    throw std::invalid_argument("codebook_stats: empty index list");
  }
  CodebookStats s;
  s.histogram.assign(k, 0);
  for (int idx : indices) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= k) {
      throw std::out_of_range("codebook_stats: index " + std::to_string(idx) +
                              " outside [0, " + std::to_string(k) + ")");
    }
    ++s.histogram[static_cast<std::size_t>(idx)];
  }
  double entropy = 0.0;
  const double n = static_cast<double>(indices.size());
  for (std::size_t count : s.histogram) {
    if (count == 0) continue;
    const double p = static_cast<double>(count) / n;
    entropy -= p * std::log(p);
  }
  s.perplexity = std::exp(entropy);
  return s;
}

SrMode sr_mode_from_string(const std::string& s) {
  if (s == "quantized") return SrMode::quantized;
  if (s == "raw") return SrMode::raw;
  if (s == "ones") return SrMode::ones;
  throw std::invalid_argument("unknown sr mode: " + s +
                              " (expected quantized|raw|ones)");
}

std::string sr_mode_to_string(SrMode m) {
  switch (m) {
    case SrMode::quantized: return "quantized";
    case SrMode::raw: return "raw";
    case SrMode::ones: return "ones";
  }
  throw std::logic_error("unreachable sr mode");
}

R3AttentionLayer::R3AttentionLayer(std::size_t d_model, std::size_t heads,
                                   std::size_t d_k, std::size_t k_roles,
                                   double similarity_dropout, double beta,
                                   Rng& rng)
    : d_model_(d_model), heads_(heads), d_k_(d_k), beta_(beta) {
  if (d_model != heads * d_k) {
    throw std::invalid_argument("attention layer: d_model " +
                                std::to_string(d_model) + " != heads*d_k " +
                                std::to_string(heads * d_k));
  }
  special_ = BranchWeights::make(d_model, heads, d_k, rng);
  general_ = BranchWeights::make(d_model, heads, d_k, rng);
  w_o_ = Tensor::randn({heads * d_k, d_model}, rng, 0.02);
  w_o_.set_requires_grad(true);
  codebook_ = RoleCodebook::make(k_roles, d_k, rng, similarity_dropout);
}

R3AttentionLayer::Output R3AttentionLayer::forward(
    const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
    const Tensor& q_pos, const Tensor& k_pos, const std::vector<Tensor>& bias,
    bool causal, SrMode mode, bool training, Rng& rng,
    FreezePlan* plan) const {
  if (bias.size() != heads_) {
    throw std::invalid_argument("attention layer: expected " +
                                std::to_string(heads_) + " bias heads, got " +
                                std::to_string(bias.size()));
  }

  Output out;
  out.loss_sum = Tensor::scalar(0.0);

  // bias branch reads the raw streams; absolute positions never enter it
  HeadProjections pg = project_qkv(q_in, k_in, v_in, general_);
  std::vector<Tensor> g_heads;
  g_heads.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    g_heads.push_back(
        general_relativity(pg.q[h], pg.k[h], pg.v[h], bias[h], causal));
  }

  if (mode == SrMode::ones) {
    // binding against all-ones is the identity on the bias branch; skip the
    // role branch entirely so this is exactly a bias-only attention layer
    out.out = matmul(concat_cols(g_heads), w_o_);
    out.token_heads = 0;
    return out;
  }

  Tensor q_s = q_pos.defined() ? add(q_in, q_pos) : q_in;
  Tensor k_s = k_pos.defined() ? add(k_in, k_pos) : k_in;
  Tensor v_s = k_pos.defined() ? add(v_in, k_pos) : v_in;
  HeadProjections ps = project_qkv(q_s, k_s, v_s, special_);

  std::vector<Tensor> z_heads;
  z_heads.reserve(heads_);
  out.roles.resize(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    Tensor xs = special_relativity(ps.q[h], ps.k[h], ps.v[h], causal);
    QuantizeResult qr = quantize(xs, codebook_, training, rng, beta_, plan);
    z_heads.push_back(mode == SrMode::raw ? xs : qr.z_q);
    out.roles[h] = std::move(qr.indices);
    out.loss_sum = add(out.loss_sum, qr.loss_sum);
  }
  out.token_heads = q_in.rows() * heads_;
  out.out = r3_bind(z_heads, g_heads, w_o_);
  return out;
}

void R3AttentionLayer::visit_params(
    const std::string& prefix,
    const std::function<void(const std::string&, Tensor&)>& fn) {
  for (std::size_t h = 0; h < heads_; ++h) {
    const std::string hs = std::to_string(h);
    fn(prefix + ".sr.h" + hs + ".wq", special_.wq[h]);
    fn(prefix + ".sr.h" + hs + ".wk", special_.wk[h]);
    fn(prefix + ".sr.h" + hs + ".wv", special_.wv[h]);
    fn(prefix + ".gr.h" + hs + ".wq", general_.wq[h]);
    fn(prefix + ".gr.h" + hs + ".wk", general_.wk[h]);
    fn(prefix + ".gr.h" + hs + ".wv", general_.wv[h]);
  }
  fn(prefix + ".wo", w_o_);
  fn(prefix + ".codebook", codebook_.e);
}

}  // namespace r3
