#include "r3/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "r3/serialize.hpp"

namespace r3 {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

constexpr char kCheckpointMagic[4] = {'R', '3', 'C', 'K'};
constexpr uint32_t kCheckpointVersion = 1;

}  // namespace

void R3Config::validate() const {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("config error: " + msg);
  };
  if (d_model != heads * d_k) {
    fail("d_model " + std::to_string(d_model) + " != heads*d_k " +
         std::to_string(heads * d_k));
  }
  if (vocab_size < 3) fail("vocab_size must cover pad/eos/mask ids");
  if (k_roles == 0) fail("k_roles must be positive");
  if (encoder_layers == 0 || decoder_layers == 0) {
    fail("need at least one encoder and one decoder layer");
  }
  if (n_grid <= 0 || t_video <= 0 || l_text <= 0) {
    fail("positional table sizes must be positive");
  }
  if (d_feat == 0 || ff_width == 0) fail("widths must be positive");
  if (mask_rate < 0.0 || mask_rate >= 1.0) fail("mask_rate outside [0, 1)");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout outside [0, 1)");
  if (similarity_dropout < 0.0 || similarity_dropout >= 1.0) {
    fail("similarity_dropout outside [0, 1)");
  }
  if (beta < 0.0) fail("beta must be nonnegative");
  if (learning_rate < 0.0) fail("learning_rate must be nonnegative");
}

std::string R3Config::to_text() const {
  std::ostringstream os;
  os << "d_model=" << d_model << "\n";
  os << "d_k=" << d_k << "\n";
  os << "heads=" << heads << "\n";
  os << "k_roles=" << k_roles << "\n";
  os << "beta=" << fmt_double(beta) << "\n";
  os << "n_grid=" << n_grid << "\n";
  os << "t_video=" << t_video << "\n";
  os << "l_text=" << l_text << "\n";
  os << "encoder_layers=" << encoder_layers << "\n";
  os << "decoder_layers=" << decoder_layers << "\n";
  os << "vocab_size=" << vocab_size << "\n";
  os << "d_feat=" << d_feat << "\n";
  os << "ff_width=" << ff_width << "\n";
  os << "mask_rate=" << fmt_double(mask_rate) << "\n";
  os << "dropout=" << fmt_double(dropout) << "\n";
  os << "similarity_dropout=" << fmt_double(similarity_dropout) << "\n";
  os << "learning_rate=" << fmt_double(learning_rate) << "\n";
  os << "seed=" << seed << "\n";
  return os.str();
}

R3Config R3Config::from_text(const std::string& text) {
  R3Config cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config error: malformed line '" + line + "'");
    }
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    try {
      if (key == "d_model") cfg.d_model = std::stoul(val);
      else if (key == "d_k") cfg.d_k = std::stoul(val);
      else if (key == "heads") cfg.heads = std::stoul(val);
      else if (key == "k_roles") cfg.k_roles = std::stoul(val);
      else if (key == "beta") cfg.beta = std::stod(val);
      else if (key == "n_grid") cfg.n_grid = std::stoi(val);
      else if (key == "t_video") cfg.t_video = std::stoi(val);
      else if (key == "l_text") cfg.l_text = std::stoi(val);
      else if (key == "encoder_layers") cfg.encoder_layers = std::stoul(val);
      else if (key == "decoder_layers") cfg.decoder_layers = std::stoul(val);
      else if (key == "vocab_size") cfg.vocab_size = std::stoul(val);
      else if (key == "d_feat") cfg.d_feat = std::stoul(val);
      else if (key == "ff_width") cfg.ff_width = std::stoul(val);
      else if (key == "mask_rate") cfg.mask_rate = std::stod(val);
      else if (key == "dropout") cfg.dropout = std::stod(val);
      else if (key == "similarity_dropout") cfg.similarity_dropout = std::stod(val);
      else if (key == "learning_rate") cfg.learning_rate = std::stod(val);
      else if (key == "seed") cfg.seed = std::stoull(val);
      else throw std::invalid_argument("config error: unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw;
    } catch (const std::exception&) {
      throw std::invalid_argument("config error: bad value for '" + key + "'");
    }
  }
  return cfg;
}

std::vector<int> mask_text(const std::vector<int>& ids, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("mask_text: rate outside [0, 1)");
  }
  std::vector<int> out = ids;
  for (int& id : out) {
    if (id == kPadId || id == kEosId || id == kMaskId) continue;
    if (rng.uniform() < rate) id = kMaskId;
  }
  return out;
}

// ---- model ------------------------------------------------------------------

R3Model::R3Model(const R3Config& config, Rng& init_rng) : config_(config) {
  config_.validate();
  tables_ = SpatioTemporalTables::make(config_.d_model, config_.n_grid,
                                       config_.t_video, config_.l_text,
                                       init_rng);
  bias_enc_ = BiasTable::make(config_.heads, /*bidirectional=*/true, init_rng);
  bias_dec_self_ =
      BiasTable::make(config_.heads, /*bidirectional=*/false, init_rng);
  bias_dec_cross_ =
      BiasTable::make(config_.heads, /*bidirectional=*/true, init_rng);

  feat_w_ = Tensor::randn({config_.d_feat, config_.d_model}, init_rng, 0.02);
  feat_b_ = Tensor::zeros({config_.d_model});
  embed_ = Tensor::randn({config_.vocab_size, config_.d_model}, init_rng, 0.02);
  for (Tensor* t : {&feat_w_, &feat_b_, &embed_}) t->set_requires_grad(true);

  auto make_ln = [&](Tensor& g, Tensor& b) {
    g = Tensor::ones({config_.d_model});
    b = Tensor::zeros({config_.d_model});
    g.set_requires_grad(true);
    b.set_requires_grad(true);
  };
  auto make_ff = [&](Tensor& w1, Tensor& b1, Tensor& w2, Tensor& b2) {
    w1 = Tensor::randn({config_.d_model, config_.ff_width}, init_rng, 0.02);
    b1 = Tensor::zeros({config_.ff_width});
    w2 = Tensor::randn({config_.ff_width, config_.d_model}, init_rng, 0.02);
    b2 = Tensor::zeros({config_.d_model});
    for (Tensor* t : {&w1, &b1, &w2, &b2}) t->set_requires_grad(true);
  };

  for (std::size_t i = 0; i < config_.encoder_layers; ++i) {
    enc_.push_back(EncoderLayer{
        R3AttentionLayer(config_.d_model, config_.heads, config_.d_k,
                         config_.k_roles, config_.similarity_dropout,
                         config_.beta, init_rng),
        {}, {}, {}, {}, {}, {}, {}, {}});
    auto& l = enc_.back();
    make_ln(l.ln1_g, l.ln1_b);
    make_ln(l.ln2_g, l.ln2_b);
    make_ff(l.ff_w1, l.ff_b1, l.ff_w2, l.ff_b2);
  }
  for (std::size_t i = 0; i < config_.decoder_layers; ++i) {
    dec_.push_back(DecoderLayer{
        R3AttentionLayer(config_.d_model, config_.heads, config_.d_k,
                         config_.k_roles, config_.similarity_dropout,
                         config_.beta, init_rng),
        R3AttentionLayer(config_.d_model, config_.heads, config_.d_k,
                         config_.k_roles, config_.similarity_dropout,
                         config_.beta, init_rng),
        {}, {}, {}, {}, {}, {}, {}, {}, {}, {}});
    auto& l = dec_.back();
    make_ln(l.ln1_g, l.ln1_b);
    make_ln(l.ln2_g, l.ln2_b);
    make_ln(l.ln3_g, l.ln3_b);
    make_ff(l.ff_w1, l.ff_b1, l.ff_w2, l.ff_b2);
  }

  head_w_ = Tensor::randn({config_.d_model, config_.vocab_size}, init_rng, 0.02);
  head_b_ = Tensor::zeros({config_.vocab_size});
  head_w_.set_requires_grad(true);
  head_b_.set_requires_grad(true);
}

Tensor R3Model::feed_forward(const Tensor& x, const Tensor& w1, const Tensor& b1,
                             const Tensor& w2, const Tensor& b2) const {
  return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2);
}

Tensor R3Model::sublayer(const Tensor& x, const Tensor& delta, const Tensor& g,
                         const Tensor& b, bool training, Rng& rng) const {
  Tensor d = dropout(delta, config_.dropout, rng, training);
  return layer_norm(add(x, d), g, b, 1e-5);
}

R3Model::Encoded R3Model::encode(const std::vector<VoxelToken>& video,
                                 const Tensor& features, SrMode mode,
                                 bool training, Rng& rng,
                                 std::vector<SiteOutput>* sites,
                                 FreezePlan* plan) const {
  if (video.empty()) {
    throw std::invalid_argument("encode: empty video token list");
  }
  if (features.shape() != Shape{video.size(), config_.d_feat}) {
    throw std::invalid_argument("encode: features shape " +
                                shape_str(features.shape()) + " != expected " +
                                shape_str({video.size(), config_.d_feat}));
  }
  Tensor x = add(matmul(features, feat_w_), feat_b_);
  Tensor vp = encode_video_positions(video, tables_);
  // relative bias: one lookup per stack, shared by every layer in it
  const auto bias = bias_matrix(video.size(), video.size(), bias_enc_);

  for (std::size_t i = 0; i < enc_.size(); ++i) {
    const auto& l = enc_[i];
    auto a = l.attn.forward(x, x, x, vp, vp, bias, /*causal=*/false, mode,
                            training, rng, plan);
    if (sites && a.token_heads > 0) {
      sites->push_back(SiteOutput{"enc" + std::to_string(i), a.roles,
                                  a.loss_sum, a.token_heads});
    }
    x = sublayer(x, a.out, l.ln1_g, l.ln1_b, training, rng);
    Tensor ff = feed_forward(x, l.ff_w1, l.ff_b1, l.ff_w2, l.ff_b2);
    x = sublayer(x, ff, l.ln2_g, l.ln2_b, training, rng);
  }
  return Encoded{x, vp};
}

Tensor R3Model::decoder_forward(const std::vector<int>& masked_ids,
                                const Encoded& enc, SrMode mode, bool training,
                                Rng& rng, std::vector<SiteOutput>* sites,
                                FreezePlan* plan) const {
  const std::size_t len = masked_ids.size();
  if (len == 0) {
    throw std::invalid_argument("decoder_forward: empty caption");
  }
  if (len > static_cast<std::size_t>(config_.l_text)) {
    throw std::out_of_range("decoder_forward: caption length " +
                            std::to_string(len) + " exceeds limit " +
                            std::to_string(config_.l_text));
  }
  // teacher-forced input: bos (= pad id) then the masked ids, last dropped
  std::vector<int> input(len);
  input[0] = kPadId;
  for (std::size_t i = 1; i < len; ++i) input[i] = masked_ids[i - 1];

  Tensor x = gather_rows(embed_, input);
  Tensor tp = encode_text_positions(len, tables_);
  const auto self_bias = bias_matrix(len, len, bias_dec_self_);
  const auto cross_bias =
      bias_matrix(len, enc.states.rows(), bias_dec_cross_);

  for (std::size_t i = 0; i < dec_.size(); ++i) {
    const auto& l = dec_[i];
    auto s = l.self_attn.forward(x, x, x, tp, tp, self_bias, /*causal=*/true,
                                 mode, training, rng, plan);
    if (sites && s.token_heads > 0) {
      sites->push_back(SiteOutput{"dec" + std::to_string(i) + ".self", s.roles,
                                  s.loss_sum, s.token_heads});
    }
    x = sublayer(x, s.out, l.ln1_g, l.ln1_b, training, rng);

    auto c = l.cross_attn.forward(x, enc.states, enc.states, tp, enc.video_pos,
                                  cross_bias, /*causal=*/false, mode, training,
                                  rng, plan);
    if (sites && c.token_heads > 0) {
      sites->push_back(SiteOutput{"dec" + std::to_string(i) + ".cross",
                                  c.roles, c.loss_sum, c.token_heads});
    }
    x = sublayer(x, c.out, l.ln2_g, l.ln2_b, training, rng);

    Tensor ff = feed_forward(x, l.ff_w1, l.ff_b1, l.ff_w2, l.ff_b2);
    x = sublayer(x, ff, l.ln3_g, l.ln3_b, training, rng);
  }
  return add(matmul(x, head_w_), head_b_);
}

ForwardResult R3Model::forward(const CaptionExample& ex,
                               const std::vector<int>& masked_caption,
                               SrMode mode, bool training, Rng& rng,
                               FreezePlan* plan) const {
  ForwardResult r;
  Encoded enc = encode(ex.video, ex.features, mode, training, rng, &r.sites,
                       plan);
  r.enc_states = enc.states;
  r.logits = decoder_forward(masked_caption, enc, mode, training, rng,
                             &r.sites, plan);
  return r;
}

LossRecord R3Model::loss_on(const std::vector<CaptionExample>& batch,
                            const std::vector<std::vector<int>>& masked,
                            SrMode mode, bool training, Rng& rng,
                            FreezePlan* plan) const {
  if (batch.empty()) throw std::invalid_argument("loss_on: empty batch");
  if (masked.size() != batch.size()) {
    throw std::invalid_argument("loss_on: mask count != batch size");
  }
  Tensor ce_sum;  // token-summed cross entropy across the batch
  Tensor lq_sum = Tensor::scalar(0.0);
  std::size_t tokens = 0;

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ex = batch[b];
    ForwardResult fr = forward(ex, masked[b], mode, training, rng, plan);

    std::vector<int> targets = ex.caption;
    for (int& t : targets) {
      if (t == kPadId) t = -1;  // pad never contributes to the objective
    }
    std::size_t count = 0;
    Tensor ce = cross_entropy_mean(fr.logits, targets, &count);
    Tensor scaled = scale(ce, static_cast<double>(count));
    ce_sum = ce_sum.defined() ? add(ce_sum, scaled) : scaled;
    tokens += count;

    for (const auto& site : fr.sites) {
      lq_sum = add(lq_sum, scale(site.loss_sum,
                                 1.0 / static_cast<double>(site.token_heads)));
    }
  }

  LossRecord rec;
  rec.tokens = tokens;
  rec.ce = scale(ce_sum, 1.0 / static_cast<double>(tokens));
  rec.l_q = scale(lq_sum, 1.0 / static_cast<double>(batch.size()));
  rec.total = add(rec.ce, rec.l_q);
  return rec;
}

LossRecord R3Model::training_loss(const std::vector<CaptionExample>& batch,
                                  SrMode mode, bool training, Rng& rng) const {
  std::vector<std::vector<int>> masked;
  masked.reserve(batch.size());
  for (const auto& ex : batch) {
    masked.push_back(mask_text(ex.caption, config_.mask_rate, rng));
  }
  return loss_on(batch, masked, mode, training, rng);
}

Generation R3Model::generate_greedy(const std::vector<VoxelToken>& video,
                                    const Tensor& features, std::size_t max_len,
                                    SrMode mode) const {
  if (max_len == 0 || max_len > static_cast<std::size_t>(config_.l_text)) {
    throw std::invalid_argument("generate_greedy: max_len outside [1, " +
                                std::to_string(config_.l_text) + "]");
  }
  NoGradGuard guard;
  Rng quiet(0);  // eval path consumes no randomness

  Generation gen;
  std::vector<SiteOutput> enc_sites;
  Encoded enc = encode(video, features, mode, false, quiet, &enc_sites);
  for (const auto& s : enc_sites) gen.encoder_roles[s.site] = s.roles;

  for (std::size_t step = 0; step < max_len; ++step) {
    // trailing pad is a placeholder: the shift-right drops it from the input
    std::vector<int> ids = gen.ids;
    ids.push_back(kPadId);
    std::vector<SiteOutput> dec_sites;
    Tensor logits = decoder_forward(ids, enc, mode, false, quiet, &dec_sites);

    const std::size_t row = ids.size() - 1;
    int best = 0;
    double best_v = logits.at(row, 0);
    for (std::size_t v = 1; v < config_.vocab_size; ++v) {
      if (logits.at(row, v) > best_v) {
        best = static_cast<int>(v);
        best_v = logits.at(row, v);
      }
    }

    if (best == kEosId) break;
    std::map<std::string, std::vector<int>> roles;
    for (const auto& s : dec_sites) {
      std::vector<int> per_head(s.roles.size());
      for (std::size_t h = 0; h < s.roles.size(); ++h) {
        per_head[h] = s.roles[h][row];
      }
      roles[s.site] = std::move(per_head);
    }
    gen.ids.push_back(best);
    gen.step_roles.push_back(std::move(roles));
  }
  return gen;
}

void R3Model::visit_params(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("pos.t", tables_.e_t);
  fn("pos.rc", tables_.e_rc);
  fn("pos.rs", tables_.e_rs);
  fn("pos.text", tables_.e_text);
  fn("bias.enc", bias_enc_.buckets);
  fn("bias.dec_self", bias_dec_self_.buckets);
  fn("bias.dec_cross", bias_dec_cross_.buckets);
  fn("feat.w", feat_w_);
  fn("feat.b", feat_b_);
  fn("embed", embed_);
  for (std::size_t i = 0; i < enc_.size(); ++i) {
    auto& l = enc_[i];
    const std::string p = "enc" + std::to_string(i);
    l.attn.visit_params(p + ".attn", fn);
    fn(p + ".ln1.g", l.ln1_g);
    fn(p + ".ln1.b", l.ln1_b);
    fn(p + ".ff.w1", l.ff_w1);
    fn(p + ".ff.b1", l.ff_b1);
    fn(p + ".ff.w2", l.ff_w2);
    fn(p + ".ff.b2", l.ff_b2);
    fn(p + ".ln2.g", l.ln2_g);
    fn(p + ".ln2.b", l.ln2_b);
  }
  for (std::size_t i = 0; i < dec_.size(); ++i) {
    auto& l = dec_[i];
    const std::string p = "dec" + std::to_string(i);
    l.self_attn.visit_params(p + ".self", fn);
    fn(p + ".ln1.g", l.ln1_g);
    fn(p + ".ln1.b", l.ln1_b);
    l.cross_attn.visit_params(p + ".cross", fn);
    fn(p + ".ln2.g", l.ln2_g);
    fn(p + ".ln2.b", l.ln2_b);
    fn(p + ".ff.w1", l.ff_w1);
    fn(p + ".ff.b1", l.ff_b1);
    fn(p + ".ff.w2", l.ff_w2);
    fn(p + ".ff.b2", l.ff_b2);
    fn(p + ".ln3.g", l.ln3_g);
    fn(p + ".ln3.b", l.ln3_b);
  }
  fn("head.w", head_w_);
  fn("head.b", head_b_);
}

std::vector<Tensor*> R3Model::params() {
  std::vector<Tensor*> out;
  visit_params([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<std::string> R3Model::param_names() {
  std::vector<std::string> out;
  visit_params([&](const std::string& n, Tensor&) { out.push_back(n); });
  return out;
}

// ---- optimizer ---------------------------------------------------------------

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(const std::vector<Tensor*>& params) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i]->size(), 0.0);
      v_[i].assign(params[i]->size(), 0.0);
    }
  }
  if (m_.size() != params.size()) {
    throw std::logic_error("optimizer state does not match parameter list");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const bool has = p.has_grad();
    auto& data = p.data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has ? p.grad()[j] : 0.0;
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void Adam::save(std::ostream& os) const {
  write_u64(os, t_);
  write_u64(os, m_.size());
  for (std::size_t i = 0; i < m_.size(); ++i) {
    write_u64(os, m_[i].size());
    write_f64_vec(os, m_[i]);
    write_f64_vec(os, v_[i]);
  }
}

void Adam::load(std::istream& is, const std::vector<Tensor*>& params) {
  t_ = read_u64(is);
  const std::size_t n = read_u64(is);
  if (n != 0 && n != params.size()) {
    throw std::runtime_error("format error: optimizer block holds " +
                             std::to_string(n) + " entries, model has " +
                             std::to_string(params.size()));
  }
  m_.assign(n, {});
  v_.assign(n, {});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = read_u64(is);
    if (len != params[i]->size()) {
      throw std::runtime_error("format error: optimizer entry " +
                               std::to_string(i) + " length mismatch");
    }
    read_f64_vec(is, m_[i], len);
    read_f64_vec(is, v_[i], len);
  }
}

// ---- trainer -----------------------------------------------------------------

Trainer::Trainer(R3Model& model, double learning_rate, std::uint64_t seed)
    : model_(model),
      adam_(learning_rate),
      rng_(mix_seed(seed, 0x747261696eULL)) {
  model_.visit_params([&](const std::string& n, Tensor& t) {
    names_.push_back(n);
    params_.push_back(&t);
  });
}

Trainer::StepRecord Trainer::train_step(
    const std::vector<CaptionExample>& batch, SrMode mode) {
  for (Tensor* p : params_) p->clear_grad();
  LossRecord loss = model_.training_loss(batch, mode, /*training=*/true, rng_);
  const double total = loss.total.value();
  if (!std::isfinite(total)) {
    throw std::runtime_error("training diverged: non-finite loss at step " +
                             std::to_string(step_ + 1));
  }
  backward(loss.total);
  adam_.step(params_);
  ++step_;
  return StepRecord{step_, total, loss.ce.value(), loss.l_q.value()};
}

void Trainer::save_checkpoint(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  os.write(kCheckpointMagic, 4);
  write_u32(os, kCheckpointVersion);
  write_string(os, model_.config().to_text());
  write_u64(os, params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    write_string(os, names_[i]);
    const Tensor& t = *params_[i];
    write_u32(os, static_cast<uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) write_u64(os, d);
    write_f64_vec(os, t.data());
  }
  adam_.save(os);
  write_u64(os, step_);
  for (std::uint64_t w : rng_.state()) write_u64(os, w);
  if (!os) throw std::runtime_error("short write on checkpoint: " + path);
}

void Trainer::load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != std::string(kCheckpointMagic, 4)) {
    throw std::runtime_error("format error: not a checkpoint file: " + path);
  }
  const uint32_t version = read_u32(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("format error: unsupported checkpoint version " +
                             std::to_string(version));
  }
  const std::string cfg_text = read_string(is);
  if (cfg_text != model_.config().to_text()) {
    throw std::runtime_error(
        "checkpoint config does not match the constructed model");
  }
  const std::size_t count = read_u64(is);
  if (count != params_.size()) {
    throw std::runtime_error("format error: checkpoint holds " +
                             std::to_string(count) + " tensors, model has " +
                             std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < count; ++i) {
    const std::string name = read_string(is);
    if (name != names_[i]) {
      throw std::runtime_error("format error: tensor " + std::to_string(i) +
                               " is '" + name + "', expected '" + names_[i] +
                               "'");
    }
    const uint32_t ndim = read_u32(is);
    Shape shape(ndim);
    for (auto& d : shape) d = read_u64(is);
    if (shape != params_[i]->shape()) {
      throw std::runtime_error("format error: tensor '" + name +
                               "' shape mismatch");
    }
    read_f64_vec(is, params_[i]->data(), params_[i]->size());
    params_[i]->clear_grad();
  }
  adam_.load(is, params_);
  step_ = read_u64(is);
  std::array<std::uint64_t, 4> st;
  for (auto& w : st) w = read_u64(is);
  rng_.set_state(st);
}

}  // namespace r3
