#include "r3/world.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "r3/serialize.hpp"

namespace r3 {

namespace {

constexpr char kFeatureMagic[4] = {'R', '3', 'F', 'T'};
constexpr uint32_t kFeatureVersion = 1;

const char* kTagNames[] = {"NOUN", "VERB", "DET", "ADP", "ADJ", "OTHER"};

}  // namespace

std::string pos_tag_to_string(PosTag t) {
  return kTagNames[static_cast<int>(t)];
}

PosTag pos_tag_from_string(const std::string& s) {
  for (int i = 0; i < 6; ++i) {
    if (s == kTagNames[i]) return static_cast<PosTag>(i);
  }
  throw std::invalid_argument("unknown pos tag: " + s);
}

// ---- vocabulary ---------------------------------------------------------------

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  Vocabulary v;
  for (const auto& w : words) {
    if (w.empty()) throw std::invalid_argument("empty vocabulary word");
    if (v.index_.count(w)) {
      throw std::invalid_argument("duplicate vocabulary word: " + w);
    }
    v.index_.emplace(w, static_cast<int>(v.words_.size()));
    v.words_.push_back(w);
  }
  return v;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) +
                            " outside vocabulary of " +
                            std::to_string(words_.size()));
  }
  return words_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(const std::string& w) const {
  auto it = index_.find(w);
  if (it == index_.end()) {
    throw std::invalid_argument("unknown word: " + w);
  }
  return it->second;
}

bool Vocabulary::contains(const std::string& w) const {
  return index_.count(w) != 0;
}

std::vector<int> Vocabulary::tokenize(const std::string& text) const {
  std::vector<int> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) out.push_back(id(w));
  return out;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (int t : ids) {
    if (t == kPadId || t == kEosId || t == kMaskId) continue;
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

// ---- world spec ---------------------------------------------------------------

std::vector<ActionTemplate> WorldSpec::default_actions() {
  using P = std::pair<std::string, PosTag>;
  return {
      {"move_to", {P{"moves", PosTag::VERB}, P{"to", PosTag::ADP}}},
      {"pick_up", {P{"picks", PosTag::VERB}, P{"up", PosTag::ADP}}},
      {"place_on", {P{"stacks", PosTag::VERB}, P{"onto", PosTag::ADP}}},
      {"stir", {P{"stirs", PosTag::VERB}}},
      {"cut", {P{"cuts", PosTag::VERB}}},
      {"combine", {P{"combines", PosTag::VERB}, P{"with", PosTag::ADP}}},
  };
}

void WorldSpec::validate() const {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("world spec error: " + msg);
  };
  if (grid < 2) fail("grid must be at least 2");
  if (min_events < 1 || max_events < min_events) fail("bad event range");
  if (timesteps < 2 * max_events) {
    fail("timesteps " + std::to_string(timesteps) + " cannot hold " +
         std::to_string(max_events) + " two-slot events");
  }
  if (colors.empty() || shapes.empty()) fail("empty attribute inventory");
  if (actions.empty()) fail("empty action inventory");
  if (colors.size() * shapes.size() < 3) {
    fail("need at least 3 distinct entities");
  }
  if (grid * grid < 3) fail("need at least 3 grid cells");
  if (distractor_prob < 0.0 || distractor_prob > 1.0) {
    fail("distractor_prob outside [0, 1]");
  }
  for (const auto& a : actions) {
    std::size_t verbs = 0;
    if (a.words.empty()) fail("action '" + a.name + "' has no words");
    for (const auto& [w, tag] : a.words) {
      if (tag == PosTag::VERB) ++verbs;
    }
    if (verbs != 1) {
      fail("action '" + a.name + "' must contain exactly one VERB, has " +
           std::to_string(verbs));
    }
  }
  if (d_feat < channels_needed()) {
    fail("d_feat " + std::to_string(d_feat) + " below channel layout size " +
         std::to_string(channels_needed()));
  }
}

Vocabulary WorldSpec::vocabulary() const {
  std::vector<std::string> words = {"<pad>", "<eos>", "<mask>", "the", "then"};
  auto push_unique = [&](const std::string& w) {
    for (const auto& seen : words) {
      if (seen == w) return;
    }
    words.push_back(w);
  };
  for (const auto& c : colors) push_unique(c);
  for (const auto& s : shapes) push_unique(s);
  for (const auto& a : actions) {
    for (const auto& [w, tag] : a.words) push_unique(w);
  }
  return Vocabulary::from_words(words);
}

// ---- episode generation --------------------------------------------------------

EpisodeRecord generate_episode(const WorldSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);

  struct Entity {
    int color = 0, shape = 0;
    bool operator==(const Entity& o) const {
      return color == o.color && shape == o.shape;
    }
  };
  struct Event {
    Entity agent, patient, distractor;
    int action = 0;
    int cell_agent = 0, cell_patient = 0, cell_distractor = -1;
  };

  auto draw_entity = [&] {
    return Entity{
        static_cast<int>(rng.uniform_int(spec.colors.size())),
        static_cast<int>(rng.uniform_int(spec.shapes.size())),
    };
  };

  const int cells = spec.grid * spec.grid;
  const int n_events =
      spec.min_events + static_cast<int>(rng.uniform_int(
                            static_cast<uint64_t>(spec.max_events -
                                                  spec.min_events + 1)));
  std::vector<Event> events;
  for (int e = 0; e < n_events; ++e) {
    Event ev;
    ev.agent = draw_entity();
    do {
      ev.patient = draw_entity();
    } while (ev.patient == ev.agent);
    ev.action = static_cast<int>(rng.uniform_int(spec.actions.size()));
    ev.cell_agent = static_cast<int>(rng.uniform_int(cells));
    do {
      ev.cell_patient = static_cast<int>(rng.uniform_int(cells));
    } while (ev.cell_patient == ev.cell_agent);
    if (rng.uniform() < spec.distractor_prob) {
      do {
        ev.distractor = draw_entity();
      } while (ev.distractor == ev.agent || ev.distractor == ev.patient);
      do {
        ev.cell_distractor = static_cast<int>(rng.uniform_int(cells));
      } while (ev.cell_distractor == ev.cell_agent ||
               ev.cell_distractor == ev.cell_patient);
    }
    events.push_back(ev);
  }

  // caption: entity phrase, action words, entity phrase, "then" between events
  Vocabulary vocab = spec.vocabulary();
  EpisodeRecord rec;
  rec.seed = seed;
  auto push_word = [&](const std::string& w, PosTag tag) {
    rec.caption.push_back(vocab.id(w));
    rec.pos_tags.push_back(tag);
  };
  auto push_entity = [&](const Entity& e) {
    push_word("the", PosTag::DET);
    push_word(spec.colors[static_cast<std::size_t>(e.color)], PosTag::ADJ);
    push_word(spec.shapes[static_cast<std::size_t>(e.shape)], PosTag::NOUN);
  };
  for (int e = 0; e < n_events; ++e) {
    if (e > 0) push_word("then", PosTag::OTHER);
    push_entity(events[static_cast<std::size_t>(e)].agent);
    for (const auto& [w, tag] :
         spec.actions[static_cast<std::size_t>(
                          events[static_cast<std::size_t>(e)].action)]
             .words) {
      push_word(w, tag);
    }
    push_entity(events[static_cast<std::size_t>(e)].patient);
  }
  rec.caption.push_back(kEosId);
  rec.pos_tags.push_back(PosTag::OTHER);

  // features: one token per cell per time slot, event-major, phase, row-major
  const std::size_t len_v =
      static_cast<std::size_t>(n_events) * 2 * static_cast<std::size_t>(cells);
  rec.features = Tensor::zeros({len_v, spec.d_feat});
  auto* fdata = rec.features.data().data();
  const double g = static_cast<double>(spec.grid);
  std::size_t row_i = 0;
  for (int e = 0; e < n_events; ++e) {
    const Event& ev = events[static_cast<std::size_t>(e)];
    for (int phase = 0; phase < 2; ++phase) {
      for (int cell = 0; cell < cells; ++cell, ++row_i) {
        const int row = cell / spec.grid, col = cell % spec.grid;
        rec.video.push_back(VoxelToken{
            e * 2 + phase,
            Box{col / g, row / g, (col + 1) / g, (row + 1) / g}});
        double* f = fdata + row_i * spec.d_feat;
        const Entity* ent = nullptr;
        if (cell == ev.cell_agent) {
          ent = &ev.agent;
          f[spec.action_offset() + static_cast<std::size_t>(ev.action)] = 1.0;
          f[spec.agent_flag()] = 1.0;
        } else if (cell == ev.cell_patient) {
          ent = &ev.patient;
          f[spec.action_offset() + static_cast<std::size_t>(ev.action)] = 1.0;
          f[spec.patient_flag()] = 1.0;
        } else if (cell == ev.cell_distractor) {
          ent = &ev.distractor;
          f[spec.distractor_flag()] = 1.0;
        }
        if (ent) {
          f[spec.color_offset() + static_cast<std::size_t>(ent->color)] = 1.0;
          f[spec.shape_offset() + static_cast<std::size_t>(ent->shape)] = 1.0;
          f[spec.phase_flag()] = static_cast<double>(phase);
        }
      }
    }
  }
  return rec;
}

std::map<int, PosTag> tag_lexicon(const WorldSpec& spec) {
  Vocabulary vocab = spec.vocabulary();
  std::map<int, PosTag> out{{kPadId, PosTag::OTHER},
                            {kEosId, PosTag::OTHER},
                            {kMaskId, PosTag::OTHER},
                            {vocab.id("the"), PosTag::DET},
                            {vocab.id("then"), PosTag::OTHER}};
  auto assign = [&](const std::string& w, PosTag tag) {
    auto [it, inserted] = out.emplace(vocab.id(w), tag);
    if (!inserted && it->second != tag) {
      throw std::invalid_argument("word '" + w +
                                  "' appears under two different tags");
    }
  };
  for (const auto& c : spec.colors) assign(c, PosTag::ADJ);
  for (const auto& s : spec.shapes) assign(s, PosTag::NOUN);
  for (const auto& a : spec.actions) {
    for (const auto& [w, tag] : a.words) assign(w, tag);
  }
  return out;
}

CaptionExample to_example(const EpisodeRecord& rec) {
  return CaptionExample{rec.video, rec.features, rec.caption};
}

std::vector<CaptionExample> to_examples(const std::vector<EpisodeRecord>& recs) {
  std::vector<CaptionExample> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(to_example(r));
  return out;
}

// ---- feature container ----------------------------------------------------------

void save_feature_file(const std::string& path,
                       const std::vector<EpisodeRecord>& records) {
  std::size_t d_feat = 0;
  for (const auto& r : records) {
    if (r.video.size() != r.features.rows()) {
      throw std::invalid_argument(
          "record has misaligned video tokens and feature rows");
    }
    const std::size_t cols = r.video.empty() ? 0 : r.features.shape()[1];
    if (d_feat == 0) d_feat = cols;
    if (cols != 0 && cols != d_feat) {
      throw std::invalid_argument("records disagree on feature width");
    }
    if (!r.pos_tags.empty() && r.pos_tags.size() != r.caption.size()) {
      throw std::invalid_argument("tag block must be empty or caption-length");
    }
  }

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write feature file: " + path);
  os.write(kFeatureMagic, 4);
  write_u32(os, kFeatureVersion);
  write_u32(os, static_cast<uint32_t>(d_feat));
  write_u64(os, records.size());
  for (const auto& r : records) {
    write_u64(os, r.seed);
    write_u64(os, r.video.size());
    for (const auto& tok : r.video) {
      write_f64(os, static_cast<double>(tok.t));
      write_f64(os, tok.box.x0);
      write_f64(os, tok.box.y0);
      write_f64(os, tok.box.x1);
      write_f64(os, tok.box.y1);
    }
    if (!r.video.empty()) write_f64_vec(os, r.features.data());
    write_u32(os, static_cast<uint32_t>(r.caption.size()));
    for (int id : r.caption) write_u32(os, static_cast<uint32_t>(id));
    write_u32(os, static_cast<uint32_t>(r.pos_tags.size()));
    for (PosTag t : r.pos_tags) {
      os.put(static_cast<char>(static_cast<int>(t)));
    }
  }
  if (!os) throw std::runtime_error("short write on feature file: " + path);
}

std::vector<EpisodeRecord> load_feature_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open feature file: " + path);
  char magic[4];
  if (!is.read(magic, 4) ||
      std::string(magic, 4) != std::string(kFeatureMagic, 4)) {
    throw std::runtime_error("format error: not a feature file: " + path);
  }
  const uint32_t version = read_u32(is);
  if (version != kFeatureVersion) {
    throw std::runtime_error("format error: unsupported feature version " +
                             std::to_string(version));
  }
  const std::size_t d_feat = read_u32(is);
  const std::size_t count = read_u64(is);

  std::vector<EpisodeRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto invalid = [&](const std::string& msg) {
      throw std::runtime_error("validation error: record " +
                               std::to_string(i) + ": " + msg);
    };
    EpisodeRecord r;
    r.seed = read_u64(is);
    const std::size_t n = read_u64(is);
    r.video.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double t = read_f64(is);
      Box b;
      b.x0 = read_f64(is);
      b.y0 = read_f64(is);
      b.x1 = read_f64(is);
      b.y1 = read_f64(is);
      if (!(t >= 0.0) || t != static_cast<double>(static_cast<int>(t))) {
        invalid("time slot must be a nonnegative integer");
      }
      if (!(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 1.0 && b.y1 <= 1.0 &&
            b.x0 < b.x1 && b.y0 < b.y1)) {
        invalid("box outside the unit square");
      }
      r.video.push_back(VoxelToken{static_cast<int>(t), b});
    }
    r.features = Tensor::zeros({n, d_feat});
    if (n > 0) read_f64_vec(is, r.features.data(), n * d_feat);
    const std::size_t cap_len = read_u32(is);
    r.caption.reserve(cap_len);
    for (std::size_t k = 0; k < cap_len; ++k) {
      r.caption.push_back(static_cast<int>(read_u32(is)));
    }
    const std::size_t tag_len = read_u32(is);
    if (tag_len != 0 && tag_len != cap_len) {
      invalid("tag block must be empty or caption-length");
    }
    for (std::size_t k = 0; k < tag_len; ++k) {
      const int code = is.get();
      if (code == EOF) {
        throw std::runtime_error("format error: truncated file: " + path);
      }
      if (code < 0 || code > 5) invalid("unknown pos tag code");
      r.pos_tags.push_back(static_cast<PosTag>(code));
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---- splits --------------------------------------------------------------------

Splits make_splits(const std::vector<EpisodeRecord>& records,
                   double train_fraction, double eval_fraction,
                   std::uint64_t seed) {
  if (records.empty()) {
    throw std::invalid_argument("make_splits: empty record list");
  }
  if (train_fraction < 0.0 || eval_fraction < 0.0 ||
      std::abs(train_fraction + eval_fraction - 1.0) > 1e-9) {
    throw std::invalid_argument("make_splits: fractions must sum to 1");
  }
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.uniform_int(i)]);
  }
  const auto n_train = static_cast<std::size_t>(
      std::llround(train_fraction * static_cast<double>(records.size())));
  Splits s;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? s.train : s.eval).push_back(records[order[i]]);
  }
  return s;
}

}  // namespace r3
