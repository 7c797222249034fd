#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

#include "doctest.h"
#include "r3/world.hpp"

using namespace r3;

namespace {

// Reads the event structure back out of the rendered features alone.
struct DecodedEvent {
  int agent_color = -1, agent_shape = -1;
  int patient_color = -1, patient_shape = -1;
  int action = -1;
};

std::vector<DecodedEvent> decode_events(const WorldSpec& spec,
                                        const EpisodeRecord& rec) {
  const std::size_t cells = static_cast<std::size_t>(spec.grid * spec.grid);
  REQUIRE(rec.video.size() % (2 * cells) == 0);
  const std::size_t n_events = rec.video.size() / (2 * cells);
  auto argmax_block = [&](std::size_t row, std::size_t base, std::size_t n) {
    int best = -1;
    for (std::size_t j = 0; j < n; ++j) {
      if (rec.features.at(row, base + j) == 1.0) {
        REQUIRE(best == -1);  // one-hot
        best = static_cast<int>(j);
      }
    }
    return best;
  };
  std::vector<DecodedEvent> out(n_events);
  for (std::size_t e = 0; e < n_events; ++e) {
    for (std::size_t cell = 0; cell < cells; ++cell) {
      const std::size_t row = e * 2 * cells + cell;  // phase-0 block
      DecodedEvent& ev = out[e];
      if (rec.features.at(row, spec.agent_flag()) == 1.0) {
        ev.agent_color = argmax_block(row, spec.color_offset(),
                                      spec.colors.size());
        ev.agent_shape = argmax_block(row, spec.shape_offset(),
                                      spec.shapes.size());
        ev.action = argmax_block(row, spec.action_offset(),
                                 spec.actions.size());
      } else if (rec.features.at(row, spec.patient_flag()) == 1.0) {
        ev.patient_color = argmax_block(row, spec.color_offset(),
                                        spec.colors.size());
        ev.patient_shape = argmax_block(row, spec.shape_offset(),
                                        spec.shapes.size());
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("vocabulary ids, round trip and oov") {
  WorldSpec spec;
  Vocabulary v = spec.vocabulary();
  CHECK(v.id("<pad>") == kPadId);
  CHECK(v.id("<eos>") == kEosId);
  CHECK(v.id("<mask>") == kMaskId);
  CHECK(v.size() > 20);

  CHECK(v.tokenize("").empty());
  CHECK(v.detokenize({}) == "");

  const std::string sentence = "the red cube moves to the blue plate";
  CHECK(v.detokenize(v.tokenize(sentence)) == sentence);

  // specials vanish on the way back out
  std::vector<int> ids = v.tokenize(sentence);
  ids.push_back(kEosId);
  CHECK(v.detokenize(ids) == sentence);

  CHECK_THROWS_WITH_AS(static_cast<void>(v.tokenize("the zebra moves")),
                       "unknown word: zebra", std::invalid_argument);
  CHECK_THROWS_AS(static_cast<void>(v.word(-1)), std::out_of_range);
  CHECK_THROWS_AS(
      static_cast<void>(Vocabulary::from_words({"a", "b", "a"})),
      std::invalid_argument);
}

TEST_CASE("world spec validation") {
  WorldSpec spec;
  CHECK_NOTHROW(spec.validate());

  WorldSpec bad = spec;
  bad.actions.clear();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = spec;
  bad.actions[0].words = {{"moves", PosTag::VERB}, {"shoves", PosTag::VERB}};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);  // two VERBs

  bad = spec;
  bad.actions[0].words = {{"to", PosTag::ADP}};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);  // no VERB

  bad = spec;
  bad.timesteps = 2;  // cannot hold 4 events
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = spec;
  bad.d_feat = 8;  // below the channel layout
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = spec;
  bad.colors = {"red"};
  bad.shapes = {"cube"};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("episode generation is deterministic per seed") {
  WorldSpec spec;
  EpisodeRecord a = generate_episode(spec, 42);
  EpisodeRecord b = generate_episode(spec, 42);
  CHECK(a.caption == b.caption);
  CHECK(a.pos_tags.size() == b.pos_tags.size());
  CHECK(a.features.data() == b.features.data());
  REQUIRE(a.video.size() == b.video.size());
  for (std::size_t i = 0; i < a.video.size(); ++i) {
    CHECK(a.video[i].t == b.video[i].t);
    CHECK(a.video[i].box.x0 == b.video[i].box.x0);
  }
  EpisodeRecord c = generate_episode(spec, 43);
  CHECK(a.caption != c.caption);  // seeds separate (true for this pair)
}

TEST_CASE("episode geometry and tag bookkeeping") {
  WorldSpec spec;
  for (uint64_t seed = 0; seed < 40; ++seed) {
    EpisodeRecord rec = generate_episode(spec, seed);
    CAPTURE(seed);
    REQUIRE(!rec.video.empty());
    const std::size_t cells = static_cast<std::size_t>(spec.grid * spec.grid);
    CHECK(rec.video.size() % (2 * cells) == 0);
    const std::size_t n_events = rec.video.size() / (2 * cells);
    CHECK(n_events >= static_cast<std::size_t>(spec.min_events));
    CHECK(n_events <= static_cast<std::size_t>(spec.max_events));

    int max_t = 0;
    for (const auto& tok : rec.video) {
      CHECK(tok.t >= 0);
      CHECK(tok.t < spec.timesteps);
      max_t = std::max(max_t, tok.t);
      CHECK(tok.box.x0 >= 0.0);
      CHECK(tok.box.y0 >= 0.0);
      CHECK(tok.box.x1 <= 1.0);
      CHECK(tok.box.y1 <= 1.0);
      CHECK(tok.box.x0 < tok.box.x1);
      CHECK(tok.box.y0 < tok.box.y1);
    }
    CHECK(static_cast<std::size_t>(max_t) == 2 * n_events - 1);

    REQUIRE(rec.pos_tags.size() == rec.caption.size());
    CHECK(rec.caption.back() == kEosId);
    CHECK(rec.pos_tags.back() == PosTag::OTHER);

    // grammar invariants: one VERB per event, "then" between events
    std::size_t verbs = 0, thens = 0;
    for (std::size_t i = 0; i < rec.caption.size(); ++i) {
      if (rec.pos_tags[i] == PosTag::VERB) ++verbs;
      if (rec.caption[i] == spec.vocabulary().id("then")) ++thens;
    }
    CHECK(verbs == n_events);
    CHECK(thens == n_events - 1);
    CHECK(verbs >= 1);
    CHECK(verbs <= 4);
  }
}

TEST_CASE("caption names exactly what the features render") {
  WorldSpec spec;
  Vocabulary vocab = spec.vocabulary();
  for (uint64_t seed = 0; seed < 25; ++seed) {
    CAPTURE(seed);
    EpisodeRecord rec = generate_episode(spec, seed);
    auto events = decode_events(spec, rec);

    std::string rebuilt;
    for (std::size_t e = 0; e < events.size(); ++e) {
      const auto& ev = events[e];
      REQUIRE(ev.agent_color >= 0);
      REQUIRE(ev.patient_color >= 0);
      REQUIRE(ev.action >= 0);
      if (e > 0) rebuilt += " then";
      rebuilt += " the " + spec.colors[static_cast<std::size_t>(ev.agent_color)] +
                 " " + spec.shapes[static_cast<std::size_t>(ev.agent_shape)];
      for (const auto& [w, tag] :
           spec.actions[static_cast<std::size_t>(ev.action)].words) {
        rebuilt += " " + w;
      }
      rebuilt += " the " +
                 spec.colors[static_cast<std::size_t>(ev.patient_color)] + " " +
                 spec.shapes[static_cast<std::size_t>(ev.patient_shape)];
    }
    CHECK(vocab.detokenize(rec.caption) == rebuilt.substr(1));
  }
}

TEST_CASE("per-cell rendering: flags are exclusive, empty cells stay zero") {
  WorldSpec spec;
  EpisodeRecord rec = generate_episode(spec, 7);
  const std::size_t cells = static_cast<std::size_t>(spec.grid * spec.grid);
  const std::size_t blocks = rec.video.size() / cells;
  for (std::size_t b = 0; b < blocks; ++b) {
    std::size_t agents = 0, patients = 0, distractors = 0;
    for (std::size_t cell = 0; cell < cells; ++cell) {
      const std::size_t row = b * cells + cell;
      const double a = rec.features.at(row, spec.agent_flag());
      const double p = rec.features.at(row, spec.patient_flag());
      const double d = rec.features.at(row, spec.distractor_flag());
      CHECK(a + p + d <= 1.0);  // at most one occupant role per cell
      agents += a == 1.0;
      patients += p == 1.0;
      distractors += d == 1.0;
      if (a == 0.0 && p == 0.0 && d == 0.0) {
        double sum = 0.0;
        for (std::size_t j = 0; j < spec.d_feat; ++j) {
          sum += std::abs(rec.features.at(row, j));
        }
        CHECK(sum == 0.0);
      }
    }
    CHECK(agents == 1);
    CHECK(patients == 1);
    CHECK(distractors <= 1);
  }
}

TEST_CASE("distractor probability is honored at the extremes") {
  WorldSpec spec;
  spec.distractor_prob = 0.0;
  EpisodeRecord none = generate_episode(spec, 3);
  for (std::size_t i = 0; i < none.video.size(); ++i) {
    CHECK(none.features.at(i, spec.distractor_flag()) == 0.0);
  }
  spec.distractor_prob = 1.0;
  EpisodeRecord all = generate_episode(spec, 3);
  const std::size_t cells = static_cast<std::size_t>(spec.grid * spec.grid);
  for (std::size_t b = 0; b < all.video.size() / cells; ++b) {
    double found = 0.0;
    for (std::size_t cell = 0; cell < cells; ++cell) {
      found += all.features.at(b * cells + cell, spec.distractor_flag());
    }
    CHECK(found == 1.0);
  }
}

TEST_CASE("feature file round trip, inference-only records included") {
  WorldSpec spec;
  std::vector<EpisodeRecord> recs;
  for (uint64_t s = 0; s < 4; ++s) recs.push_back(generate_episode(spec, s));
  recs.push_back(EpisodeRecord{recs[0].video, recs[0].features, {}, {}, 77});

  const std::string path = "test_world_roundtrip.r3ft";
  save_feature_file(path, recs);
  auto back = load_feature_file(path);
  REQUIRE(back.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].seed == recs[i].seed);
    CHECK(back[i].caption == recs[i].caption);
    REQUIRE(back[i].pos_tags.size() == recs[i].pos_tags.size());
    for (std::size_t k = 0; k < recs[i].pos_tags.size(); ++k) {
      CHECK(back[i].pos_tags[k] == recs[i].pos_tags[k]);
    }
    CHECK(back[i].features.data() == recs[i].features.data());
    REQUIRE(back[i].video.size() == recs[i].video.size());
    for (std::size_t k = 0; k < recs[i].video.size(); ++k) {
      CHECK(back[i].video[k].t == recs[i].video[k].t);
      CHECK(back[i].video[k].box.x0 == recs[i].video[k].box.x0);
      CHECK(back[i].video[k].box.y1 == recs[i].video[k].box.y1);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("feature file rejects garbage, truncation and bad geometry") {
  const std::string path = "test_world_bad.r3ft";
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE";
  }
  CHECK_THROWS_WITH_AS(static_cast<void>(load_feature_file(path)),
                       doctest::Contains("format error"), std::runtime_error);

  WorldSpec spec;
  std::vector<EpisodeRecord> recs{generate_episode(spec, 1)};
  save_feature_file(path, recs);
  // chop the tail off
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  in.close();
  {
    std::ofstream os(path, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(static_cast<void>(load_feature_file(path)),
                  std::runtime_error);

  // box outside the unit square fails validation with the record index
  EpisodeRecord bad = recs[0];
  bad.video[0].box.x1 = 1.5;
  save_feature_file(path, {bad});
  CHECK_THROWS_WITH_AS(static_cast<void>(load_feature_file(path)),
                       doctest::Contains("validation error: record 0"),
                       std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("splits partition the records") {
  WorldSpec spec;
  std::vector<EpisodeRecord> recs;
  for (uint64_t s = 0; s < 10; ++s) recs.push_back(generate_episode(spec, s));

  Splits s = make_splits(recs, 0.8, 0.2, 5);
  CHECK(s.train.size() == 8);
  CHECK(s.eval.size() == 2);

  std::multiset<uint64_t> seen;
  for (const auto& r : s.train) seen.insert(r.seed);
  for (const auto& r : s.eval) seen.insert(r.seed);
  std::multiset<uint64_t> expect;
  for (const auto& r : recs) expect.insert(r.seed);
  CHECK(seen == expect);

  Splits again = make_splits(recs, 0.8, 0.2, 5);
  CHECK(again.train.size() == s.train.size());
  for (std::size_t i = 0; i < s.train.size(); ++i) {
    CHECK(again.train[i].seed == s.train[i].seed);
  }
  Splits other = make_splits(recs, 0.8, 0.2, 6);
  bool same_order = true;
  for (std::size_t i = 0; i < s.train.size(); ++i) {
    if (other.train[i].seed != s.train[i].seed) same_order = false;
  }
  CHECK(!same_order);

  CHECK_THROWS_AS(make_splits({}, 0.8, 0.2, 1), std::invalid_argument);
  CHECK_THROWS_AS(make_splits(recs, 0.7, 0.2, 1), std::invalid_argument);
}

TEST_CASE("generated episodes drive the model end to end") {
  WorldSpec spec;
  R3Config c;
  c.d_model = 8;
  c.d_k = 4;
  c.heads = 2;
  c.k_roles = 4;
  c.ff_width = 16;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.vocab_size = spec.vocabulary().size();
  c.d_feat = spec.d_feat;
  c.n_grid = spec.grid;
  c.t_video = spec.timesteps;
  Rng init(mix_seed(c.seed, 0));
  R3Model model(c, init);

  std::vector<CaptionExample> batch;
  for (uint64_t s = 0; s < 2; ++s) {
    batch.push_back(to_example(generate_episode(spec, s)));
  }
  Rng rng(1);
  LossRecord rec = model.training_loss(batch, SrMode::quantized, true, rng);
  CHECK(std::isfinite(rec.total.value()));
  CHECK(rec.tokens > 0);
}
