#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "r3/model.hpp"
#include "r3/rng.hpp"
#include "r3/tensor.hpp"
#include "r3/token.hpp"

namespace r3 {

// Grammar part-of-speech tags. Assigned by the caption templates at
// generation time, so they are exact by construction.
enum class PosTag { NOUN, VERB, DET, ADP, ADJ, OTHER };

std::string pos_tag_to_string(PosTag t);
PosTag pos_tag_from_string(const std::string& s);

// Closed word-level vocabulary: specials first (ids match the model's
// pad/eos/mask constants), then the grammar lexicon in a fixed order.
class Vocabulary {
 public:
  static Vocabulary from_words(const std::vector<std::string>& words);

  std::size_t size() const { return words_.size(); }
  const std::string& word(int id) const;
  int id(const std::string& word) const;  // throws on unknown word
  bool contains(const std::string& word) const;

  // Whitespace tokenization over the closed vocabulary; unknown words are
  // an error naming the word. Detokenize skips pad/eos/mask.
  std::vector<int> tokenize(const std::string& text) const;
  std::string detokenize(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

// One action's caption fragment; exactly one word must be tagged VERB.
struct ActionTemplate {
  std::string name;
  std::vector<std::pair<std::string, PosTag>> words;
};

// Parameters of the toy world. Each event renders a full grid x grid x 2
// block of voxel tokens (one per cell per time slot), so an n-event episode
// has n * 2 * grid^2 tokens at times 0 .. 2n-1.
struct WorldSpec {
  int grid = 3;
  int timesteps = 8;  // upper bound on t; >= 2 * max_events
  std::vector<std::string> colors = {"red",    "blue",   "green",
                                     "yellow", "purple", "orange"};
  std::vector<std::string> shapes = {"cube", "ball",  "plate", "spoon",
                                     "bowl", "knife", "cup",   "block",
                                     "ring", "jar"};
  std::vector<ActionTemplate> actions = default_actions();
  int min_events = 1;
  int max_events = 4;
  double distractor_prob = 0.5;
  std::size_t d_feat = 32;

  static std::vector<ActionTemplate> default_actions();

  // Feature channel layout: color one-hot, shape one-hot, action one-hot,
  // then agent/patient/distractor flags and the phase bit. Unused trailing
  // channels stay zero.
  std::size_t color_offset() const { return 0; }
  std::size_t shape_offset() const { return colors.size(); }
  std::size_t action_offset() const { return colors.size() + shapes.size(); }
  std::size_t agent_flag() const { return action_offset() + actions.size(); }
  std::size_t patient_flag() const { return agent_flag() + 1; }
  std::size_t distractor_flag() const { return agent_flag() + 2; }
  std::size_t phase_flag() const { return agent_flag() + 3; }
  std::size_t channels_needed() const { return agent_flag() + 4; }

  void validate() const;  // throws std::invalid_argument

  // Specials, then "the", "then", colors, shapes, action words.
  Vocabulary vocabulary() const;
};

// One generated episode: voxel tokens aligned row-for-row with a feature
// tensor, the caption ids (eos-terminated), and the grammar tags (one per
// caption id; eos is tagged OTHER).
struct EpisodeRecord {
  std::vector<VoxelToken> video;
  Tensor features;  // len_v x d_feat
  std::vector<int> caption;
  std::vector<PosTag> pos_tags;
  std::uint64_t seed = 0;
};

EpisodeRecord generate_episode(const WorldSpec& spec, std::uint64_t seed);

// Token id -> tag. Well-defined because each grammar word carries exactly
// one tag; specials map to OTHER. Throws if the spec reuses a word under
// two different tags.
std::map<int, PosTag> tag_lexicon(const WorldSpec& spec);

CaptionExample to_example(const EpisodeRecord& rec);
std::vector<CaptionExample> to_examples(const std::vector<EpisodeRecord>& recs);

// Container with magic "R3FT", version 1: header carries d_feat and the
// record count; each record stores its seed, tokens as five f64 position
// fields plus d_feat f64 features, a length-prefixed caption (may be empty
// for inference-only files), and a tag block (empty or caption-length).
void save_feature_file(const std::string& path,
                       const std::vector<EpisodeRecord>& records);
std::vector<EpisodeRecord> load_feature_file(const std::string& path);

struct Splits {
  std::vector<EpisodeRecord> train;
  std::vector<EpisodeRecord> eval;
};

// Seeded shuffle followed by a two-way partition; fractions must sum to 1.
Splits make_splits(const std::vector<EpisodeRecord>& records,
                   double train_fraction, double eval_fraction,
                   std::uint64_t seed);

}  // namespace r3
