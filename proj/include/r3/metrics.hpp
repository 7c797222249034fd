#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "r3/world.hpp"

namespace r3 {

// One evaluated example: what the model produced, what the reference says,
// and the role indices chosen while producing it. step_roles and tags align
// one-to-one with the generated ids.
struct GenerationTrace {
  std::vector<int> generated;
  std::vector<int> reference;
  std::vector<std::map<std::string, std::vector<int>>> step_roles;
  std::vector<PosTag> generated_tags;
  std::map<std::string, std::vector<std::vector<int>>> encoder_roles;
};

GenerationTrace make_trace(const Generation& gen,
                           const std::vector<int>& reference,
                           const std::map<int, PosTag>& lexicon);

// JSONL, one trace per line; the trace dump format for offline analysis.
void save_traces(const std::string& path,
                 const std::vector<GenerationTrace>& traces);
std::vector<GenerationTrace> load_traces(const std::string& path);

// ---- caption metrics -----------------------------------------------------------
// All metrics strip pad/eos/mask ids before scoring, take exactly one
// reference per candidate, and throw std::invalid_argument on an empty
// corpus (CIDEr additionally requires at least 2 examples).

// Corpus-level BLEU with clipped counts, geometric mean over orders 1..n,
// and the brevity penalty exp(1 - r/c) for c < r. Any order with zero
// clipped matches makes the score 0.
double bleu_n(const std::vector<std::vector<int>>& candidates,
              const std::vector<std::vector<int>>& references, int n);

// Mean LCS F-measure (beta = 1.2).
double rouge_l(const std::vector<std::vector<int>>& candidates,
               const std::vector<std::vector<int>>& references);

// Mean over n of 1..4 of the TF-IDF cosine with a Gaussian length penalty
// (sigma = 6), scaled by 10. Document frequencies come from the references.
double cider(const std::vector<std::vector<int>>& candidates,
             const std::vector<std::vector<int>>& references);

struct MetricReport {
  double bleu1 = 0.0, bleu2 = 0.0, bleu3 = 0.0, bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  std::size_t examples = 0;

  std::map<std::string, double> as_map() const;  // metric name -> score
  std::string to_text() const;                   // key=value lines
};

MetricReport compute_metrics(const std::vector<std::vector<int>>& candidates,
                             const std::vector<std::vector<int>>& references);

// ---- role analyses -------------------------------------------------------------

struct RoleAttraction {
  int best_role = -1;
  double probability = 0.0;  // max_k p(role = k | word)
  std::size_t count = 0;     // occurrences of the word in generated text
};

// Per word: the most-selected role at one (site, head) and how often it
// wins. Throws std::out_of_range when no trace step carries the site, or
// the head index is outside the site's head count.
std::map<int, RoleAttraction> role_word_probability(
    const std::vector<GenerationTrace>& traces, const std::string& site,
    std::size_t head);

// Word counts over the reference captions (specials stripped).
std::map<int, std::size_t> word_frequency(
    const std::vector<GenerationTrace>& traces);

// Indices of records whose reference tags contain at least min_predicates
// VERBs; min_predicates must lie in 1..4.
std::vector<std::size_t> predicate_stratify(
    const std::vector<EpisodeRecord>& records, int min_predicates);

// Per stratum, per metric: 100 * (model - baseline) / baseline; nullopt
// marks an undefined entry (baseline exactly 0). Throws on key mismatch.
std::map<std::string, std::map<std::string, std::optional<double>>>
improvement_report(const std::map<std::string, MetricReport>& model,
                   const std::map<std::string, MetricReport>& baseline);

// ---- report writers ------------------------------------------------------------

// word,count,best_role,probability rows sorted by descending probability
// then count; words rendered through the vocabulary.
void write_role_report_csv(std::ostream& os,
                           const std::map<int, RoleAttraction>& attraction,
                           const std::map<int, std::size_t>& frequency,
                           const Vocabulary& vocab);

// stratum,metric,model,baseline,improvement_pct rows ("undefined" when the
// baseline is 0).
void write_improvement_csv(
    std::ostream& os, const std::map<std::string, MetricReport>& model,
    const std::map<std::string, MetricReport>& baseline);

}  // namespace r3
