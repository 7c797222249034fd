#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "r3/metrics.hpp"
#include "r3/model.hpp"
#include "r3/world.hpp"

namespace r3 {

// Everything a batch run needs, round-trippable as key=value text. The
// grammar lexicon (colors/shapes/actions) is a program constant, so only
// the world's scalar knobs are serialized; a run is reproducible from this
// text plus the binary.
struct RunConfig {
  R3Config model;
  WorldSpec world;
  std::string data_dir = "data";
  std::string checkpoint_dir = "checkpoints";
  std::string report_dir = "reports";
  std::uint64_t steps = 200;
  std::uint64_t eval_every = 100;
  std::uint64_t log_every = 10;
  std::size_t count = 64;       // gen-data episode count
  double train_fraction = 0.8;
  std::size_t batch_size = 16;
  std::string variant = "r3";   // r3 | baseline

  SrMode mode() const;  // r3 -> quantized, baseline -> ones

  // Couples the model to the world (d_feat, vocab size) and validates
  // everything; must run before any command does work.
  void resolve();

  std::string to_text() const;
  static RunConfig from_text(const std::string& text);
  static RunConfig load_file(const std::string& path);
};

// Reads the model config embedded in a checkpoint without loading tensors.
R3Config checkpoint_config(const std::string& path);

// Batch commands. All throw on error (std::invalid_argument for contract
// violations, std::runtime_error for IO/format problems); the binary maps
// exceptions to a nonzero exit code. Progress goes to `log`.

// Generates `count` episodes, splits them, writes train.r3ft / eval.r3ft /
// manifest.txt / config.txt into data_dir, and logs per-stratum counts.
void cmd_gen_data(RunConfig cfg, std::ostream& log);

// Runs the training loop on data_dir/train.r3ft up to `steps` total steps,
// resuming from checkpoint_dir/latest.ckpt when present. Logs loss parts
// and role perplexity every log_every steps; checkpoints every eval_every
// steps and at the end.
void cmd_train(RunConfig cfg, std::ostream& log);

// Greedy-decodes every record of data_path with the checkpointed model and
// writes the trace dump (JSONL) to out_path.
void cmd_generate(RunConfig cfg, const std::string& checkpoint,
                  const std::string& data_path, const std::string& out_path,
                  std::ostream& log);

// Scores a trace dump against the references in refs_path: the full corpus
// plus predicate strata (all of min1..4 when min_predicates is 0, otherwise
// just that one). With a nonempty compare_path, also emits the per-stratum
// improvement of the primary dump over the compared one.
void cmd_evaluate(RunConfig cfg, const std::string& trace_path,
                  const std::string& refs_path, const std::string& compare_path,
                  int min_predicates, std::ostream& log);

// Emits the word -> (best role, probability) table for one quantize site
// and head, plus the reference word-frequency table. Empty site selects
// the first decoder cross-attention site.
void cmd_analyze_roles(RunConfig cfg, const std::string& trace_path,
                       const std::string& site, std::size_t head,
                       std::ostream& log);

}  // namespace r3
