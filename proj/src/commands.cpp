#include "r3/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <set>
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

void ensure_dir(const std::string& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw std::runtime_error("cannot create directory: " + dir + " (" +
                             ec.message() + ")");
  }
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write file: " + path);
  os << text;
  os.flush();
  if (!os) throw std::runtime_error("cannot write file: " + path);
}

std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

// Longest caption the grammar can emit, eos included.
std::size_t max_caption_length(const WorldSpec& w) {
  std::size_t widest = 1;
  for (const auto& a : w.actions) widest = std::max(widest, a.words.size());
  const std::size_t per_event = 6 + widest;  // the C S <verb...> the C S
  const std::size_t n = static_cast<std::size_t>(w.max_events);
  return n * per_event + (n - 1) + 1;
}

}  // namespace

SrMode RunConfig::mode() const {
  if (variant == "r3") return SrMode::quantized;
  if (variant == "baseline") return SrMode::ones;
  throw std::invalid_argument("config error: unknown variant '" + variant +
                              "' (expected r3 or baseline)");
}

void RunConfig::resolve() {
  world.validate();
  model.d_feat = world.d_feat;
  model.vocab_size = world.vocabulary().size();
  if (model.t_video < world.timesteps) {
    throw std::invalid_argument(
        "config error: model.t_video is smaller than world.timesteps");
  }
  const std::size_t need = max_caption_length(world);
  if (static_cast<std::size_t>(model.l_text) < need) {
    throw std::invalid_argument(
        "config error: model.l_text cannot hold the longest caption (" +
        std::to_string(need) + " tokens)");
  }
  if (eval_every == 0 || log_every == 0) {
    throw std::invalid_argument(
        "config error: eval_every and log_every must be positive");
  }
  if (batch_size == 0) {
    throw std::invalid_argument("config error: batch_size must be positive");
  }
  if (count == 0) {
    throw std::invalid_argument("config error: count must be positive");
  }
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) {
    throw std::invalid_argument(
        "config error: train_fraction outside (0, 1]");
  }
  mode();  // validates the variant name
  model.validate();
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  {
    std::istringstream ms(model.to_text());
    std::string line;
    while (std::getline(ms, line)) os << "model." << line << "\n";
  }
  os << "world.grid=" << world.grid << "\n";
  os << "world.timesteps=" << world.timesteps << "\n";
  os << "world.min_events=" << world.min_events << "\n";
  os << "world.max_events=" << world.max_events << "\n";
  os << "world.distractor_prob=" << fmt_double(world.distractor_prob) << "\n";
  os << "world.d_feat=" << world.d_feat << "\n";
  os << "data_dir=" << data_dir << "\n";
  os << "checkpoint_dir=" << checkpoint_dir << "\n";
  os << "report_dir=" << report_dir << "\n";
  os << "steps=" << steps << "\n";
  os << "eval_every=" << eval_every << "\n";
  os << "log_every=" << log_every << "\n";
  os << "count=" << count << "\n";
  os << "train_fraction=" << fmt_double(train_fraction) << "\n";
  os << "batch_size=" << batch_size << "\n";
  os << "variant=" << variant << "\n";
  return os.str();
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  std::string model_text;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config error: malformed line '" + line +
                                  "'");
    }
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key.rfind("model.", 0) == 0) {
      model_text += line.substr(6);
      model_text += "\n";
      continue;
    }
    try {
      if (key == "world.grid") cfg.world.grid = std::stoi(val);
      else if (key == "world.timesteps") cfg.world.timesteps = std::stoi(val);
      else if (key == "world.min_events") cfg.world.min_events = std::stoi(val);
      else if (key == "world.max_events") cfg.world.max_events = std::stoi(val);
      else if (key == "world.distractor_prob") cfg.world.distractor_prob = std::stod(val);
      else if (key == "world.d_feat") cfg.world.d_feat = std::stoul(val);
      else if (key == "data_dir") cfg.data_dir = val;
      else if (key == "checkpoint_dir") cfg.checkpoint_dir = val;
      else if (key == "report_dir") cfg.report_dir = val;
      else if (key == "steps") cfg.steps = std::stoull(val);
      else if (key == "eval_every") cfg.eval_every = std::stoull(val);
      else if (key == "log_every") cfg.log_every = std::stoull(val);
      else if (key == "count") cfg.count = std::stoul(val);
      else if (key == "train_fraction") cfg.train_fraction = std::stod(val);
      else if (key == "batch_size") cfg.batch_size = std::stoul(val);
      else if (key == "variant") cfg.variant = val;
      else throw std::invalid_argument("config error: unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw;
    } catch (const std::exception&) {
      throw std::invalid_argument("config error: bad value for '" + key + "'");
    }
  }
  cfg.model = R3Config::from_text(model_text);
  return cfg;
}

RunConfig RunConfig::load_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return from_text(buf.str());
}

R3Config checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "R3CK") {
    throw std::runtime_error("format error: not a checkpoint file: " + path);
  }
  const uint32_t version = read_u32(is);
  if (version != 1) {
    throw std::runtime_error("format error: unsupported checkpoint version " +
                             std::to_string(version));
  }
  return R3Config::from_text(read_string(is));
}

// ---- gen-data ---------------------------------------------------------------

void cmd_gen_data(RunConfig cfg, std::ostream& log) {
  cfg.resolve();
  ensure_dir(cfg.data_dir);

  std::vector<EpisodeRecord> records;
  records.reserve(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    records.push_back(generate_episode(cfg.world, mix_seed(cfg.model.seed, i)));
  }
  Splits splits = make_splits(records, cfg.train_fraction,
                              1.0 - cfg.train_fraction, cfg.model.seed);

  save_feature_file(join_path(cfg.data_dir, "train.r3ft"), splits.train);
  save_feature_file(join_path(cfg.data_dir, "eval.r3ft"), splits.eval);
  write_text_file(join_path(cfg.data_dir, "config.txt"), cfg.to_text());

  std::ostringstream manifest;
  manifest << "count=" << records.size() << "\n";
  manifest << "train=" << splits.train.size() << "\n";
  manifest << "eval=" << splits.eval.size() << "\n";
  manifest << "vocab=" << cfg.world.vocabulary().size() << "\n";
  for (int m = 1; m <= 4; ++m) {
    manifest << "stratum_min" << m << "="
             << predicate_stratify(records, m).size() << "\n";
  }
  write_text_file(join_path(cfg.data_dir, "manifest.txt"), manifest.str());

  log << "wrote " << records.size() << " episodes to " << cfg.data_dir << ": "
      << splits.train.size() << " train, " << splits.eval.size() << " eval\n";
  for (int m = 1; m <= 4; ++m) {
    log << "stratum min_predicates=" << m << ": "
        << predicate_stratify(records, m).size() << " episodes\n";
  }
}

// ---- train ------------------------------------------------------------------

namespace {

// Role usage of one forward pass, pooled over every quantize site and head.
double role_perplexity(const R3Model& model, const CaptionExample& ex,
                       SrMode mode) {
  NoGradGuard guard;
  Rng probe_rng(0);
  ForwardResult out = model.forward(ex, ex.caption, mode, false, probe_rng);
  std::vector<int> pooled;
  for (const auto& site : out.sites) {
    for (const auto& head : site.roles) {
      pooled.insert(pooled.end(), head.begin(), head.end());
    }
  }
  if (pooled.empty()) return 0.0;  // ones ablation quantizes nothing
  return codebook_stats(pooled, model.config().k_roles).perplexity;
}

}  // namespace

void cmd_train(RunConfig cfg, std::ostream& log) {
  cfg.resolve();
  const SrMode mode = cfg.mode();

  const std::string train_path = join_path(cfg.data_dir, "train.r3ft");
  std::vector<CaptionExample> examples =
      to_examples(load_feature_file(train_path));
  if (examples.empty()) {
    throw std::runtime_error("empty training set: " + train_path);
  }
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].caption.empty()) {
      throw std::invalid_argument("record " + std::to_string(i) +
                                  " has no caption; cannot train on it");
    }
    if (examples[i].caption.size() >
        static_cast<std::size_t>(cfg.model.l_text)) {
      throw std::invalid_argument("record " + std::to_string(i) +
                                  " caption exceeds model.l_text");
    }
  }

  ensure_dir(cfg.checkpoint_dir);
  write_text_file(join_path(cfg.checkpoint_dir, "config.txt"), cfg.to_text());

  Rng init_rng(cfg.model.seed);
  R3Model model(cfg.model, init_rng);
  Trainer trainer(model, cfg.model.learning_rate, cfg.model.seed);

  const std::string latest = join_path(cfg.checkpoint_dir, "latest.ckpt");
  if (std::filesystem::exists(latest)) {
    trainer.load_checkpoint(latest);
    log << "resumed from " << latest << " at step " << trainer.step() << "\n";
  }

  const std::string log_path = join_path(cfg.checkpoint_dir, "train.log");
  std::ofstream line_log(log_path, std::ios::app);
  if (!line_log) throw std::runtime_error("cannot append to file: " + log_path);

  const std::size_t n = examples.size();
  const std::size_t bs = std::min(cfg.batch_size, n);
  auto save_at = [&](std::uint64_t s) {
    trainer.save_checkpoint(
        join_path(cfg.checkpoint_dir, "step_" + std::to_string(s) + ".ckpt"));
    trainer.save_checkpoint(latest);
  };

  for (std::uint64_t s = trainer.step() + 1; s <= cfg.steps; ++s) {
    std::vector<CaptionExample> batch;
    batch.reserve(bs);
    const std::size_t start = static_cast<std::size_t>((s - 1) * bs % n);
    for (std::size_t j = 0; j < bs; ++j) {
      batch.push_back(examples[(start + j) % n]);
    }
    Trainer::StepRecord rec = trainer.train_step(batch, mode);
    if (s == 1 || s % cfg.log_every == 0 || s == cfg.steps) {
      const double perp = role_perplexity(model, batch.front(), mode);
      std::ostringstream line;
      line << "step=" << rec.step << " total=" << fmt_double(rec.total)
           << " ce=" << fmt_double(rec.ce) << " l_q=" << fmt_double(rec.l_q)
           << " role_perplexity=" << fmt_double(perp);
      line_log << line.str() << "\n";
      line_log.flush();
      log << line.str() << "\n";
    }
    if (s % cfg.eval_every == 0 && s != cfg.steps) save_at(s);
  }
  save_at(trainer.step());
  log << "trained to step " << trainer.step() << "; checkpoints in "
      << cfg.checkpoint_dir << "\n";
}

// ---- generate ---------------------------------------------------------------

void cmd_generate(RunConfig cfg, const std::string& checkpoint,
                  const std::string& data_path, const std::string& out_path,
                  std::ostream& log) {
  cfg.resolve();
  const R3Config mcfg = checkpoint_config(checkpoint);
  if (mcfg.vocab_size != cfg.world.vocabulary().size()) {
    throw std::invalid_argument(
        "checkpoint vocabulary does not match the world grammar");
  }

  Rng init_rng(mcfg.seed);
  R3Model model(mcfg, init_rng);
  Trainer loader(model, mcfg.learning_rate, mcfg.seed);
  loader.load_checkpoint(checkpoint);

  const std::vector<EpisodeRecord> records = load_feature_file(data_path);
  const std::map<int, PosTag> lexicon = tag_lexicon(cfg.world);
  const SrMode mode = cfg.mode();

  std::vector<GenerationTrace> traces;
  traces.reserve(records.size());
  for (const auto& rec : records) {
    Generation gen = model.generate_greedy(
        rec.video, rec.features, static_cast<std::size_t>(mcfg.l_text), mode);
    traces.push_back(make_trace(gen, rec.caption, lexicon));
  }
  if (records.empty()) {
    log << "warning: empty eval set; writing an empty trace dump\n";
  }

  ensure_dir(std::filesystem::path(out_path).parent_path().string());
  save_traces(out_path, traces);
  log << "decoded " << traces.size() << " examples -> " << out_path << "\n";
}

// ---- evaluate ---------------------------------------------------------------

namespace {

struct AlignedCorpus {
  std::vector<std::vector<int>> candidates;
  std::vector<std::vector<int>> references;
};

AlignedCorpus align_traces(const std::vector<GenerationTrace>& traces,
                           const std::vector<EpisodeRecord>& records,
                           const std::string& what) {
  if (traces.size() != records.size()) {
    throw std::invalid_argument(
        "contract error: " + what + " has " + std::to_string(traces.size()) +
        " entries but the reference file has " +
        std::to_string(records.size()));
  }
  AlignedCorpus out;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    if (traces[i].reference != records[i].caption) {
      throw std::invalid_argument("contract error: " + what + " entry " +
                                  std::to_string(i) +
                                  " does not match the reference caption");
    }
    out.candidates.push_back(traces[i].generated);
    out.references.push_back(traces[i].reference);
  }
  return out;
}

// Full corpus plus the predicate strata big enough to score; the strata are
// independent sub-corpora, so they run concurrently.
std::map<std::string, MetricReport> stratified_reports(
    const AlignedCorpus& corpus, const std::vector<EpisodeRecord>& records,
    int min_predicates, std::ostream& log) {
  std::vector<std::pair<std::string, AlignedCorpus>> jobs;
  jobs.push_back({"all", corpus});
  const int lo = min_predicates == 0 ? 1 : min_predicates;
  const int hi = min_predicates == 0 ? 4 : min_predicates;
  for (int m = lo; m <= hi; ++m) {
    const std::vector<std::size_t> idx = predicate_stratify(records, m);
    if (idx.size() < 2) {
      log << "stratum min" << m << ": skipped (" << idx.size()
          << " examples, need at least 2)\n";
      continue;
    }
    AlignedCorpus sub;
    for (std::size_t i : idx) {
      sub.candidates.push_back(corpus.candidates[i]);
      sub.references.push_back(corpus.references[i]);
    }
    jobs.push_back({"min" + std::to_string(m), std::move(sub)});
  }
  std::vector<std::future<MetricReport>> pending;
  for (const auto& [name, sub] : jobs) {
    pending.push_back(std::async(std::launch::async, [&sub] {
      return compute_metrics(sub.candidates, sub.references);
    }));
  }
  std::map<std::string, MetricReport> out;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    out[jobs[i].first] = pending[i].get();
  }
  return out;
}

}  // namespace

void cmd_evaluate(RunConfig cfg, const std::string& trace_path,
                  const std::string& refs_path, const std::string& compare_path,
                  int min_predicates, std::ostream& log) {
  cfg.resolve();
  if (min_predicates < 0 || min_predicates > 4) {
    throw std::invalid_argument(
        "min_predicates outside 1..4 (0 selects all strata)");
  }
  const std::vector<GenerationTrace> traces = load_traces(trace_path);
  const std::vector<EpisodeRecord> records = load_feature_file(refs_path);
  const AlignedCorpus corpus = align_traces(traces, records, "trace dump");
  const auto reports = stratified_reports(corpus, records, min_predicates, log);

  ensure_dir(cfg.report_dir);
  write_text_file(join_path(cfg.report_dir, "metrics.txt"),
                  reports.at("all").to_text());

  std::ostringstream strata;
  strata << "stratum,examples,bleu1,bleu2,bleu3,bleu4,rouge_l,cider\n";
  for (const auto& [name, rep] : reports) {
    strata << name << "," << rep.examples << "," << fmt_double(rep.bleu1)
           << "," << fmt_double(rep.bleu2) << "," << fmt_double(rep.bleu3)
           << "," << fmt_double(rep.bleu4) << "," << fmt_double(rep.rouge_l)
           << "," << fmt_double(rep.cider) << "\n";
  }
  write_text_file(join_path(cfg.report_dir, "metrics_strata.csv"),
                  strata.str());

  for (const auto& [name, rep] : reports) {
    log << name << ": bleu4=" << rep.bleu4 << " rouge_l=" << rep.rouge_l
        << " cider=" << rep.cider << " (" << rep.examples << " examples)\n";
  }

  if (!compare_path.empty()) {
    const std::vector<GenerationTrace> base_traces = load_traces(compare_path);
    const AlignedCorpus base = align_traces(base_traces, records, "compare dump");
    const auto base_reports =
        stratified_reports(base, records, min_predicates, log);
    std::ostringstream imp;
    write_improvement_csv(imp, reports, base_reports);
    write_text_file(join_path(cfg.report_dir, "improvement.csv"), imp.str());
    const auto table = improvement_report(reports, base_reports);
    for (const auto& [name, metrics] : table) {
      const auto& cell = metrics.at("cider");
      log << "improvement " << name << ": cider "
          << (cell ? fmt_double(*cell) + "%" : std::string("undefined"))
          << "\n";
    }
  }
}

// ---- analyze-roles ----------------------------------------------------------

void cmd_analyze_roles(RunConfig cfg, const std::string& trace_path,
                       const std::string& site, std::size_t head,
                       std::ostream& log) {
  cfg.resolve();
  const std::vector<GenerationTrace> traces = load_traces(trace_path);
  if (traces.empty()) {
    throw std::runtime_error("format error: empty trace dump: " + trace_path);
  }

  std::set<std::string> sites;
  for (const auto& t : traces) {
    for (const auto& step : t.step_roles) {
      for (const auto& [name, roles] : step) sites.insert(name);
    }
  }
  if (sites.empty()) {
    throw std::runtime_error(
        "format error: trace dump carries no role selections (baseline "
        "dumps cannot be analyzed): " +
        trace_path);
  }

  std::string resolved = site;
  if (resolved.empty()) {
    for (const auto& name : sites) {
      if (name.find(".cross") != std::string::npos) {
        resolved = name;
        break;
      }
    }
    if (resolved.empty()) resolved = *sites.begin();
  }

  const auto attraction = role_word_probability(traces, resolved, head);
  const auto frequency = word_frequency(traces);
  const Vocabulary vocab = cfg.world.vocabulary();

  ensure_dir(cfg.report_dir);
  std::string tag = resolved;
  std::replace(tag.begin(), tag.end(), '.', '_');
  const std::string roles_path = join_path(
      cfg.report_dir, "roles_" + tag + "_head" + std::to_string(head) + ".csv");
  std::ostringstream roles_csv;
  write_role_report_csv(roles_csv, attraction, frequency, vocab);
  write_text_file(roles_path, roles_csv.str());

  std::vector<std::pair<int, std::size_t>> freq(frequency.begin(),
                                                frequency.end());
  std::sort(freq.begin(), freq.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::ostringstream freq_csv;
  freq_csv << "word,count\n";
  for (const auto& [id, c] : freq) {
    freq_csv << vocab.word(id) << "," << c << "\n";
  }
  write_text_file(join_path(cfg.report_dir, "word_frequency.csv"),
                  freq_csv.str());

  log << "analyzed " << attraction.size() << " words at site " << resolved
      << " head " << head << " -> " << roles_path << "\n";
}

}  // namespace r3
