#include "r3/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace r3 {

namespace {

using Ngram = std::vector<int>;

std::vector<int> strip_specials(const std::vector<int>& ids) {
  std::vector<int> out;
  out.reserve(ids.size());
  for (int t : ids) {
    if (t != kPadId && t != kEosId && t != kMaskId) out.push_back(t);
  }
  return out;
}

std::map<Ngram, std::size_t> ngram_counts(const std::vector<int>& ids, int n) {
  std::map<Ngram, std::size_t> out;
  if (static_cast<int>(ids.size()) < n) return out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= ids.size(); ++i) {
    ++out[Ngram(ids.begin() + static_cast<std::ptrdiff_t>(i),
                ids.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  }
  return out;
}

void require_corpus(const std::vector<std::vector<int>>& candidates,
                    const std::vector<std::vector<int>>& references) {
  if (candidates.empty()) {
    throw std::invalid_argument("metric over an empty corpus");
  }
  if (candidates.size() != references.size()) {
    throw std::invalid_argument("need exactly one reference per candidate");
  }
}

std::size_t lcs_length(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1
                                    : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

double bleu_n(const std::vector<std::vector<int>>& candidates,
              const std::vector<std::vector<int>>& references, int n) {
  require_corpus(candidates, references);
  if (n < 1 || n > 4) {
    throw std::out_of_range("bleu order must lie in 1..4");
  }
  std::size_t cand_total = 0, ref_total = 0;
  std::vector<std::size_t> matched(static_cast<std::size_t>(n), 0);
  std::vector<std::size_t> possible(static_cast<std::size_t>(n), 0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const std::vector<int> cand = strip_specials(candidates[i]);
    const std::vector<int> ref = strip_specials(references[i]);
    cand_total += cand.size();
    ref_total += ref.size();
    for (int order = 1; order <= n; ++order) {
      auto cc = ngram_counts(cand, order);
      auto rc = ngram_counts(ref, order);
      for (const auto& [gram, count] : cc) {
        possible[static_cast<std::size_t>(order - 1)] += count;
        auto it = rc.find(gram);
        if (it != rc.end()) {
          matched[static_cast<std::size_t>(order - 1)] +=
              std::min(count, it->second);
        }
      }
    }
  }
  if (cand_total == 0) return 0.0;
  double log_sum = 0.0;
  for (int order = 0; order < n; ++order) {
    const std::size_t m = matched[static_cast<std::size_t>(order)];
    const std::size_t p = possible[static_cast<std::size_t>(order)];
    if (m == 0 || p == 0) return 0.0;
    log_sum += std::log(static_cast<double>(m) / static_cast<double>(p));
  }
  const double geo = std::exp(log_sum / n);
  const double bp =
      cand_total >= ref_total
          ? 1.0
          : std::exp(1.0 - static_cast<double>(ref_total) /
                               static_cast<double>(cand_total));
  return bp * geo;
}

double rouge_l(const std::vector<std::vector<int>>& candidates,
               const std::vector<std::vector<int>>& references) {
  require_corpus(candidates, references);
  const double beta2 = 1.2 * 1.2;
  double sum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const std::vector<int> cand = strip_specials(candidates[i]);
    const std::vector<int> ref = strip_specials(references[i]);
    const std::size_t lcs = lcs_length(cand, ref);
    if (lcs == 0) continue;
    const double p = static_cast<double>(lcs) / static_cast<double>(cand.size());
    const double r = static_cast<double>(lcs) / static_cast<double>(ref.size());
    sum += (1.0 + beta2) * r * p / (r + beta2 * p);
  }
  return sum / static_cast<double>(candidates.size());
}

double cider(const std::vector<std::vector<int>>& candidates,
             const std::vector<std::vector<int>>& references) {
  require_corpus(candidates, references);
  if (candidates.size() < 2) {
    throw std::invalid_argument(
        "cider needs a corpus of at least 2 examples for TF-IDF");
  }
  constexpr double kSigma = 6.0;
  const double n_docs = static_cast<double>(references.size());

  double total = 0.0;
  for (int order = 1; order <= 4; ++order) {
    // document frequency over the reference side
    std::map<Ngram, std::size_t> df;
    for (const auto& ref : references) {
      for (const auto& [gram, count] :
           ngram_counts(strip_specials(ref), order)) {
        ++df[gram];
      }
    }
    auto idf = [&](const Ngram& gram) {
      auto it = df.find(gram);
      const double d = it == df.end() ? 0.0 : static_cast<double>(it->second);
      return std::log(n_docs / std::max(1.0, d));
    };

    double order_sum = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const std::vector<int> cand = strip_specials(candidates[i]);
      const std::vector<int> ref = strip_specials(references[i]);
      auto cc = ngram_counts(cand, order);
      auto rc = ngram_counts(ref, order);
      double dot = 0.0, cnorm = 0.0, rnorm = 0.0;
      for (const auto& [gram, count] : cc) {
        const double w = static_cast<double>(count) * idf(gram);
        cnorm += w * w;
        auto it = rc.find(gram);
        if (it != rc.end()) {
          dot += w * static_cast<double>(it->second) * idf(gram);
        }
      }
      for (const auto& [gram, count] : rc) {
        const double w = static_cast<double>(count) * idf(gram);
        rnorm += w * w;
      }
      if (cnorm == 0.0 || rnorm == 0.0) continue;
      const double delta =
          static_cast<double>(cand.size()) - static_cast<double>(ref.size());
      const double penalty = std::exp(-delta * delta / (2.0 * kSigma * kSigma));
      order_sum += penalty * dot / (std::sqrt(cnorm) * std::sqrt(rnorm));
    }
    total += order_sum / static_cast<double>(candidates.size());
  }
  return 10.0 * total / 4.0;
}

std::map<std::string, double> MetricReport::as_map() const {
  return {{"bleu1", bleu1},     {"bleu2", bleu2}, {"bleu3", bleu3},
          {"bleu4", bleu4},     {"rouge_l", rouge_l}, {"cider", cider}};
}

std::string MetricReport::to_text() const {
  std::ostringstream os;
  for (const auto& [name, score] : as_map()) {
    os << name << "=" << score << "\n";
  }
  os << "examples=" << examples << "\n";
  return os.str();
}

MetricReport compute_metrics(const std::vector<std::vector<int>>& candidates,
                             const std::vector<std::vector<int>>& references) {
  MetricReport r;
  r.bleu1 = bleu_n(candidates, references, 1);
  r.bleu2 = bleu_n(candidates, references, 2);
  r.bleu3 = bleu_n(candidates, references, 3);
  r.bleu4 = bleu_n(candidates, references, 4);
  r.rouge_l = rouge_l(candidates, references);
  r.cider = cider(candidates, references);
  r.examples = candidates.size();
  return r;
}

// ---- traces -------------------------------------------------------------------

GenerationTrace make_trace(const Generation& gen,
                           const std::vector<int>& reference,
                           const std::map<int, PosTag>& lexicon) {
  GenerationTrace t;
  t.generated = gen.ids;
  t.reference = reference;
  t.step_roles = gen.step_roles;
  t.encoder_roles = gen.encoder_roles;
  t.generated_tags.reserve(gen.ids.size());
  for (int id : gen.ids) {
    auto it = lexicon.find(id);
    t.generated_tags.push_back(it == lexicon.end() ? PosTag::OTHER
                                                   : it->second);
  }
  return t;
}

void save_traces(const std::string& path,
                 const std::vector<GenerationTrace>& traces) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write trace file: " + path);
  for (const auto& t : traces) {
    if (t.step_roles.size() != t.generated.size() ||
        t.generated_tags.size() != t.generated.size()) {
      throw std::invalid_argument(
          "trace arrays must align with the generated ids");
    }
    nlohmann::json j;
    j["generated"] = t.generated;
    j["reference"] = t.reference;
    std::vector<std::string> tags;
    for (PosTag tag : t.generated_tags) tags.push_back(pos_tag_to_string(tag));
    j["tags"] = tags;
    j["steps"] = t.step_roles;
    j["encoder_roles"] = t.encoder_roles;
    os << j.dump() << "\n";
  }
  if (!os) throw std::runtime_error("short write on trace file: " + path);
}

std::vector<GenerationTrace> load_traces(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open trace file: " + path);
  std::vector<GenerationTrace> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("format error: trace line " +
                               std::to_string(lineno) + ": " + e.what());
    }
    GenerationTrace t;
    t.generated = j.at("generated").get<std::vector<int>>();
    t.reference = j.at("reference").get<std::vector<int>>();
    for (const auto& s : j.at("tags")) {
      t.generated_tags.push_back(pos_tag_from_string(s.get<std::string>()));
    }
    t.step_roles =
        j.at("steps")
            .get<std::vector<std::map<std::string, std::vector<int>>>>();
    if (j.contains("encoder_roles")) {
      t.encoder_roles =
          j.at("encoder_roles")
              .get<std::map<std::string, std::vector<std::vector<int>>>>();
    }
    if (t.step_roles.size() != t.generated.size() ||
        t.generated_tags.size() != t.generated.size()) {
      throw std::runtime_error("validation error: trace line " +
                               std::to_string(lineno) +
                               ": arrays misaligned with generated ids");
    }
    out.push_back(std::move(t));
  }
  return out;
}

// ---- role analyses -------------------------------------------------------------

std::map<int, RoleAttraction> role_word_probability(
    const std::vector<GenerationTrace>& traces, const std::string& site,
    std::size_t head) {
  if (traces.empty()) {
    throw std::invalid_argument("role analysis over an empty trace list");
  }
  bool site_seen = false;
  std::map<int, std::map<int, std::size_t>> counts;  // word -> role -> n
  for (const auto& t : traces) {
    for (std::size_t s = 0; s < t.generated.size(); ++s) {
      auto it = t.step_roles[s].find(site);
      if (it == t.step_roles[s].end()) continue;
      site_seen = true;
      if (head >= it->second.size()) {
        throw std::out_of_range("head " + std::to_string(head) +
                                " outside site '" + site + "' with " +
                                std::to_string(it->second.size()) + " heads");
      }
      ++counts[t.generated[s]][it->second[head]];
    }
  }
  if (!site_seen) {
    throw std::out_of_range("no trace step carries quantize site '" + site +
                            "'");
  }
  std::map<int, RoleAttraction> out;
  for (const auto& [word, roles] : counts) {
    RoleAttraction a;
    std::size_t total = 0, best = 0;
    for (const auto& [role, n] : roles) {
      total += n;
      if (n > best) {
        best = n;
        a.best_role = role;
      }
    }
    a.count = total;
    a.probability = static_cast<double>(best) / static_cast<double>(total);
    out.emplace(word, a);
  }
  return out;
}

std::map<int, std::size_t> word_frequency(
    const std::vector<GenerationTrace>& traces) {
  std::map<int, std::size_t> out;
  for (const auto& t : traces) {
    for (int id : strip_specials(t.reference)) ++out[id];
  }
  return out;
}

std::vector<std::size_t> predicate_stratify(
    const std::vector<EpisodeRecord>& records, int min_predicates) {
  if (min_predicates < 1 || min_predicates > 4) {
    throw std::out_of_range("min_predicates must lie in 1..4");
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    int verbs = 0;
    for (PosTag t : records[i].pos_tags) {
      if (t == PosTag::VERB) ++verbs;
    }
    if (verbs >= min_predicates) out.push_back(i);
  }
  return out;
}

std::map<std::string, std::map<std::string, std::optional<double>>>
improvement_report(const std::map<std::string, MetricReport>& model,
                   const std::map<std::string, MetricReport>& baseline) {
  if (model.size() != baseline.size()) {
    throw std::invalid_argument("strata differ between model and baseline");
  }
  std::map<std::string, std::map<std::string, std::optional<double>>> out;
  for (const auto& [stratum, report] : model) {
    auto it = baseline.find(stratum);
    if (it == baseline.end()) {
      throw std::invalid_argument("stratum '" + stratum +
                                  "' missing from the baseline");
    }
    const auto ms = report.as_map();
    const auto bs = it->second.as_map();
    for (const auto& [metric, value] : ms) {
      const double b = bs.at(metric);
      out[stratum][metric] =
          b == 0.0 ? std::nullopt
                   : std::optional<double>(100.0 * (value - b) / b);
    }
  }
  return out;
}

// ---- writers ------------------------------------------------------------------

void write_role_report_csv(std::ostream& os,
                           const std::map<int, RoleAttraction>& attraction,
                           const std::map<int, std::size_t>& frequency,
                           const Vocabulary& vocab) {
  std::vector<std::pair<int, RoleAttraction>> rows(attraction.begin(),
                                                   attraction.end());
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    if (a.second.probability != b.second.probability) {
      return a.second.probability > b.second.probability;
    }
    if (a.second.count != b.second.count) {
      return a.second.count > b.second.count;
    }
    return a.first < b.first;
  });
  os << "word,count,reference_frequency,best_role,probability\n";
  for (const auto& [word, a] : rows) {
    auto f = frequency.find(word);
    os << vocab.word(word) << "," << a.count << ","
       << (f == frequency.end() ? 0 : f->second) << "," << a.best_role << ","
       << a.probability << "\n";
  }
}

void write_improvement_csv(
    std::ostream& os, const std::map<std::string, MetricReport>& model,
    const std::map<std::string, MetricReport>& baseline) {
  auto improvements = improvement_report(model, baseline);
  os << "stratum,metric,model,baseline,improvement_pct\n";
  for (const auto& [stratum, metrics] : improvements) {
    const auto ms = model.at(stratum).as_map();
    const auto bs = baseline.at(stratum).as_map();
    for (const auto& [metric, delta] : metrics) {
      os << stratum << "," << metric << "," << ms.at(metric) << ","
         << bs.at(metric) << ",";
      if (delta.has_value()) {
        os << *delta;
      } else {
        os << "undefined";
      }
      os << "\n";
    }
  }
}

}  // namespace r3
