#ifndef FDL_EVAL_HPP
#define FDL_EVAL_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "fdl/corpus.hpp"
#include "fdl/model.hpp"
#include "fdl/reward.hpp"
#include "json.hpp"

namespace fdl {

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Log-probabilities of the next token given the tokens generated so far.
using NextLogProbs = std::function<std::vector<double>(const std::vector<int>& generated)>;

/// Row-wise log-softmax of the last logits row, in double.
inline std::vector<double> last_row_log_softmax(const Tensor<float>& logits) {
  const std::size_t v = logits.cols();
  const float* z = logits.data().data() + (logits.rows() - 1) * v;
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, double(z[j]));
  double s = 0;
  for (std::size_t j = 0; j < v; ++j) s += std::exp(double(z[j]) - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out(v);
  for (std::size_t j = 0; j < v; ++j) out[j] = double(z[j]) - lse;
  return out;
}

/// Runs the full prefix (prompt + generated) through the model; there is no
/// key/value cache.
inline NextLogProbs model_next_logprobs(const Model<float>& model, const Prompt& prompt) {
  return [&model, prompt](const std::vector<int>& gen) {
    std::vector<int> ids = prompt.ids, types = prompt.types;
    ids.insert(ids.end(), gen.begin(), gen.end());
    types.insert(types.end(), gen.size(), kBotType);
    Tape<float> tape(false);
    return last_row_log_softmax(forward(tape, model, std::span<const int>(ids), std::span<const int>(types)).logits);
  };
}

/// Generation budget left by the model's context window.
inline int capped_max_new(const Model<float>& model, const Prompt& prompt, int max_new) {
  return std::max(0, std::min(max_new, model.config.max_seq_len - int(prompt.ids.size())));
}

struct Hypothesis {
  std::vector<int> tokens;  // without <eos>
  double logprob = 0;       // includes the <eos> step when finished
  std::size_t length = 0;   // scored length, counts <eos>
  bool finished = false;
};

inline double normalized_score(double logprob, std::size_t length, double alpha) {
  return logprob / std::pow(double(std::max<std::size_t>(length, 1)), alpha);
}

inline double normalized_score(const Hypothesis& h, double alpha) {
  return normalized_score(h.logprob, h.length, alpha);
}

/// Argmax until <eos> or max_new tokens; ties go to the lowest id.
inline Hypothesis decode_greedy(const NextLogProbs& next, int max_new, int eos = Vocabulary::kEos) {
  Hypothesis h;
  for (int step = 0; step < max_new; ++step) {
    auto lp = next(h.tokens);
    const int best = int(std::max_element(lp.begin(), lp.end()) - lp.begin());
    h.logprob += lp[std::size_t(best)];
    ++h.length;
    if (best == eos) {
      h.finished = true;
      return h;
    }
    h.tokens.push_back(best);
  }
  return h;
}

inline Hypothesis decode_greedy(const Model<float>& model, const Prompt& prompt, int max_new) {
  return decode_greedy(model_next_logprobs(model, prompt), capped_max_new(model, prompt, max_new));
}

namespace detail {

struct BeamEntry {
  std::vector<int> tokens;
  double logprob = 0;
};

// One beam search of fixed width; finished hypotheses go to `pool`. The
// search stops once `width` hypotheses have finished.
inline void beam_pass(const NextLogProbs& next, int width, int max_new, int eos,
                      std::vector<Hypothesis>& pool) {
  std::vector<BeamEntry> live{BeamEntry{}};
  int finished = 0;
  for (int step = 0; step < max_new && !live.empty(); ++step) {
    struct Cand {
      std::size_t beam;
      int token;
      double logprob;
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < live.size(); ++b) {
      auto lp = next(live[b].tokens);
      for (std::size_t t = 0; t < lp.size(); ++t)
        cands.push_back({b, int(t), live[b].logprob + lp[t]});
    }
    // stable: equal scores keep beam order, then token id order
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Cand& a, const Cand& b) { return a.logprob > b.logprob; });
    std::vector<BeamEntry> next_live;
    for (std::size_t rank = 0; rank < cands.size() && int(next_live.size()) < width; ++rank) {
      const auto& c = cands[rank];
      if (c.token == eos) {
        if (int(rank) >= width) continue;
        pool.push_back({live[c.beam].tokens, c.logprob, live[c.beam].tokens.size() + 1, true});
        ++finished;
        continue;
      }
      auto toks = live[c.beam].tokens;
      toks.push_back(c.token);
      next_live.push_back({std::move(toks), c.logprob});
    }
    if (finished >= width) return;
    live = std::move(next_live);
  }
  for (auto& b : live) pool.push_back({b.tokens, b.logprob, b.tokens.size(), false});
}

}  // namespace detail

/// Beam search scored by logprob / length^alpha. The hypothesis pool is
/// shared across widths 1..n_beams, so the result never scores below the
/// greedy one and never drops as n_beams grows. Prefix log-probs are cached
/// so the narrower passes mostly reuse work.
inline Hypothesis decode_beam(const NextLogProbs& next, int n_beams, int max_new, double alpha = 0.7,
                              int eos = Vocabulary::kEos) {
  if (n_beams < 1) throw PreconditionError("decode_beam: n_beams must be >= 1");
  std::map<std::vector<int>, std::vector<double>> cache;
  NextLogProbs cached = [&](const std::vector<int>& gen) -> std::vector<double> {
    auto it = cache.find(gen);
    if (it != cache.end()) return it->second;
    return cache.emplace(gen, next(gen)).first->second;
  };
  std::vector<Hypothesis> pool;
  for (int w = 1; w <= n_beams; ++w) detail::beam_pass(cached, w, max_new, eos, pool);
  if (pool.empty()) return Hypothesis{};
  std::size_t best = 0;
  for (std::size_t i = 1; i < pool.size(); ++i)
    if (normalized_score(pool[i], alpha) > normalized_score(pool[best], alpha)) best = i;
  return pool[best];
}

inline Hypothesis decode_beam(const Model<float>& model, const Prompt& prompt, int n_beams, int max_new,
                              double alpha = 0.7) {
  return decode_beam(model_next_logprobs(model, prompt), n_beams, capped_max_new(model, prompt, max_new),
                     alpha);
}

// ---------------------------------------------------------------------------
// Lexical metrics (percentages)
// ---------------------------------------------------------------------------

using Tokens = std::vector<std::string>;

namespace detail {

inline Tokens strip_pad(const Tokens& t) {
  Tokens out;
  for (const auto& w : t)
    if (w != "<pad>") out.push_back(w);
  return out;
}

inline double f1_from_counts(double overlap, double n_hyp, double n_ref) {
  if (overlap == 0) return 0.0;
  const double p = overlap / n_hyp, r = overlap / n_ref;
  return 100.0 * 2 * p * r / (p + r);
}

inline std::size_t clipped_overlap(const Tokens& hyp, const Tokens& ref) {
  std::map<std::string, std::size_t> rc;
  for (const auto& w : ref) ++rc[w];
  std::size_t n = 0;
  for (const auto& w : hyp) {
    auto it = rc.find(w);
    if (it != rc.end() && it->second > 0) {
      --it->second;
      ++n;
    }
  }
  return n;
}

}  // namespace detail

/// Unigram F1 with clipped counts.
inline double metric_f1(const Tokens& hyp_in, const Tokens& ref_in) {
  const auto hyp = detail::strip_pad(hyp_in), ref = detail::strip_pad(ref_in);
  if (hyp.empty() && ref.empty()) return 100.0;
  if (hyp.empty() || ref.empty()) return 0.0;
  return detail::f1_from_counts(double(detail::clipped_overlap(hyp, ref)), double(hyp.size()),
                                double(ref.size()));
}

struct BleuOptions {
  int max_n = 4;
  double epsilon = 0.1;  // replaces a zero match count
};

/// Corpus BLEU: clipped n-gram precisions pooled over the corpus, geometric
/// mean over the orders the hypotheses actually have, brevity penalty.
inline double metric_bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs,
                          BleuOptions opt = {}) {
  if (hyps.empty()) throw Error("metric_bleu: empty corpus");
  if (hyps.size() != refs.size()) throw Error("metric_bleu: corpora differ in size");
  std::vector<double> match(std::size_t(opt.max_n), 0), total(std::size_t(opt.max_n), 0);
  double hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto h = detail::strip_pad(hyps[s]), r = detail::strip_pad(refs[s]);
    hyp_len += double(h.size());
    ref_len += double(r.size());
    for (int n = 1; n <= opt.max_n; ++n) {
      std::map<Tokens, std::size_t> rc;
      for (std::size_t i = 0; i + std::size_t(n) <= r.size(); ++i)
        ++rc[Tokens(r.begin() + long(i), r.begin() + long(i) + n)];
      for (std::size_t i = 0; i + std::size_t(n) <= h.size(); ++i) {
        total[std::size_t(n - 1)] += 1;
        auto it = rc.find(Tokens(h.begin() + long(i), h.begin() + long(i) + n));
        if (it != rc.end() && it->second > 0) {
          --it->second;
          match[std::size_t(n - 1)] += 1;
        }
      }
    }
  }
  if (hyp_len == 0) return 0.0;
  double log_sum = 0;
  int orders = 0;
  for (int n = 0; n < opt.max_n; ++n) {
    if (total[std::size_t(n)] == 0) continue;
    const double m = match[std::size_t(n)] > 0 ? match[std::size_t(n)] : opt.epsilon;
    log_sum += std::log(m / total[std::size_t(n)]);
    ++orders;
  }
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return 100.0 * bp * std::exp(log_sum / orders);
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double metric_rouge_l(const Tokens& hyp_in, const Tokens& ref_in) {
  const auto hyp = detail::strip_pad(hyp_in), ref = detail::strip_pad(ref_in);
  if (hyp.empty() && ref.empty()) return 100.0;
  return detail::f1_from_counts(double(lcs_length(hyp, ref)), double(hyp.size()), double(ref.size()));
}

inline const std::unordered_set<std::string>& stopwords() {
  static const std::unordered_set<std::string> s{
      "a",    "an",   "the", "of",   "in",   "on",  "at",   "to",   "is",  "was",  "are", "were",
      "be",   "and",  "or",  "that", "this", "it",  "for",  "with", "as",  "by",   "i",   "you",
      "he",   "she",  "we",  "they", "me",   "my",  "your", "do",   "did", "does", "so",  "not",
      "what", "who",  "where", "when", "which", "about", "something", "tell", "heard", "know"};
  return s;
}

/// Lowercases and strips punctuation; tokens that become empty are dropped.
inline Tokens normalize_tokens(const Tokens& in, bool drop_stopwords = false) {
  Tokens out;
  for (const auto& w : detail::strip_pad(in)) {
    std::string t;
    for (unsigned char c : w)
      if (!std::ispunct(c)) t.push_back(char(std::tolower(c)));
    if (t.empty() || (drop_stopwords && stopwords().count(t))) continue;
    out.push_back(std::move(t));
  }
  return out;
}

/// Unigram F1 between a response and its grounding knowledge.
inline double metric_kf1(const Tokens& hyp, const Tokens& knowledge, bool drop_stopwords = false) {
  return metric_f1(normalize_tokens(hyp, drop_stopwords), normalize_tokens(knowledge, drop_stopwords));
}

// ---------------------------------------------------------------------------
// Fine-grained consistency oracle
// ---------------------------------------------------------------------------

struct FineGrainedLabel {
  bool verifiable = false;
  bool hallucination_free = false;
  bool factually_consistent = false;
};

/// Rule-based labels from the world's entity gazetteer.
inline FineGrainedLabel oracle_fine_grained(const DialogueSample& sample, const Tokens& hyp,
                                            const World& world) {
  FineGrainedLabel l;
  const std::set<std::string> known(sample.knowledge.begin(), sample.knowledge.end());
  bool grounded = false;
  l.hallucination_free = true;
  for (const auto& w : hyp) {
    if (world.find_entity(w) < 0) continue;
    l.verifiable = true;
    if (!known.count(w)) l.hallucination_free = false;
    if (w == sample.grounded_object) grounded = true;
  }
  l.factually_consistent = l.verifiable && grounded && l.hallucination_free;
  return l;
}

inline bool mentions_grounded_object(const DialogueSample& sample, const Tokens& hyp) {
  return !sample.grounded_object.empty() &&
         std::find(hyp.begin(), hyp.end(), sample.grounded_object) != hyp.end();
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct MetricsReport {
  double f1 = 0, bleu = 0, rouge_l = 0, kf1 = 0;                 // percentages
  double verif_rate = 0, hallu_safe_rate = 0, fact_rate = 0;      // percentages, oracle
  double grounded_entity_accuracy = 0;                            // percentage
  std::optional<double> mean_r1;                                  // fraction
  std::optional<double> classifier_fact_rate;                     // percentage, r1 >= 0.5
  std::size_t n = 0;

  void validate() const {
    for (double v : {f1, bleu, rouge_l, kf1, verif_rate, hallu_safe_rate, fact_rate, grounded_entity_accuracy})
      if (!(v >= 0 && v <= 100 + 1e-9)) throw NumericError("metrics report: percentage out of range");
    if (mean_r1 && !(*mean_r1 >= 0 && *mean_r1 <= 1)) throw NumericError("metrics report: mean_r1 out of range");
  }
};

struct SampleResult {
  Tokens hyp;
  double f1 = 0, rouge_l = 0, kf1 = 0;
  FineGrainedLabel label;
  bool grounded = false;
  std::optional<double> r1;
};

struct EvalResult {
  MetricsReport report;
  std::vector<SampleResult> samples;
};

struct DecodeConfig {
  int n_beams = 5;
  int max_new = 16;
  double alpha = 0.7;
  bool greedy = false;
  int max_seq_len = 64;  // for prompt encoding
  EntityScope scope = EntityScope::response;

  nlohmann::json to_json() const {
    return {{"n_beams", n_beams}, {"max_new", max_new}, {"alpha", alpha},
            {"greedy", greedy},   {"max_seq_len", max_seq_len}};
  }
  static DecodeConfig from_json(const nlohmann::json& j) {
    DecodeConfig c;
    c.n_beams = j.value("n_beams", c.n_beams);
    c.max_new = j.value("max_new", c.max_new);
    c.alpha = j.value("alpha", c.alpha);
    c.greedy = j.value("greedy", c.greedy);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    if (c.n_beams < 1 || c.max_new < 1) throw Error("decode config: n_beams and max_new must be >= 1");
    return c;
  }
};

/// Scores given hypotheses against the samples.
inline EvalResult evaluate_hypotheses(const std::vector<DialogueSample>& samples,
                                      const std::vector<Tokens>& hyps, const World& world,
                                      const RewardModel* rm = nullptr, const Vocabulary* vocab = nullptr) {
  if (samples.empty()) throw Error("evaluate: empty split");
  if (hyps.size() != samples.size()) throw Error("evaluate: one hypothesis per sample required");
  if (rm && !vocab) throw Error("evaluate: reward scoring needs a vocabulary");
  EvalResult res;
  std::vector<Tokens> refs;
  double r1_sum = 0, r1_pos = 0;
  std::size_t verif = 0, safe = 0, fact = 0, grounded = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    SampleResult r;
    r.hyp = hyps[i];
    r.f1 = metric_f1(r.hyp, s.response);
    r.rouge_l = metric_rouge_l(r.hyp, s.response);
    r.kf1 = metric_kf1(r.hyp, s.knowledge);
    r.label = oracle_fine_grained(s, r.hyp, world);
    r.grounded = mentions_grounded_object(s, r.hyp);
    if (rm) {
      r.r1 = score(*rm, *vocab, s.knowledge, r.hyp).value;
      r1_sum += *r.r1;
      r1_pos += *r.r1 >= 0.5;
    }
    verif += r.label.verifiable;
    safe += r.label.hallucination_free;
    fact += r.label.factually_consistent;
    grounded += r.grounded;
    res.report.f1 += r.f1;
    res.report.rouge_l += r.rouge_l;
    res.report.kf1 += r.kf1;
    refs.push_back(s.response);
    res.samples.push_back(std::move(r));
  }
  const double n = double(samples.size());
  auto& rep = res.report;
  rep.n = samples.size();
  rep.f1 /= n;
  rep.rouge_l /= n;
  rep.kf1 /= n;
  rep.bleu = metric_bleu(hyps, refs);
  rep.verif_rate = 100.0 * double(verif) / n;
  rep.hallu_safe_rate = 100.0 * double(safe) / n;
  rep.fact_rate = 100.0 * double(fact) / n;
  rep.grounded_entity_accuracy = 100.0 * double(grounded) / n;
  if (rm) {
    rep.mean_r1 = r1_sum / n;
    rep.classifier_fact_rate = 100.0 * r1_pos / n;
  }
  rep.validate();
  return res;
}

inline Tokens decode_sample(const Model<float>& model, const Vocabulary& vocab, const DialogueSample& s,
                            const DecodeConfig& cfg) {
  const auto prompt = prompt_of(encode_sample(s, vocab, std::size_t(cfg.max_seq_len), cfg.scope));
  const auto h = cfg.greedy ? decode_greedy(model, prompt, cfg.max_new)
                            : decode_beam(model, prompt, cfg.n_beams, cfg.max_new, cfg.alpha);
  return vocab.decode(std::span<const int>(h.tokens));
}

/// Decodes every sample and aggregates all metrics.
inline EvalResult evaluate(const Model<float>& model, const Vocabulary& vocab,
                           const std::vector<DialogueSample>& samples, const World& world,
                           const RewardModel* rm = nullptr, const DecodeConfig& cfg = {}) {
  if (samples.empty()) throw Error("evaluate: empty split");
  std::vector<Tokens> hyps;
  hyps.reserve(samples.size());
  for (const auto& s : samples) hyps.push_back(decode_sample(model, vocab, s, cfg));
  return evaluate_hypotheses(samples, hyps, world, rm, &vocab);
}

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

inline constexpr const char* kBleuVariant = "corpus-level BLEU-4, epsilon=0.1 for zero matches, brevity penalty";

inline nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json j{{"f1", r.f1},
                   {"bleu", r.bleu},
                   {"rouge_l", r.rouge_l},
                   {"kf1", r.kf1},
                   {"verif_rate", r.verif_rate},
                   {"hallu_safe_rate", r.hallu_safe_rate},
                   {"fact_rate", r.fact_rate},
                   {"grounded_entity_accuracy", r.grounded_entity_accuracy},
                   {"n", r.n},
                   {"bleu_variant", kBleuVariant}};
  if (r.mean_r1) j["mean_r1"] = *r.mean_r1;
  if (r.classifier_fact_rate) j["classifier_fact_rate"] = *r.classifier_fact_rate;
  return j;
}

inline std::string report_table(const MetricsReport& r, const std::string& title = "") {
  std::ostringstream os;
  if (!title.empty()) os << title << '\n';
  os << "# BLEU: " << kBleuVariant << '\n';
  auto row = [&](const char* k, double v) {
    os << std::left << std::setw(26) << k << std::right << std::setw(10) << std::fixed << std::setprecision(2)
       << v << '\n';
  };
  row("KF1", r.kf1);
  row("Verif.", r.verif_rate);
  row("Hallu. (free rate)", r.hallu_safe_rate);
  row("Fact. (oracle)", r.fact_rate);
  if (r.classifier_fact_rate) row("Fact. (classifier)", *r.classifier_fact_rate);
  row("BLEU", r.bleu);
  row("F1", r.f1);
  row("ROUGE-L", r.rouge_l);
  row("grounded entity acc", r.grounded_entity_accuracy);
  if (r.mean_r1) {
    os << std::left << std::setw(26) << "mean r1" << std::right << std::setw(10) << std::setprecision(4)
       << *r.mean_r1 << '\n';
  }
  os << std::left << std::setw(26) << "samples" << std::right << std::setw(10) << r.n << '\n';
  return os.str();
}

inline nlohmann::json sample_result_to_json(const SampleResult& r) {
  nlohmann::json j{{"hyp", join_words(r.hyp)},
                   {"f1", r.f1},
                   {"rouge_l", r.rouge_l},
                   {"kf1", r.kf1},
                   {"verifiable", r.label.verifiable},
                   {"hallucination_free", r.label.hallucination_free},
                   {"factually_consistent", r.label.factually_consistent},
                   {"grounded", r.grounded}};
  if (r.r1) j["r1"] = *r.r1;
  return j;
}

inline void write_eval_outputs(const EvalResult& res, const std::string& stem) {
  {
    std::ofstream f(stem + ".json");
    if (!f) throw Error("cannot write " + stem + ".json");
    f << report_to_json(res.report).dump(2) << '\n';
  }
  {
    std::ofstream f(stem + ".txt");
    if (!f) throw Error("cannot write " + stem + ".txt");
    f << report_table(res.report);
  }
  std::ofstream f(stem + ".samples.jsonl");
  if (!f) throw Error("cannot write " + stem + ".samples.jsonl");
  for (const auto& s : res.samples) f << sample_result_to_json(s).dump() << '\n';
}

}  // namespace fdl

#endif  // FDL_EVAL_HPP
