#ifndef FDL_REWARD_HPP
#define FDL_REWARD_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fdl/corpus.hpp"
#include "fdl/model.hpp"
#include "fdl/train.hpp"
#include "json.hpp"

namespace fdl {

enum class Provenance : int { gold = 0, random_pairing = 1, negation = 2, entity_swap = 3 };
inline constexpr std::array<Provenance, 3> kCorruptions{Provenance::random_pairing,
                                                        Provenance::negation,
                                                        Provenance::entity_swap};

inline const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::gold: return "gold";
    case Provenance::random_pairing: return "random_pairing";
    case Provenance::negation: return "negation";
    case Provenance::entity_swap: return "entity_swap";
  }
  return "?";
}

inline Provenance parse_provenance(const std::string& s) {
  for (auto p : {Provenance::gold, Provenance::random_pairing, Provenance::negation,
                 Provenance::entity_swap})
    if (s == provenance_name(p)) return p;
  throw Error("unknown provenance '" + s + "'");
}

struct ConsistencyExample {
  std::vector<std::string> knowledge;
  std::vector<std::string> response;
  int label = 1;  // 1 = consistent
  Provenance provenance = Provenance::gold;
  int fact_index = -1;          // source fact in the world, when known
  std::string grounded_object;  // carried over from the dialogue sample
};

inline ConsistencyExample positive_from(const DialogueSample& s) {
  return {s.knowledge, s.response, 1, Provenance::gold, s.fact_index, s.grounded_object};
}

namespace detail {

// Start of the fact's statement inside `tokens`, or npos.
inline std::size_t find_statement(const std::vector<std::string>& tokens,
                                  const std::vector<std::string>& stmt) {
  if (stmt.empty() || stmt.size() > tokens.size()) return std::string::npos;
  for (std::size_t i = 0; i + stmt.size() <= tokens.size(); ++i)
    if (std::equal(stmt.begin(), stmt.end(), tokens.begin() + long(i))) return i;
  return std::string::npos;
}

// Reorders shuffled fact ids so that the last `n_held` are held out while
// every entity and relation they use still occurs in a kept fact, when
// possible. Facts without a world index keep their place.
inline std::vector<int> covered_holdout_order(std::vector<int> facts, std::size_t n_held,
                                              const World& w) {
  std::map<int, int> ent, rel;
  auto known = [&](int f) { return f >= 0 && std::size_t(f) < w.facts.size(); };
  for (int f : facts)
    if (known(f)) {
      const Fact& x = w.facts[std::size_t(f)];
      ++ent[x.subject];
      ++ent[x.object];
      ++rel[x.relation];
    }
  std::vector<int> held, rest;
  for (int f : facts) {
    if (held.size() < n_held && known(f)) {
      const Fact& x = w.facts[std::size_t(f)];
      if (ent[x.subject] > 1 && ent[x.object] > 1 && rel[x.relation] > 1) {
        --ent[x.subject];
        --ent[x.object];
        --rel[x.relation];
        held.push_back(f);
        continue;
      }
    }
    rest.push_back(f);
  }
  // not enough covered facts: fill from the end of the remaining order
  while (held.size() < n_held && !rest.empty()) {
    held.insert(held.begin(), rest.back());
    rest.pop_back();
  }
  rest.insert(rest.end(), held.begin(), held.end());
  return rest;
}

}  // namespace detail

/// Corrupts a consistent example into an inconsistent one (label 0).
///
/// random_pairing keeps K and takes the statement of a fact sharing no
/// entity with K's fact; negation inserts "not" before the relation word;
/// entity_swap replaces one response entity with another entity of the same
/// type that K does not mention.
inline ConsistencyExample make_negative(const ConsistencyExample& ex, Provenance strategy,
                                        const World& w, std::mt19937_64& rng) {
  ConsistencyExample out = ex;
  out.label = 0;
  out.provenance = strategy;
  switch (strategy) {
    case Provenance::gold:
      throw Error("make_negative: gold is not a corruption strategy");
    case Provenance::random_pairing: {
      if (ex.fact_index < 0) throw Error("make_negative: random_pairing needs the source fact");
      const Fact f = w.facts.at(std::size_t(ex.fact_index));
      std::vector<std::size_t> pool;
      for (std::size_t i = 0; i < w.facts.size(); ++i) {
        const Fact& g = w.facts[i];
        if (g.subject != f.subject && g.subject != f.object && g.object != f.subject &&
            g.object != f.object)
          pool.push_back(i);
      }
      if (pool.empty()) throw Error("make_negative: no unrelated fact for random_pairing");
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      out.response = verbalize(w, w.facts[pool[pick(rng)]]);
      break;
    }
    case Provenance::negation: {
      if (ex.fact_index < 0) throw Error("make_negative: negation needs the source fact");
      const Fact f = w.facts.at(std::size_t(ex.fact_index));
      const auto stmt = verbalize(w, f);
      const std::size_t at = detail::find_statement(ex.response, stmt);
      if (at == std::string::npos) throw Error("make_negative: response does not state its fact");
      out.response.insert(out.response.begin() + long(at + w.relations[f.relation].negation_pos),
                          "not");
      break;
    }
    case Provenance::entity_swap: {
      const std::set<std::string> know(ex.knowledge.begin(), ex.knowledge.end());
      std::vector<std::pair<std::size_t, std::vector<int>>> options;
      for (std::size_t i = 0; i < ex.response.size(); ++i) {
        const int e = w.find_entity(ex.response[i]);
        if (e < 0) continue;
        std::vector<int> repl;
        for (std::size_t k = 0; k < w.entities.size(); ++k)
          if (int(k) != e && w.entities[k].type == w.entities[std::size_t(e)].type &&
              !know.count(w.entities[k].name))
            repl.push_back(int(k));
        if (!repl.empty()) options.emplace_back(i, std::move(repl));
      }
      if (options.empty()) throw Error("make_negative: entity_swap found no swappable entity token");
      std::uniform_int_distribution<std::size_t> pos(0, options.size() - 1);
      const auto& [i, repl] = options[pos(rng)];
      std::uniform_int_distribution<std::size_t> pick(0, repl.size() - 1);
      out.response[i] = w.entities[std::size_t(repl[pick(rng)])].name;
      break;
    }
  }
  if (out.response == ex.response) throw Error("make_negative: corruption left the response unchanged");
  return out;
}

struct NliDataset {
  std::vector<ConsistencyExample> train;
  std::vector<ConsistencyExample> valid;
  std::vector<ConsistencyExample> test;
};

struct NliConfig {
  int negatives_per_positive = 1;
  std::array<double, 3> mix{1.0 / 3, 1.0 / 3, 1.0 / 3};  // random_pairing, negation, entity_swap
  double train_fraction = 0.8;
  double valid_fraction = 0.1;
};

/// Builds labeled consistency examples from grounded dialogue samples.
///
/// Source facts are split into train/valid/test, so no fact crosses
/// splits; held-out facts are chosen among those whose entities and
/// relation also appear in training facts. Strategies follow the mix with largest-remainder allocation,
/// which keeps the provenance histogram within one of the target counts.
inline NliDataset build_nli_dataset(const std::vector<DialogueSample>& positives, const World& w,
                                    const NliConfig& cfg, std::uint64_t seed) {
  if (positives.empty()) throw Error("build_nli_dataset: empty positive pool");
  if (cfg.negatives_per_positive < 0) throw Error("build_nli_dataset: negatives_per_positive < 0");
  double mix_sum = 0;
  for (double m : cfg.mix) {
    if (m < 0) throw Error("build_nli_dataset: negative mix weight");
    mix_sum += m;
  }
  if (mix_sum <= 0) throw Error("build_nli_dataset: mix weights sum to zero");
  std::mt19937_64 rng(seed);

  std::map<int, std::vector<std::size_t>> by_fact;
  for (std::size_t i = 0; i < positives.size(); ++i) by_fact[positives[i].fact_index].push_back(i);
  std::vector<int> facts;
  for (const auto& [f, v] : by_fact) facts.push_back(f);
  std::shuffle(facts.begin(), facts.end(), rng);
  const auto n_train = std::size_t(std::lround(cfg.train_fraction * double(facts.size())));
  const auto n_valid = std::size_t(std::lround(cfg.valid_fraction * double(facts.size())));
  facts = detail::covered_holdout_order(facts, facts.size() - n_train, w);

  NliDataset ds;
  std::array<std::size_t, 3> used{0, 0, 0};
  std::size_t made = 0;
  auto next_strategy = [&]() {
    std::size_t best = 0;
    double gap = -1e300;
    for (std::size_t s = 0; s < 3; ++s) {
      const double g = cfg.mix[s] / mix_sum * double(made + 1) - double(used[s]);
      if (g > gap) {
        gap = g;
        best = s;
      }
    }
    ++used[best];
    ++made;
    return kCorruptions[best];
  };
  for (std::size_t k = 0; k < facts.size(); ++k) {
    auto& split = k < n_train ? ds.train : k < n_train + n_valid ? ds.valid : ds.test;
    for (std::size_t i : by_fact[facts[k]]) {
      const auto pos = positive_from(positives[i]);
      split.push_back(pos);
      for (int j = 0; j < cfg.negatives_per_positive; ++j)
        split.push_back(make_negative(pos, next_strategy(), w, rng));
    }
  }
  return ds;
}

/// Reference binary cross-entropy, batch mean, scores clamped away from 0/1.
inline double loss_bce(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw Error("loss_bce: scores and labels must be nonempty and aligned");
  double s = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double p = std::clamp(scores[i], 1e-7, 1.0 - 1e-7);
    s += labels[i] ? -std::log(p) : -std::log(1.0 - p);
  }
  return s / double(scores.size());
}

inline double loss_bce(double score, int label) {
  return loss_bce(std::span<const double>(&score, 1), std::span<const int>(&label, 1));
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

/// Bidirectional encoder over <bos> K <sep> Y <eos> with a scalar head on
/// the mean of the final hidden states; score = logistic(head).
struct RewardModel {
  Model<float> encoder;
  Tensor<float> head_weight;  // [d_model x 1]
  Tensor<float> head_bias;    // [1 x 1]
};

struct RewardInit {
  double embedding_sigma = 0.3;  // token embeddings
  double qk_sigma = 0.5;         // per-head query projection, copied into the key projection
};

/// Fresh bidirectional encoder. Token embeddings start larger than the
/// position/type embeddings and each head's key projection starts equal to
/// its query projection, so identical tokens attend to each other early in
/// training.
inline RewardModel init_reward_model(ModelConfig config, std::uint64_t seed,
                                     const RewardInit& init = {}) {
  config.causal = false;
  RewardModel rm;
  rm.encoder = init_model<float>(config, seed);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  auto& p = rm.encoder.params;
  auto emb = detail::gaussian<float>(rng, p.token_embedding.shape(), init.embedding_sigma);
  std::copy(emb.data().begin(), emb.data().end(), p.token_embedding.mutable_data().begin());
  for (auto& L : p.layers)
    for (std::size_t h = 0; h < L.query.size(); ++h) {
      auto q = detail::gaussian<float>(rng, L.query[h].shape(), init.qk_sigma);
      std::copy(q.data().begin(), q.data().end(), L.query[h].mutable_data().begin());
      std::copy(q.data().begin(), q.data().end(), L.key[h].mutable_data().begin());
    }
  rm.head_weight = detail::gaussian<float>(rng, {std::size_t(config.d_model), 1}, 0.02);
  rm.head_bias = Tensor<float>::zeros({1, 1});
  return rm;
}

inline std::vector<std::pair<std::string, Tensor<float>>> reward_tensors(const RewardModel& rm) {
  auto out = all_tensors(rm.encoder);
  out.emplace_back("head.weight", rm.head_weight);
  out.emplace_back("head.bias", rm.head_bias);
  return out;
}

struct RewardInput {
  std::vector<int> ids;
  std::vector<int> types;
  bool truncated = false;
};

/// Encodes a pair; the response tail is cut when the pair is too long.
// Segment types double as exact-match flags: a token is "matched" when it
// also occurs on the other side of <sep>.
inline constexpr int kMatchedKnowledge = kKnowledgeType;
inline constexpr int kUnmatchedKnowledge = kPadType;
inline constexpr int kMatchedResponse = kUserType;
inline constexpr int kUnmatchedResponse = kBotType;

inline RewardInput encode_pair(std::span<const int> k_ids, std::span<const int> y_ids,
                               std::size_t max_len) {
  const std::size_t fixed = 3 + k_ids.size();
  if (fixed + 1 > max_len)
    throw Error("reward: knowledge alone exceeds max_seq_len " + std::to_string(max_len));
  RewardInput in;
  std::size_t ny = y_ids.size();
  if (fixed + ny > max_len) {
    ny = max_len - fixed;
    in.truncated = true;
  }
  in.ids.push_back(Vocabulary::kBos);
  in.types.push_back(kKnowledgeType);
  const auto y_used = y_ids.first(ny);
  auto occurs = [](std::span<const int> seq, int t) { return std::find(seq.begin(), seq.end(), t) != seq.end(); };
  for (int t : k_ids) {
    in.ids.push_back(t);
    in.types.push_back(occurs(y_used, t) ? kMatchedKnowledge : kUnmatchedKnowledge);
  }
  in.ids.push_back(Vocabulary::kSep);
  in.types.push_back(kBotType);
  for (int t : y_used) {
    in.ids.push_back(t);
    in.types.push_back(occurs(k_ids, t) ? kMatchedResponse : kUnmatchedResponse);
  }
  in.ids.push_back(Vocabulary::kEos);
  in.types.push_back(kBotType);
  return in;
}

inline RewardInput encode_pair(const ConsistencyExample& ex, const Vocabulary& vocab,
                               std::size_t max_len) {
  auto k = vocab.encode(ex.knowledge);
  auto y = vocab.encode(ex.response);
  return encode_pair(std::span<const int>(k), std::span<const int>(y), max_len);
}

/// Two-column logits [0, head] so that softmax column 1 is the logistic score.
inline Tensor<float> reward_logits(Tape<float>& tape, const RewardModel& rm, const RewardInput& in) {
  auto out = forward(tape, rm.encoder, std::span<const int>(in.ids), std::span<const int>(in.types), false);
  auto pool = Tensor<float>::filled({1, in.ids.size()}, 1.0f / float(in.ids.size()));
  auto pooled = ops::matmul(tape, pool, out.hidden);
  auto s = ops::add(tape, ops::matmul(tape, pooled, rm.head_weight), rm.head_bias);
  std::array<Tensor<float>, 2> cols{Tensor<float>::zeros({1, 1}), s};
  return ops::concat(tape, std::span<const Tensor<float>>(cols), 1);
}

inline double logistic_from_logits(const Tensor<float>& logits) {
  const double s = double(logits.data()[1]) - double(logits.data()[0]);
  return 1.0 / (1.0 + std::exp(-s));
}

struct Score {
  double value = 0;  // in (0,1)
  bool truncated = false;
};

inline Score score_ids(const RewardModel& rm, std::span<const int> k_ids, std::span<const int> y_ids) {
  auto in = encode_pair(k_ids, y_ids, std::size_t(rm.encoder.config.max_seq_len));
  Tape<float> tape(false);
  return {logistic_from_logits(reward_logits(tape, rm, in)), in.truncated};
}

/// r1 = R(K, Y).
inline Score score(const RewardModel& rm, const Vocabulary& vocab, const std::vector<std::string>& k,
                   const std::vector<std::string>& y) {
  auto ki = vocab.encode(k);
  auto yi = vocab.encode(y);
  return score_ids(rm, std::span<const int>(ki), std::span<const int>(yi));
}

struct StrategyStats {
  double precision = 0;  // of "inconsistent" predictions among gold + this strategy
  double recall = 0;     // corrupted examples of this strategy flagged inconsistent
  std::size_t count = 0;
};

struct RewardReport {
  double accuracy = 0;
  std::size_t n = 0;
  std::map<std::string, StrategyStats> per_strategy;
  TrainResult training;
};

inline RewardReport evaluate_reward(const RewardModel& rm, const Vocabulary& vocab,
                                    const std::vector<ConsistencyExample>& data) {
  if (data.empty()) throw Error("evaluate_reward: empty split");
  RewardReport rep;
  std::vector<int> pred(data.size());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    pred[i] = score(rm, vocab, data[i].knowledge, data[i].response).value >= 0.5 ? 1 : 0;
    correct += pred[i] == data[i].label;
  }
  rep.n = data.size();
  rep.accuracy = double(correct) / double(data.size());
  for (auto strat : kCorruptions) {
    std::size_t tp = 0, fp = 0, count = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const bool mine = data[i].provenance == strat;
      if (!mine && data[i].provenance != Provenance::gold) continue;
      count += mine;
      if (pred[i] == 0) (mine ? tp : fp) += 1;
    }
    StrategyStats st;
    st.count = count;
    st.recall = count ? double(tp) / double(count) : 0.0;
    st.precision = tp + fp ? double(tp) / double(tp + fp) : 0.0;
    rep.per_strategy[provenance_name(strat)] = st;
  }
  return rep;
}

/// Trains the classifier on dataset.train with the binary cross-entropy
/// loss (written as two-class softmax cross-entropy) and reports on
/// dataset.test.
inline RewardReport train_reward(RewardModel& rm, const Vocabulary& vocab, const NliDataset& data,
                                 const TrainConfig& cfg, std::ostream* log = nullptr) {
  if (data.train.empty()) throw Error("train_reward: empty training split");
  std::size_t pos = 0;
  for (const auto& e : data.train) pos += e.label == 1;
  const double frac = double(pos) / double(data.train.size());
  if (frac < 0.4 || frac > 0.6)
    throw PreconditionError("train_reward: labels are not balanced within 60/40 (positive share " +
                            std::to_string(frac) + ")");
  std::vector<RewardInput> inputs;
  for (const auto& e : data.train) inputs.push_back(encode_pair(e, vocab, std::size_t(cfg.max_seq_len)));
  ExampleFn fn = [&](Tape<float>& tape, std::size_t i) {
    auto logits = reward_logits(tape, rm, inputs[i]);
    const int label = data.train[i].label;
    const float w = 1.0f;
    auto loss = ops::cross_entropy(tape, logits, std::span<const int>(&label, 1), std::span<const float>(&w, 1));
    const bool hit = (logistic_from_logits(logits) >= 0.5) == (label == 1);
    return ExampleOutcome{loss, std::size_t(hit), 1};
  };
  auto all = tensors_only(reward_tensors(rm));
  auto training = minibatch_adam(all, all, inputs.size(), cfg, fn, "reward", "acc", log);
  RewardReport rep = evaluate_reward(rm, vocab, data.test.empty() ? data.train : data.test);
  rep.training = std::move(training);
  return rep;
}

/// Fraction of gold pairs scored above their entity-swapped twin.
inline double pairwise_ranking(const RewardModel& rm, const Vocabulary& vocab, const World& w,
                               const std::vector<ConsistencyExample>& data, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::size_t wins = 0, n = 0;
  for (const auto& e : data) {
    if (e.provenance != Provenance::gold) continue;
    auto twin = make_negative(e, Provenance::entity_swap, w, rng);
    wins += score(rm, vocab, e.knowledge, e.response).value >
            score(rm, vocab, twin.knowledge, twin.response).value;
    ++n;
  }
  if (n == 0) throw Error("pairwise_ranking: no gold examples");
  return double(wins) / double(n);
}

/// Copy with labels permuted at random; a leakage control.
inline NliDataset shuffle_labels(NliDataset ds, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto perm = [&](std::vector<ConsistencyExample>& v) {
    std::vector<int> labels;
    for (const auto& e : v) labels.push_back(e.label);
    std::shuffle(labels.begin(), labels.end(), rng);
    for (std::size_t i = 0; i < v.size(); ++i) v[i].label = labels[i];
  };
  perm(ds.train);
  return ds;
}

inline nlohmann::json nli_to_json(const ConsistencyExample& e) {
  return {{"knowledge", join_words(e.knowledge)},
          {"response", join_words(e.response)},
          {"label", e.label},
          {"provenance", provenance_name(e.provenance)}};
}

inline ConsistencyExample nli_from_json(const nlohmann::json& j) {
  ConsistencyExample e;
  e.knowledge = split_words(lowercase(j.at("knowledge").get<std::string>()));
  e.response = split_words(lowercase(j.at("response").get<std::string>()));
  e.label = j.at("label").get<int>();
  e.provenance = parse_provenance(j.at("provenance").get<std::string>());
  if (e.label != 0 && e.label != 1) throw Error("nli: label must be 0 or 1");
  if ((e.label == 1) != (e.provenance == Provenance::gold))
    throw Error("nli: label 1 must coincide with gold provenance");
  return e;
}

inline void write_nli_jsonl(const std::string& path, const std::vector<ConsistencyExample>& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  for (const auto& e : data) os << nli_to_json(e).dump() << '\n';
}

inline std::vector<ConsistencyExample> read_nli_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw PreconditionError("cannot read " + path);
  std::vector<ConsistencyExample> out;
  for (std::string line; std::getline(is, line);)
    if (line.find_first_not_of(" \t\r") != std::string::npos)
      out.push_back(nli_from_json(nlohmann::json::parse(line)));
  return out;
}

}  // namespace fdl

#endif  // FDL_REWARD_HPP
