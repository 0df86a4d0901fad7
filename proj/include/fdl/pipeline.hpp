#ifndef FDL_PIPELINE_HPP
#define FDL_PIPELINE_HPP

#include <chrono>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "fdl/config.hpp"
#include "fdl/corpus.hpp"
#include "fdl/eval.hpp"
#include "fdl/log.hpp"
#include "fdl/model.hpp"
#include "fdl/reward.hpp"
#include "fdl/rlfc.hpp"
#include "fdl/sft.hpp"

namespace fdl {

// Seed salts so each stage draws from its own stream.
enum StageSalt : std::uint64_t {
  kSaltWorld = 1,
  kSaltCorpus,
  kSaltInit,
  kSaltPretrain,
  kSaltSft,
  kSaltExtension,
  kSaltKdial1,
  kSaltKdial2,
  kSaltReward,
  kSaltRewardInit,
  kSaltNli,
  kSaltRlfc,
  kSaltProbe,
};

inline std::uint64_t stage_seed(const ExperimentConfig& c, std::uint64_t salt) { return c.seed * 1000003ull + salt; }

struct DataBundle {
  World world;
  Corpus corpus;
  Vocabulary vocab;
};

inline DataBundle make_data(const ExperimentConfig& c) {
  DataBundle d;
  d.world = generate_world(stage_seed(c, kSaltWorld), c.world.n_entities, c.world.n_relations, c.world.n_facts,
                           c.world.n_conflicts);
  d.corpus = generate_corpus(d.world, c.corpus, stage_seed(c, kSaltCorpus));
  d.vocab = Vocabulary::from_world(d.world);
  return d;
}

inline ModelConfig dialogue_model_config(const ExperimentConfig& c, const Vocabulary& v) {
  ModelConfig m = c.model;
  m.vocab_size = v.size();
  return m.resolved();
}

inline std::vector<LmExample> lm_data(const ExperimentConfig& c, const DataBundle& d,
                                      const std::vector<DialogueSample>& split, const TrainConfig& t) {
  return encode_for_lm(split, d.vocab, std::size_t(c.model.max_seq_len), t.entity_scope());
}

/// Language-model pretraining on the stale statements.
inline Model<float> run_pretrain(const ExperimentConfig& c, const DataBundle& d, std::ostream* log = nullptr) {
  auto model = init_model<float>(dialogue_model_config(c, d.vocab), stage_seed(c, kSaltInit));
  const auto t = c.stage(c.pretrain, kSaltPretrain);
  train_sft(model, lm_data(c, d, d.corpus.pretrain, t), t, log, "pretrain");
  return model;
}

inline Model<float> run_sft(const ExperimentConfig& c, const DataBundle& d, const Model<float>& pretrained,
                            std::ostream* log = nullptr) {
  auto model = clone_model(pretrained);
  const auto t = c.stage(c.sft, kSaltSft);
  train_sft(model, lm_data(c, d, d.corpus.train, t), t, log, "sft");
  return model;
}

/// Both K-Dial stages on a copy of `base`.
inline Model<float> run_kdial(const ExperimentConfig& c, const DataBundle& d, const Model<float>& base,
                              KDialMode mode, std::ostream* log = nullptr) {
  auto model = clone_model(base);
  if (model.extension) throw PreconditionError("kdial: model already carries an extension");
  attach_extension(model, stage_seed(c, kSaltExtension));
  auto t1 = c.stage(c.kdial_stage1, kSaltKdial1);
  t1.kdial_mode = mode;
  train_kdial_stage1(model, lm_data(c, d, d.corpus.train, t1), t1, log);
  const auto t2 = c.stage(c.kdial_stage2, kSaltKdial2);
  train_kdial_stage2(model, lm_data(c, d, d.corpus.train, t2), t2, log);
  return model;
}

struct RewardBundle {
  RewardModel model;
  NliDataset data;
  RewardReport report;
};

/// NLI data from the grounded training dialogues, then the classifier.
inline RewardBundle run_reward(const ExperimentConfig& c, const DataBundle& d, std::ostream* log = nullptr) {
  RewardBundle b;
  b.data = build_nli_dataset(d.corpus.train, d.world, c.nli, stage_seed(c, kSaltNli));
  ModelConfig rc = c.reward_model;
  rc.vocab_size = d.vocab.size();
  b.model = init_reward_model(rc, stage_seed(c, kSaltRewardInit));
  auto t = c.reward;
  t.seed = stage_seed(c, kSaltReward);
  t.max_seq_len = rc.max_seq_len;
  b.report = train_reward(b.model, d.vocab, b.data, t, log);
  return b;
}

struct RlfcOutcome {
  PolicyState state;
  RlfcResult result;
};

inline RlfcOutcome run_rlfc(const ExperimentConfig& c, const DataBundle& d, const Model<float>& sft,
                            const RewardModel& rm, std::ostream* log = nullptr) {
  RlfcOutcome o{make_policy_state(sft), {}};
  auto cfg = c.rlfc;
  cfg.seed = stage_seed(c, kSaltRlfc);
  std::vector<DialogueSample> samples;
  for (const auto& name : c.rlfc_prompt_splits) {
    const auto& split = split_by_name(d.corpus, name);
    samples.insert(samples.end(), split.begin(), split.end());
  }
  if (samples.empty()) throw PreconditionError("rlfc: the configured prompt splits are empty");
  const auto prompts = make_rl_prompts(samples, d.vocab, std::size_t(c.model.max_seq_len));
  o.result = train_rlfc(o.state, reward_fn(rm), prompts, cfg, log);
  return o;
}

// ---------------------------------------------------------------------------
// Full experiment
// ---------------------------------------------------------------------------

struct ConditionResult {
  std::string name;
  MetricsReport report;
  std::uint64_t model_hash = 0;
};

/// Held-out view of a policy for the RLFC criterion.
struct PolicyProbe {
  double mean_r1 = 0;      // greedy responses on held-out prompts
  double mean_length = 0;  // words, greedy
  double mean_kl = 0;      // per token vs. the reference, sampled responses
};

struct ExperimentResult {
  std::vector<ConditionResult> conditions;
  RewardReport reward;
  double reward_pairwise = 0;
  RlfcResult rlfc;
  PolicyProbe probe_sft, probe_rlfc;
  std::uint64_t reference_hash_before = 0, reference_hash_after = 0;
  std::uint64_t data_hash = 0;
  double seconds = 0;

  const ConditionResult& condition(const std::string& name) const {
    for (const auto& c : conditions)
      if (c.name == name) return c;
    throw Error("experiment result: no condition '" + name + "'");
  }
};

inline PolicyProbe probe_policy(const ExperimentConfig& c, const DataBundle& d, const PolicyState& s,
                                const RewardModel& rm) {
  PolicyProbe p;
  const auto prompts = make_rl_prompts(d.corpus.conflict_test, d.vocab, std::size_t(c.model.max_seq_len));
  const auto reward = reward_fn(rm);
  p.mean_r1 = mean_greedy_r1(s.policy, reward, prompts, c.decode.max_new, &p.mean_length);
  std::mt19937_64 rng(stage_seed(c, kSaltProbe));
  std::vector<std::size_t> all(prompts.size());
  std::iota(all.begin(), all.end(), std::size_t(0));
  auto cfg = c.rlfc;
  cfg.sampling.max_new = c.decode.max_new;
  p.mean_kl = summarize(rollout(s, reward, prompts, std::span<const std::size_t>(all), cfg, rng)).mean_kl;
  return p;
}

inline std::uint64_t corpus_hash(const DataBundle& d) {
  nlohmann::json j = world_to_json(d.world);
  for (const auto& name : split_names())
    for (const auto& s : split_by_name(d.corpus, name)) j["samples"].push_back(sample_to_json(s));
  return config_hash(j);
}

/// pretrain -> sft -> {kdial, kdial-alpha} ; reward ; rlfc -> kdial (combo);
/// every condition evaluated on conflict_test.
inline ExperimentResult run_experiment(const ExperimentConfig& c, std::ostream* log = nullptr) {
  c.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentResult r;
  const auto d = make_data(c);
  if (d.corpus.conflict_test.empty()) throw PreconditionError("experiment: world has no conflicts to evaluate");
  r.data_hash = corpus_hash(d);
  auto stamp = [&](const std::string& what) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log::info("[", std::fixed, std::setprecision(1), s, "s] ", what);
  };

  const auto pre = run_pretrain(c, d, log);
  stamp("pretrain done");
  const auto sft = run_sft(c, d, pre, log);
  stamp("sft done");
  const auto kd = run_kdial(c, d, sft, KDialMode::entity_only, log);
  stamp("kdial done");
  const auto kda = run_kdial(c, d, sft, KDialMode::all_tokens_alpha, log);
  stamp("kdial-alpha done");
  auto rw = run_reward(c, d, log);
  r.reward = rw.report;
  r.reward_pairwise = pairwise_ranking(rw.model, d.vocab, d.world, rw.data.test, stage_seed(c, kSaltNli));
  stamp("reward done");
  auto rl = run_rlfc(c, d, sft, rw.model, log);
  r.rlfc = rl.result;
  r.reference_hash_before = hash_tensors(tensors_only(all_tensors(sft)));
  r.reference_hash_after = reference_hash(rl.state);
  stamp("rlfc done");
  const auto combo = run_kdial(c, d, rl.state.policy, KDialMode::entity_only, log);
  stamp("combo done");

  r.probe_sft = probe_policy(c, d, make_policy_state(sft), rw.model);
  r.probe_rlfc = probe_policy(c, d, rl.state, rw.model);

  auto add = [&](const std::string& name, const Model<float>& m) {
    auto res = evaluate(m, d.vocab, d.corpus.conflict_test, d.world, &rw.model, c.decode);
    r.conditions.push_back({name, res.report, hash_tensors(tensors_only(all_tensors(m)))});
    stamp("evaluated " + name);
  };
  add("baseline", sft);
  add("kdial", kd);
  add("kdial_alpha", kda);
  add("rlfc", rl.state.policy);
  add("rlfc_kdial", combo);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline nlohmann::json experiment_to_json(const ExperimentResult& r) {
  nlohmann::json j;
  for (const auto& c : r.conditions) {
    auto rep = report_to_json(c.report);
    rep["model_hash"] = hex64(c.model_hash);
    j["conditions"][c.name] = rep;
  }
  j["reward"] = {{"accuracy", r.reward.accuracy}, {"pairwise_ranking", r.reward_pairwise}};
  auto probe = [](const PolicyProbe& p) {
    return nlohmann::json{{"mean_r1", p.mean_r1}, {"mean_length", p.mean_length}, {"mean_kl", p.mean_kl}};
  };
  j["probe_sft"] = probe(r.probe_sft);
  j["probe_rlfc"] = probe(r.probe_rlfc);
  for (const auto& it : r.rlfc.curve)
    j["rlfc_curve"].push_back({{"iteration", it.iteration}, {"mean_r1", it.mean_r1}, {"mean_kl", it.mean_kl}});
  j["data_hash"] = hex64(r.data_hash);
  j["seconds"] = r.seconds;
  return j;
}

}  // namespace fdl

#endif  // FDL_PIPELINE_HPP
