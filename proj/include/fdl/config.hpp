#ifndef FDL_CONFIG_HPP
#define FDL_CONFIG_HPP

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>

#include "fdl/corpus.hpp"
#include "fdl/eval.hpp"
#include "fdl/model.hpp"
#include "fdl/reward.hpp"
#include "fdl/rlfc.hpp"
#include "fdl/train.hpp"
#include "json.hpp"

namespace fdl {

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"d_model", c.d_model},
          {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},
          {"d_ext", c.d_ext},
          {"extended_layers", c.extended_layers},
          {"max_seq_len", c.max_seq_len},
          {"n_token_types", c.n_token_types},
          {"activation", activation_name(c.activation)},
          {"causal", c.causal}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.d_ext = j.value("d_ext", c.d_ext);
  c.extended_layers = j.value("extended_layers", c.extended_layers);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.n_token_types = j.value("n_token_types", c.n_token_types);
  if (j.contains("activation")) {
    const std::string a = j.at("activation");
    if (a == "gelu")
      c.activation = Activation::gelu;
    else if (a == "relu")
      c.activation = Activation::relu;
    else
      throw Error("model config: unknown activation '" + a + "'");
  }
  c.causal = j.value("causal", c.causal);
  return c;
}

struct WorldConfig {
  int n_entities = 60;
  int n_relations = 12;
  int n_facts = 160;
  int n_conflicts = 40;
};

/// Every knob of one experiment; all fields have defaults.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  WorldConfig world;
  CorpusCounts corpus{400, 50, 100, 3, 0.5};
  ModelConfig model;  // vocab_size filled from the corpus
  TrainConfig pretrain{20, 16, 1e-3, 20, 64, 0, KDialMode::entity_only, 1.0, false};
  TrainConfig sft{8, 16, 1e-3, 20, 64, 0, KDialMode::entity_only, 1.0, false};
  TrainConfig kdial_stage1{4, 32, 1e-3, 10, 64, 0, KDialMode::entity_only, 1.0, false};
  TrainConfig kdial_stage2{3, 16, 5e-4, 10, 64, 0, KDialMode::entity_only, 1.0, false};
  ModelConfig reward_model;
  TrainConfig reward{25, 16, 2e-3, 20, 32, 0, KDialMode::entity_only, 1.0, false};
  NliConfig nli;
  RlfcConfig rlfc;
  std::vector<std::string> rlfc_prompt_splits{"rl_prompts", "train"};
  DecodeConfig decode;

  ExperimentConfig() {
    reward_model.d_model = 32;
    reward_model.n_layers = 2;
    reward_model.n_heads = 2;
    reward_model.max_seq_len = 32;
    reward_model.causal = false;
    decode.max_new = 12;
    // Tuned on the default world: larger, cooler batches and a smaller step.
    rlfc.sampling.temperature = 0.7;
    rlfc.batch_episodes = 32;
    rlfc.minibatch_episodes = 8;
    rlfc.learning_rate = 3e-5;
    rlfc.iterations = 60;
  }

  /// Stage seeds derive from the global seed so one flag reseeds everything.
  TrainConfig stage(const TrainConfig& base, std::uint64_t salt) const {
    TrainConfig c = base;
    c.seed = seed * 1000003ull + salt;
    c.max_seq_len = model.max_seq_len;
    return c;
  }

  void validate() const {
    if (world.n_entities <= 0 || world.n_relations <= 0 || world.n_facts <= 0 || world.n_conflicts < 0)
      throw Error("experiment config: world sizes must be positive");
    for (const auto* t : {&pretrain, &sft, &kdial_stage1, &kdial_stage2, &reward}) t->validate();
    rlfc.validate();
    if (rlfc_prompt_splits.empty()) throw Error("experiment config: rlfc_prompt_splits is empty");
    for (const auto& name : rlfc_prompt_splits) {
      if (name == "conflict_test") throw Error("experiment config: conflict_test is held out from RLFC");
      const auto& all = split_names();
      if (std::find(all.begin(), all.end(), name) == all.end())
        throw Error("experiment config: unknown split '" + name + "' in rlfc_prompt_splits");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["world"] = {{"n_entities", world.n_entities},
                  {"n_relations", world.n_relations},
                  {"n_facts", world.n_facts},
                  {"n_conflicts", world.n_conflicts}};
    j["corpus"] = {{"train", corpus.train},
                   {"valid", corpus.valid},
                   {"test", corpus.test},
                   {"pretrain_variants", corpus.pretrain_variants},
                   {"rl_conflict_fraction", corpus.rl_conflict_fraction}};
    j["model"] = model_config_to_json(model);
    j["pretrain"] = pretrain;
    j["sft"] = sft;
    j["kdial_stage1"] = kdial_stage1;
    j["kdial_stage2"] = kdial_stage2;
    j["reward_model"] = model_config_to_json(reward_model);
    j["reward"] = reward;
    j["nli"] = {{"negatives_per_positive", nli.negatives_per_positive},
                {"mix", nli.mix},
                {"train_fraction", nli.train_fraction},
                {"valid_fraction", nli.valid_fraction}};
    j["rlfc"] = rlfc.to_json();
    j["rlfc_prompt_splits"] = rlfc_prompt_splits;
    j["decode"] = decode.to_json();
    return j;
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.seed = j.value("seed", c.seed);
    if (j.contains("world")) {
      const auto& w = j["world"];
      c.world.n_entities = w.value("n_entities", c.world.n_entities);
      c.world.n_relations = w.value("n_relations", c.world.n_relations);
      c.world.n_facts = w.value("n_facts", c.world.n_facts);
      c.world.n_conflicts = w.value("n_conflicts", c.world.n_conflicts);
    }
    if (j.contains("corpus")) {
      const auto& k = j["corpus"];
      c.corpus.train = k.value("train", c.corpus.train);
      c.corpus.valid = k.value("valid", c.corpus.valid);
      c.corpus.test = k.value("test", c.corpus.test);
      c.corpus.pretrain_variants = k.value("pretrain_variants", c.corpus.pretrain_variants);
      c.corpus.rl_conflict_fraction = k.value("rl_conflict_fraction", c.corpus.rl_conflict_fraction);
    }
    if (j.contains("model")) c.model = model_config_from_json(j["model"], c.model);
    auto train = [&](const char* key, TrainConfig& t) {
      if (j.contains(key)) {
        TrainConfig d = t;
        fdl::from_json(j[key], d);
        t = d;
      }
    };
    train("pretrain", c.pretrain);
    train("sft", c.sft);
    train("kdial_stage1", c.kdial_stage1);
    train("kdial_stage2", c.kdial_stage2);
    train("reward", c.reward);
    if (j.contains("reward_model")) c.reward_model = model_config_from_json(j["reward_model"], c.reward_model);
    if (j.contains("nli")) {
      const auto& n = j["nli"];
      c.nli.negatives_per_positive = n.value("negatives_per_positive", c.nli.negatives_per_positive);
      c.nli.mix = n.value("mix", c.nli.mix);
      c.nli.train_fraction = n.value("train_fraction", c.nli.train_fraction);
      c.nli.valid_fraction = n.value("valid_fraction", c.nli.valid_fraction);
    }
    if (j.contains("rlfc")) {
      auto merged = c.rlfc.to_json();
      merged.update(j["rlfc"]);
      c.rlfc = RlfcConfig::from_json(merged);
    }
    if (j.contains("rlfc_prompt_splits")) c.rlfc_prompt_splits = j["rlfc_prompt_splits"].get<std::vector<std::string>>();
    if (j.contains("decode")) {
      auto merged = c.decode.to_json();
      merged.update(j["decode"]);
      c.decode = DecodeConfig::from_json(merged);
    }
    c.validate();
    return c;
  }
};

/// FNV-1a over the canonical JSON dump.
inline std::uint64_t config_hash(const nlohmann::json& j) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* d = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[std::size_t(i)] = d[v & 15];
  return s;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw PreconditionError("config file not found: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("config file " + path + " is not valid JSON: " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

}  // namespace fdl

#endif  // FDL_CONFIG_HPP
