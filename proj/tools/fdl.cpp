// fdl: data generation, staged training, evaluation and inspection.
//
// All artifacts of one run live in a single directory (--out, default "run"):
//   config.json world.json vocab.json <split>.jsonl
//   pretrain.fdlb sft.fdlb kdial.fdlb kdial_alpha.fdlb reward.fdlb rlfc.fdlb rlfc_kdial.fdlb
//   <stage>.log  eval/<model>.<split>.{json,txt,samples.jsonl}

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "fdl/checkpoint.hpp"
#include "fdl/pipeline.hpp"

namespace fs = std::filesystem;
using namespace fdl;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  bool force = false;
  bool override_hash = false;
};

ExperimentConfig resolve_config(const Common& o) {
  ExperimentConfig c;
  if (!o.config_path.empty())
    c = load_experiment_config(o.config_path);
  else if (fs::exists(fs::path(o.out) / "config.json"))
    c = load_experiment_config((fs::path(o.out) / "config.json").string());
  if (o.seed) c.seed = *o.seed;
  c.validate();
  return c;
}

std::string path_in(const Common& o, const std::string& file) { return (fs::path(o.out) / file).string(); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path);
  f << text;
}

DataBundle load_data(const Common& o) {
  if (!fs::exists(path_in(o, "world.json")) || !fs::exists(path_in(o, "train.jsonl")))
    throw PreconditionError("no corpus in " + o.out + "; run gen-data first");
  DataBundle d;
  std::ifstream w(path_in(o, "world.json")), v(path_in(o, "vocab.json"));
  d.world = world_from_json(nlohmann::json::parse(w));
  d.vocab = Vocabulary::from_json(nlohmann::json::parse(v));
  for (const auto& name : split_names()) split_by_name(d.corpus, name) = read_jsonl(path_in(o, name + ".jsonl"));
  return d;
}

// A bare stage name resolves to <out>/<name>.fdlb.
std::string checkpoint_path(const Common& o, const std::string& model) {
  if (model.find('/') != std::string::npos || model.ends_with(".fdlb")) return model;
  return path_in(o, model + ".fdlb");
}

Checkpoint require_checkpoint(const Common& o, const std::string& name, const ExperimentConfig& c,
                              const std::string& needed_by) {
  const auto path = checkpoint_path(o, name);
  if (!fs::exists(path))
    throw PreconditionError(needed_by + " needs the " + name + " checkpoint (" + path + "); train " + name + " first");
  auto ck = load_checkpoint(path);
  check_config_hash(ck, config_hash(c.to_json()), o.override_hash);
  return ck;
}

void refuse_overwrite(const Common& o, const std::string& path) {
  if (fs::exists(path) && !o.force) throw PreconditionError(path + " exists; pass --force to overwrite");
}

void save_model(const Common& o, const Model<float>& m, const ExperimentConfig& c, const std::string& name,
                const std::string& stage = "") {
  const auto path = path_in(o, name + ".fdlb");
  save_checkpoint(path, make_checkpoint(m, c, stage.empty() ? name : stage, c.seed));
  log::info("wrote ", path, " hash=", hex64(hash_tensors(tensors_only(all_tensors(m)))));
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& o, std::optional<int> n_conflicts) {
  auto c = resolve_config(o);
  if (n_conflicts) c.world.n_conflicts = *n_conflicts;
  c.validate();
  fs::create_directories(o.out);
  refuse_overwrite(o, path_in(o, "train.jsonl"));
  const auto d = make_data(c);
  write_text(path_in(o, "config.json"), c.to_json().dump(2) + "\n");
  write_text(path_in(o, "world.json"), world_to_json(d.world).dump(2) + "\n");
  write_text(path_in(o, "vocab.json"), d.vocab.to_json().dump() + "\n");
  for (const auto& name : split_names()) write_jsonl(path_in(o, name + ".jsonl"), split_by_name(d.corpus, name));
  log::info("corpus in ", o.out, ": train=", d.corpus.train.size(), " conflict_test=", d.corpus.conflict_test.size(),
            " rl_prompts=", d.corpus.rl_prompts.size(), " vocab=", d.vocab.size());
  return 0;
}

int cmd_train(const Common& o, const std::string& stage, bool alpha, bool combo, bool kl_bonus) {
  const auto c = resolve_config(o);
  const auto d = load_data(o);
  std::ofstream logf;
  auto open_log = [&](const std::string& name) {
    logf = std::ofstream(path_in(o, name + ".log"));
    return &logf;
  };

  if (stage == "pretrain") {
    refuse_overwrite(o, path_in(o, "pretrain.fdlb"));
    save_model(o, run_pretrain(c, d, open_log("pretrain")), c, "pretrain");
  } else if (stage == "sft") {
    refuse_overwrite(o, path_in(o, "sft.fdlb"));
    const auto pre = model_from_checkpoint(require_checkpoint(o, "pretrain", c, "sft"));
    save_model(o, run_sft(c, d, pre, open_log("sft")), c, "sft");
  } else if (stage == "kdial") {
    const std::string name = alpha ? "kdial_alpha" : "kdial";
    refuse_overwrite(o, path_in(o, name + ".fdlb"));
    const auto sft = model_from_checkpoint(require_checkpoint(o, "sft", c, "kdial"));
    const auto mode = alpha ? KDialMode::all_tokens_alpha : KDialMode::entity_only;
    save_model(o, run_kdial(c, d, sft, mode, open_log(name)), c, name);
  } else if (stage == "reward") {
    refuse_overwrite(o, path_in(o, "reward.fdlb"));
    auto rw = run_reward(c, d, open_log("reward"));
    write_nli_jsonl(path_in(o, "nli_train.jsonl"), rw.data.train);
    write_nli_jsonl(path_in(o, "nli_test.jsonl"), rw.data.test);
    save_checkpoint(path_in(o, "reward.fdlb"), make_checkpoint(rw.model, c, c.seed));
    const double rank = pairwise_ranking(rw.model, d.vocab, d.world, rw.data.test, stage_seed(c, kSaltNli));
    log::info("reward accuracy=", rw.report.accuracy, " pairwise=", rank);
  } else if (stage == "rlfc" || stage == "combo") {
    if (stage == "rlfc") {
      refuse_overwrite(o, path_in(o, "rlfc.fdlb"));
      const auto sft = model_from_checkpoint(require_checkpoint(o, "sft", c, "rlfc"));
      const auto rm = reward_from_checkpoint(require_checkpoint(o, "reward", c, "rlfc"));
      // The sign flag is recorded in the stage name, not the config, so the
      // prerequisite hashes still match.
      auto rc = c;
      if (kl_bonus) rc.rlfc.kl_bonus = true;
      auto rl = run_rlfc(rc, d, sft, rm, open_log("rlfc"));
      save_model(o, rl.state.policy, c, "rlfc", kl_bonus ? "rlfc.kl_bonus" : "rlfc");
      if (!combo) return 0;
    }
    // RLFC first, then K-Dial on the RLFC policy.
    refuse_overwrite(o, path_in(o, "rlfc_kdial.fdlb"));
    const auto policy = model_from_checkpoint(require_checkpoint(o, "rlfc", c, "combo"));
    save_model(o, run_kdial(c, d, policy, KDialMode::entity_only, open_log("rlfc_kdial")), c, "rlfc_kdial");
  } else {
    throw PreconditionError("unknown training stage '" + stage + "'");
  }
  return 0;
}

// Decoding flags do not touch the experiment config, so checkpoint hashes still match.
DecodeConfig decode_flags(DecodeConfig dc, std::optional<int> beams, bool greedy, std::optional<int> max_new) {
  if (beams) {
    if (*beams < 1) throw PreconditionError("--beams must be >= 1");
    dc.n_beams = *beams;
    dc.greedy = false;
  }
  if (greedy) dc.greedy = true;
  if (max_new) dc.max_new = *max_new;
  return dc;
}

int cmd_eval(const Common& o, const std::string& model, const std::string& split, bool gold,
             std::optional<int> beams, bool greedy) {
  const auto c = resolve_config(o);
  const auto dc = decode_flags(c.decode, beams, greedy, std::nullopt);
  const auto d = load_data(o);
  const auto& samples = split_by_name(d.corpus, split);
  std::optional<RewardModel> rm;
  if (fs::exists(path_in(o, "reward.fdlb")))
    rm = reward_from_checkpoint(require_checkpoint(o, "reward", c, "eval"));
  EvalResult res;
  std::string label;
  if (gold) {
    std::vector<Tokens> hyps;
    for (const auto& s : samples) hyps.push_back(s.response);
    res = evaluate_hypotheses(samples, hyps, d.world, rm ? &*rm : nullptr, &d.vocab);
    label = "gold";
  } else {
    const auto m = model_from_checkpoint(require_checkpoint(o, model, c, "eval"));
    res = evaluate(m, d.vocab, samples, d.world, rm ? &*rm : nullptr, dc);
    label = fs::path(checkpoint_path(o, model)).stem().string();
  }
  fs::create_directories(path_in(o, "eval"));
  const auto stem = path_in(o, "eval/" + label + "." + split);
  write_eval_outputs(res, stem);
  std::cout << report_table(res.report, label + " on " + split);
  return 0;
}

std::vector<DialogueSample> read_prompt_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw PreconditionError("cannot read prompt file " + path);
  std::vector<DialogueSample> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (!j.is_object() || !j.contains("knowledge")) throw Error("missing \"knowledge\"");
      if (!j.contains("context")) j["context"] = nlohmann::json::array();
      if (!j.contains("response")) j["response"] = "";
      if (!j.contains("entities")) j["entities"] = nlohmann::json::array();
      out.push_back(sample_from_json(j));
    } catch (const std::exception& e) {
      throw PreconditionError("malformed prompt file " + path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (out.empty()) throw PreconditionError("prompt file " + path + " has no prompts");
  return out;
}

int cmd_generate(const Common& o, const std::string& model, const std::string& prompts,
                 std::optional<int> beams, bool greedy, std::optional<int> max_new) {
  const auto c = resolve_config(o);
  const auto dc = decode_flags(c.decode, beams, greedy, max_new);
  const auto samples = read_prompt_file(prompts);
  Vocabulary vocab;
  {
    std::ifstream v(path_in(o, "vocab.json"));
    if (!v) throw PreconditionError("no vocab.json in " + o.out + "; run gen-data first");
    vocab = Vocabulary::from_json(nlohmann::json::parse(v));
  }
  const auto m = model_from_checkpoint(require_checkpoint(o, model, c, "generate"));
  for (const auto& s : samples) std::cout << join_words(decode_sample(m, vocab, s, dc)) << "\n";
  return 0;
}

int cmd_inspect_ffn(const Common& o, const std::string& model, const std::string& prompts,
                    const std::string& split, std::size_t index, std::optional<int> layer, std::size_t top) {
  auto c = resolve_config(o);
  std::ifstream v(path_in(o, "vocab.json"));
  if (!v) throw PreconditionError("no vocab.json in " + o.out + "; run gen-data first");
  const auto vocab = Vocabulary::from_json(nlohmann::json::parse(v));
  const auto pool = prompts.empty() ? split_by_name(load_data(o).corpus, split) : read_prompt_file(prompts);
  if (index >= pool.size()) throw PreconditionError("--index out of range (" + std::to_string(pool.size()) + " prompts)");
  const auto m = model_from_checkpoint(require_checkpoint(o, model, c, "inspect-ffn"));
  if (layer && (*layer < 0 || *layer >= m.config.n_layers))
    throw PreconditionError("--layer out of range [0," + std::to_string(m.config.n_layers) + ")");
  const auto p = prompt_of(encode_sample(pool[index], vocab, std::size_t(c.model.max_seq_len)));
  std::cout << "input: " << join_words(vocab.decode(p.ids)) << "\n";
  for (int l = 0; l < m.config.n_layers; ++l) {
    if (layer && *layer != l) continue;
    std::cout << "layer " << l << ":";
    for (const auto& a : ffn_key_activations(m, l, std::span<const int>(p.ids), std::span<const int>(p.types), top))
      std::cout << " " << a.bank << "." << a.slot << "=" << std::fixed << std::setprecision(4) << a.coefficient;
    std::cout << "\n";
  }
  return 0;
}

int cmd_pipeline(const Common& o) {
  const auto c = resolve_config(o);
  fs::create_directories(o.out);
  refuse_overwrite(o, path_in(o, "experiment.json"));
  std::ofstream logf(path_in(o, "experiment.log"));
  const auto r = run_experiment(c, &logf);
  auto j = experiment_to_json(r);
  j["config"] = c.to_json();
  j["config_hash"] = hex64(config_hash(c.to_json()));
  write_text(path_in(o, "experiment.json"), j.dump(2) + "\n");
  for (const auto& cond : r.conditions) std::cout << report_table(cond.report, cond.name);
  std::cout << "rlfc held-out r1: " << r.probe_sft.mean_r1 << " -> " << r.probe_rlfc.mean_r1
            << " (kl " << r.probe_rlfc.mean_kl << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Factual-consistency dialogue toolkit"};
  app.require_subcommand(1);
  Common o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "Experiment config JSON (default: <out>/config.json if present)");
    sub->add_option("--seed", o.seed, "Global seed; overrides the config");
    sub->add_option("--out", o.out, "Run directory")->capture_default_str();
    sub->add_flag("--force", o.force, "Overwrite existing outputs");
    sub->add_flag("--override", o.override_hash, "Load checkpoints whose config hash differs");
  };

  std::optional<int> n_conflicts;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic world and corpus splits");
  add_common(gen);
  gen->add_option("--n-conflicts", n_conflicts, "Number of conflicting fact pairs");

  std::string stage;
  bool alpha = false, combo = false, kl_bonus = false;
  auto* train = app.add_subcommand("train", "Train one stage");
  add_common(train);
  train->add_option("stage", stage, "pretrain|sft|kdial|reward|rlfc|combo")
      ->required()
      ->check(CLI::IsMember({"pretrain", "sft", "kdial", "reward", "rlfc", "combo"}));
  train->add_flag("--alpha", alpha, "kdial: train the extension on all response tokens");
  train->add_flag("--combo", combo, "rlfc: apply K-Dial to the RLFC policy afterwards");
  train->add_flag("--kl-bonus", kl_bonus, "rlfc: use the alternative KL sign convention");

  std::string model = "sft", split = "conflict_test", prompts;
  bool gold = false, greedy = false;
  std::optional<int> beams, max_new, layer;
  std::size_t index = 0, top = 10;
  auto* eval = app.add_subcommand("eval", "Decode a split and score it");
  add_common(eval);
  eval->add_option("--model", model, "Checkpoint path or stage name")->capture_default_str();
  eval->add_option("--split", split, "Corpus split")->capture_default_str()->check(CLI::IsMember(split_names()));
  eval->add_flag("--gold", gold, "Score the gold responses instead of a model");
  eval->add_option("--beams", beams, "Beam width");
  eval->add_flag("--greedy", greedy, "Greedy decoding");

  auto* gen_text = app.add_subcommand("generate", "Print responses for a JSONL prompt file");
  add_common(gen_text);
  gen_text->add_option("--model", model, "Checkpoint path or stage name")->capture_default_str();
  gen_text->add_option("--prompts", prompts, "JSONL with knowledge and optional context")->required();
  gen_text->add_option("--beams", beams, "Beam width");
  gen_text->add_flag("--greedy", greedy, "Greedy decoding");
  gen_text->add_option("--max-new", max_new, "Maximum generated tokens");

  auto* inspect = app.add_subcommand("inspect-ffn", "Top activated FFN key slots per layer");
  add_common(inspect);
  inspect->add_option("--model", model, "Checkpoint path or stage name")->capture_default_str();
  inspect->add_option("--prompts", prompts, "JSONL prompt file (default: a corpus split)");
  inspect->add_option("--split", split, "Corpus split")->capture_default_str()->check(CLI::IsMember(split_names()));
  inspect->add_option("--index", index, "Prompt index")->capture_default_str();
  inspect->add_option("--layer", layer, "Only this layer");
  inspect->add_option("--top", top, "Slots per layer")->capture_default_str();

  auto* pipeline = app.add_subcommand("pipeline", "Run every stage in memory and evaluate all conditions");
  add_common(pipeline);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(o, n_conflicts);
    if (*train) return cmd_train(o, stage, alpha, combo, kl_bonus);
    if (*eval) return cmd_eval(o, model, split, gold, beams, greedy);
    if (*gen_text) return cmd_generate(o, model, prompts, beams, greedy, max_new);
    if (*inspect) return cmd_inspect_ffn(o, model, prompts, split, index, layer, top);
    if (*pipeline) return cmd_pipeline(o);
  } catch (const PreconditionError& e) {
    log::error(e.what());
    return 2;
  } catch (const std::exception& e) {
    log::error(e.what());
    return 1;
  }
  return 1;
}
