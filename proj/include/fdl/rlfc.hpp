#ifndef FDL_RLFC_HPP
#define FDL_RLFC_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fdl/adam.hpp"
#include "fdl/corpus.hpp"
#include "fdl/eval.hpp"
#include "fdl/log.hpp"
#include "fdl/model.hpp"
#include "fdl/reward.hpp"
#include "json.hpp"

namespace fdl {

// ---------------------------------------------------------------------------
// Policy state
// ---------------------------------------------------------------------------

struct PolicyState {
  Model<float> policy;
  Tensor<float> value_weight;  // [d_model x 1]
  Tensor<float> value_bias;    // [1 x 1]
  Model<float> reference;      // frozen
};

/// Policy and reference both start as copies of `sft`; the value head starts
/// at zero so step-0 advantages equal raw returns.
inline PolicyState make_policy_state(const Model<float>& sft) {
  PolicyState s{clone_model(sft), Tensor<float>::zeros({std::size_t(sft.config.d_model), 1}),
                Tensor<float>::zeros({1, 1}), clone_model(sft)};
  set_requires_grad(all_tensors(s.reference), false);
  return s;
}

inline std::vector<Tensor<float>> policy_trainables(const PolicyState& s) {
  auto out = tensors_only(all_tensors(s.policy));
  out.push_back(s.value_weight);
  out.push_back(s.value_bias);
  return out;
}

inline std::uint64_t reference_hash(const PolicyState& s) {
  return hash_tensors(tensors_only(all_tensors(s.reference)));
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct SamplingConfig {
  double temperature = 1.0;  // <= 0 means argmax
  int top_k = 0;             // 0 keeps the whole vocabulary
  int max_new = 16;
};

struct RlfcConfig {
  double beta = 0.1;
  bool kl_bonus = false;  // r = r1 + beta*KL instead of r1 - beta*KL
  double clip_eps = 0.2;
  double gamma = 1.0;
  double lambda = 0.95;
  int ppo_epochs = 4;
  double value_coeff = 0.5;
  double entropy_coeff = 0.01;
  int batch_episodes = 16;
  int minibatch_episodes = 4;
  int iterations = 40;
  double learning_rate = 5e-5;
  double clip_norm = 1.0;
  double kl_stop = 0.2;     // approx KL(policy || rollout policy) ending an update round
  double max_ref_kl = 5.0;  // mean per-token KL to the reference that aborts the run
  SamplingConfig sampling;
  std::uint64_t seed = 0;

  void validate() const {
    if (beta < 0) throw Error("rlfc config: beta must be >= 0");
    if (clip_eps <= 0 || clip_eps >= 1) throw Error("rlfc config: clip_eps must be in (0,1)");
    if (gamma < 0 || gamma > 1 || lambda < 0 || lambda > 1) throw Error("rlfc config: gamma and lambda must be in [0,1]");
    if (ppo_epochs < 1 || batch_episodes < 1 || minibatch_episodes < 1 || iterations < 0)
      throw Error("rlfc config: epoch, batch and iteration counts must be positive");
    if (!(learning_rate > 0)) throw Error("rlfc config: learning_rate must be positive");
    if (sampling.max_new < 1) throw Error("rlfc config: max_new must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"beta", beta},
            {"kl_bonus", kl_bonus},
            {"clip_eps", clip_eps},
            {"gamma", gamma},
            {"lambda", lambda},
            {"ppo_epochs", ppo_epochs},
            {"value_coeff", value_coeff},
            {"entropy_coeff", entropy_coeff},
            {"batch_episodes", batch_episodes},
            {"minibatch_episodes", minibatch_episodes},
            {"iterations", iterations},
            {"learning_rate", learning_rate},
            {"clip_norm", clip_norm},
            {"kl_stop", kl_stop},
            {"max_ref_kl", max_ref_kl},
            {"temperature", sampling.temperature},
            {"top_k", sampling.top_k},
            {"max_new", sampling.max_new},
            {"seed", seed}};
  }

  static RlfcConfig from_json(const nlohmann::json& j) {
    RlfcConfig c;
    c.beta = j.value("beta", c.beta);
    c.kl_bonus = j.value("kl_bonus", c.kl_bonus);
    c.clip_eps = j.value("clip_eps", c.clip_eps);
    c.gamma = j.value("gamma", c.gamma);
    c.lambda = j.value("lambda", c.lambda);
    c.ppo_epochs = j.value("ppo_epochs", c.ppo_epochs);
    c.value_coeff = j.value("value_coeff", c.value_coeff);
    c.entropy_coeff = j.value("entropy_coeff", c.entropy_coeff);
    c.batch_episodes = j.value("batch_episodes", c.batch_episodes);
    c.minibatch_episodes = j.value("minibatch_episodes", c.minibatch_episodes);
    c.iterations = j.value("iterations", c.iterations);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.kl_stop = j.value("kl_stop", c.kl_stop);
    c.max_ref_kl = j.value("max_ref_kl", c.max_ref_kl);
    c.sampling.temperature = j.value("temperature", c.sampling.temperature);
    c.sampling.top_k = j.value("top_k", c.sampling.top_k);
    c.sampling.max_new = j.value("max_new", c.sampling.max_new);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

struct RlPrompt {
  Prompt prompt;               // <knl> K turns <bot>
  std::vector<int> knowledge;  // K alone, for the reward model
};

inline RlPrompt make_rl_prompt(const DialogueSample& s, const Vocabulary& vocab, std::size_t max_len) {
  return {prompt_of(encode_sample(s, vocab, max_len)), vocab.encode(s.knowledge)};
}

inline std::vector<RlPrompt> make_rl_prompts(const std::vector<DialogueSample>& samples,
                                             const Vocabulary& vocab, std::size_t max_len) {
  std::vector<RlPrompt> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(make_rl_prompt(s, vocab, max_len));
  return out;
}

/// r1 for a (knowledge ids, response ids) pair.
using RewardFn = std::function<double(std::span<const int>, std::span<const int>)>;

inline RewardFn reward_fn(const RewardModel& rm) {
  return [&rm](std::span<const int> k, std::span<const int> y) { return score_ids(rm, k, y).value; };
}

struct Episode {
  std::size_t prompt_index = 0;
  std::vector<int> response;  // sampled tokens, ending in <eos> unless cut at max_new
  std::vector<double> logprobs, ref_logprobs, kl, rewards, values, advantages, returns;
  double r1 = 0;
  bool finished = false;

  std::size_t steps() const { return response.size(); }
  /// Response words for the reward model and metrics: <eos> dropped.
  std::vector<int> words() const {
    std::vector<int> w = response;
    if (finished && !w.empty()) w.pop_back();
    return w;
  }
  double kl_sum() const { return std::accumulate(kl.begin(), kl.end(), 0.0); }
  double reward_sum() const { return std::accumulate(rewards.begin(), rewards.end(), 0.0); }
};

struct RolloutBatch {
  std::vector<Episode> episodes;
  bool whitened = false;
};

namespace detail {

inline std::vector<int> joined_ids(const Prompt& p, const std::vector<int>& response) {
  std::vector<int> ids = p.ids;
  ids.insert(ids.end(), response.begin(), response.end());
  return ids;
}

inline std::vector<int> joined_types(const Prompt& p, std::size_t n_response) {
  std::vector<int> t = p.types;
  t.insert(t.end(), n_response, kBotType);
  return t;
}

// Rows of `logits` that predict the response tokens: row P-1+t predicts y_t.
inline double row_logprob(const Tensor<float>& logits, std::size_t row, int token) {
  const std::size_t v = logits.cols();
  const float* z = logits.data().data() + row * v;
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, double(z[j]));
  double s = 0;
  for (std::size_t j = 0; j < v; ++j) s += std::exp(double(z[j]) - mx);
  return double(z[token]) - (mx + std::log(s));
}

// Input for teacher-forced scoring: prompt plus all response tokens but the last.
inline std::pair<std::vector<int>, std::vector<int>> scoring_input(const Prompt& p,
                                                                   const std::vector<int>& response) {
  std::vector<int> head(response.begin(), response.end() - 1);
  return {joined_ids(p, head), joined_types(p, head.size())};
}

inline int sample_token(const std::vector<double>& logprobs, const SamplingConfig& cfg, std::mt19937_64& rng) {
  if (cfg.temperature <= 0)
    return int(std::max_element(logprobs.begin(), logprobs.end()) - logprobs.begin());
  std::vector<std::size_t> idx(logprobs.size());
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  if (cfg.top_k > 0 && std::size_t(cfg.top_k) < idx.size()) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return logprobs[a] > logprobs[b]; });
    idx.resize(std::size_t(cfg.top_k));
    std::sort(idx.begin(), idx.end());
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (auto i : idx) mx = std::max(mx, logprobs[i] / cfg.temperature);
  std::vector<double> w(idx.size());
  double total = 0;
  for (std::size_t k = 0; k < idx.size(); ++k) total += w[k] = std::exp(logprobs[idx[k]] / cfg.temperature - mx);
  const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  double acc = 0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    acc += w[k];
    if (u < acc) return int(idx[k]);
  }
  return int(idx.back());
}

}  // namespace detail

/// Log-probabilities of `response` under `model`, one teacher-forced pass.
inline std::vector<double> response_logprobs(const Model<float>& model, const Prompt& p,
                                             const std::vector<int>& response) {
  if (response.empty()) return {};
  auto [ids, types] = detail::scoring_input(p, response);
  Tape<float> tape(false);
  auto out = forward(tape, model, std::span<const int>(ids), std::span<const int>(types));
  std::vector<double> lp(response.size());
  for (std::size_t t = 0; t < response.size(); ++t)
    lp[t] = detail::row_logprob(out.logits, p.ids.size() - 1 + t, response[t]);
  return lp;
}

/// Value predictions V(s_t) for every response step.
inline std::vector<double> response_values(const PolicyState& s, const Prompt& p,
                                           const std::vector<int>& response) {
  if (response.empty()) return {};
  auto [ids, types] = detail::scoring_input(p, response);
  Tape<float> tape(false);
  auto out = forward(tape, s.policy, std::span<const int>(ids), std::span<const int>(types), false);
  auto v = ops::add(tape, ops::matmul(tape, out.hidden, s.value_weight), s.value_bias);
  std::vector<double> vals(response.size());
  for (std::size_t t = 0; t < response.size(); ++t) vals[t] = double(v.data()[p.ids.size() - 1 + t]);
  return vals;
}

/// Fills rewards from kl and r1: r_t = -beta*kl_t, plus r1 at the last step.
inline void shape_rewards(Episode& e, double beta, bool kl_bonus) {
  const double sign = kl_bonus ? 1.0 : -1.0;
  e.rewards.assign(e.kl.size(), 0.0);
  for (std::size_t t = 0; t < e.kl.size(); ++t) e.rewards[t] = sign * beta * e.kl[t];
  if (!e.rewards.empty()) e.rewards.back() += e.r1;
}

/// Samples one response per prompt and scores it.
inline RolloutBatch rollout(const PolicyState& state, const RewardFn& reward, const std::vector<RlPrompt>& prompts,
                            std::span<const std::size_t> which, const RlfcConfig& cfg, std::mt19937_64& rng) {
  RolloutBatch batch;
  for (std::size_t pi : which) {
    const auto& rp = prompts.at(pi);
    Episode e;
    e.prompt_index = pi;
    const int budget = capped_max_new(state.policy, rp.prompt, cfg.sampling.max_new);
    if (budget < 1) throw PreconditionError("rollout: prompt leaves no room for a response");
    auto next = model_next_logprobs(state.policy, rp.prompt);
    for (int step = 0; step < budget; ++step) {
      const int tok = detail::sample_token(next(e.response), cfg.sampling, rng);
      e.response.push_back(tok);
      if (tok == Vocabulary::kEos) {
        e.finished = true;
        break;
      }
    }
    e.logprobs = response_logprobs(state.policy, rp.prompt, e.response);
    e.ref_logprobs = response_logprobs(state.reference, rp.prompt, e.response);
    e.kl.resize(e.response.size());
    for (std::size_t t = 0; t < e.kl.size(); ++t) {
      e.kl[t] = e.logprobs[t] - e.ref_logprobs[t];
      if (!std::isfinite(e.kl[t])) throw NumericError("rollout: non-finite KL term");
    }
    const auto words = e.words();
    e.r1 = reward(std::span<const int>(rp.knowledge), std::span<const int>(words));
    shape_rewards(e, cfg.beta, cfg.kl_bonus);
    e.values = response_values(state, rp.prompt, e.response);
    batch.episodes.push_back(std::move(e));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Advantages
// ---------------------------------------------------------------------------

/// GAE per episode, then advantages whitened over every step in the batch.
/// Whitening needs at least two episodes; otherwise it is skipped and
/// batch.whitened stays false.
inline void compute_advantages(RolloutBatch& batch, double gamma, double lambda) {
  std::size_t n = 0;
  double sum = 0;
  for (auto& e : batch.episodes) {
    const std::size_t T = e.rewards.size();
    if (e.values.size() != T) throw ShapeError("compute_advantages: values missing");
    e.advantages.assign(T, 0.0);
    e.returns.assign(T, 0.0);
    double running = 0;
    for (std::size_t k = T; k-- > 0;) {
      const double next_v = k + 1 < T ? e.values[k + 1] : 0.0;
      const double delta = e.rewards[k] + gamma * next_v - e.values[k];
      running = delta + gamma * lambda * running;
      e.advantages[k] = running;
      e.returns[k] = running + e.values[k];
    }
    for (double a : e.advantages) sum += a;
    n += T;
  }
  batch.whitened = false;
  if (batch.episodes.size() < 2 || n == 0) return;
  const double mean = sum / double(n);
  double var = 0;
  for (const auto& e : batch.episodes)
    for (double a : e.advantages) var += (a - mean) * (a - mean);
  var /= double(n);
  const double inv = 1.0 / std::sqrt(var + 1e-8);
  for (auto& e : batch.episodes)
    for (double& a : e.advantages) a = (a - mean) * inv;
  batch.whitened = true;
}

// ---------------------------------------------------------------------------
// PPO
// ---------------------------------------------------------------------------

/// min(ratio*A, clip(ratio, 1-eps, 1+eps)*A).
inline double clipped_surrogate(double ratio, double adv, double eps) {
  return std::min(ratio * adv, std::clamp(ratio, 1.0 - eps, 1.0 + eps) * adv);
}

/// Whether the clipped branch is the one selected (no gradient flows).
inline bool surrogate_clipped(double ratio, double adv, double eps) {
  return (adv > 0 && ratio > 1.0 + eps) || (adv < 0 && ratio < 1.0 - eps);
}

struct PpoStats {
  double mean_ratio = 0;
  double clip_fraction = 0;
  double approx_kl = 0;  // mean(old - new) log-prob over the last measured minibatch round
  double entropy = 0;
  double policy_loss = 0;
  double value_loss = 0;
  int steps = 0;
  bool early_stopped = false;
};

namespace detail {

struct EpisodeTerms {
  std::optional<Tensor<float>> loss;
  double ratio_sum = 0, clipped = 0, kl_sum = 0, entropy_sum = 0, policy_sum = 0, value_sum = 0;
  std::size_t tokens = 0;
};

// Builds this episode's loss. The clipped surrogate is expressed as a
// weighted cross-entropy: its gradient at the current parameters is
// -A*ratio*grad(log p) on unclipped tokens and zero on clipped ones.
inline EpisodeTerms episode_loss(Tape<float>& tape, const PolicyState& s, const RlPrompt& rp, const Episode& e,
                                 const RlfcConfig& cfg, double token_norm) {
  EpisodeTerms out;
  const std::size_t T = e.response.size();
  if (T == 0) return out;
  auto [ids, types] = scoring_input(rp.prompt, e.response);
  const std::size_t n = ids.size(), P = rp.prompt.ids.size();
  auto fw = forward(tape, s.policy, std::span<const int>(ids), std::span<const int>(types));

  std::vector<int> targets(n, 0);
  std::vector<float> pg_w(n, 0.0f);
  auto mask = Tensor<float>::zeros({n, 1});
  auto neg_returns = Tensor<float>::zeros({n, 1});
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t row = P - 1 + t;
    const double lp = row_logprob(fw.logits, row, e.response[t]);
    const double ratio = std::exp(lp - e.logprobs[t]);
    const double adv = e.advantages[t];
    targets[row] = e.response[t];
    if (!surrogate_clipped(ratio, adv, cfg.clip_eps)) pg_w[row] = float(adv * ratio / token_norm);
    out.ratio_sum += ratio;
    out.clipped += std::abs(ratio - 1.0) > cfg.clip_eps;
    out.kl_sum += e.logprobs[t] - lp;
    out.policy_sum += -clipped_surrogate(ratio, adv, cfg.clip_eps);
    mask.mutable_data()[row] = 1.0f;
    neg_returns.mutable_data()[row] = float(-e.returns[t]);
  }
  out.tokens = T;

  Tensor<float> loss = ops::cross_entropy(tape, fw.logits, std::span<const int>(targets), std::span<const float>(pg_w));

  auto values = ops::add(tape, ops::matmul(tape, fw.hidden, s.value_weight), s.value_bias);
  auto diff = ops::mul(tape, ops::add(tape, values, neg_returns), mask);
  auto sq = ops::sum(tape, ops::mul(tape, diff, diff));
  out.value_sum = double(sq.item());
  if (cfg.value_coeff != 0) loss = ops::add(tape, loss, ops::scale(tape, sq, float(cfg.value_coeff / token_norm)));

  // sum_rows p*log p = -entropy, restricted to response rows
  auto plogp = ops::mul(tape, ops::mul(tape, ops::softmax(tape, fw.logits), ops::log_softmax(tape, fw.logits)), mask);
  auto neg_h = ops::sum(tape, plogp);
  out.entropy_sum = -double(neg_h.item());
  if (cfg.entropy_coeff != 0) loss = ops::add(tape, loss, ops::scale(tape, neg_h, float(cfg.entropy_coeff / token_norm)));
  out.loss = loss;
  return out;
}

}  // namespace detail

/// PPO epochs over the batch in minibatches of episodes. A round stops early
/// when the approximate KL to the rollout policy exceeds cfg.kl_stop.
inline PpoStats ppo_update(PolicyState& state, const RolloutBatch& batch, const std::vector<RlPrompt>& prompts,
                           const RlfcConfig& cfg, AdamState<float>& adam, std::mt19937_64& rng) {
  cfg.validate();
  PpoStats st;
  if (batch.episodes.empty()) return st;
  auto trainable = policy_trainables(state);
  std::vector<bool> saved;
  for (auto& t : trainable) {
    saved.push_back(t.requires_grad());
    t.set_requires_grad(true);
  }
  adam.lr = cfg.learning_rate;
  std::vector<std::size_t> order(batch.episodes.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  double ratio_sum = 0, clipped = 0, ent = 0, pol = 0, val = 0;
  std::size_t tokens = 0;
  const std::size_t mb = std::size_t(cfg.minibatch_episodes);
  for (int epoch = 0; epoch < cfg.ppo_epochs && !st.early_stopped; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size() && !st.early_stopped; b += mb) {
      const std::size_t e_end = std::min(order.size(), b + mb);
      std::size_t mb_tokens = 0;
      for (std::size_t k = b; k < e_end; ++k) mb_tokens += batch.episodes[order[k]].steps();
      if (mb_tokens == 0) continue;
      for (auto& t : trainable) t.zero_grad();
      double mb_kl = 0;
      for (std::size_t k = b; k < e_end; ++k) {
        const auto& e = batch.episodes[order[k]];
        Tape<float> tape;
        auto terms = detail::episode_loss(tape, state, prompts.at(e.prompt_index), e, cfg, double(mb_tokens));
        if (!terms.loss) continue;
        if (!std::isfinite(terms.loss->item())) throw NumericError("ppo_update: non-finite loss");
        tape.backward(*terms.loss);
        mb_kl += terms.kl_sum;
        ratio_sum += terms.ratio_sum;
        clipped += terms.clipped;
        ent += terms.entropy_sum;
        pol += terms.policy_sum;
        val += terms.value_sum;
        tokens += terms.tokens;
      }
      st.approx_kl = mb_kl / double(mb_tokens);
      if (st.approx_kl > cfg.kl_stop) {
        st.early_stopped = true;
        break;
      }
      for (auto& t : trainable) t.ensure_grad();
      if (cfg.clip_norm > 0) clip_grad_norm(std::span<Tensor<float>>(trainable), cfg.clip_norm);
      adam_step(std::span<Tensor<float>>(trainable), adam);
      ++st.steps;
    }
  }
  for (auto& t : trainable) t.zero_grad();
  for (std::size_t i = 0; i < trainable.size(); ++i) trainable[i].set_requires_grad(saved[i]);
  if (tokens) {
    st.mean_ratio = ratio_sum / double(tokens);
    st.clip_fraction = clipped / double(tokens);
    st.entropy = ent / double(tokens);
    st.policy_loss = pol / double(tokens);
    st.value_loss = val / double(tokens);
  }
  return st;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct IterationStats {
  int iteration = 0;
  double mean_r1 = 0;
  double mean_kl = 0;      // per token, policy vs reference
  double mean_seq_kl = 0;  // summed over each episode
  double clip_fraction = 0;
  double mean_length = 0;  // response words, <eos> excluded
  double approx_kl = 0;
  double entropy = 0;
  bool early_stopped = false;
  bool whitened = false;
};

struct RlfcResult {
  std::vector<IterationStats> curve;
  int early_stops = 0;
};

inline std::string iteration_line(const IterationStats& s) {
  std::ostringstream os;
  os << "iteration=" << s.iteration << std::fixed << std::setprecision(6) << " mean_r1=" << s.mean_r1
     << " mean_kl=" << s.mean_kl << " clip_fraction=" << s.clip_fraction << std::setprecision(3)
     << " mean_length=" << s.mean_length;
  return os.str();
}

inline IterationStats summarize(const RolloutBatch& batch) {
  IterationStats s;
  double kl = 0, len = 0;
  std::size_t steps = 0;
  for (const auto& e : batch.episodes) {
    s.mean_r1 += e.r1;
    s.mean_seq_kl += e.kl_sum();
    kl += e.kl_sum();
    steps += e.steps();
    len += double(e.words().size());
  }
  const double n = double(std::max<std::size_t>(batch.episodes.size(), 1));
  s.mean_r1 /= n;
  s.mean_seq_kl /= n;
  s.mean_length = len / n;
  s.mean_kl = steps ? kl / double(steps) : 0.0;
  s.whitened = batch.whitened;
  return s;
}

/// rollout -> advantages -> PPO, cfg.iterations times. Prompts are visited
/// in a seeded shuffled cycle.
inline RlfcResult train_rlfc(PolicyState& state, const RewardFn& reward, const std::vector<RlPrompt>& prompts,
                             const RlfcConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  if (prompts.empty()) throw Error("train_rlfc: empty prompt set");
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> cycle(prompts.size());
  std::iota(cycle.begin(), cycle.end(), std::size_t(0));
  std::shuffle(cycle.begin(), cycle.end(), rng);
  std::size_t cursor = 0;
  AdamState<float> adam;
  RlfcResult res;
  for (int it = 1; it <= cfg.iterations; ++it) {
    std::vector<std::size_t> which;
    for (int k = 0; k < cfg.batch_episodes; ++k) {
      if (cursor == cycle.size()) {
        std::shuffle(cycle.begin(), cycle.end(), rng);
        cursor = 0;
      }
      which.push_back(cycle[cursor++]);
    }
    auto batch = rollout(state, reward, prompts, std::span<const std::size_t>(which), cfg, rng);
    compute_advantages(batch, cfg.gamma, cfg.lambda);
    auto stats = summarize(batch);
    stats.iteration = it;
    if (stats.mean_kl > cfg.max_ref_kl)
      throw NumericError("train_rlfc: mean KL to reference " + std::to_string(stats.mean_kl) +
                         " exceeds cap at iteration " + std::to_string(it));
    auto ppo = ppo_update(state, batch, prompts, cfg, adam, rng);
    stats.clip_fraction = ppo.clip_fraction;
    stats.approx_kl = ppo.approx_kl;
    stats.entropy = ppo.entropy;
    stats.early_stopped = ppo.early_stopped;
    res.early_stops += ppo.early_stopped;
    const auto line = iteration_line(stats);
    if (log) *log << line << '\n';
    log::debug("rlfc ", line);
    res.curve.push_back(stats);
  }
  return res;
}

/// Mean r1 of greedy responses: the held-out yardstick for RLFC.
inline double mean_greedy_r1(const Model<float>& model, const RewardFn& reward, const std::vector<RlPrompt>& prompts,
                             int max_new, double* mean_length = nullptr) {
  if (prompts.empty()) throw Error("mean_greedy_r1: empty prompt set");
  double sum = 0, len = 0;
  for (const auto& rp : prompts) {
    auto h = decode_greedy(model, rp.prompt, max_new);
    sum += reward(std::span<const int>(rp.knowledge), std::span<const int>(h.tokens));
    len += double(h.tokens.size());
  }
  if (mean_length) *mean_length = len / double(prompts.size());
  return sum / double(prompts.size());
}

}  // namespace fdl

#endif  // FDL_RLFC_HPP
