#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fdl/rlfc.hpp"

using namespace fdl;

namespace {

struct Toy {
  World world;
  Vocabulary vocab;
  Corpus corpus;
  Model<float> model;
  std::vector<RlPrompt> prompts;
};

Toy toy(std::uint64_t seed = 1) {
  Toy t;
  t.world = generate_world(seed, 20, 12, 30, 0);
  t.corpus = generate_corpus(t.world, {40, 5, 5, 1, 0.5}, seed);
  t.vocab = Vocabulary::from_world(t.world);
  ModelConfig c;
  c.vocab_size = t.vocab.size();
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.max_seq_len = 48;
  t.model = init_model<float>(c, seed + 10);
  t.prompts = make_rl_prompts(t.corpus.train, t.vocab, 48);
  return t;
}

// Share of response tokens that also occur in the knowledge.
RewardFn overlap_reward() {
  return [](std::span<const int> k, std::span<const int> y) {
    if (y.empty()) return 0.0;
    double hit = 0;
    for (int t : y) hit += std::find(k.begin(), k.end(), t) != k.end();
    return hit / double(y.size());
  };
}

RlfcConfig small_config() {
  RlfcConfig c;
  c.batch_episodes = 8;
  c.minibatch_episodes = 4;
  c.iterations = 3;
  c.learning_rate = 1e-3;
  c.sampling.max_new = 6;
  c.seed = 4;
  return c;
}

std::vector<std::size_t> first_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t(0));
  return v;
}

// Logits equal to `bias` at every position: attention and FFN weights are
// zero and the final layer norm has zero gain.
Model<float> constant_logit_model(const std::vector<float>& bias) {
  ModelConfig c;
  c.vocab_size = 3;
  c.d_model = 3;
  c.n_layers = 1;
  c.n_heads = 1;
  c.max_seq_len = 8;
  auto m = init_model<float>(c, 0);
  for (auto& t : tensors_only(all_tensors(m)))
    for (auto& v : t.mutable_data()) v = 0.0f;
  auto e = m.params.token_embedding.mutable_data();
  for (int i = 0; i < 3; ++i) e[std::size_t(i * 3 + i)] = 1.0f;
  for (int i = 0; i < 3; ++i) m.params.final_offset.mutable_data()[std::size_t(i)] = bias[std::size_t(i)];
  return m;
}

}  // namespace

TEST(PolicyState, StartsFromSftWithZeroValueHead) {
  auto t = toy();
  auto s = make_policy_state(t.model);
  EXPECT_EQ(hash_tensors(tensors_only(all_tensors(s.policy))), hash_tensors(tensors_only(all_tensors(t.model))));
  EXPECT_EQ(reference_hash(s), hash_tensors(tensors_only(all_tensors(t.model))));
  for (float v : s.value_weight.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(s.value_bias.item(), 0.0f);
  // separate storage
  s.policy.params.token_embedding.mutable_data()[0] += 1.0f;
  EXPECT_EQ(reference_hash(s), hash_tensors(tensors_only(all_tensors(t.model))));
}

TEST(Rollout, StepZeroHasNoKlAndOnlyTerminalReward) {
  auto t = toy();
  auto s = make_policy_state(t.model);
  auto cfg = small_config();
  std::mt19937_64 rng(2);
  auto idx = first_n(10);
  auto batch = rollout(s, overlap_reward(), t.prompts, idx, cfg, rng);
  ASSERT_EQ(batch.episodes.size(), 10u);
  for (const auto& e : batch.episodes) {
    ASSERT_FALSE(e.response.empty());
    for (std::size_t k = 0; k < e.steps(); ++k) {
      EXPECT_EQ(e.kl[k], 0.0);
      EXPECT_EQ(e.values[k], 0.0);
      if (k + 1 < e.steps()) {
        EXPECT_EQ(e.rewards[k], 0.0);
      }
    }
    EXPECT_EQ(e.rewards.back(), e.r1);
  }
}

TEST(Rollout, ThreeTokenKlMatchesHandLogRatio) {
  // policy p = (0.2, 0.3, 0.5), reference q = (0.5, 0.3, 0.2); token 2 is <eos>
  const std::vector<double> p{0.2, 0.3, 0.5}, q{0.5, 0.3, 0.2};
  auto pol = constant_logit_model({float(std::log(p[0])), float(std::log(p[1])), float(std::log(p[2]))});
  auto ref = constant_logit_model({float(std::log(q[0])), float(std::log(q[1])), float(std::log(q[2]))});
  PolicyState s = make_policy_state(pol);
  s.reference = clone_model(ref);
  std::vector<RlPrompt> prompts{{Prompt{{1}, {kBotType}}, {}}};
  RewardFn zero = [](std::span<const int>, std::span<const int>) { return 0.0; };
  auto cfg = small_config();
  cfg.sampling.max_new = 5;
  std::mt19937_64 rng(11);
  std::vector<std::size_t> idx(30, 0);
  auto batch = rollout(s, zero, prompts, idx, cfg, rng);
  std::set<int> seen;
  for (const auto& e : batch.episodes)
    for (std::size_t k = 0; k < e.steps(); ++k) {
      const int tok = e.response[k];
      seen.insert(tok);
      EXPECT_NEAR(e.kl[k], std::log(p[std::size_t(tok)] / q[std::size_t(tok)]), 1e-6);
      EXPECT_NEAR(e.logprobs[k], std::log(p[std::size_t(tok)]), 1e-6);
    }
  EXPECT_EQ(seen.size(), 3u);
}

TEST(Rollout, ZeroTemperatureIsGreedy) {
  auto t = toy(3);
  auto s = make_policy_state(t.model);
  auto cfg = small_config();
  cfg.sampling.temperature = 0.0;
  std::mt19937_64 rng(0);
  auto idx = first_n(10);
  auto batch = rollout(s, overlap_reward(), t.prompts, idx, cfg, rng);
  for (const auto& e : batch.episodes) {
    auto g = decode_greedy(t.model, t.prompts[e.prompt_index].prompt, cfg.sampling.max_new);
    EXPECT_EQ(e.words(), g.tokens);
    EXPECT_EQ(e.finished, g.finished);
  }
}

TEST(Rollout, TopKRestrictsSupport) {
  std::vector<double> lp{std::log(0.1), std::log(0.5), std::log(0.15), std::log(0.25)};
  SamplingConfig sc;
  sc.top_k = 2;
  std::mt19937_64 rng(1);
  std::map<int, int> hist;
  for (int i = 0; i < 2000; ++i) ++hist[detail::sample_token(lp, sc, rng)];
  EXPECT_EQ(hist.size(), 2u);
  EXPECT_GT(hist[1], hist[3]);
  EXPECT_NEAR(double(hist[1]) / 2000.0, 0.5 / 0.75, 0.04);
}

TEST(Advantages, DegenerateGaeIsReturnMinusValue) {
  RolloutBatch b;
  Episode e;
  e.rewards = {0.5, -0.2, 1.0, 0.3};
  e.values = {0.1, 0.4, -0.3, 0.2};
  b.episodes.push_back(e);
  compute_advantages(b, 1.0, 1.0);
  EXPECT_FALSE(b.whitened);
  const auto& a = b.episodes[0].advantages;
  for (std::size_t t = 0; t < 4; ++t) {
    double ret = 0;
    for (std::size_t k = t; k < 4; ++k) ret += e.rewards[k];
    EXPECT_NEAR(a[t], ret - e.values[t], 1e-12);
    EXPECT_NEAR(b.episodes[0].returns[t], ret, 1e-12);
  }
}

TEST(Advantages, ZeroRewardsZeroValues) {
  RolloutBatch b;
  for (int i = 0; i < 3; ++i) {
    Episode e;
    e.rewards.assign(4, 0.0);
    e.values.assign(4, 0.0);
    b.episodes.push_back(e);
  }
  compute_advantages(b, 1.0, 0.95);
  EXPECT_TRUE(b.whitened);
  for (const auto& e : b.episodes)
    for (double a : e.advantages) EXPECT_EQ(a, 0.0);
}

TEST(Advantages, HandBuiltThreeStepEpisode) {
  const double g = 0.9, l = 0.8;
  const std::vector<double> r{0, 0, 1}, v{0.2, 0.3, 0.5};
  // oracle: A_t = sum_k (g*l)^k * delta_{t+k}, delta_t = r_t + g*V_{t+1} - V_t
  std::vector<double> delta(3);
  for (std::size_t t = 0; t < 3; ++t) delta[t] = r[t] + g * (t + 1 < 3 ? v[t + 1] : 0.0) - v[t];
  std::vector<double> oracle(3, 0.0);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t k = t; k < 3; ++k) oracle[t] += std::pow(g * l, double(k - t)) * delta[k];
  RolloutBatch b;
  Episode e;
  e.rewards = r;
  e.values = v;
  b.episodes.push_back(e);
  compute_advantages(b, g, l);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_NEAR(b.episodes[0].advantages[t], oracle[t], 1e-12);
  EXPECT_NEAR(b.episodes[0].advantages[2], 0.5, 1e-12);
  EXPECT_NEAR(b.episodes[0].advantages[1], 0.15 + 0.72 * 0.5, 1e-12);
  EXPECT_NEAR(b.episodes[0].advantages[0], 0.07 + 0.72 * 0.51, 1e-12);
}

TEST(Advantages, WhitenedAcrossBatch) {
  RolloutBatch b;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.3, 2.0);
  for (int i = 0; i < 4; ++i) {
    Episode e;
    for (int k = 0; k < 3 + i; ++k) {
      e.rewards.push_back(nd(rng));
      e.values.push_back(nd(rng));
    }
    b.episodes.push_back(e);
  }
  compute_advantages(b, 1.0, 0.95);
  double s = 0, s2 = 0, n = 0;
  for (const auto& e : b.episodes)
    for (double a : e.advantages) {
      s += a;
      s2 += a * a;
      n += 1;
    }
  EXPECT_NEAR(s / n, 0.0, 1e-9);
  EXPECT_NEAR(s2 / n, 1.0, 1e-6);
}

TEST(Ppo, ClippingRule) {
  EXPECT_DOUBLE_EQ(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
  EXPECT_TRUE(surrogate_clipped(1.5, 1.0, 0.2));
  EXPECT_DOUBLE_EQ(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
  EXPECT_TRUE(surrogate_clipped(0.5, -1.0, 0.2));
  // the pessimistic branch is unclipped here
  EXPECT_DOUBLE_EQ(clipped_surrogate(1.5, -1.0, 0.2), -1.5);
  EXPECT_FALSE(surrogate_clipped(1.5, -1.0, 0.2));
  EXPECT_DOUBLE_EQ(clipped_surrogate(1.1, 2.0, 0.2), 2.2);
}

TEST(Ppo, ZeroAdvantagesLeavePolicyUnchanged) {
  auto t = toy();
  auto s = make_policy_state(t.model);
  auto cfg = small_config();
  cfg.value_coeff = 0;
  cfg.entropy_coeff = 0;
  std::mt19937_64 rng(2);
  auto idx = first_n(6);
  auto batch = rollout(s, overlap_reward(), t.prompts, idx, cfg, rng);
  for (auto& e : batch.episodes) {
    e.advantages.assign(e.steps(), 0.0);
    e.returns.assign(e.steps(), 0.0);
  }
  const auto before = hash_tensors(policy_trainables(s));
  AdamState<float> adam;
  auto st = ppo_update(s, batch, t.prompts, cfg, adam, rng);
  EXPECT_GT(st.steps, 0);
  EXPECT_EQ(hash_tensors(policy_trainables(s)), before);

  // the value term alone moves the value head
  cfg.value_coeff = 0.5;
  for (auto& e : batch.episodes) e.returns.assign(e.steps(), 1.0);
  ppo_update(s, batch, t.prompts, cfg, adam, rng);
  EXPECT_NE(s.value_bias.item(), 0.0f);
}

TEST(Ppo, PositiveAdvantageRaisesLogProb) {
  auto t = toy(2);
  auto s = make_policy_state(t.model);
  auto cfg = small_config();
  cfg.value_coeff = 0;
  cfg.entropy_coeff = 0;
  cfg.ppo_epochs = 1;
  cfg.learning_rate = 1e-4;
  std::mt19937_64 rng(9);
  std::vector<std::size_t> idx{0};
  auto batch = rollout(s, overlap_reward(), t.prompts, idx, cfg, rng);
  auto& e = batch.episodes[0];
  e.advantages.assign(e.steps(), 0.0);
  e.advantages[0] = 1.0;
  e.returns.assign(e.steps(), 0.0);
  AdamState<float> adam;
  ppo_update(s, batch, t.prompts, cfg, adam, rng);
  auto after = response_logprobs(s.policy, t.prompts[0].prompt, e.response);
  EXPECT_GT(after[0], e.logprobs[0]);
}

TEST(Rlfc, InvariantsHoldThroughTraining) {
  auto t = toy();
  auto s = make_policy_state(t.model);
  const auto ref_before = reference_hash(s);
  auto cfg = small_config();
  cfg.iterations = 4;
  std::ostringstream log;
  auto res = train_rlfc(s, overlap_reward(), t.prompts, cfg, &log);
  ASSERT_EQ(res.curve.size(), 4u);
  EXPECT_EQ(reference_hash(s), ref_before);

  // a fresh batch from the moved policy
  std::mt19937_64 rng(77);
  auto idx = first_n(12);
  auto batch = rollout(s, overlap_reward(), t.prompts, idx, cfg, rng);
  double seq_kl = 0, any_kl = 0;
  for (const auto& e : batch.episodes) {
    EXPECT_NEAR(e.reward_sum(), e.r1 - cfg.beta * e.kl_sum(), 1e-6);
    auto again = response_logprobs(s.policy, t.prompts[e.prompt_index].prompt, e.response);
    for (std::size_t k = 0; k < e.steps(); ++k) EXPECT_NEAR(again[k], e.logprobs[k], 1e-6);
    seq_kl += e.kl_sum();
    for (double k : e.kl) any_kl += std::abs(k);
  }
  EXPECT_GT(any_kl, 0.0);
  EXPECT_GE(seq_kl / double(batch.episodes.size()), -0.01);

  // the literal sign adds the KL term instead
  auto ps = cfg;
  ps.kl_bonus = true;
  std::mt19937_64 rng2(77);
  auto b2 = rollout(s, overlap_reward(), t.prompts, idx, ps, rng2);
  for (const auto& e : b2.episodes) EXPECT_NEAR(e.reward_sum(), e.r1 + cfg.beta * e.kl_sum(), 1e-6);

  std::istringstream lines(log.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    ++n;
    for (const char* key : {"iteration=", "mean_r1=", "mean_kl=", "clip_fraction=", "mean_length="})
      EXPECT_NE(line.find(key), std::string::npos) << line;
  }
  EXPECT_EQ(n, 4);
}

TEST(Rlfc, DeterministicPerSeed) {
  auto t = toy();
  auto a = make_policy_state(t.model), b = make_policy_state(t.model);
  auto cfg = small_config();
  auto ra = train_rlfc(a, overlap_reward(), t.prompts, cfg);
  auto rb = train_rlfc(b, overlap_reward(), t.prompts, cfg);
  ASSERT_EQ(ra.curve.size(), rb.curve.size());
  for (std::size_t i = 0; i < ra.curve.size(); ++i) EXPECT_EQ(iteration_line(ra.curve[i]), iteration_line(rb.curve[i]));
  EXPECT_EQ(hash_tensors(policy_trainables(a)), hash_tensors(policy_trainables(b)));
}

TEST(Rlfc, LargeBetaKeepsPolicyAtReference) {
  auto t = toy();
  auto s = make_policy_state(t.model);
  auto cfg = small_config();
  cfg.beta = 100.0;
  cfg.iterations = 8;
  cfg.learning_rate = 3e-4;
  auto reward = overlap_reward();
  std::mt19937_64 r0(5);
  auto idx = first_n(30);
  const auto before = summarize(rollout(s, reward, t.prompts, idx, cfg, r0));
  train_rlfc(s, reward, t.prompts, cfg);
  std::mt19937_64 r1(5);
  const auto after = summarize(rollout(s, reward, t.prompts, idx, cfg, r1));
  EXPECT_LT(after.mean_kl, 0.01);
  EXPECT_NEAR(after.mean_r1, before.mean_r1, 0.05);
}

TEST(Rlfc, RewardRisesOnToyObjective) {
  // three-token policy rewarded for the share of token 0 in its response
  auto pol = constant_logit_model({float(std::log(0.2)), float(std::log(0.3)), float(std::log(0.5))});
  auto s = make_policy_state(pol);
  std::vector<RlPrompt> prompts{{Prompt{{1}, {kBotType}}, {}}};
  RewardFn zeros = [](std::span<const int>, std::span<const int> y) {
    return y.empty() ? 0.0 : double(std::count(y.begin(), y.end(), 0)) / double(y.size());
  };
  auto cfg = small_config();
  cfg.iterations = 30;
  cfg.learning_rate = 1e-2;
  cfg.sampling.max_new = 4;
  auto res = train_rlfc(s, zeros, prompts, cfg);
  auto mean_r1 = [&](std::size_t from, std::size_t to) {
    double m = 0;
    for (std::size_t i = from; i < to; ++i) m += res.curve[i].mean_r1;
    return m / double(to - from);
  };
  EXPECT_GT(mean_r1(25, 30), mean_r1(0, 5) + 0.05);
  const auto lp = response_logprobs(s.policy, prompts[0].prompt, {0});
  EXPECT_GT(lp[0], std::log(0.2));
}

TEST(RlfcConfig, JsonRoundTripAndValidation) {
  RlfcConfig c;
  c.beta = 0.3;
  c.kl_bonus = true;
  c.sampling.top_k = 5;
  auto back = RlfcConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  auto bad = c.to_json();
  bad["clip_eps"] = 0.0;
  EXPECT_THROW(RlfcConfig::from_json(bad), Error);
}
