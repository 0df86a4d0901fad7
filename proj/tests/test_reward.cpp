#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "fdl/reward.hpp"

using namespace fdl;

namespace {

// argentina / france are the only teams, so a swap is forced onto the winner slot.
World tiny_cup_world() {
  World w;
  w.entities = {{"argentina", kTeam}, {"worldcup2022", kEvent}, {"france", kTeam},
                {"lima", kPlace},     {"oslo", kPlace},         {"tomas", kPerson},
                {"vera", kPerson}};
  w.relations = relation_catalog();
  w.facts = {{1, 0, 0}, {5, 1, 3}, {6, 1, 4}};  // argentina won worldcup2022; tomas born in lima; vera in oslo
  w.validate();
  return w;
}

ConsistencyExample cup_positive() {
  return {split_words("argentina won worldcup2022"), split_words("argentina won worldcup2022"), 1,
          Provenance::gold, 0, "argentina"};
}

struct Setup {
  World world;
  Vocabulary vocab;
  NliDataset data;
};

Setup nli_setup(std::uint64_t seed = 1) {
  Setup s;
  s.world = generate_world(seed, 30, 12, 60, 0);
  auto corpus = generate_corpus(s.world, {240, 30, 30, 3, 0.5}, seed);
  std::vector<DialogueSample> pos = corpus.train;
  pos.insert(pos.end(), corpus.valid.begin(), corpus.valid.end());
  pos.insert(pos.end(), corpus.test.begin(), corpus.test.end());
  s.vocab = Vocabulary::from_world(s.world);
  s.data = build_nli_dataset(pos, s.world, NliConfig{}, seed);
  return s;
}

ModelConfig reward_config(const Vocabulary& v) {
  ModelConfig c;
  c.vocab_size = v.size();
  c.d_model = 32;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = 32;
  return c;
}

TrainConfig reward_train_config() {
  TrainConfig t;
  t.epochs = 25;
  t.batch_size = 16;
  t.learning_rate = 2e-3;
  t.warmup_steps = 20;
  t.max_seq_len = 32;
  t.seed = 3;
  return t;
}

}  // namespace

TEST(MakeNegative, EntitySwapExample) {
  auto w = tiny_cup_world();
  std::mt19937_64 rng(0);
  auto neg = make_negative(cup_positive(), Provenance::entity_swap, w, rng);
  EXPECT_EQ(join_words(neg.response), "france won worldcup2022");
  EXPECT_EQ(join_words(neg.knowledge), "argentina won worldcup2022");
  EXPECT_EQ(neg.label, 0);
  EXPECT_EQ(neg.provenance, Provenance::entity_swap);
}

TEST(MakeNegative, NegationExample) {
  auto w = tiny_cup_world();
  std::mt19937_64 rng(0);
  auto neg = make_negative(cup_positive(), Provenance::negation, w, rng);
  EXPECT_EQ(join_words(neg.response), "argentina not won worldcup2022");
  EXPECT_EQ(neg.label, 0);
  // with a lead-in phrase the insertion follows the statement
  auto p = cup_positive();
  p.response = split_words("i heard that argentina won worldcup2022");
  EXPECT_EQ(join_words(make_negative(p, Provenance::negation, w, rng).response),
            "i heard that argentina not won worldcup2022");
}

TEST(MakeNegative, RandomPairingUsesUnrelatedFact) {
  auto w = generate_world(4, 30, 12, 60, 0);
  std::mt19937_64 rng(1);
  for (int f = 0; f < 20; ++f) {
    ConsistencyExample ex{verbalize(w, w.facts[f]), verbalize(w, w.facts[f]), 1, Provenance::gold, f, ""};
    auto neg = make_negative(ex, Provenance::random_pairing, w, rng);
    EXPECT_EQ(neg.knowledge, ex.knowledge);
    const Fact& src = w.facts[f];
    for (const auto& tok : neg.response) {
      const int e = w.find_entity(tok);
      if (e >= 0) {
        EXPECT_NE(e, src.subject);
        EXPECT_NE(e, src.object);
      }
    }
  }
}

TEST(MakeNegative, Errors) {
  auto w = tiny_cup_world();
  std::mt19937_64 rng(0);
  ConsistencyExample plain{split_words("nothing here"), split_words("hello there"), 1,
                           Provenance::gold, -1, ""};
  EXPECT_THROW(make_negative(plain, Provenance::entity_swap, w, rng), Error);
  EXPECT_THROW(make_negative(plain, Provenance::negation, w, rng), Error);
  EXPECT_THROW(make_negative(cup_positive(), Provenance::gold, w, rng), Error);
}

TEST(NliDataset, CountsBalanceMixAndDisjointness) {
  auto s = nli_setup();
  std::size_t total = 0, pos = 0;
  std::map<Provenance, std::size_t> hist;
  std::set<int> train_facts, test_facts;
  for (auto* split : {&s.data.train, &s.data.valid, &s.data.test})
    for (const auto& e : *split) {
      ++total;
      pos += e.label;
      ++hist[e.provenance];
      EXPECT_EQ(e.label == 1, e.provenance == Provenance::gold);
      if (split == &s.data.train) train_facts.insert(e.fact_index);
      if (split == &s.data.test) test_facts.insert(e.fact_index);
    }
  EXPECT_EQ(total, 600u);
  EXPECT_EQ(pos, 300u);
  for (auto p : kCorruptions) {
    EXPECT_GE(hist[p], 99u);
    EXPECT_LE(hist[p], 101u);
  }
  for (int f : test_facts) EXPECT_FALSE(train_facts.count(f));
  EXPECT_FALSE(s.data.test.empty());
}

TEST(NliDataset, Deterministic) {
  auto a = nli_setup(5), b = nli_setup(5);
  ASSERT_EQ(a.data.train.size(), b.data.train.size());
  for (std::size_t i = 0; i < a.data.train.size(); ++i)
    EXPECT_EQ(nli_to_json(a.data.train[i]), nli_to_json(b.data.train[i]));
}

TEST(LossBce, AnalyticValues) {
  EXPECT_NEAR(loss_bce(0.5, 1), std::log(2.0), 1e-12);
  EXPECT_NEAR(loss_bce(0.5, 0), 0.693147, 1e-6);
  EXPECT_NEAR(loss_bce(0.9, 1), 0.10536, 1e-5);
  std::vector<double> s{0.9, 0.1};
  std::vector<int> l{0, 1};
  EXPECT_NEAR(loss_bce(std::span<const double>(s), std::span<const int>(l)), -std::log(0.1), 1e-12);
  EXPECT_NEAR(loss_bce(std::span<const double>(s), std::span<const int>(l)), 2.302585, 1e-6);
  EXPECT_TRUE(std::isfinite(loss_bce(0.0, 1)));
  EXPECT_NEAR(loss_bce(1.0, 0), -std::log(1e-7), 1e-6);
}

TEST(LossBce, StrictlyDecreasingForPositiveLabel) {
  double prev = 1e300;
  for (int i = 1; i < 100; ++i) {
    const double l = loss_bce(i / 100.0, 1);
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(EncodePair, LayoutAndMatchFlags) {
  const std::vector<int> k{10, 11, 12}, y{10, 13, 12};
  auto in = encode_pair(std::span<const int>(k), std::span<const int>(y), 32);
  const std::vector<int> ids{Vocabulary::kBos, 10, 11, 12, Vocabulary::kSep, 10, 13, 12, Vocabulary::kEos};
  EXPECT_EQ(in.ids, ids);
  const std::vector<int> types{kKnowledgeType, kMatchedKnowledge, kUnmatchedKnowledge, kMatchedKnowledge,
                               kBotType, kMatchedResponse, kUnmatchedResponse, kMatchedResponse, kBotType};
  EXPECT_EQ(in.types, types);
  EXPECT_FALSE(in.truncated);
  // the tail of Y is cut; 12 no longer counts as matched on the K side
  auto cut = encode_pair(std::span<const int>(k), std::span<const int>(y), 8);
  EXPECT_TRUE(cut.truncated);
  EXPECT_EQ(cut.ids.size(), 8u);
  EXPECT_EQ(cut.types[3], kUnmatchedKnowledge);
  EXPECT_THROW(encode_pair(std::span<const int>(k), std::span<const int>(y), 6), Error);
}

TEST(RewardModel, SoftmaxCrossEntropyEqualsBce) {
  auto s = nli_setup();
  auto rm = init_reward_model(reward_config(s.vocab), 2);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& e = s.data.train[i];
    auto in = encode_pair(e, s.vocab, 32);
    Tape<float> tape(false);
    auto logits = reward_logits(tape, rm, in);
    const float w = 1.0f;
    auto ce = ops::cross_entropy(tape, logits, std::span<const int>(&e.label, 1), std::span<const float>(&w, 1));
    EXPECT_NEAR(ce.item(), loss_bce(logistic_from_logits(logits), e.label), 1e-6);
  }
}

TEST(RewardModel, ScoreIsPureAndInUnitInterval) {
  auto s = nli_setup();
  auto rm = init_reward_model(reward_config(s.vocab), 2);
  for (const auto& e : s.data.test) {
    auto a = score(rm, s.vocab, e.knowledge, e.response);
    auto b = score(rm, s.vocab, e.knowledge, e.response);
    EXPECT_EQ(a.value, b.value);
    EXPECT_GT(a.value, 0.0);
    EXPECT_LT(a.value, 1.0);
    EXPECT_FALSE(a.truncated);
  }
  std::vector<std::string> longy(40, "won");
  auto t = score(rm, s.vocab, s.data.test[0].knowledge, longy);
  EXPECT_TRUE(t.truncated);
}

TEST(RewardModel, UnbalancedDataRejected) {
  auto s = nli_setup();
  NliDataset d;
  for (const auto& e : s.data.train)
    if (e.label == 1) d.train.push_back(e);
  auto rm = init_reward_model(reward_config(s.vocab), 2);
  EXPECT_THROW(train_reward(rm, s.vocab, d, reward_train_config()), PreconditionError);
}

TEST(RewardModel, LearnsConsistencyAndControlStaysAtChance) {
  auto s = nli_setup();
  auto rm = init_reward_model(reward_config(s.vocab), 2);
  auto t0 = std::chrono::steady_clock::now();
  auto rep = train_reward(rm, s.vocab, s.data, reward_train_config());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "reward accuracy " << rep.accuracy << " in " << secs << " s\n";
  for (const auto& [name, st] : rep.per_strategy)
    std::cout << "  " << name << " precision " << st.precision << " recall " << st.recall << "\n";
  EXPECT_GE(rep.accuracy, 0.9);
  const double rank = pairwise_ranking(rm, s.vocab, s.world, s.data.test, 7);
  std::cout << "pairwise ranking " << rank << "\n";
  EXPECT_GE(rank, 0.95);
  double gold = 0, bad = 0;
  std::size_t ng = 0, nb = 0;
  for (const auto& e : s.data.test) {
    const double v = score(rm, s.vocab, e.knowledge, e.response).value;
    (e.label ? gold : bad) += v;
    (e.label ? ng : nb) += 1;
  }
  EXPECT_GT(gold / double(ng) - bad / double(nb), 0.3);

  auto control = init_reward_model(reward_config(s.vocab), 2);
  auto crep = train_reward(control, s.vocab, shuffle_labels(s.data, 9), reward_train_config());
  std::cout << "control accuracy " << crep.accuracy << "\n";
  EXPECT_GE(crep.accuracy, 0.4);
  EXPECT_LE(crep.accuracy, 0.6);
}

TEST(NliJsonl, RoundTripAndValidation) {
  auto s = nli_setup();
  auto path = (std::filesystem::temp_directory_path() / "fdl_nli.jsonl").string();
  write_nli_jsonl(path, s.data.test);
  auto back = read_nli_jsonl(path);
  ASSERT_EQ(back.size(), s.data.test.size());
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(nli_to_json(back[i]), nli_to_json(s.data.test[i]));
  std::remove(path.c_str());
  EXPECT_THROW(nli_from_json(nlohmann::json::parse(
                   R"({"knowledge":"a","response":"b","label":1,"provenance":"negation"})")),
               Error);
}
