#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <set>

#include "fdl/corpus.hpp"

using namespace fdl;

namespace {

// Hand-built world around the motivating cup example.
World cup_world() {
  World w;
  w.entities = {{"argentina", kTeam}, {"worldcup2022", kEvent}, {"france", kTeam},
                {"brazil", kTeam},    {"eurocup", kEvent},      {"spain", kTeam}};
  w.relations = relation_catalog();
  w.facts = {{1, 0, 0}, {4, 0, 5}};  // argentina won worldcup2022; spain won eurocup
  w.conflicts = {{{1, 0, 2}, {1, 0, 0}}};
  w.validate();
  return w;
}

World default_world(std::uint64_t seed = 7) { return generate_world(seed, 48, 12, 120, 20); }

}  // namespace

TEST(World, ZeroConflicts) {
  auto w = generate_world(1, 20, 12, 30, 0);
  EXPECT_TRUE(w.conflicts.empty());
}

TEST(World, SameSeedSameWorld) {
  auto a = generate_world(3, 20, 12, 40, 5);
  auto b = generate_world(3, 20, 12, 40, 5);
  EXPECT_EQ(world_to_json(a), world_to_json(b));
  auto c = generate_world(4, 20, 12, 40, 5);
  EXPECT_NE(world_to_json(a), world_to_json(c));
}

TEST(World, FactsReferenceRegisteredIds) {
  auto w = generate_world(5, 20, 12, 40, 10);
  ASSERT_EQ(w.facts.size(), 40u);
  std::set<Fact> seen;
  for (const auto& f : w.facts) {
    EXPECT_GE(f.subject, 0);
    EXPECT_LT(f.subject, 20);
    EXPECT_LT(f.object, 20);
    EXPECT_NE(f.subject, f.object);
    EXPECT_EQ(w.entities[f.subject].type, w.relations[f.relation].subject_type);
    EXPECT_EQ(w.entities[f.object].type, w.relations[f.relation].object_type);
    EXPECT_TRUE(seen.insert(f).second);
  }
  std::set<Fact> conflicted;
  for (const auto& c : w.conflicts) {
    EXPECT_EQ(c.pretrain.subject, c.grounded.subject);
    EXPECT_EQ(c.pretrain.relation, c.grounded.relation);
    EXPECT_NE(c.pretrain.object, c.grounded.object);
    EXPECT_GE(fact_index_of(w, c.grounded), 0);
    EXPECT_TRUE(conflicted.insert(c.grounded).second);  // without replacement
  }
}

TEST(World, Errors) {
  EXPECT_THROW(generate_world(1, 20, 12, 10, 11), Error);
  EXPECT_THROW(generate_world(1, 8, 12, 500, 0), Error);
  EXPECT_THROW(generate_world(1, 20, 13, 10, 0), Error);
}

TEST(World, JsonRoundTrip) {
  auto w = default_world();
  auto back = world_from_json(world_to_json(w));
  EXPECT_EQ(world_to_json(back), world_to_json(w));
}

TEST(Render, QuestionAnswerExample) {
  auto w = cup_world();
  std::mt19937_64 rng(0);
  auto s = render_sample(w.facts[0], kQuestionAnswer, w, rng);
  EXPECT_EQ(join_words(s.knowledge), "argentina won worldcup2022");
  ASSERT_EQ(s.context.size(), 1u);
  EXPECT_EQ(s.context[0].speaker, Speaker::user);
  EXPECT_EQ(join_words(s.context[0].tokens), "who won worldcup2022");
  EXPECT_EQ(join_words(s.response), "argentina won worldcup2022");
  EXPECT_EQ(s.entity_spans, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(s.grounded_object, "argentina");
}

TEST(Render, EveryTemplateKeepsInvariants) {
  auto w = default_world();
  auto vocab = Vocabulary::from_world(w);
  std::mt19937_64 rng(1);
  for (const auto& f : w.facts)
    for (int t = 0; t < kNumTemplates; ++t) {
      auto s = render_sample(f, t, w, rng);
      const auto& subj = w.entities[f.subject].name;
      const auto& obj = w.entities[f.object].name;
      EXPECT_EQ(s.knowledge, verbalize(w, f));
      EXPECT_NE(std::find(s.response.begin(), s.response.end(), s.grounded_object),
                s.response.end());
      EXPECT_NE(std::find(s.knowledge.begin(), s.knowledge.end(), s.grounded_object),
                s.knowledge.end());
      std::set<std::size_t> expect;
      for (std::size_t i = 0; i < s.response.size(); ++i)
        if (s.response[i] == subj || s.response[i] == obj) expect.insert(i);
      EXPECT_EQ(std::set<std::size_t>(s.entity_spans.begin(), s.entity_spans.end()), expect);
      for (auto p : s.entity_spans) EXPECT_TRUE(vocab.is_entity(s.response[p]));
    }
}

TEST(Render, DistractorTurnSpansCoverResponseOnly) {
  auto w = default_world();
  std::mt19937_64 rng(2);
  const Fact f = w.facts[3];
  auto s = render_sample(f, kDistractorTurn, w, rng);
  ASSERT_EQ(s.context.size(), 3u);
  // the first turn states some other fact, sharing no entity with f
  const auto& first = s.context[0].tokens;
  int entities_in_first = 0;
  for (const auto& tok : first) {
    int e = w.find_entity(tok);
    if (e >= 0) {
      ++entities_in_first;
      EXPECT_NE(e, f.subject);
      EXPECT_NE(e, f.object);
    }
  }
  EXPECT_EQ(entities_in_first, 2);
  for (auto p : s.entity_spans) EXPECT_LT(p, s.response.size());
  EXPECT_EQ(s.entity_spans.size(), 2u);
}

TEST(Render, UnknownTemplate) {
  auto w = cup_world();
  std::mt19937_64 rng(0);
  EXPECT_THROW(render_sample(w.facts[0], kNumTemplates, w, rng), Error);
  EXPECT_THROW(render_sample(w.facts[0], -1, w, rng), Error);
}

TEST(Corpus, ConflictExample) {
  auto w = cup_world();
  CorpusCounts counts{1, 1, 1, 3, 0.0};
  auto c = generate_corpus(w, counts, 0);
  bool stale = false;
  for (const auto& s : c.pretrain) {
    EXPECT_TRUE(s.knowledge.empty());
    EXPECT_TRUE(s.context.empty());
    if (join_words(s.response) == "france won worldcup2022") stale = true;
  }
  EXPECT_TRUE(stale);
  ASSERT_EQ(c.conflict_test.size(), std::size_t(kNumTemplates));
  for (const auto& s : c.conflict_test) {
    EXPECT_EQ(join_words(s.knowledge), "argentina won worldcup2022");
    EXPECT_NE(std::find(s.response.begin(), s.response.end(), "argentina"), s.response.end());
    EXPECT_EQ(s.grounded_object, "argentina");
  }
}

TEST(Corpus, ZeroConflictWorld) {
  auto w = generate_world(2, 24, 12, 40, 0);
  auto c = generate_corpus(w, {60, 10, 10, 3, 0.5}, 1);
  EXPECT_TRUE(c.conflict_test.empty());
  EXPECT_TRUE(c.rl_prompts.empty());
  EXPECT_TRUE(c.pretrain.empty());
}

TEST(Corpus, SplitsDisjointByFactAndTemplate) {
  auto w = default_world();
  auto c = generate_corpus(w, {200, 40, 60, 3, 0.5}, 9);
  std::set<std::pair<int, int>> seen;
  for (const auto& name : {"train", "valid", "test", "conflict_test", "rl_prompts"})
    for (const auto& s : split_by_name(c, name)) {
      ASSERT_GE(s.fact_index, 0);
      EXPECT_TRUE(seen.insert({s.fact_index, s.template_id}).second) << name;
    }
  EXPECT_EQ(c.train.size(), 200u);
  EXPECT_EQ(c.valid.size(), 40u);
  EXPECT_EQ(c.test.size(), 60u);
  EXPECT_EQ(c.conflict_test.size() + c.rl_prompts.size(), w.conflicts.size() * kNumTemplates);
}

TEST(Corpus, TrainingSplitsAvoidConflictFacts) {
  auto w = default_world();
  auto c = generate_corpus(w, {200, 40, 60, 3, 0.5}, 9);
  std::set<int> conflicted;
  for (const auto& cp : w.conflicts) conflicted.insert(fact_index_of(w, cp.grounded));
  for (const auto& name : {"train", "valid", "test"})
    for (const auto& s : split_by_name(c, name)) EXPECT_FALSE(conflicted.count(s.fact_index));
}

TEST(Corpus, EveryConflictQueryHasStalePretrainSentence) {
  auto w = default_world();
  auto c = generate_corpus(w, {200, 40, 60, 3, 0.5}, 9);
  std::set<std::string> pretrain;
  for (const auto& s : c.pretrain) pretrain.insert(join_words(s.response));
  for (const auto& s : c.conflict_test) {
    const Fact g = w.facts[std::size_t(s.fact_index)];
    bool found = false;
    for (const auto& cp : w.conflicts)
      if (cp.grounded == g) found = pretrain.count(join_words(verbalize(w, cp.pretrain))) > 0;
    EXPECT_TRUE(found);
  }
}

TEST(Corpus, Deterministic) {
  auto w = default_world();
  auto a = generate_corpus(w, {100, 10, 10, 3, 0.5}, 4);
  auto b = generate_corpus(w, {100, 10, 10, 3, 0.5}, 4);
  for (const auto& name : split_names()) {
    const auto& x = split_by_name(a, name);
    const auto& y = split_by_name(b, name);
    ASSERT_EQ(x.size(), y.size());
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(sample_to_json(x[i]), sample_to_json(y[i]));
  }
}

TEST(Corpus, InsufficientFacts) {
  auto w = generate_world(2, 24, 12, 10, 0);
  EXPECT_THROW(generate_corpus(w, {100, 10, 10, 3, 0.5}, 1), Error);
  EXPECT_THROW(generate_corpus(w, {0, 10, 10, 3, 0.5}, 1), Error);
}

TEST(Vocab, SpecialsFirstAndGazetteer) {
  auto w = default_world();
  auto v = Vocabulary::from_world(w);
  EXPECT_EQ(v.token(Vocabulary::kPad), "<pad>");
  EXPECT_EQ(v.token(Vocabulary::kBos), "<bos>");
  EXPECT_EQ(v.token(Vocabulary::kEos), "<eos>");
  EXPECT_EQ(v.token(Vocabulary::kUser), "<user>");
  EXPECT_EQ(v.token(Vocabulary::kBot), "<bot>");
  EXPECT_EQ(v.token(Vocabulary::kKnl), "<knl>");
  for (int i = 0; i <= Vocabulary::kUnk; ++i) EXPECT_FALSE(v.is_entity(i));
  EXPECT_EQ(v.entity_words().size(), w.entities.size());
  for (const auto& e : w.entities) EXPECT_TRUE(v.is_entity(e.name));
  EXPECT_FALSE(v.is_entity("won"));
  EXPECT_EQ(v.id("zzzz-missing"), Vocabulary::kUnk);
  auto back = Vocabulary::from_json(v.to_json());
  ASSERT_EQ(back.size(), v.size());
  for (int i = 0; i < v.size(); ++i) {
    EXPECT_EQ(back.token(i), v.token(i));
    EXPECT_EQ(back.is_entity(i), v.is_entity(i));
  }
}

TEST(Encode, LayoutMasksAndTypes) {
  auto w = cup_world();
  auto v = Vocabulary::from_world(w);
  std::mt19937_64 rng(0);
  auto s = render_sample(w.facts[0], kQuestionAnswer, w, rng);
  auto e = encode_sample(s, v, 64);
  // <knl> a w c <user> who won c <bot> a w c <eos>
  ASSERT_EQ(e.ids.size(), 13u);
  EXPECT_EQ(v.decode(e.ids),
            split_words("<knl> argentina won worldcup2022 <user> who won worldcup2022 <bot> "
                        "argentina won worldcup2022 <eos>"));
  EXPECT_EQ(e.prompt_len, 9u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(e.types[i], kKnowledgeType);
  for (std::size_t i = 4; i < 8; ++i) EXPECT_EQ(e.types[i], kUserType);
  for (std::size_t i = 8; i < 13; ++i) EXPECT_EQ(e.types[i], kBotType);
  std::vector<std::uint8_t> resp{0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1};
  std::vector<std::uint8_t> ent{0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 1, 0};
  EXPECT_EQ(e.response_mask, resp);
  EXPECT_EQ(e.entity_mask, ent);
  int n_ent = 0;
  for (auto m : e.entity_mask) n_ent += m;
  EXPECT_EQ(n_ent, 2);
}

TEST(Encode, EntityMaskSubsetAndGazetteerOverCorpus) {
  auto w = default_world();
  auto v = Vocabulary::from_world(w);
  auto c = generate_corpus(w, {200, 40, 60, 3, 0.5}, 9);
  for (const auto& name : split_names())
    for (const auto& s : split_by_name(c, name)) {
      auto e = encode_sample(s, v, 64);
      ASSERT_EQ(e.ids.size(), e.types.size());
      for (std::size_t i = 0; i < e.ids.size(); ++i) {
        if (e.entity_mask[i]) {
          EXPECT_TRUE(e.response_mask[i]);
          EXPECT_TRUE(v.is_entity(e.ids[i]));
        }
        EXPECT_NE(e.ids[i], Vocabulary::kUnk);
      }
      // round trip of the word part
      std::vector<std::string> resp;
      for (std::size_t i = e.prompt_len; i + 1 < e.ids.size(); ++i) resp.push_back(v.token(e.ids[i]));
      EXPECT_EQ(resp, s.response);
    }
}

TEST(Encode, StrictScopeRequiresKnowledge) {
  auto w = cup_world();
  auto v = Vocabulary::from_world(w);
  DialogueSample s;
  s.knowledge = split_words("argentina won worldcup2022");
  s.response = split_words("france won worldcup2022");
  s.entity_spans = {0, 2};
  auto loose = encode_sample(s, v, 32, EntityScope::response);
  auto strict = encode_sample(s, v, 32, EntityScope::response_and_knowledge);
  int nl = 0, ns = 0;
  for (auto m : loose.entity_mask) nl += m;
  for (auto m : strict.entity_mask) ns += m;
  EXPECT_EQ(nl, 2);
  EXPECT_EQ(ns, 1);
}

TEST(Encode, TruncationDropsOldestTurns) {
  auto w = default_world();
  auto v = Vocabulary::from_world(w);
  std::mt19937_64 rng(0);
  auto s = render_sample(w.facts[0], kMultiTurn, w, rng);
  auto full = encode_sample(s, v, 128);
  EXPECT_EQ(full.dropped_turns, 0u);
  const std::size_t first = 1 + s.context[0].tokens.size();
  auto cut = encode_sample(s, v, full.ids.size() - 1);
  EXPECT_EQ(cut.dropped_turns, 1u);
  EXPECT_EQ(cut.ids.size(), full.ids.size() - first);
  EXPECT_EQ(std::vector<int>(cut.ids.end() - long(s.response.size() + 1), cut.ids.end()),
            std::vector<int>(full.ids.end() - long(s.response.size() + 1), full.ids.end()));
  const std::size_t minimal = 1 + s.knowledge.size() + 1 + s.response.size() + 1;
  auto bare = encode_sample(s, v, minimal);
  EXPECT_EQ(bare.dropped_turns, s.context.size());
  EXPECT_EQ(bare.ids.size(), minimal);
  EXPECT_THROW(encode_sample(s, v, minimal - 1), Error);
}

TEST(Jsonl, RoundTripAndExternalLines) {
  auto w = default_world();
  auto c = generate_corpus(w, {30, 5, 5, 3, 0.5}, 2);
  auto path = (std::filesystem::temp_directory_path() / "fdl_corpus_test.jsonl").string();
  write_jsonl(path, c.train);
  auto back = read_jsonl(path);
  ASSERT_EQ(back.size(), c.train.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].knowledge, c.train[i].knowledge);
    EXPECT_EQ(back[i].response, c.train[i].response);
    EXPECT_EQ(back[i].entity_spans, c.train[i].entity_spans);
    EXPECT_EQ(back[i].grounded_object, c.train[i].grounded_object);
    ASSERT_EQ(back[i].context.size(), c.train[i].context.size());
  }
  std::remove(path.c_str());

  auto ext = sample_from_json(nlohmann::json::parse(
      R"({"knowledge": "Argentina won worldcup2022", "context": [{"speaker": "user", "text": "who won"}],
          "response": "argentina did win worldcup2022", "entities": ["argentina", "worldcup2022"]})"));
  EXPECT_EQ(ext.entity_spans, (std::vector<std::size_t>{0, 3}));
  EXPECT_EQ(ext.grounded_object, "argentina");
  EXPECT_THROW(sample_from_json(nlohmann::json::parse(
                   R"({"knowledge": "", "context": [{"speaker": "sys", "text": ""}], "response": "", "entities": []})")),
               Error);
  EXPECT_THROW(read_jsonl("/nonexistent/file.jsonl"), PreconditionError);
}

TEST(Vocab, FromSamplesUsesResponseEntities) {
  auto w = cup_world();
  std::mt19937_64 rng(0);
  std::vector<DialogueSample> samples{render_sample(w.facts[0], kQuestionAnswer, w, rng)};
  auto v = Vocabulary::from_samples(samples);
  EXPECT_TRUE(v.is_entity("argentina"));
  EXPECT_TRUE(v.is_entity("worldcup2022"));
  EXPECT_FALSE(v.is_entity("who"));
}
