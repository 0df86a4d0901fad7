#ifndef FDL_CORPUS_HPP
#define FDL_CORPUS_HPP

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "fdl/error.hpp"
#include "fdl/model.hpp"
#include "json.hpp"

namespace fdl {

// ---------------------------------------------------------------------------
// Fact world
// ---------------------------------------------------------------------------

enum EntityType : int { kPerson = 0, kPlace = 1, kTeam = 2, kEvent = 3 };
inline constexpr int kNumEntityTypes = 4;

struct Entity {
  std::string name;
  int type = 0;
};

/// A relation and its surface forms. Statement and question patterns use
/// the placeholders "{S}" and "{O}".
struct Relation {
  std::string name;
  int subject_type = 0;
  int object_type = 0;
  std::vector<std::string> statement;
  std::vector<std::string> question;  // asks for the object
  std::size_t negation_pos = 0;       // index in statement where "not" goes
};

struct Fact {
  int subject = 0;
  int relation = 0;
  int object = 0;
  auto operator<=>(const Fact&) const = default;
};

/// The model's prior (pretrain) and the grounding truth for one query;
/// same subject and relation, different object.
struct ConflictPair {
  Fact pretrain;
  Fact grounded;
};

struct World {
  std::vector<Entity> entities;
  std::vector<Relation> relations;
  std::vector<Fact> facts;  // the true, grounded facts
  std::vector<ConflictPair> conflicts;

  int find_entity(const std::string& name) const {
    for (std::size_t i = 0; i < entities.size(); ++i)
      if (entities[i].name == name) return static_cast<int>(i);
    return -1;
  }

  void validate() const {
    std::set<Fact> seen;
    auto check = [&](const Fact& f) {
      if (f.subject < 0 || f.object < 0 || f.relation < 0 ||
          f.subject >= int(entities.size()) || f.object >= int(entities.size()) ||
          f.relation >= int(relations.size()))
        throw Error("world: fact references an unregistered id");
      if (f.subject == f.object) throw Error("world: fact subject equals object");
    };
    for (const auto& f : facts) {
      check(f);
      if (!seen.insert(f).second) throw Error("world: duplicate fact");
    }
    for (const auto& c : conflicts) {
      check(c.pretrain);
      check(c.grounded);
      if (c.pretrain.subject != c.grounded.subject || c.pretrain.relation != c.grounded.relation ||
          c.pretrain.object == c.grounded.object)
        throw Error("world: conflict pair must differ only in object");
    }
  }
};

inline std::vector<Relation> relation_catalog() {
  auto r = [](std::string name, int s, int o, std::string stmt, std::string q, std::size_t neg) {
    auto split = [](const std::string& text) {
      std::vector<std::string> out;
      std::istringstream is(text);
      for (std::string w; is >> w;) out.push_back(w);
      return out;
    };
    return Relation{std::move(name), s, o, split(stmt), split(q), neg};
  };
  return {
      r("won", kEvent, kTeam, "{O} won {S}", "who won {S}", 1),
      r("born_in", kPerson, kPlace, "{S} was born in {O}", "where was {S} born", 1),
      r("coached_by", kTeam, kPerson, "{S} is coached by {O}", "who coaches {S}", 1),
      r("near", kPlace, kPlace, "{S} is near {O}", "what is near {S}", 1),
      r("held_in", kEvent, kPlace, "{S} was held in {O}", "where was {S} held", 1),
      r("plays_for", kPerson, kTeam, "{S} plays for {O}", "which team does {S} play for", 1),
      r("based_in", kTeam, kPlace, "{S} is based in {O}", "where is {S} based", 1),
      r("mayor", kPlace, kPerson, "the mayor of {S} is {O}", "who is the mayor of {S}", 4),
      r("organized_by", kEvent, kPerson, "{S} was organized by {O}", "who organized {S}", 1),
      r("attended", kPerson, kEvent, "{S} attended {O}", "which event did {S} attend", 1),
      r("rival_of", kTeam, kTeam, "{S} is the rival of {O}", "who is the rival of {S}", 1),
      r("home_of", kPlace, kTeam, "{S} is home to {O}", "which team is {S} home to", 1),
  };
}

namespace detail {

inline std::string make_name(std::mt19937_64& rng, int type) {
  static const char* onset[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
  static const char* vowel[] = {"a", "e", "i", "o", "u"};
  static const char* tail[] = {"", "n", "r", "s", "l"};
  static const char* suffix[] = {"", "ia", "ers", "cup"};  // person, place, team, event
  std::uniform_int_distribution<int> on(0, 13), vo(0, 4), ta(0, 4), syl(2, 3);
  std::string s;
  const int n = syl(rng);
  for (int i = 0; i < n; ++i) s += std::string(onset[on(rng)]) + vowel[vo(rng)];
  s += tail[ta(rng)];
  return s + suffix[type];
}

}  // namespace detail

/// Random world: entities spread evenly over the four types, the first
/// n_relations catalog relations, n_facts distinct (subject, relation)
/// facts and n_conflicts of those facts paired with a stale object.
inline World generate_world(std::uint64_t seed, int n_entities, int n_relations, int n_facts,
                            int n_conflicts, const std::set<std::string>& reserved = {}) {
  if (n_conflicts > n_facts) throw Error("generate_world: n_conflicts exceeds n_facts");
  auto catalog = relation_catalog();
  if (n_relations <= 0 || n_relations > int(catalog.size()))
    throw Error("generate_world: n_relations must be in [1," + std::to_string(catalog.size()) + "]");
  std::mt19937_64 rng(seed);
  World w;
  w.relations.assign(catalog.begin(), catalog.begin() + n_relations);
  std::set<std::string> used = reserved;
  for (int i = 0; i < n_entities; ++i) {
    const int type = i % kNumEntityTypes;
    std::string name;
    do name = detail::make_name(rng, type);
    while (used.count(name));
    used.insert(name);
    w.entities.push_back({name, type});
  }
  std::vector<std::vector<int>> by_type(kNumEntityTypes);
  for (std::size_t i = 0; i < w.entities.size(); ++i) by_type[w.entities[i].type].push_back(int(i));

  // every admissible (subject, relation) slot, then a random subset
  std::vector<std::pair<int, int>> slots;
  for (int r = 0; r < n_relations; ++r)
    for (int s : by_type[w.relations[r].subject_type]) {
      const auto& objs = by_type[w.relations[r].object_type];
      const bool has_object = std::any_of(objs.begin(), objs.end(), [&](int o) { return o != s; });
      if (has_object) slots.emplace_back(s, r);
    }
  if (int(slots.size()) < n_facts)
    throw Error("generate_world: only " + std::to_string(slots.size()) +
                " (subject, relation) slots for " + std::to_string(n_facts) + " facts");
  std::shuffle(slots.begin(), slots.end(), rng);
  slots.resize(n_facts);
  std::sort(slots.begin(), slots.end());
  for (auto [s, r] : slots) {
    std::vector<int> objs;
    for (int o : by_type[w.relations[r].object_type])
      if (o != s) objs.push_back(o);
    std::uniform_int_distribution<std::size_t> pick(0, objs.size() - 1);
    w.facts.push_back({s, r, objs[pick(rng)]});
  }

  std::vector<int> idx(w.facts.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);
  std::shuffle(idx.begin(), idx.end(), rng);
  for (int c = 0; c < n_conflicts; ++c) {
    const Fact g = w.facts[idx[c]];
    std::vector<int> alts;
    for (int o : by_type[w.relations[g.relation].object_type])
      if (o != g.subject && o != g.object) alts.push_back(o);
    if (alts.empty()) throw Error("generate_world: no alternative object for a conflict");
    std::uniform_int_distribution<std::size_t> pick(0, alts.size() - 1);
    Fact p = g;
    p.object = alts[pick(rng)];
    w.conflicts.push_back({p, g});
  }
  w.validate();
  return w;
}

// ---------------------------------------------------------------------------
// Dialogue samples and templates
// ---------------------------------------------------------------------------

enum class Speaker { user, bot };

struct Turn {
  Speaker speaker = Speaker::user;
  std::vector<std::string> tokens;
};

struct DialogueSample {
  std::vector<std::string> knowledge;
  std::vector<Turn> context;
  std::vector<std::string> response;
  std::vector<std::size_t> entity_spans;  // positions in response
  std::string grounded_object;            // surface token the response must express
  int fact_index = -1;                    // into World::facts, or conflict index for pretrain
  int template_id = -1;
};

enum TemplateId : int {
  kQuestionAnswer = 0,
  kStatementElaboration = 1,
  kParaphrase = 2,
  kMultiTurn = 3,
  kDistractorTurn = 4,
};
inline constexpr int kNumTemplates = 5;

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string s;
  for (std::size_t i = 0; i < words.size(); ++i) s += (i ? " " : "") + words[i];
  return s;
}

// Words the templates use besides relation patterns and entity names.
inline std::vector<std::string> template_words() {
  return split_words(
      "tell me something about i heard that hello hi what would you like to know good "
      "everyone knows not");
}

inline std::vector<std::string> fill_pattern(const std::vector<std::string>& pattern,
                                             const World& w, const Fact& f) {
  std::vector<std::string> out;
  for (const auto& tok : pattern) {
    if (tok == "{S}") out.push_back(w.entities[f.subject].name);
    else if (tok == "{O}") out.push_back(w.entities[f.object].name);
    else out.push_back(tok);
  }
  return out;
}

inline std::vector<std::string> verbalize(const World& w, const Fact& f) {
  return fill_pattern(w.relations[f.relation].statement, w, f);
}

inline std::vector<std::size_t> entity_positions(const std::vector<std::string>& tokens,
                                                 const World& w, const Fact& f) {
  std::vector<std::size_t> pos;
  const auto& s = w.entities[f.subject].name;
  const auto& o = w.entities[f.object].name;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] == s || tokens[i] == o) pos.push_back(i);
  return pos;
}

inline int fact_index_of(const World& w, const Fact& f) {
  for (std::size_t i = 0; i < w.facts.size(); ++i)
    if (w.facts[i] == f) return int(i);
  return -1;
}

/// Renders one grounded exchange for `fact` with the given template.
///
/// Knowledge is the fact's statement; the response restates it, so it
/// contains the subject and object tokens, which are exactly the entity
/// spans.
inline DialogueSample render_sample(const Fact& fact, int template_id, const World& w,
                                    std::mt19937_64& rng) {
  if (template_id < 0 || template_id >= kNumTemplates)
    throw Error("render_sample: unknown template " + std::to_string(template_id));
  const auto& rel = w.relations[fact.relation];
  const auto stmt = verbalize(w, fact);
  const auto question = fill_pattern(rel.question, w, fact);
  const auto& subj = w.entities[fact.subject].name;

  DialogueSample s;
  s.knowledge = stmt;
  s.grounded_object = w.entities[fact.object].name;
  s.fact_index = fact_index_of(w, fact);
  s.template_id = template_id;
  s.response = stmt;
  switch (template_id) {
    case kQuestionAnswer:
      s.context = {{Speaker::user, question}};
      break;
    case kStatementElaboration:
      s.context = {{Speaker::user, split_words("tell me something about " + subj)}};
      break;
    case kParaphrase: {
      s.context = {{Speaker::user, question}};
      std::vector<std::string> y = split_words("i heard that");
      y.insert(y.end(), stmt.begin(), stmt.end());
      s.response = y;
      break;
    }
    case kMultiTurn:
      s.context = {{Speaker::user, split_words("hello")},
                   {Speaker::bot, split_words("hi what would you like to know")},
                   {Speaker::user, question}};
      break;
    case kDistractorTurn: {
      std::vector<Fact> pool;
      for (const auto& f : w.facts) {
        const bool disjoint = f.subject != fact.subject && f.subject != fact.object &&
                              f.object != fact.subject && f.object != fact.object;
        if (disjoint) pool.push_back(f);
      }
      if (pool.empty()) throw Error("render_sample: no unrelated fact for a distractor turn");
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      s.context = {{Speaker::user, verbalize(w, pool[pick(rng)])},
                   {Speaker::bot, split_words("good to know")},
                   {Speaker::user, question}};
      break;
    }
  }
  s.entity_spans = entity_positions(s.response, w, fact);
  return s;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct CorpusCounts {
  int train = 300;
  int valid = 40;
  int test = 60;
  int pretrain_variants = 3;          // statement phrasings per stale fact
  double rl_conflict_fraction = 0.5;  // conflict pairs reserved for RL prompts
};

struct Corpus {
  std::vector<DialogueSample> pretrain;
  std::vector<DialogueSample> train;
  std::vector<DialogueSample> valid;
  std::vector<DialogueSample> test;
  std::vector<DialogueSample> conflict_test;
  std::vector<DialogueSample> rl_prompts;  // conflict queries held apart from conflict_test
};

inline const std::vector<std::string>& split_names() {
  static const std::vector<std::string> names{"pretrain", "train", "valid", "test",
                                              "conflict_test", "rl_prompts"};
  return names;
}

inline std::vector<DialogueSample>& split_by_name(Corpus& c, const std::string& name) {
  if (name == "pretrain") return c.pretrain;
  if (name == "train") return c.train;
  if (name == "valid") return c.valid;
  if (name == "test") return c.test;
  if (name == "conflict_test") return c.conflict_test;
  if (name == "rl_prompts") return c.rl_prompts;
  throw Error("unknown split '" + name + "'");
}

inline const std::vector<DialogueSample>& split_by_name(const Corpus& c, const std::string& name) {
  return split_by_name(const_cast<Corpus&>(c), name);
}

/// Plain statement of a stale fact, without knowledge or context.
inline DialogueSample pretrain_statement(const World& w, const Fact& stale, int variant,
                                         int conflict_index) {
  static const char* prefixes[] = {"", "i heard that", "everyone knows"};
  auto y = split_words(prefixes[variant % 3]);
  auto stmt = verbalize(w, stale);
  y.insert(y.end(), stmt.begin(), stmt.end());
  DialogueSample s;
  s.response = y;
  s.entity_spans = entity_positions(y, w, stale);
  s.grounded_object = w.entities[stale.object].name;
  s.fact_index = conflict_index;
  s.template_id = 100 + variant;
  return s;
}

/// Splits the world into training and evaluation sets.
///
/// Non-conflicting facts feed train/valid/test, disjoint by (fact,
/// template). Conflict pairs feed pretrain (stale statements) and, grounded
/// on the new object, conflict_test and rl_prompts.
inline Corpus generate_corpus(const World& w, const CorpusCounts& counts, std::uint64_t seed) {
  if (counts.train <= 0 || counts.valid < 0 || counts.test < 0 || counts.pretrain_variants <= 0)
    throw Error("generate_corpus: counts must be positive");
  std::mt19937_64 rng(seed);
  Corpus c;
  std::set<int> conflict_facts;
  for (const auto& cp : w.conflicts) conflict_facts.insert(fact_index_of(w, cp.grounded));

  std::vector<std::pair<int, int>> pairs;  // (fact, template)
  for (std::size_t f = 0; f < w.facts.size(); ++f)
    if (!conflict_facts.count(int(f)))
      for (int t = 0; t < kNumTemplates; ++t) pairs.emplace_back(int(f), t);
  const std::size_t need = std::size_t(counts.train + counts.valid + counts.test);
  if (pairs.size() < need)
    throw Error("generate_corpus: " + std::to_string(pairs.size()) +
                " (fact, template) pairs available, " + std::to_string(need) + " requested");
  std::shuffle(pairs.begin(), pairs.end(), rng);
  std::size_t k = 0;
  for (auto* split : {&c.train, &c.valid, &c.test}) {
    const int n = split == &c.train ? counts.train : split == &c.valid ? counts.valid : counts.test;
    for (int i = 0; i < n; ++i, ++k)
      split->push_back(render_sample(w.facts[pairs[k].first], pairs[k].second, w, rng));
  }

  for (std::size_t i = 0; i < w.conflicts.size(); ++i)
    for (int v = 0; v < counts.pretrain_variants; ++v)
      c.pretrain.push_back(pretrain_statement(w, w.conflicts[i].pretrain, v, int(i)));

  std::vector<std::size_t> order(w.conflicts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_rl = static_cast<std::size_t>(std::lround(counts.rl_conflict_fraction * order.size()));
  std::vector<std::size_t> rl(order.begin(), order.begin() + std::min(n_rl, order.size()));
  std::vector<std::size_t> held(order.begin() + std::min(n_rl, order.size()), order.end());
  std::sort(rl.begin(), rl.end());
  std::sort(held.begin(), held.end());
  for (std::size_t i : held)
    for (int t = 0; t < kNumTemplates; ++t)
      c.conflict_test.push_back(render_sample(w.conflicts[i].grounded, t, w, rng));
  for (std::size_t i : rl)
    for (int t = 0; t < kNumTemplates; ++t)
      c.rl_prompts.push_back(render_sample(w.conflicts[i].grounded, t, w, rng));
  return c;
}

// ---------------------------------------------------------------------------
// Vocabulary and encoding
// ---------------------------------------------------------------------------

/// Closed word-level vocabulary. Special ids are fixed and precede all words.
class Vocabulary {
 public:
  static constexpr int kPad = 0, kBos = 1, kEos = 2, kUser = 3, kBot = 4, kKnl = 5, kSep = 6,
                       kUnk = 7;

  Vocabulary() {
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<user>", "<bot>", "<knl>", "<sep>", "<unk>"})
      add(s);
  }

  int add(const std::string& word) {
    auto it = index_.find(word);
    if (it != index_.end()) return it->second;
    const int id = int(tokens_.size());
    tokens_.push_back(word);
    index_.emplace(word, id);
    entity_.push_back(false);
    return id;
  }

  int add_entity(const std::string& word) {
    const int id = add(word);
    entity_[std::size_t(id)] = true;
    return id;
  }

  int id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  const std::string& token(int id) const { return tokens_.at(std::size_t(id)); }
  int size() const { return int(tokens_.size()); }
  bool is_entity(int id) const { return id >= 0 && id < size() && entity_[std::size_t(id)]; }
  bool is_entity(const std::string& w) const { return contains(w) && is_entity(id(w)); }
  static bool is_special(int id) { return id >= 0 && id <= kUnk; }

  std::vector<int> encode(const std::vector<std::string>& words) const {
    std::vector<int> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }

  std::vector<std::string> decode(std::span<const int> ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
  }

  std::vector<std::string> entity_words() const {
    std::vector<std::string> out;
    for (int i = 0; i < size(); ++i)
      if (entity_[std::size_t(i)]) out.push_back(tokens_[std::size_t(i)]);
    return out;
  }

  static Vocabulary from_world(const World& w) {
    Vocabulary v;
    for (const auto& t : template_words()) v.add(t);
    for (const auto& r : w.relations) {
      for (const auto& t : r.statement)
        if (t != "{S}" && t != "{O}") v.add(t);
      for (const auto& t : r.question)
        if (t != "{S}" && t != "{O}") v.add(t);
    }
    for (const auto& e : w.entities) v.add_entity(e.name);
    return v;
  }

  /// Builds a vocabulary from samples; response entity spans form the gazetteer.
  static Vocabulary from_samples(const std::vector<DialogueSample>& samples) {
    Vocabulary v;
    std::set<std::string> ents;
    for (const auto& s : samples)
      for (auto p : s.entity_spans) ents.insert(s.response.at(p));
    std::set<std::string> words;
    for (const auto& s : samples) {
      words.insert(s.knowledge.begin(), s.knowledge.end());
      words.insert(s.response.begin(), s.response.end());
      for (const auto& t : s.context) words.insert(t.tokens.begin(), t.tokens.end());
    }
    for (const auto& w : words)
      if (!ents.count(w)) v.add(w);
    for (const auto& e : ents) v.add_entity(e);
    return v;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["tokens"] = tokens_;
    std::vector<int> ents;
    for (int i = 0; i < size(); ++i)
      if (entity_[std::size_t(i)]) ents.push_back(i);
    j["entities"] = ents;
    return j;
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    Vocabulary v;
    const auto toks = j.at("tokens").get<std::vector<std::string>>();
    for (std::size_t i = 0; i < toks.size(); ++i) {
      if (i < std::size_t(v.size())) {
        if (toks[i] != v.token(int(i))) throw Error("vocabulary: special tokens do not match");
        continue;
      }
      v.add(toks[i]);
    }
    for (int e : j.at("entities").get<std::vector<int>>()) v.entity_.at(std::size_t(e)) = true;
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::vector<bool> entity_;
};

enum class EntityScope {
  response,           // gazetteer tokens in the response
  response_and_knowledge,  // ... that also occur in the knowledge
};

struct EncodedSample {
  std::vector<int> ids;
  std::vector<int> types;
  std::vector<std::uint8_t> response_mask;  // response tokens and the closing <eos>
  std::vector<std::uint8_t> entity_mask;    // subset of response_mask
  std::size_t prompt_len = 0;               // ids[0, prompt_len) is the model input prompt
  std::size_t dropped_turns = 0;
};

/// Layout: <knl> K, then each context turn as <user>/<bot> + text, then
/// <bot> Y <eos>. Oldest turns are dropped first when over max_len;
/// knowledge and response are never truncated.
inline EncodedSample encode_sample(const DialogueSample& s, const Vocabulary& vocab,
                                   std::size_t max_len,
                                   EntityScope scope = EntityScope::response) {
  const std::size_t fixed = 1 + s.knowledge.size() + 1 + s.response.size() + 1;
  if (fixed > max_len)
    throw Error("encode_sample: knowledge and response need " + std::to_string(fixed) +
                " tokens, max_len is " + std::to_string(max_len));
  std::size_t first_turn = 0;
  std::size_t total = fixed;
  for (const auto& t : s.context) total += 1 + t.tokens.size();
  while (total > max_len) {
    total -= 1 + s.context[first_turn].tokens.size();
    ++first_turn;
  }

  EncodedSample e;
  e.dropped_turns = first_turn;
  auto push = [&](int id, int type, bool resp, bool ent) {
    e.ids.push_back(id);
    e.types.push_back(type);
    e.response_mask.push_back(resp);
    e.entity_mask.push_back(ent);
  };
  push(Vocabulary::kKnl, kKnowledgeType, false, false);
  for (const auto& w : s.knowledge) push(vocab.id(w), kKnowledgeType, false, false);
  for (std::size_t t = first_turn; t < s.context.size(); ++t) {
    const auto& turn = s.context[t];
    const bool user = turn.speaker == Speaker::user;
    const int type = user ? kUserType : kBotType;
    push(user ? Vocabulary::kUser : Vocabulary::kBot, type, false, false);
    for (const auto& w : turn.tokens) push(vocab.id(w), type, false, false);
  }
  push(Vocabulary::kBot, kBotType, false, false);
  e.prompt_len = e.ids.size();
  std::set<std::size_t> spans(s.entity_spans.begin(), s.entity_spans.end());
  std::set<std::string> know(s.knowledge.begin(), s.knowledge.end());
  for (std::size_t i = 0; i < s.response.size(); ++i) {
    const int id = vocab.id(s.response[i]);
    bool ent = spans.count(i) && vocab.is_entity(id);
    if (ent && scope == EntityScope::response_and_knowledge) ent = know.count(s.response[i]) > 0;
    push(id, kBotType, true, ent);
  }
  push(Vocabulary::kEos, kBotType, true, false);
  return e;
}

/// The prompt part of an encoding (through the final <bot> tag).
struct Prompt {
  std::vector<int> ids;
  std::vector<int> types;
};

inline Prompt prompt_of(const EncodedSample& e) {
  return {std::vector<int>(e.ids.begin(), e.ids.begin() + long(e.prompt_len)),
          std::vector<int>(e.types.begin(), e.types.begin() + long(e.prompt_len))};
}

// ---------------------------------------------------------------------------
// JSON lines
// ---------------------------------------------------------------------------

inline nlohmann::json sample_to_json(const DialogueSample& s) {
  nlohmann::json j;
  j["knowledge"] = join_words(s.knowledge);
  j["context"] = nlohmann::json::array();
  for (const auto& t : s.context)
    j["context"].push_back(
        {{"speaker", t.speaker == Speaker::user ? "user" : "bot"}, {"text", join_words(t.tokens)}});
  j["response"] = join_words(s.response);
  std::vector<std::string> ents;
  for (auto p : s.entity_spans) ents.push_back(s.response[p]);
  j["entities"] = ents;
  if (!s.grounded_object.empty()) j["grounded_object"] = s.grounded_object;
  if (s.fact_index >= 0) j["fact_index"] = s.fact_index;
  if (s.template_id >= 0) j["template_id"] = s.template_id;
  return j;
}

inline std::string lowercase(std::string s) {
  for (auto& ch : s) ch = char(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

/// Parses one corpus line. Entity spans are recomputed as the response
/// positions whose token is listed in "entities".
inline DialogueSample sample_from_json(const nlohmann::json& j) {
  DialogueSample s;
  s.knowledge = split_words(lowercase(j.at("knowledge").get<std::string>()));
  for (const auto& t : j.at("context")) {
    const auto sp = t.at("speaker").get<std::string>();
    if (sp != "user" && sp != "bot") throw Error("corpus: speaker must be user or bot");
    s.context.push_back({sp == "user" ? Speaker::user : Speaker::bot,
                         split_words(lowercase(t.at("text").get<std::string>()))});
  }
  s.response = split_words(lowercase(j.at("response").get<std::string>()));
  std::set<std::string> ents;
  for (const auto& e : j.at("entities")) ents.insert(lowercase(e.get<std::string>()));
  for (std::size_t i = 0; i < s.response.size(); ++i)
    if (ents.count(s.response[i])) s.entity_spans.push_back(i);
  if (j.contains("grounded_object")) {
    s.grounded_object = lowercase(j.at("grounded_object").get<std::string>());
  } else {
    // first response entity that the knowledge states
    std::set<std::string> know(s.knowledge.begin(), s.knowledge.end());
    for (auto p : s.entity_spans)
      if (know.count(s.response[p])) {
        s.grounded_object = s.response[p];
        break;
      }
  }
  s.fact_index = j.value("fact_index", -1);
  s.template_id = j.value("template_id", -1);
  return s;
}

inline void write_jsonl(const std::string& path, const std::vector<DialogueSample>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  for (const auto& s : samples) os << sample_to_json(s).dump() << '\n';
}

inline std::vector<DialogueSample> read_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw PreconditionError("cannot read " + path);
  std::vector<DialogueSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& ex) {
      throw Error(path + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

inline nlohmann::json world_to_json(const World& w) {
  nlohmann::json j;
  for (const auto& e : w.entities) j["entities"].push_back({{"name", e.name}, {"type", e.type}});
  for (const auto& r : w.relations)
    j["relations"].push_back({{"name", r.name},
                              {"subject_type", r.subject_type},
                              {"object_type", r.object_type},
                              {"statement", join_words(r.statement)},
                              {"question", join_words(r.question)},
                              {"negation_pos", r.negation_pos}});
  auto fact = [](const Fact& f) { return nlohmann::json::array({f.subject, f.relation, f.object}); };
  j["facts"] = nlohmann::json::array();
  for (const auto& f : w.facts) j["facts"].push_back(fact(f));
  j["conflicts"] = nlohmann::json::array();
  for (const auto& c : w.conflicts) j["conflicts"].push_back({fact(c.pretrain), fact(c.grounded)});
  return j;
}

inline World world_from_json(const nlohmann::json& j) {
  World w;
  for (const auto& e : j.at("entities")) w.entities.push_back({e.at("name"), e.at("type")});
  for (const auto& r : j.at("relations"))
    w.relations.push_back({r.at("name"), r.at("subject_type"), r.at("object_type"),
                           split_words(r.at("statement")), split_words(r.at("question")),
                           r.at("negation_pos")});
  auto fact = [](const nlohmann::json& a) { return Fact{a.at(0), a.at(1), a.at(2)}; };
  for (const auto& f : j.at("facts")) w.facts.push_back(fact(f));
  for (const auto& c : j.at("conflicts")) w.conflicts.push_back({fact(c.at(0)), fact(c.at(1))});
  w.validate();
  return w;
}

}  // namespace fdl

#endif  // FDL_CORPUS_HPP
