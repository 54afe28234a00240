#include "semsteer/lang.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "semsteer/rng.hpp"

namespace semsteer {

namespace {

#include "grammar_asset.inc"

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

enum class Category { Verb, Color, Shape, Zone, Negation };

struct LexEntry {
  std::vector<std::string> words;
  Category category;
  int value;
  bool description = false;
};

std::vector<LexEntry> build_lexicon(const Grammar& g) {
  std::vector<LexEntry> lex;
  for (const auto& v : g.verbs) lex.push_back({split_words(v), Category::Verb, 0});
  for (int c = 0; c < kNumColors; ++c) {
    for (const auto& w : g.colors[c]) lex.push_back({split_words(w), Category::Color, c});
  }
  for (int s = 0; s < kNumShapes; ++s) {
    for (const auto& w : g.shapes[s]) lex.push_back({split_words(w), Category::Shape, s});
    lex.push_back({split_words(g.descriptions[s]), Category::Shape, s, true});
  }
  for (int d = 0; d < kNumDestinations; ++d) {
    for (const auto& w : g.zones[d].nouns) lex.push_back({split_words(w), Category::Zone, d});
  }
  for (const auto& w : g.negation_markers) lex.push_back({split_words(w), Category::Negation, 0});
  return lex;
}

struct Match {
  std::size_t start = 0;
  std::size_t length = 0;
  Category category = Category::Verb;
  int value = 0;
  bool description = false;
};

// Longest-match scan; words outside the lexicon are filler.
std::vector<Match> scan(const std::vector<std::string>& words, const std::vector<LexEntry>& lex) {
  std::vector<Match> out;
  std::size_t i = 0;
  while (i < words.size()) {
    const LexEntry* best = nullptr;
    for (const auto& e : lex) {
      if (e.words.empty() || i + e.words.size() > words.size()) continue;
      if (best != nullptr && e.words.size() <= best->words.size()) continue;
      if (std::equal(e.words.begin(), e.words.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) best = &e;
    }
    if (best == nullptr) {
      ++i;
      continue;
    }
    out.push_back({i, best->words.size(), best->category, best->value, best->description});
    i += best->words.size();
  }
  return out;
}

struct Mention {
  std::size_t color_match = 0;  // index into matches
  std::size_t shape_match = 0;
  Color color = Color::Red;
  Shape shape = Shape::Cube;
  bool negated = false;
};

struct Analysis {
  std::vector<Match> matches;
  std::vector<Mention> mentions;
  std::vector<Destination> zones;
  int verbs = 0;
  std::optional<std::string> error;
};

Analysis analyze(const std::vector<std::string>& words, const Grammar& g) {
  Analysis a;
  a.matches = scan(words, build_lexicon(g));
  bool pending_negation = false;
  for (std::size_t i = 0; i < a.matches.size(); ++i) {
    const Match& m = a.matches[i];
    switch (m.category) {
      case Category::Verb: ++a.verbs; break;
      case Category::Zone: a.zones.push_back(static_cast<Destination>(m.value)); break;
      case Category::Negation: pending_negation = true; break;
      case Category::Color: {
        const bool adjacent = i + 1 < a.matches.size() && a.matches[i + 1].category == Category::Shape &&
                              a.matches[i + 1].start == m.start + m.length;
        if (!adjacent) {
          a.error = "color word without an object noun";
          return a;
        }
        a.mentions.push_back({i, i + 1, static_cast<Color>(m.value),
                              static_cast<Shape>(a.matches[i + 1].value), pending_negation});
        pending_negation = false;
        ++i;
        break;
      }
      case Category::Shape: a.error = "object noun without a color"; return a;
    }
  }
  return a;
}

}  // namespace

std::string normalize_text(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) words.push_back(w == kMaskWord ? w : lower(w));
  return join_words(words);
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grammar
// ---------------------------------------------------------------------------

Grammar Grammar::from_json(const nlohmann::json& j) {
  Grammar g;
  g.version = j.at("version").get<int>();
  if (g.version != 1) throw std::invalid_argument("grammar: unsupported version " + std::to_string(g.version));
  g.verbs = j.at("verbs").at("put").get<std::vector<std::string>>();
  for (int c = 0; c < kNumColors; ++c) {
    g.colors[c] = j.at("colors").at(std::string(to_string(static_cast<Color>(c)))).get<std::vector<std::string>>();
  }
  for (int s = 0; s < kNumShapes; ++s) {
    const std::string key(to_string(static_cast<Shape>(s)));
    g.shapes[s] = j.at("shapes").at(key).get<std::vector<std::string>>();
    g.descriptions[s] = j.at("descriptions").at(key).get<std::string>();
  }
  for (int d = 0; d < kNumDestinations; ++d) {
    const auto& z = j.at("zones").at(std::string(to_string(static_cast<Destination>(d))));
    g.zones[d].nouns = z.at("nouns").get<std::vector<std::string>>();
    g.zones[d].preps = z.at("preps").get<std::vector<std::string>>();
  }
  g.canonical_templates = j.at("canonical_templates").get<std::vector<std::string>>();
  g.paraphrase_templates = j.at("paraphrase_templates").get<std::vector<std::string>>();
  g.distractions = j.at("distractions").get<std::vector<std::string>>();
  g.reasoning_templates = j.at("reasoning_templates").get<std::vector<std::string>>();
  g.negation_templates = j.at("negation_templates").get<std::vector<std::string>>();
  g.negation_markers = j.at("negation_markers").get<std::vector<std::string>>();
  g.simple_phrase = j.at("simple_phrase").get<std::string>();
  g.validate();
  return g;
}

Grammar Grammar::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open grammar file '" + path + "'");
  return from_json(nlohmann::json::parse(in));
}

const Grammar& Grammar::builtin() {
  static const Grammar g = from_json(nlohmann::json::parse(kGrammarAsset));
  return g;
}

std::vector<std::string> Grammar::vocabulary_words() const {
  std::set<std::string> words;
  auto add_text = [&](const std::string& text) {
    for (auto& w : split_words(text)) {
      if (w.front() == '{') continue;
      words.insert(w);
    }
  };
  auto add_all = [&](const std::vector<std::string>& v) {
    for (const auto& t : v) add_text(t);
  };
  add_all(verbs);
  for (const auto& c : colors) add_all(c);
  for (const auto& s : shapes) add_all(s);
  for (const auto& z : zones) {
    add_all(z.nouns);
    add_all(z.preps);
  }
  add_all(canonical_templates);
  add_all(paraphrase_templates);
  add_all(distractions);
  for (const auto& d : descriptions) add_text(d);
  add_all(reasoning_templates);
  add_all(negation_templates);
  add_all(negation_markers);
  add_text(simple_phrase);
  // Templates render zones as "<prep> the <noun>".
  words.insert("the");
  return {words.begin(), words.end()};
}

void Grammar::validate() const {
  if (verbs.empty() || canonical_templates.empty() || paraphrase_templates.empty()) {
    throw std::invalid_argument("grammar: verbs and templates must be non-empty");
  }
  std::map<std::string, std::string> owner;
  auto claim = [&](const std::string& phrase, const std::string& value) {
    const std::string key = normalize_text(phrase);
    auto [it, inserted] = owner.emplace(key, value);
    if (!inserted && it->second != value) {
      throw std::invalid_argument("grammar: phrase '" + key + "' maps to both " + it->second + " and " + value);
    }
  };
  for (const auto& v : verbs) claim(v, "verb:put");
  for (int c = 0; c < kNumColors; ++c) {
    if (colors[c].empty()) throw std::invalid_argument("grammar: empty color set");
    for (const auto& w : colors[c]) claim(w, "color:" + std::string(to_string(static_cast<Color>(c))));
  }
  for (int s = 0; s < kNumShapes; ++s) {
    if (shapes[s].empty()) throw std::invalid_argument("grammar: empty shape set");
    for (const auto& w : shapes[s]) claim(w, "shape:" + std::string(to_string(static_cast<Shape>(s))));
    claim(descriptions[s], "shape:" + std::string(to_string(static_cast<Shape>(s))));
  }
  for (int d = 0; d < kNumDestinations; ++d) {
    if (zones[d].nouns.empty() || zones[d].preps.empty()) throw std::invalid_argument("grammar: empty zone set");
    for (const auto& w : zones[d].nouns) {
      claim(w, "zone:" + std::string(to_string(static_cast<Destination>(d))));
    }
  }
  for (const auto& w : split_words(simple_phrase)) {
    if (owner.count(w)) throw std::invalid_argument("grammar: simple phrase uses lexicon word '" + w + "'");
  }
}

// ---------------------------------------------------------------------------
// Parse / render
// ---------------------------------------------------------------------------

ParseResult parse(const Instruction& l, const Grammar& g) {
  const auto words = l.words();
  if (words.empty()) return Unparseable{"empty instruction"};
  const auto vocab = g.vocabulary_words();
  for (const auto& w : words) {
    if (!std::binary_search(vocab.begin(), vocab.end(), w)) return Unparseable{"word outside grammar: '" + w + "'"};
  }
  const Analysis a = analyze(words, g);
  if (a.error) return Unparseable{*a.error};
  if (a.verbs == 0) return Unparseable{"no verb"};

  std::optional<std::pair<Color, Shape>> object;
  for (const auto& m : a.mentions) {
    if (m.negated) continue;
    if (object && (object->first != m.color || object->second != m.shape)) {
      return Unparseable{"more than one target object"};
    }
    object = std::make_pair(m.color, m.shape);
  }
  if (!object) return Unparseable{"no target object"};
  if (a.zones.empty()) return Unparseable{"no destination"};
  for (auto d : a.zones) {
    if (d != a.zones.front()) return Unparseable{"more than one destination"};
  }
  Intent z;
  z.color = object->first;
  z.shape = object->second;
  z.destination = a.zones.front();
  return z;
}

namespace {

std::string render_full(const std::string& tmpl, const Intent& z, const RenderChoice& ch, const Grammar& g,
                        const std::string* object_override = nullptr, const std::string* negated = nullptr) {
  const auto& zone = g.zones[static_cast<int>(z.destination)];
  const std::string object = object_override != nullptr
                                 ? *object_override
                                 : g.colors[static_cast<int>(z.color)].at(ch.color) + " " +
                                       g.shapes[static_cast<int>(z.shape)].at(ch.shape);
  const std::string noun = zone.nouns.at(ch.zone_noun);
  std::string out = tmpl;
  out = replace_all(out, "{verb}", g.verbs.at(ch.verb));
  out = replace_all(out, "{object}", object);
  out = replace_all(out, "{zone_np}", "the " + noun);
  out = replace_all(out, "{zone}", zone.preps.at(ch.zone_prep) + " the " + noun);
  if (negated != nullptr) out = replace_all(out, "{negated}", *negated);
  return out;
}

RenderChoice random_choice(const Intent& z, const Grammar& g, Rng& rng) {
  RenderChoice ch;
  ch.verb = static_cast<int>(rng.below(g.verbs.size()));
  ch.color = static_cast<int>(rng.below(g.colors[static_cast<int>(z.color)].size()));
  ch.shape = static_cast<int>(rng.below(g.shapes[static_cast<int>(z.shape)].size()));
  const auto& zone = g.zones[static_cast<int>(z.destination)];
  ch.zone_noun = static_cast<int>(rng.below(zone.nouns.size()));
  ch.zone_prep = static_cast<int>(rng.below(zone.preps.size()));
  return ch;
}

Intent require_intent(const Instruction& l, const Grammar& g, std::string_view what) {
  const auto r = parse(l, g);
  if (const auto* u = std::get_if<Unparseable>(&r)) {
    throw PerturbationError(std::string(what) + " needs a parseable instruction; '" + l.text +
                            "' is not (" + u->reason + ")");
  }
  return std::get<Intent>(r);
}

}  // namespace

Instruction render(const std::string& tmpl, const Intent& z, const RenderChoice& choice, const Grammar& g) {
  return Instruction(render_full(tmpl, z, choice, g));
}

Instruction realize(const Intent& z, std::uint64_t seed, const Grammar& g) {
  Rng rng(seed);
  const auto& tmpl = rng.pick(g.canonical_templates);
  return render(tmpl, z, RenderChoice{}, g);
}

Neighborhood neighborhood(const Intent& z, int k, std::uint64_t seed, const Grammar& g) {
  if (k < 1) throw std::invalid_argument("neighborhood: K must be >= 1");
  Rng rng(seed);
  Neighborhood nb;
  std::set<std::string> seen;
  const int max_attempts = 32 * k;
  for (int attempt = 0; attempt < max_attempts && static_cast<int>(nb.instructions.size()) < k; ++attempt) {
    const auto& tmpl = rng.pick(g.paraphrase_templates);
    Instruction l = render(tmpl, z, random_choice(z, g, rng), g);
    if (seen.insert(l.text).second) nb.instructions.push_back(std::move(l));
  }
  if (static_cast<int>(nb.instructions.size()) < k) {
    nb.repeated = true;
    const std::size_t distinct = nb.instructions.size();
    for (std::size_t i = 0; static_cast<int>(nb.instructions.size()) < k; ++i) {
      nb.instructions.push_back(nb.instructions[i % distinct]);
    }
  }
  return nb;
}

// ---------------------------------------------------------------------------
// Perturbations
// ---------------------------------------------------------------------------

std::string PerturbationSpec::name() const {
  switch (kind) {
    case Kind::Origin: return "origin";
    case Kind::Blank: return "blank";
    case Kind::Simple: return "simple";
    case Kind::Multi: return "multi";
    case Kind::Rand: return "rand";
    case Kind::Mask: {
      const int tenths = static_cast<int>(std::lround(mask_rate * 10.0));
      if (std::abs(mask_rate * 10.0 - tenths) < 1e-12) return "m" + std::to_string(tenths);
      std::ostringstream os;
      os << "mask" << mask_rate;
      return os.str();
    }
    case Kind::R0: return "r0";
    case Kind::R1: return "r1";
    case Kind::R2: return "r2";
    case Kind::R3: return "r3";
    case Kind::R4: return "r4";
  }
  return "?";
}

PerturbationSpec PerturbationSpec::from_name(std::string_view name) {
  using K = Kind;
  static const std::map<std::string, PerturbationSpec, std::less<>> table{
      {"origin", {K::Origin, 0.0}}, {"multi", {K::Multi, 0.0}}, {"blank", {K::Blank, 0.0}},
      {"rand", {K::Rand, 0.0}},     {"m2", {K::Mask, 0.2}},     {"m4", {K::Mask, 0.4}},
      {"m6", {K::Mask, 0.6}},       {"m8", {K::Mask, 0.8}},     {"simple", {K::Simple, 0.0}},
      {"r0", {K::R0, 0.0}},         {"r1", {K::R1, 0.0}},       {"r2", {K::R2, 0.0}},
      {"r3", {K::R3, 0.0}},         {"r4", {K::R4, 0.0}}};
  const auto it = table.find(name);
  if (it == table.end()) throw std::invalid_argument("unknown perturbation variant '" + std::string(name) + "'");
  return it->second;
}

void PerturbationSpec::validate() const {
  if (kind == Kind::Mask && !(mask_rate >= 0.0 && mask_rate <= 1.0)) {
    throw std::invalid_argument("mask rate must lie in [0, 1]");
  }
}

std::vector<PerturbationSpec> default_suite() {
  std::vector<PerturbationSpec> out;
  for (auto n : {"origin", "multi", "blank", "rand", "m2", "m4", "m6", "m8", "simple"}) {
    out.push_back(PerturbationSpec::from_name(n));
  }
  return out;
}

std::vector<PerturbationSpec> rewrite_suite() {
  std::vector<PerturbationSpec> out;
  for (auto n : {"r0", "r1", "r2", "r3", "r4"}) out.push_back(PerturbationSpec::from_name(n));
  return out;
}

Instruction perturb(const Instruction& l, const PerturbationSpec& spec, std::uint64_t seed, const Grammar& g) {
  spec.validate();
  using K = PerturbationSpec::Kind;
  Rng rng(seed);
  switch (spec.kind) {
    case K::Origin: return l;
    case K::Blank: return Instruction("");
    case K::Simple: return Instruction(g.simple_phrase);
    case K::Multi: {
      const Intent z = require_intent(l, g, "multi");
      const auto nb = neighborhood(z, kMultiNeighborhood, derive_seed(seed, 1), g);
      return nb.instructions[rng.below(nb.instructions.size())];
    }
    case K::Rand: {
      auto words = l.words();
      rng.shuffle(words);
      return Instruction(join_words(words));
    }
    case K::Mask: {
      auto words = l.words();
      for (auto& w : words) {
        if (rng.bernoulli(spec.mask_rate)) w = std::string(kMaskWord);
      }
      return Instruction(join_words(words));
    }
    default: return rewrite_variant(l, spec.kind, seed, g);
  }
}

Instruction rewrite_variant(const Instruction& l, PerturbationSpec::Kind kind, std::uint64_t seed, const Grammar& g) {
  using K = PerturbationSpec::Kind;
  const std::string label = PerturbationSpec{kind, 0.0}.name();
  const Intent z = require_intent(l, g, label);
  Rng rng(seed);
  switch (kind) {
    case K::R0: {
      // Synonym substitution on the instruction's own lexicon spans.
      auto words = l.words();
      const Analysis a = analyze(words, g);
      struct Slot {
        const Match* match;
        const std::vector<std::string>* synonyms;
      };
      std::vector<Slot> slots;
      for (const auto& m : a.matches) {
        switch (m.category) {
          case Category::Verb: slots.push_back({&m, &g.verbs}); break;
          case Category::Color: slots.push_back({&m, &g.colors[m.value]}); break;
          case Category::Shape:
            if (!m.description) slots.push_back({&m, &g.shapes[m.value]});
            break;
          case Category::Zone: slots.push_back({&m, &g.zones[m.value].nouns}); break;
          case Category::Negation: break;
        }
      }
      std::vector<std::string> replacement(slots.size());
      bool changed = false;
      for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& span = std::vector<std::string>(words.begin() + static_cast<std::ptrdiff_t>(slots[i].match->start),
                                                    words.begin() + static_cast<std::ptrdiff_t>(slots[i].match->start + slots[i].match->length));
        replacement[i] = rng.pick(*slots[i].synonyms);
        if (replacement[i] != join_words(span)) changed = true;
      }
      if (!changed) {
        std::vector<std::size_t> options;
        for (std::size_t i = 0; i < slots.size(); ++i) {
          if (slots[i].synonyms->size() > 1) options.push_back(i);
        }
        if (options.empty()) throw PerturbationError("r0: no substitutable phrase in '" + l.text + "'");
        const std::size_t i = rng.pick(options);
        const std::string current = replacement[i];
        std::vector<std::string> others;
        for (const auto& s : *slots[i].synonyms) {
          if (s != current) others.push_back(s);
        }
        replacement[i] = rng.pick(others);
      }
      std::vector<std::string> out;
      std::size_t cursor = 0;
      for (std::size_t i = 0; i < slots.size(); ++i) {
        const Match& m = *slots[i].match;
        for (; cursor < m.start; ++cursor) out.push_back(words[cursor]);
        for (auto& w : split_words(replacement[i])) out.push_back(w);
        cursor = m.start + m.length;
      }
      for (; cursor < words.size(); ++cursor) out.push_back(words[cursor]);
      return Instruction(join_words(out));
    }
    case K::R1: {
      const auto& clause = rng.pick(g.distractions);
      return Instruction(rng.bernoulli(0.5) ? clause + " " + l.text : l.text + " " + clause);
    }
    case K::R2: {
      auto words = l.words();
      const Analysis a = analyze(words, g);
      std::vector<std::string> out;
      std::size_t cursor = 0;
      for (const auto& mention : a.mentions) {
        if (mention.negated) continue;
        const Match& m = a.matches[mention.shape_match];
        for (; cursor < m.start; ++cursor) out.push_back(words[cursor]);
        for (auto& w : split_words(g.descriptions[static_cast<int>(mention.shape)])) out.push_back(w);
        cursor = m.start + m.length;
      }
      for (; cursor < words.size(); ++cursor) out.push_back(words[cursor]);
      return Instruction(join_words(out));
    }
    case K::R3: return render(rng.pick(g.reasoning_templates), z, RenderChoice{}, g);
    case K::R4: {
      const int target_pair = static_cast<int>(z.color) * kNumShapes + static_cast<int>(z.shape);
      int other = static_cast<int>(rng.below(kNumColors * kNumShapes - 1));
      if (other >= target_pair) ++other;
      const std::string negated = g.colors[other / kNumShapes].front() + " " + g.shapes[other % kNumShapes].front();
      const auto& tmpl = rng.pick(g.negation_templates);
      return Instruction(render_full(tmpl, z, RenderChoice{}, g, nullptr, &negated));
    }
    default: throw PerturbationError("rewrite_variant: '" + label + "' is not a rewrite variant");
  }
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

Vocabulary::Vocabulary(std::vector<std::string> words, int max_len) : words_(std::move(words)), max_len_(max_len) {
  if (words_.size() < kNumReserved) throw std::invalid_argument("vocabulary: missing reserved entries");
  if (max_len_ < 1) throw std::invalid_argument("vocabulary: max_len must be >= 1");
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("vocabulary: duplicate word '" + words_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::from_grammar(const Grammar& g, int max_len) {
  std::vector<std::string> words{"<pad>", "<unk>", std::string(kMaskWord), "<null>"};
  for (auto& w : g.vocabulary_words()) words.push_back(w);
  return Vocabulary(std::move(words), max_len);
}

int Vocabulary::id_of(const std::string& word) const {
  const auto it = index_.find(word);
  if (it == index_.end() || it->second == kPadId || it->second == kNullId) return kUnkId;
  return it->second;
}

TokenSeq Vocabulary::tokenize(const Instruction& l) const {
  TokenSeq t;
  t.ids.assign(static_cast<std::size_t>(max_len_), kPadId);
  const auto words = l.words();
  for (std::size_t i = 0; i < words.size() && i < t.ids.size(); ++i) t.ids[i] = id_of(words[i]);
  return t;
}

Instruction Vocabulary::detokenize(const TokenSeq& t) const {
  std::vector<std::string> words;
  for (int id : t.ids) {
    if (id == kPadId) continue;
    words.push_back(id >= 0 && id < size() ? words_[static_cast<std::size_t>(id)] : words_[kUnkId]);
  }
  return Instruction(join_words(words));
}

}  // namespace semsteer
