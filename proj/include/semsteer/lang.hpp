#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include <json.hpp>

#include "semsteer/worldsim.hpp"

namespace semsteer {

inline constexpr std::string_view kMaskWord = "<MASK>";

/// Lowercase (except the mask token), single-spaced, trimmed.
std::string normalize_text(std::string_view text);

std::vector<std::string> split_words(std::string_view text);
std::string join_words(const std::vector<std::string>& words);

/// A linguistic realization of an intent.
struct Instruction {
  std::string text;

  Instruction() = default;
  explicit Instruction(std::string_view raw) : text(normalize_text(raw)) {}

  std::vector<std::string> words() const { return split_words(text); }
  friend bool operator==(const Instruction&, const Instruction&) = default;
};

struct ZonePhrases {
  std::vector<std::string> nouns;
  std::vector<std::string> preps;
};

/// Template-and-lexicon grammar. The first synonym of every set is canonical.
/// Loaded from the versioned JSON asset; the build embeds a default copy.
struct Grammar {
  int version = 1;
  std::vector<std::string> verbs;
  std::array<std::vector<std::string>, kNumColors> colors;
  std::array<std::vector<std::string>, kNumShapes> shapes;
  std::array<ZonePhrases, kNumDestinations> zones;
  std::vector<std::string> canonical_templates;
  std::vector<std::string> paraphrase_templates;
  std::vector<std::string> distractions;
  std::array<std::string, kNumShapes> descriptions;
  std::vector<std::string> reasoning_templates;
  std::vector<std::string> negation_templates;
  std::vector<std::string> negation_markers;
  std::string simple_phrase;

  static Grammar from_json(const nlohmann::json& j);
  static Grammar load(const std::string& path);
  /// The grammar asset compiled into the library.
  static const Grammar& builtin();

  /// Every word the grammar can emit, sorted and unique (mask token excluded).
  std::vector<std::string> vocabulary_words() const;

  /// Throws std::invalid_argument when a synonym maps to two canonical values.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Parsing and generation
// ---------------------------------------------------------------------------

struct Unparseable {
  std::string reason;
};

using ParseResult = std::variant<Intent, Unparseable>;

ParseResult parse(const Instruction& l, const Grammar& g = Grammar::builtin());

inline bool parses_to(const Instruction& l, const Intent& z, const Grammar& g = Grammar::builtin()) {
  const auto r = parse(l, g);
  return std::holds_alternative<Intent>(r) && std::get<Intent>(r) == z;
}

/// Slot choices used to render one template.
struct RenderChoice {
  int verb = 0;
  int color = 0;
  int shape = 0;
  int zone_noun = 0;
  int zone_prep = 0;
};

/// Fill `tmpl` for intent z with the given synonym choices.
Instruction render(const std::string& tmpl, const Intent& z, const RenderChoice& choice,
                   const Grammar& g = Grammar::builtin());

/// Canonical-word realization with a sampled canonical template.
Instruction realize(const Intent& z, std::uint64_t seed, const Grammar& g = Grammar::builtin());

struct Neighborhood {
  std::vector<Instruction> instructions;
  /// Set when the grammar could not supply K distinct realizations.
  bool repeated = false;
};

/// K samples from the full paraphrase grammar (templates x synonyms) for z.
Neighborhood neighborhood(const Intent& z, int k, std::uint64_t seed,
                          const Grammar& g = Grammar::builtin());

// ---------------------------------------------------------------------------
// Perturbations
// ---------------------------------------------------------------------------

struct PerturbationSpec {
  enum class Kind { Origin, Blank, Simple, Multi, Rand, Mask, R0, R1, R2, R3, R4 };
  Kind kind = Kind::Origin;
  double mask_rate = 0.0;

  /// Suite name: origin, multi, blank, rand, m2, m4, m6, m8, simple, r0..r4.
  std::string name() const;
  static PerturbationSpec from_name(std::string_view name);
  void validate() const;

  friend bool operator==(const PerturbationSpec&, const PerturbationSpec&) = default;
};

/// Default suite: Origin, Multi, Blank, Rand, M2, M4, M6, M8, Simple.
std::vector<PerturbationSpec> default_suite();
std::vector<PerturbationSpec> rewrite_suite();

/// Neighborhood size the Multi perturbation samples from.
inline constexpr int kMultiNeighborhood = 8;

class PerturbationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Throws PerturbationError when Multi or R* is applied to unparseable text.
Instruction perturb(const Instruction& l, const PerturbationSpec& spec, std::uint64_t seed,
                    const Grammar& g = Grammar::builtin());

Instruction rewrite_variant(const Instruction& l, PerturbationSpec::Kind kind, std::uint64_t seed,
                            const Grammar& g = Grammar::builtin());

// ---------------------------------------------------------------------------
// Tokens
// ---------------------------------------------------------------------------

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kMaskId = 2;
inline constexpr int kNullId = 3;
inline constexpr int kNumReserved = 4;
inline constexpr int kDefaultMaxLen = 24;

struct TokenSeq {
  std::vector<int> ids;  // always max_len long
  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

/// Closed vocabulary: reserved ids followed by the grammar's words.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words, int max_len = kDefaultMaxLen);
  static Vocabulary from_grammar(const Grammar& g, int max_len = kDefaultMaxLen);

  int size() const { return static_cast<int>(words_.size()); }
  int max_len() const { return max_len_; }
  /// Full id->word table including the reserved entries.
  const std::vector<std::string>& words() const { return words_; }
  int id_of(const std::string& word) const;

  TokenSeq tokenize(const Instruction& l) const;
  Instruction detokenize(const TokenSeq& t) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
  int max_len_ = kDefaultMaxLen;
};

}  // namespace semsteer
