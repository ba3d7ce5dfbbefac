#pragma once

// Caption -> (objects, actions, environments) decomposition with a
// lexicon-driven tagger and rule-based lemmatizer.

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ragcap::attr {

enum class Category { Object, Action, Environment, Stop };

const char* category_name(Category c);
/// Parses "object" / "action" / "environment" / "stop".
std::optional<Category> parse_category(std::string_view name);

/// Three term lists with set semantics: no duplicates, equality ignores order.
/// Insertion order is kept because ranked outputs (the frequency filter) rely on it.
struct AttributeRecord {
  std::vector<std::string> objects;
  std::vector<std::string> actions;
  std::vector<std::string> environments;

  std::vector<std::string>& terms(Category c);
  const std::vector<std::string>& terms(Category c) const;
  /// Appends `term` unless already present. Stop is ignored.
  void add(Category c, const std::string& term);
  bool contains(Category c, const std::string& term) const;
  bool empty() const;
  std::size_t size() const;

  friend bool operator==(const AttributeRecord& a, const AttributeRecord& b);
};

inline constexpr Category kAttributeCategories[] = {Category::Object, Category::Action, Category::Environment};

class LexiconError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Swappable tagging backend: lemmatization plus a category per lemma.
class Tagger {
 public:
  virtual ~Tagger() = default;
  virtual std::string lemmatize(std::string_view word) const = 0;
  /// Category for a lemma; nullopt for unknown words.
  virtual std::optional<Category> category(const std::string& lemma) const = 0;
};

class TaggerLexicon : public Tagger {
 public:
  TaggerLexicon() = default;

  /// Reads the sectioned TSV format (#categories, #exceptions, #suffixes).
  static TaggerLexicon from_text(std::string_view text);
  static TaggerLexicon load(const std::filesystem::path& path);
  /// The lexicon shipped with the project (data/lexicon.tsv, compiled in).
  static const TaggerLexicon& bundled();

  std::string lemmatize(std::string_view word) const override;
  std::optional<Category> category(const std::string& lemma) const override;

  void set_category(const std::string& word, Category c) { categories_[word] = c; }
  void add_exception(const std::string& surface, const std::string& lemma) { exceptions_[surface] = lemma; }
  void add_suffix_rule(const std::string& suffix, const std::string& replacement) {
    suffixes_.emplace_back(suffix, replacement);
  }

  /// Words declared under a category, sorted.
  std::vector<std::string> words(Category c) const;
  std::string to_text() const;

 private:
  std::map<std::string, Category> categories_;
  std::map<std::string, std::string> exceptions_;
  std::vector<std::pair<std::string, std::string>> suffixes_;
};

/// Running counts of what the parser saw.
struct ParseStats {
  std::size_t tokens = 0;
  std::size_t kept = 0;
  std::size_t stopped = 0;
  std::size_t unknown = 0;
  std::map<std::string, std::size_t> unknown_words;
};

/// Lowercases and splits on anything that is not a letter or digit.
std::vector<std::string> tokenize(std::string_view text);

std::string lemmatize(std::string_view word, const Tagger& tagger);
AttributeRecord parse_caption(std::string_view caption, const Tagger& tagger, ParseStats* stats = nullptr);
AttributeRecord aggregate_records(const std::vector<AttributeRecord>& records);

}  // namespace ragcap::attr
