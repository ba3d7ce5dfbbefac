#include "ragcap/attributes.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace ragcap::attr {

extern const char* const kBundledLexicon;

const char* category_name(Category c) {
  switch (c) {
    case Category::Object: return "object";
    case Category::Action: return "action";
    case Category::Environment: return "environment";
    case Category::Stop: return "stop";
  }
  return "?";
}

std::optional<Category> parse_category(std::string_view name) {
  if (name == "object") return Category::Object;
  if (name == "action") return Category::Action;
  if (name == "environment") return Category::Environment;
  if (name == "stop") return Category::Stop;
  return std::nullopt;
}

std::vector<std::string>& AttributeRecord::terms(Category c) {
  switch (c) {
    case Category::Object: return objects;
    case Category::Action: return actions;
    case Category::Environment: return environments;
    case Category::Stop: break;
  }
  throw std::invalid_argument("AttributeRecord has no stop list");
}

const std::vector<std::string>& AttributeRecord::terms(Category c) const {
  return const_cast<AttributeRecord*>(this)->terms(c);
}

void AttributeRecord::add(Category c, const std::string& term) {
  if (c == Category::Stop || term.empty()) return;
  auto& list = terms(c);
  if (std::find(list.begin(), list.end(), term) == list.end()) list.push_back(term);
}

bool AttributeRecord::contains(Category c, const std::string& term) const {
  const auto& list = terms(c);
  return std::find(list.begin(), list.end(), term) != list.end();
}

bool AttributeRecord::empty() const { return objects.empty() && actions.empty() && environments.empty(); }

std::size_t AttributeRecord::size() const { return objects.size() + actions.size() + environments.size(); }

bool operator==(const AttributeRecord& a, const AttributeRecord& b) {
  auto same = [](std::vector<std::string> x, std::vector<std::string> y) {
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    return x == y;
  };
  return same(a.objects, b.objects) && same(a.actions, b.actions) && same(a.environments, b.environments);
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \r");
  return s.substr(b, e - b + 1);
}

}  // namespace

TaggerLexicon TaggerLexicon::from_text(std::string_view text) {
  TaggerLexicon lex;
  enum class Section { None, Categories, Exceptions, Suffixes } section = Section::None;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t == "#categories") { section = Section::Categories; continue; }
    if (t == "#exceptions") { section = Section::Exceptions; continue; }
    if (t == "#suffixes") { section = Section::Suffixes; continue; }
    if (t[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw LexiconError("lexicon line " + std::to_string(lineno) + ": expected two TAB-separated fields");
    }
    const std::string key = lower(trim(line.substr(0, tab)));
    const std::string val = lower(trim(line.substr(tab + 1)));
    if (key.empty()) throw LexiconError("lexicon line " + std::to_string(lineno) + ": empty first field");
    switch (section) {
      case Section::Categories: {
        const auto c = parse_category(val);
        if (!c) throw LexiconError("lexicon line " + std::to_string(lineno) + ": unknown category '" + val + "'");
        lex.categories_[key] = *c;
        break;
      }
      case Section::Exceptions:
        if (val.empty()) throw LexiconError("lexicon line " + std::to_string(lineno) + ": empty lemma");
        lex.exceptions_[key] = val;
        break;
      case Section::Suffixes: lex.suffixes_.emplace_back(key, val); break;
      case Section::None:
        throw LexiconError("lexicon line " + std::to_string(lineno) + ": record before any section header");
    }
  }
  return lex;
}

TaggerLexicon TaggerLexicon::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw LexiconError("cannot read lexicon " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return from_text(ss.str());
}

const TaggerLexicon& TaggerLexicon::bundled() {
  static const TaggerLexicon lex = from_text(kBundledLexicon);
  return lex;
}

std::string TaggerLexicon::lemmatize(std::string_view word) const {
  const std::string w = lower(word);
  if (auto it = exceptions_.find(w); it != exceptions_.end()) return it->second;
  for (const auto& [suffix, replacement] : suffixes_) {
    if (w.size() > suffix.size() && w.compare(w.size() - suffix.size(), suffix.size(), suffix) == 0) {
      return w.substr(0, w.size() - suffix.size()) + replacement;
    }
  }
  return w;
}

std::optional<Category> TaggerLexicon::category(const std::string& lemma) const {
  if (auto it = categories_.find(lemma); it != categories_.end()) return it->second;
  return std::nullopt;
}

std::vector<std::string> TaggerLexicon::words(Category c) const {
  std::vector<std::string> out;
  for (const auto& [w, cat] : categories_)
    if (cat == c) out.push_back(w);
  return out;
}

std::string TaggerLexicon::to_text() const {
  std::string out = "#categories\n";
  for (const auto& [w, c] : categories_) out += w + "\t" + category_name(c) + "\n";
  out += "#exceptions\n";
  for (const auto& [s, l] : exceptions_) out += s + "\t" + l + "\n";
  out += "#suffixes\n";
  for (const auto& [s, r] : suffixes_) out += s + "\t" + r + "\n";
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string lemmatize(std::string_view word, const Tagger& tagger) { return tagger.lemmatize(word); }

AttributeRecord parse_caption(std::string_view caption, const Tagger& tagger, ParseStats* stats) {
  AttributeRecord rec;
  for (const auto& tok : tokenize(caption)) {
    const std::string lemma = tagger.lemmatize(tok);
    const auto cat = tagger.category(lemma);
    if (stats) ++stats->tokens;
    if (!cat) {
      if (stats) {
        ++stats->unknown;
        ++stats->unknown_words[tok];
      }
      continue;
    }
    if (*cat == Category::Stop) {
      if (stats) ++stats->stopped;
      continue;
    }
    if (stats) ++stats->kept;
    rec.add(*cat, lemma);
  }
  return rec;
}

AttributeRecord aggregate_records(const std::vector<AttributeRecord>& records) {
  AttributeRecord out;
  for (const auto& r : records)
    for (Category c : kAttributeCategories)
      for (const auto& t : r.terms(c)) out.add(c, t);
  return out;
}

}  // namespace ragcap::attr
