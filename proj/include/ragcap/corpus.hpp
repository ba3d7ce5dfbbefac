#pragma once

// Procedural "shape world" corpus: rendered scenes of coloured shapes with
// five template captions each, split into train / test-in / test-out where
// test-out only contains held-out (object, action, environment) triples.

#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace ragcap::corpus {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class VocabularyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Split { Train, TestIn, TestOut };
const char* split_name(Split s);
Split parse_split(const std::string& name);
inline constexpr Split kSplits[] = {Split::Train, Split::TestIn, Split::TestOut};

struct ObjectSpec {
  std::string shape;
  std::string color;
  bool operator==(const ObjectSpec&) const = default;
};

struct SceneSpec {
  std::vector<ObjectSpec> objects;
  std::string action;
  std::string environment;
  std::uint64_t seed = 0;
  bool operator==(const SceneSpec&) const = default;
};

/// Surface words, as they appear in captions.
struct Triple {
  std::string object;
  std::string action;
  std::string environment;
  auto operator<=>(const Triple&) const = default;
};

struct CorpusConfig {
  std::vector<std::string> shapes{"cube", "ball", "cone", "ring", "cross"};
  std::vector<std::string> colors{"red", "green", "blue", "yellow", "purple"};
  std::vector<std::string> actions{"stacked", "lined", "scattered", "rotated"};
  std::vector<std::string> environments{"grid", "striped", "plain", "dotted", "checkered"};
  /// Placeholders: {objects} ("a red cube and a blue ball"), {objects_bare}
  /// ("red cube and blue ball"), {action}, {environment}, {be} (is / are).
  std::vector<std::string> templates{
      "{objects} {action} on a {environment} background",
      "{objects} {be} {action} in front of a {environment} backdrop",
      "a {environment} scene showing {objects} {action}",
      "{action} {objects_bare} over a {environment} pattern",
      "there {be} {objects} {action} on a {environment} surface",
  };
  int image_size = 32;
  int channels = 3;
  int max_objects = 3;
  int train_size = 2000;
  int test_in_size = 200;
  int test_out_size = 200;
  std::vector<Triple> held_out{
      {"cube", "stacked", "grid"},      {"ball", "stacked", "grid"},     {"cone", "scattered", "striped"},
      {"ring", "scattered", "striped"}, {"cross", "rotated", "dotted"},  {"cube", "rotated", "dotted"},
      {"ball", "lined", "checkered"},   {"ring", "lined", "checkered"},  {"cone", "lined", "plain"},
      {"cross", "stacked", "plain"},
  };

  int size_of(Split s) const;
  void validate() const;
  /// Throws VocabularyError for words outside the declared vocabularies.
  void validate_spec(const SceneSpec& spec) const;
};

inline constexpr int kCaptionsPerImage = 5;

struct CorpusSample {
  std::string id;
  SceneSpec spec;
  Split split = Split::Train;
  std::vector<float> image;           // [channels, H, W] in [-1, 1]
  std::vector<std::string> captions;  // exactly 5
};

struct Corpus {
  CorpusConfig config;
  std::uint64_t seed = 0;
  std::vector<CorpusSample> train, test_in, test_out;

  std::vector<CorpusSample>& split(Split s);
  const std::vector<CorpusSample>& split(Split s) const;
  /// Concatenated images of a split, [N, channels, H, W].
  std::vector<float> images(Split s) const;
  std::size_t image_numel() const {
    return static_cast<std::size_t>(config.channels) * config.image_size * config.image_size;
  }
};

/// All (object, action, environment) triples a scene contains.
std::set<Triple> triples_of(const SceneSpec& spec);

std::vector<float> render(const SceneSpec& spec, const CorpusConfig& config);
std::vector<std::string> caption_templates(const SceneSpec& spec, std::mt19937_64& rng,
                                           const std::vector<std::string>& templates);
Corpus generate_corpus(const CorpusConfig& config, std::uint64_t seed);

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace ragcap::corpus
