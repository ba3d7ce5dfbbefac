#include "ragcap/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "json.hpp"

namespace ragcap::corpus {

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::TestIn: return "test-in";
    case Split::TestOut: return "test-out";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  for (Split s : kSplits)
    if (name == split_name(s)) return s;
  throw std::invalid_argument("unknown split '" + name + "'");
}

int CorpusConfig::size_of(Split s) const {
  switch (s) {
    case Split::Train: return train_size;
    case Split::TestIn: return test_in_size;
    case Split::TestOut: return test_out_size;
  }
  return 0;
}

namespace {

bool has(const std::vector<std::string>& v, const std::string& w) {
  return std::find(v.begin(), v.end(), w) != v.end();
}

}  // namespace

void CorpusConfig::validate() const {
  if (shapes.empty() || colors.empty() || actions.empty() || environments.empty()) {
    throw ConfigError("corpus vocabularies must be non-empty");
  }
  if (templates.empty()) throw ConfigError("corpus needs at least one caption template");
  if (image_size < 8 || channels != 3) throw ConfigError("corpus images must be RGB and at least 8x8");
  if (max_objects < 1 || max_objects > 3) throw ConfigError("max_objects must be in [1, 3]");
  if (train_size < 0 || test_in_size < 0 || test_out_size < 0) throw ConfigError("split sizes must be >= 0");
  if (test_out_size > 0 && held_out.empty()) {
    throw ConfigError("test-out split requested but the held-out combination list is empty");
  }
  for (const auto& t : held_out) {
    if (!has(shapes, t.object) || !has(actions, t.action) || !has(environments, t.environment)) {
      throw ConfigError("held-out triple (" + t.object + ", " + t.action + ", " + t.environment +
                        ") uses words outside the vocabularies");
    }
  }
}

void CorpusConfig::validate_spec(const SceneSpec& spec) const {
  if (spec.objects.empty() || static_cast<int>(spec.objects.size()) > max_objects) {
    throw VocabularyError("scene must contain between 1 and " + std::to_string(max_objects) + " objects");
  }
  for (const auto& o : spec.objects) {
    if (!has(shapes, o.shape)) throw VocabularyError("unknown shape '" + o.shape + "'");
    if (!has(colors, o.color)) throw VocabularyError("unknown color '" + o.color + "'");
  }
  if (!has(actions, spec.action)) throw VocabularyError("unknown action '" + spec.action + "'");
  if (!has(environments, spec.environment)) {
    throw VocabularyError("unknown environment '" + spec.environment + "'");
  }
}

std::vector<CorpusSample>& Corpus::split(Split s) {
  switch (s) {
    case Split::Train: return train;
    case Split::TestIn: return test_in;
    case Split::TestOut: return test_out;
  }
  return train;
}

const std::vector<CorpusSample>& Corpus::split(Split s) const { return const_cast<Corpus*>(this)->split(s); }

std::vector<float> Corpus::images(Split s) const {
  const auto& samples = split(s);
  std::vector<float> out;
  out.reserve(samples.size() * image_numel());
  for (const auto& smp : samples) out.insert(out.end(), smp.image.begin(), smp.image.end());
  return out;
}

std::set<Triple> triples_of(const SceneSpec& spec) {
  std::set<Triple> out;
  for (const auto& o : spec.objects) out.insert({o.shape, spec.action, spec.environment});
  return out;
}

// ---- rendering ---------------------------------------------------------------

namespace {

using Rgb = std::array<float, 3>;

Rgb color_rgb(const std::string& name, std::size_t index) {
  static const std::map<std::string, Rgb> known{
      {"red", {0.9f, -0.8f, -0.8f}},   {"green", {-0.8f, 0.8f, -0.8f}}, {"blue", {-0.8f, -0.6f, 0.95f}},
      {"yellow", {0.9f, 0.85f, -0.8f}}, {"purple", {0.5f, -0.8f, 0.8f}}, {"orange", {0.95f, 0.2f, -0.9f}},
      {"white", {0.95f, 0.95f, 0.95f}}, {"black", {-0.95f, -0.95f, -0.95f}}};
  if (auto it = known.find(name); it != known.end()) return it->second;
  // Colours outside the named set still get a stable, distinct hue.
  const double hue = 2.0 * std::numbers::pi * static_cast<double>(index) * 0.618033988749895;
  return {static_cast<float>(0.8 * std::cos(hue)), static_cast<float>(0.8 * std::cos(hue + 2.094)),
          static_cast<float>(0.8 * std::cos(hue + 4.189))};
}

// Object-local coordinates u, v in [-1, 1].
bool inside_shape(int kind, double u, double v) {
  switch (kind % 5) {
    case 0: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 1: return u * u + v * v <= 0.85 * 0.85;
    case 2: return v >= -0.9 && v <= 0.9 && std::abs(u) <= 0.95 * (v + 0.9) / 1.8;
    case 3: {
      const double r2 = u * u + v * v;
      return r2 <= 0.92 * 0.92 && r2 >= 0.45 * 0.45;
    }
    default: return (std::abs(u) <= 0.3 && std::abs(v) <= 0.9) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.9);
  }
}

float background_value(int kind, int phase, int x, int y) {
  switch (kind % 5) {
    case 0: return ((x + phase) % 8 == 0 || (y + phase) % 8 == 0) ? 0.25f : -0.35f;
    case 1: return (((y + phase) / 3) % 2 == 0) ? -0.5f : 0.05f;
    case 2: return -0.2f;
    case 3: {
      const int px = (x + phase) % 6, py = (y + phase) % 6;
      return (px < 2 && py < 2) ? 0.3f : -0.4f;
    }
    default: return ((((x + phase) / 4) + ((y + phase) / 4)) % 2 == 0) ? -0.55f : 0.0f;
  }
}

std::size_t index_of(const std::vector<std::string>& v, const std::string& w) {
  return static_cast<std::size_t>(std::find(v.begin(), v.end(), w) - v.begin());
}

struct Placed {
  double cx, cy, radius, angle;
};

std::vector<Placed> layout(const SceneSpec& spec, std::size_t action_kind, int size, std::mt19937_64& rng) {
  const int n = static_cast<int>(spec.objects.size());
  const double s = size / 32.0;
  const double r = 4.6 * s;
  std::uniform_real_distribution<double> jitter(-2.0 * s, 2.0 * s);
  std::vector<Placed> out;
  switch (action_kind % 4) {
    case 0: {  // column resting on the bottom edge
      const double cx = size / 2.0 + jitter(rng);
      for (int i = 0; i < n; ++i) out.push_back({cx, size - 1.0 * s - r - 2.0 * r * i, r, 0.0});
      break;
    }
    case 1: {  // row from the left edge
      const double cy = size / 2.0 + jitter(rng);
      for (int i = 0; i < n; ++i) out.push_back({1.0 * s + r + (2.0 * r + 1.0 * s) * i, cy, r, 0.0});
      break;
    }
    case 2: {  // scattered, small and apart
      std::uniform_real_distribution<double> pos(r + 1.0, size - r - 1.0);
      const double rs = 0.8 * r;
      for (int i = 0; i < n; ++i) {
        Placed p{pos(rng), pos(rng), rs, 0.0};
        for (int tries = 0; tries < 64; ++tries) {
          bool ok = true;
          for (const auto& q : out) ok = ok && std::hypot(p.cx - q.cx, p.cy - q.cy) >= 2.6 * rs;
          if (ok) break;
          p.cx = pos(rng);
          p.cy = pos(rng);
        }
        out.push_back(p);
      }
      break;
    }
    default: {  // rotated along the diagonal
      const double c = size / 2.0 + 0.5 * jitter(rng);
      for (int i = 0; i < n; ++i) {
        const double off = (i - (n - 1) / 2.0) * 2.0 * r * 0.9;
        out.push_back({c + off, c + off, r, std::numbers::pi / 4.0});
      }
      break;
    }
  }
  return out;
}

}  // namespace

std::vector<float> render(const SceneSpec& spec, const CorpusConfig& config) {
  config.validate_spec(spec);
  const int size = config.image_size;
  const int hw = size * size;
  std::mt19937_64 rng(spec.seed ^ 0x5eedf00dULL);
  const int env_kind = static_cast<int>(index_of(config.environments, spec.environment));
  const int phase = static_cast<int>(rng() % 4);
  const auto placed = layout(spec, index_of(config.actions, spec.action), size, rng);

  std::vector<float> img(static_cast<std::size_t>(3) * hw);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const float v = background_value(env_kind, phase, x, y);
      for (int c = 0; c < 3; ++c) img[static_cast<std::size_t>(c) * hw + y * size + x] = v;
    }

  constexpr int kSuper = 2;
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& obj = spec.objects[i];
    const int kind = static_cast<int>(index_of(config.shapes, obj.shape));
    const Rgb rgb = color_rgb(obj.color, index_of(config.colors, obj.color));
    const Placed& p = placed[i];
    const double ca = std::cos(p.angle), sa = std::sin(p.angle);
    const int x0 = std::max(0, static_cast<int>(std::floor(p.cx - 1.5 * p.radius)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(p.cx + 1.5 * p.radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(p.cy - 1.5 * p.radius)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(p.cy + 1.5 * p.radius)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy)
          for (int sx = 0; sx < kSuper; ++sx) {
            const double dx = (x + (sx + 0.5) / kSuper - p.cx) / p.radius;
            const double dy = (y + (sy + 0.5) / kSuper - p.cy) / p.radius;
            const double u = ca * dx + sa * dy;
            const double v = -sa * dx + ca * dy;
            if (inside_shape(kind, u, v)) ++hits;
          }
        if (hits == 0) continue;
        const float a = static_cast<float>(hits) / (kSuper * kSuper);
        for (int c = 0; c < 3; ++c) {
          float& px = img[static_cast<std::size_t>(c) * hw + y * size + x];
          px = (1.0f - a) * px + a * rgb[static_cast<std::size_t>(c)];
        }
      }
  }
  for (auto& v : img) v = std::clamp(v, -1.0f, 1.0f);
  return img;
}

// ---- captions ----------------------------------------------------------------

namespace {

std::string join_objects(const std::vector<ObjectSpec>& objects, bool article) {
  std::vector<std::string> parts;
  for (const auto& o : objects) parts.push_back((article ? "a " : "") + o.color + " " + o.shape);
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += (i + 1 == parts.size()) ? " and " : ", ";
    out += parts[i];
  }
  return out;
}

std::string expand(std::string tmpl, const std::map<std::string, std::string>& slots) {
  std::string out;
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    const auto open = tmpl.find('{', pos);
    if (open == std::string::npos) {
      out += tmpl.substr(pos);
      break;
    }
    const auto close = tmpl.find('}', open);
    if (close == std::string::npos) throw ConfigError("unterminated placeholder in template '" + tmpl + "'");
    out += tmpl.substr(pos, open - pos);
    const std::string key = tmpl.substr(open + 1, close - open - 1);
    auto it = slots.find(key);
    if (it == slots.end()) throw ConfigError("unknown template placeholder {" + key + "}");
    out += it->second;
    pos = close + 1;
  }
  return out;
}

}  // namespace

std::vector<std::string> caption_templates(const SceneSpec& spec, std::mt19937_64& rng,
                                           const std::vector<std::string>& templates) {
  if (templates.empty()) throw ConfigError("caption template set is empty");
  const std::map<std::string, std::string> slots{
      {"objects", join_objects(spec.objects, true)},
      {"objects_bare", join_objects(spec.objects, false)},
      {"action", spec.action},
      {"environment", spec.environment},
      {"be", spec.objects.size() == 1 ? "is" : "are"},
  };
  // Cycle through a shuffled template order so every template is used before any repeats.
  std::vector<std::size_t> order(templates.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::string> out;
  for (int i = 0; i < kCaptionsPerImage; ++i) out.push_back(expand(templates[order[i % order.size()]], slots));
  return out;
}

// ---- generation ----------------------------------------------------------------

namespace {

template <typename V>
const typename V::value_type& pick(const V& v, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
  return v[d(rng)];
}

SceneSpec random_scene(const CorpusConfig& cfg, std::mt19937_64& rng) {
  SceneSpec s;
  std::uniform_int_distribution<int> count(1, cfg.max_objects);
  const int n = count(rng);
  for (int i = 0; i < n; ++i) s.objects.push_back({pick(cfg.shapes, rng), pick(cfg.colors, rng)});
  s.action = pick(cfg.actions, rng);
  s.environment = pick(cfg.environments, rng);
  s.seed = rng();
  return s;
}

SceneSpec held_out_scene(const CorpusConfig& cfg, std::mt19937_64& rng) {
  const Triple& anchor = pick(cfg.held_out, rng);
  std::vector<std::string> allowed;
  for (const auto& t : cfg.held_out)
    if (t.action == anchor.action && t.environment == anchor.environment) allowed.push_back(t.object);
  SceneSpec s;
  std::uniform_int_distribution<int> count(1, cfg.max_objects);
  const int n = count(rng);
  s.objects.push_back({anchor.object, pick(cfg.colors, rng)});
  for (int i = 1; i < n; ++i) s.objects.push_back({pick(allowed, rng), pick(cfg.colors, rng)});
  std::shuffle(s.objects.begin(), s.objects.end(), rng);
  s.action = anchor.action;
  s.environment = anchor.environment;
  s.seed = rng();
  return s;
}

std::string sample_id(Split s, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%05d", split_name(s), i);
  return buf;
}

}  // namespace

Corpus generate_corpus(const CorpusConfig& config, std::uint64_t seed) {
  config.validate();
  const std::set<Triple> held(config.held_out.begin(), config.held_out.end());
  Corpus corpus;
  corpus.config = config;
  corpus.seed = seed;
  std::mt19937_64 rng(seed);
  for (Split split : kSplits) {
    auto& out = corpus.split(split);
    for (int i = 0; i < config.size_of(split); ++i) {
      SceneSpec spec;
      if (split == Split::TestOut) {
        spec = held_out_scene(config, rng);
      } else {
        for (int tries = 0;; ++tries) {
          if (tries > 10000) throw ConfigError("held-out list leaves no admissible training scenes");
          spec = random_scene(config, rng);
          const auto tr = triples_of(spec);
          if (std::none_of(tr.begin(), tr.end(), [&](const Triple& t) { return held.count(t) > 0; })) break;
        }
      }
      CorpusSample smp;
      smp.id = sample_id(split, i);
      smp.split = split;
      smp.image = render(spec, config);
      std::mt19937_64 caption_rng(spec.seed ^ 0xca97105eULL);
      smp.captions = caption_templates(spec, caption_rng, config.templates);
      smp.spec = std::move(spec);
      out.push_back(std::move(smp));
    }
  }
  return corpus;
}

// ---- persistence -----------------------------------------------------------------

namespace {

using nlohmann::json;

json config_to_json(const CorpusConfig& c) {
  json held = json::array();
  for (const auto& t : c.held_out) held.push_back({t.object, t.action, t.environment});
  return {{"shapes", c.shapes},         {"colors", c.colors},           {"actions", c.actions},
          {"environments", c.environments}, {"templates", c.templates}, {"image_size", c.image_size},
          {"channels", c.channels},     {"max_objects", c.max_objects}, {"train_size", c.train_size},
          {"test_in_size", c.test_in_size}, {"test_out_size", c.test_out_size}, {"held_out", held}};
}

CorpusConfig config_from_json(const json& j) {
  CorpusConfig c;
  c.shapes = j.at("shapes").get<std::vector<std::string>>();
  c.colors = j.at("colors").get<std::vector<std::string>>();
  c.actions = j.at("actions").get<std::vector<std::string>>();
  c.environments = j.at("environments").get<std::vector<std::string>>();
  c.templates = j.at("templates").get<std::vector<std::string>>();
  c.image_size = j.at("image_size").get<int>();
  c.channels = j.at("channels").get<int>();
  c.max_objects = j.at("max_objects").get<int>();
  c.train_size = j.at("train_size").get<int>();
  c.test_in_size = j.at("test_in_size").get<int>();
  c.test_out_size = j.at("test_out_size").get<int>();
  c.held_out.clear();
  for (const auto& t : j.at("held_out")) c.held_out.push_back({t.at(0), t.at(1), t.at(2)});
  return c;
}

std::string file_for(Split s) { return std::string(split_name(s)) + ".f32"; }

}  // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest{{"format", "ragcap-corpus-1"},
                {"seed", corpus.seed},
                {"config", config_to_json(corpus.config)},
                {"image_shape", {corpus.config.channels, corpus.config.image_size, corpus.config.image_size}},
                {"captions", "captions.tsv"}};
  std::ofstream captions(dir / "captions.tsv", std::ios::binary);
  if (!captions) throw std::runtime_error("cannot write " + (dir / "captions.tsv").string());
  for (Split s : kSplits) {
    const auto& samples = corpus.split(s);
    json entries = json::array();
    std::ofstream bin(dir / file_for(s), std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write " + (dir / file_for(s)).string());
    for (const auto& smp : samples) {
      json objs = json::array();
      for (const auto& o : smp.spec.objects) objs.push_back({o.shape, o.color});
      entries.push_back({{"id", smp.id},
                         {"objects", objs},
                         {"action", smp.spec.action},
                         {"environment", smp.spec.environment},
                         {"seed", smp.spec.seed}});
      bin.write(reinterpret_cast<const char*>(smp.image.data()),
                static_cast<std::streamsize>(smp.image.size() * sizeof(float)));
      for (std::size_t c = 0; c < smp.captions.size(); ++c) {
        captions << smp.id << '\t' << c << '\t' << smp.captions[c] << '\n';
      }
    }
    manifest["splits"][split_name(s)] = {{"count", samples.size()}, {"file", file_for(s)}, {"samples", entries}};
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(1) << '\n';
}

Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("corpus manifest not found in " + dir.string());
  const json manifest = json::parse(mf);
  Corpus corpus;
  corpus.seed = manifest.at("seed").get<std::uint64_t>();
  corpus.config = config_from_json(manifest.at("config"));
  const std::size_t per = corpus.image_numel();

  std::map<std::string, std::vector<std::string>> captions;
  std::ifstream ct(dir / "captions.tsv");
  if (!ct) throw std::runtime_error("captions table not found in " + dir.string());
  std::string line;
  while (std::getline(ct, line)) {
    const auto t1 = line.find('\t');
    const auto t2 = line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos) throw std::runtime_error("malformed caption row");
    auto& list = captions[line.substr(0, t1)];
    const std::size_t idx = std::stoul(line.substr(t1 + 1, t2 - t1 - 1));
    if (list.size() <= idx) list.resize(idx + 1);
    list[idx] = line.substr(t2 + 1);
  }

  for (Split s : kSplits) {
    const auto& js = manifest.at("splits").at(split_name(s));
    const std::size_t count = js.at("count").get<std::size_t>();
    std::ifstream bin(dir / js.at("file").get<std::string>(), std::ios::binary);
    if (!bin) throw std::runtime_error("missing image file for split " + std::string(split_name(s)));
    auto& out = corpus.split(s);
    for (std::size_t i = 0; i < count; ++i) {
      const auto& e = js.at("samples").at(i);
      CorpusSample smp;
      smp.id = e.at("id").get<std::string>();
      smp.split = s;
      for (const auto& o : e.at("objects")) smp.spec.objects.push_back({o.at(0), o.at(1)});
      smp.spec.action = e.at("action").get<std::string>();
      smp.spec.environment = e.at("environment").get<std::string>();
      smp.spec.seed = e.at("seed").get<std::uint64_t>();
      smp.image.resize(per);
      bin.read(reinterpret_cast<char*>(smp.image.data()), static_cast<std::streamsize>(per * sizeof(float)));
      if (!bin) throw std::runtime_error("truncated image file for split " + std::string(split_name(s)));
      smp.captions = captions[smp.id];
      if (smp.captions.size() != static_cast<std::size_t>(kCaptionsPerImage)) {
        throw std::runtime_error("sample " + smp.id + " does not have 5 captions");
      }
      out.push_back(std::move(smp));
    }
  }
  return corpus;
}

}  // namespace ragcap::corpus
