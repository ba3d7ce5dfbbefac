#include "ragcap/retrieval.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "json.hpp"
#include "ragcap/ag/archive.hpp"

namespace ragcap::retrieval {

RetrievalDatabase::RetrievalDatabase(DatabaseInfo info, std::vector<RetrievalEntry> entries)
    : info_(std::move(info)), entries_(std::move(entries)) {
  keys_.reserve(entries_.size() * static_cast<std::size_t>(info_.d_emb));
  for (const auto& e : entries_) {
    if (static_cast<int>(e.key.size()) != info_.d_emb) {
      throw BuildError("entry " + e.image_id + " has key dimension " + std::to_string(e.key.size()));
    }
    keys_.insert(keys_.end(), e.key.begin(), e.key.end());
  }
}

RetrievalDatabase::RetrievalDatabase(const RetrievalDatabase& other)
    : info_(other.info_), entries_(other.entries_), keys_(other.keys_) {}

RetrievalDatabase& RetrievalDatabase::operator=(const RetrievalDatabase& other) {
  info_ = other.info_;
  entries_ = other.entries_;
  keys_ = other.keys_;
  warned_ = false;
  return *this;
}

std::vector<Hit> RetrievalDatabase::query(const float* q, int k, const std::string& exclude_id) const {
  if (k < 1) throw std::invalid_argument("query: k must be >= 1");
  const int d = info_.d_emb;
  double norm = 0.0;
  for (int i = 0; i < d; ++i) {
    if (!std::isfinite(q[i])) throw std::invalid_argument("query: non-finite query vector");
    norm += static_cast<double>(q[i]) * q[i];
  }
  norm = std::sqrt(norm);
  const double inv = norm > 0.0 ? 1.0 / norm : 0.0;

  std::vector<Hit> all;
  all.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!exclude_id.empty() && entries_[i].image_id == exclude_id) continue;
    const float* key = keys_.data() + i * static_cast<std::size_t>(d);
    double dot = 0.0;
    for (int j = 0; j < d; ++j) dot += static_cast<double>(key[j]) * q[j];
    all.push_back({i, dot * inv});
  }
  if (static_cast<std::size_t>(k) > all.size() && !warned_.exchange(true)) {
    spdlog::warn("retrieval: k={} exceeds the {} available entries; returning all of them", k, all.size());
  }
  const std::size_t take = std::min(all.size(), static_cast<std::size_t>(k));
  auto better = [this](const Hit& a, const Hit& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return entries_[a.index].image_id < entries_[b.index].image_id;
  };
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(), better);
  all.resize(take);
  return all;
}

std::string RetrievalDatabase::keys_hash() const {
  return ag::sha256_hex(std::string(reinterpret_cast<const char*>(keys_.data()), keys_.size() * sizeof(float)));
}

namespace {

const char* attributes_name(EntryAttributes a) { return a == EntryAttributes::Full ? "full" : "objects_only"; }

}  // namespace

void RetrievalDatabase::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& e : entries_) ids.push_back(e.image_id);
  const nlohmann::json manifest{{"format", "ragcap-db-1"},
                                {"d_emb", info_.d_emb},
                                {"count", entries_.size()},
                                {"fraction", info_.fraction},
                                {"sample_seed", info_.sample_seed},
                                {"encoder_hash", info_.encoder_hash},
                                {"attributes", attributes_name(info_.attributes)},
                                {"keys_hash", keys_hash()},
                                {"ids", ids}};
  std::ofstream(dir / "manifest.json") << manifest.dump(1) << '\n';
  std::ofstream keys(dir / "keys.f32", std::ios::binary);
  keys.write(reinterpret_cast<const char*>(keys_.data()), static_cast<std::streamsize>(keys_.size() * sizeof(float)));
  std::ofstream attrs(dir / "attributes.tsv");
  for (const auto& e : entries_)
    for (attr::Category c : attr::kAttributeCategories)
      for (const auto& t : e.attributes.terms(c)) attrs << e.image_id << '\t' << attr::category_name(c) << '\t' << t << '\n';
  if (!keys || !attrs) throw std::runtime_error("failed writing database to " + dir.string());
}

RetrievalDatabase RetrievalDatabase::load(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("database manifest not found in " + dir.string());
  const auto manifest = nlohmann::json::parse(mf);
  DatabaseInfo info;
  info.d_emb = manifest.at("d_emb").get<int>();
  info.fraction = manifest.at("fraction").get<double>();
  info.sample_seed = manifest.at("sample_seed").get<std::uint64_t>();
  info.encoder_hash = manifest.at("encoder_hash").get<std::string>();
  info.attributes = manifest.at("attributes") == "full" ? EntryAttributes::Full : EntryAttributes::ObjectsOnly;
  const auto ids = manifest.at("ids").get<std::vector<std::string>>();
  if (ids.size() != manifest.at("count").get<std::size_t>()) throw std::runtime_error("database manifest count mismatch");

  std::vector<RetrievalEntry> entries(ids.size());
  std::map<std::string, std::size_t> pos;
  std::ifstream keys(dir / "keys.f32", std::ios::binary);
  if (!keys) throw std::runtime_error("keys.f32 not found in " + dir.string());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    entries[i].image_id = ids[i];
    entries[i].key.resize(static_cast<std::size_t>(info.d_emb));
    keys.read(reinterpret_cast<char*>(entries[i].key.data()), static_cast<std::streamsize>(info.d_emb * sizeof(float)));
    pos[ids[i]] = i;
  }
  if (!keys) throw std::runtime_error("keys.f32 is truncated");

  std::ifstream attrs(dir / "attributes.tsv");
  if (!attrs) throw std::runtime_error("attributes.tsv not found in " + dir.string());
  std::string line;
  while (std::getline(attrs, line)) {
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos) throw std::runtime_error("malformed attributes row");
    const auto it = pos.find(line.substr(0, t1));
    const auto cat = attr::parse_category(line.substr(t1 + 1, t2 - t1 - 1));
    if (it == pos.end() || !cat) throw std::runtime_error("attributes row refers to unknown id or category");
    entries[it->second].attributes.add(*cat, line.substr(t2 + 1));
  }
  RetrievalDatabase db(std::move(info), std::move(entries));
  if (manifest.contains("keys_hash") && manifest.at("keys_hash") != db.keys_hash()) {
    throw std::runtime_error("database keys do not match the manifest hash");
  }
  return db;
}

RetrievalDatabase build_database(const std::vector<std::string>& ids,
                                 const std::vector<attr::AttributeRecord>& attributes,
                                 const std::vector<float>& embeddings, int d_emb, const BuildOptions& options,
                                 const std::string& encoder_hash) {
  if (ids.empty()) throw BuildError("cannot build a retrieval database from an empty corpus");
  if (attributes.size() != ids.size() || embeddings.size() != ids.size() * static_cast<std::size_t>(d_emb)) {
    throw BuildError("ids, attributes and embeddings disagree in count");
  }
  if (!(options.fraction > 0.0 && options.fraction <= 1.0)) throw BuildError("db fraction must be in (0, 1]");

  std::vector<std::size_t> chosen(ids.size());
  std::iota(chosen.begin(), chosen.end(), 0);
  const auto count = static_cast<std::size_t>(std::llround(options.fraction * static_cast<double>(ids.size())));
  if (count < ids.size()) {
    std::mt19937_64 rng(options.sample_seed);
    std::shuffle(chosen.begin(), chosen.end(), rng);
    chosen.resize(std::max<std::size_t>(count, 1));
    std::sort(chosen.begin(), chosen.end());
  }

  std::vector<RetrievalEntry> entries;
  for (std::size_t i : chosen) {
    RetrievalEntry e;
    e.image_id = ids[i];
    const float* row = embeddings.data() + i * static_cast<std::size_t>(d_emb);
    double norm = 0.0;
    for (int j = 0; j < d_emb; ++j) {
      if (!std::isfinite(row[j])) throw BuildError("non-finite embedding for image " + ids[i]);
      norm += static_cast<double>(row[j]) * row[j];
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) throw BuildError("zero embedding for image " + ids[i]);
    for (int j = 0; j < d_emb; ++j) e.key.push_back(static_cast<float>(row[j] / norm));
    e.attributes = attributes[i];
    if (options.attributes == EntryAttributes::ObjectsOnly) {
      e.attributes.actions.clear();
      e.attributes.environments.clear();
    }
    entries.push_back(std::move(e));
  }
  DatabaseInfo info{d_emb, options.fraction, options.sample_seed, encoder_hash, options.attributes};
  return RetrievalDatabase(std::move(info), std::move(entries));
}

RetrievalDatabase build_database(const std::vector<corpus::CorpusSample>& train,
                                 const encoder::EncoderSnapshot& snapshot, const attr::Tagger& tagger,
                                 const BuildOptions& options) {
  if (train.empty()) throw BuildError("cannot build a retrieval database from an empty corpus");
  std::vector<std::string> ids;
  std::vector<attr::AttributeRecord> attrs;
  std::vector<float> images;
  for (const auto& s : train) {
    ids.push_back(s.id);
    std::vector<attr::AttributeRecord> per;
    for (const auto& c : s.captions) per.push_back(attr::parse_caption(c, tagger));
    attrs.push_back(attr::aggregate_records(per));
    images.insert(images.end(), s.image.begin(), s.image.end());
  }
  const auto emb = encoder::embed_images(snapshot.encoder(), images, static_cast<int>(train.size()));
  return build_database(ids, attrs, emb, snapshot.encoder().config().d_emb, options, snapshot.hash());
}

attr::AttributeRecord filter_attributes(const std::vector<std::pair<const attr::AttributeRecord*, double>>& hits,
                                        int n) {
  if (n < 1) throw std::invalid_argument("filter_attributes: n must be >= 1");
  attr::AttributeRecord out;
  for (attr::Category c : attr::kAttributeCategories) {
    struct Tally {
      int count = 0;
      double sim = 0.0;
    };
    std::map<std::string, Tally> tally;
    for (const auto& [rec, sim] : hits) {
      for (const auto& term : rec->terms(c)) {
        auto& t = tally[term];
        ++t.count;
        t.sim += sim;
      }
    }
    std::vector<std::pair<std::string, Tally>> ranked(tally.begin(), tally.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second.count != b.second.count) return a.second.count > b.second.count;
      const double ma = a.second.sim / a.second.count, mb = b.second.sim / b.second.count;
      if (ma != mb) return ma > mb;
      return a.first < b.first;
    });
    for (std::size_t i = 0; i < ranked.size() && i < static_cast<std::size_t>(n); ++i) out.add(c, ranked[i].first);
  }
  return out;
}

attr::AttributeRecord filter_attributes(const RetrievalDatabase& db, const std::vector<Hit>& hits, int n) {
  std::vector<std::pair<const attr::AttributeRecord*, double>> pairs;
  pairs.reserve(hits.size());
  for (const auto& h : hits) pairs.emplace_back(&db.entry(h.index).attributes, h.similarity);
  return filter_attributes(pairs, n);
}

std::string assemble_prompt(const attr::AttributeRecord& filtered) {
  auto slot = [](const std::vector<std::string>& terms, const char* placeholder) {
    if (terms.empty()) return std::string(placeholder);
    std::string s;
    for (std::size_t i = 0; i < terms.size(); ++i) s += (i ? ", " : "") + terms[i];
    return s;
  };
  return slot(filtered.objects, "something") + " and " + slot(filtered.actions, "being") + " in " +
         slot(filtered.environments, "somewhere");
}

RetrievedContext retrieve(const RetrievalDatabase& db, const float* q, int k, int n, const std::string& exclude_id) {
  RetrievedContext ctx;
  const auto hits = db.query(q, k, exclude_id);
  ctx.filtered = filter_attributes(db, hits, n);
  ctx.prompt = assemble_prompt(ctx.filtered);
  for (const auto& h : hits) ctx.provenance.emplace_back(db.entry(h.index).image_id, h.similarity);
  return ctx;
}

}  // namespace ragcap::retrieval
