#pragma once

// Attribute-structured retrieval database: frozen unit-norm keys, exact
// cosine k-NN, per-category frequency filtering and soft-prompt assembly.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ragcap/attributes.hpp"
#include "ragcap/corpus.hpp"
#include "ragcap/encoder.hpp"

namespace ragcap::retrieval {

class BuildError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RetrievalEntry {
  std::string image_id;
  std::vector<float> key;  // unit norm
  attr::AttributeRecord attributes;
};

struct Hit {
  std::size_t index = 0;
  double similarity = 0.0;
};

/// Which attributes each entry carries. ObjectsOnly emulates an object-word database.
enum class EntryAttributes { Full, ObjectsOnly };

struct DatabaseInfo {
  int d_emb = 0;
  double fraction = 1.0;
  std::uint64_t sample_seed = 0;
  std::string encoder_hash;
  EntryAttributes attributes = EntryAttributes::Full;
};

class RetrievalDatabase {
 public:
  RetrievalDatabase() = default;
  RetrievalDatabase(DatabaseInfo info, std::vector<RetrievalEntry> entries);
  RetrievalDatabase(const RetrievalDatabase& other);
  RetrievalDatabase& operator=(const RetrievalDatabase& other);

  const DatabaseInfo& info() const { return info_; }
  std::size_t size() const { return entries_.size(); }
  const RetrievalEntry& entry(std::size_t i) const { return entries_[i]; }
  const std::vector<RetrievalEntry>& entries() const { return entries_; }

  /// Top-k by cosine similarity, ties by ascending image-id. Entries whose id
  /// equals `exclude_id` are skipped. k above the size returns everything.
  std::vector<Hit> query(const float* q, int k, const std::string& exclude_id = {}) const;
  std::vector<Hit> query(const std::vector<float>& q, int k, const std::string& exclude_id = {}) const {
    return query(q.data(), k, exclude_id);
  }

  /// SHA-256 over the key matrix bytes.
  std::string keys_hash() const;

  void save(const std::filesystem::path& dir) const;
  static RetrievalDatabase load(const std::filesystem::path& dir);

 private:
  DatabaseInfo info_;
  std::vector<RetrievalEntry> entries_;
  std::vector<float> keys_;  // [size, d_emb] row-major copy for the scan
  mutable std::atomic<bool> warned_{false};
};

struct BuildOptions {
  double fraction = 1.0;
  std::uint64_t sample_seed = 0;
  EntryAttributes attributes = EntryAttributes::Full;
};

/// Builds from precomputed embeddings; rows of `embeddings` follow `ids`.
RetrievalDatabase build_database(const std::vector<std::string>& ids,
                                 const std::vector<attr::AttributeRecord>& attributes,
                                 const std::vector<float>& embeddings, int d_emb, const BuildOptions& options,
                                 const std::string& encoder_hash);

/// Embeds the train split with the frozen snapshot and parses its captions.
RetrievalDatabase build_database(const std::vector<corpus::CorpusSample>& train,
                                 const encoder::EncoderSnapshot& snapshot, const attr::Tagger& tagger,
                                 const BuildOptions& options);

/// Per-category top-n by hit frequency; ties by mean similarity of the
/// contributing hits (higher first), then lexicographically.
attr::AttributeRecord filter_attributes(const RetrievalDatabase& db, const std::vector<Hit>& hits, int n);

/// Same filter over explicit (attributes, similarity) pairs.
attr::AttributeRecord filter_attributes(const std::vector<std::pair<const attr::AttributeRecord*, double>>& hits,
                                        int n);

std::string assemble_prompt(const attr::AttributeRecord& filtered);

struct RetrievedContext {
  attr::AttributeRecord filtered;
  std::string prompt;
  std::vector<std::pair<std::string, double>> provenance;
};

RetrievedContext retrieve(const RetrievalDatabase& db, const float* q, int k, int n,
                          const std::string& exclude_id = {});

}  // namespace ragcap::retrieval
