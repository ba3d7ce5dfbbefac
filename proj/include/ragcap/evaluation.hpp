#pragma once

// Caption metrics (corpus BLEU-4, CIDEr-D), attribute and retrieval recall
// on the synthetic corpus, and ablation report rendering.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ragcap/attributes.hpp"
#include "ragcap/corpus.hpp"
#include "ragcap/retrieval.hpp"

namespace ragcap::eval {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Lowercase, punctuation stripped, whitespace split.
std::vector<std::string> metric_tokens(const std::string& text);

/// Corpus BLEU-4: clipped n-gram precisions summed over the corpus, closest
/// reference length (shorter on ties) for the brevity penalty. An order with
/// no candidate n-grams at all contributes precision 1e-6.
double bleu4(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references);

/// CIDEr-D (x10, sigma 6, clipped tf-idf, document frequency from references).
double cider(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references);

struct AttributeRecall {
  double objects = 0.0;
  double actions = 0.0;
  double environments = 0.0;
};

/// Ground-truth lemmas of a scene.
attr::AttributeRecord spec_attributes(const corpus::SceneSpec& spec, const attr::Tagger& tagger);

AttributeRecall attribute_recall(const std::vector<std::string>& candidates,
                                 const std::vector<corpus::SceneSpec>& specs, const attr::Tagger& tagger);

/// A hit shares at least one object lemma and the action lemma with the query scene.
bool retrieval_hit(const attr::AttributeRecord& query, const attr::AttributeRecord& entry);

/// Fraction of queries with at least one hit among the top-k entries.
/// `entry_truth[i]` holds the ground-truth attributes of database entry i.
double retrieval_recall(const retrieval::RetrievalDatabase& db, const std::vector<attr::AttributeRecord>& entry_truth,
                        const std::vector<float>& queries, const std::vector<attr::AttributeRecord>& query_truth,
                        int k, const std::vector<std::string>& exclude_ids = {});

struct SplitMetrics {
  double bleu4 = 0.0;
  double cider = 0.0;
  AttributeRecall recall;
  double retrieval_recall = 0.0;
};

struct MetricReport {
  std::string run_id;
  std::string config_hash;
  std::map<std::string, SplitMetrics> splits;  // "test-in", "test-out"
};

/// One finished run as seen by the report writer.
struct RunSummary {
  std::string run_id;
  std::string axis;      // ablation axis, empty for a plain run
  std::string value;     // axis value
  std::string seed;      // seed label
  std::string paired_hash;  // config hash with the axis and seed keys removed
  MetricReport report;
};

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes <axis>.csv (one row per axis value, seed-mean and std) and, for
/// sweep axes, <axis>.svg. Returns the written paths.
std::vector<std::filesystem::path> render_report(const std::vector<RunSummary>& runs,
                                                 const std::filesystem::path& out_dir);

/// Axes whose values are numeric and get a line plot.
bool is_sweep_axis(const std::string& axis);

}  // namespace ragcap::eval
