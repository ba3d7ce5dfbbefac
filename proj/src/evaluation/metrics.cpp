#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "ragcap/evaluation.hpp"

namespace ragcap::eval {

std::vector<std::string> metric_tokens(const std::string& text) { return attr::tokenize(text); }

namespace {

using Ngram = std::vector<std::string>;
using Counts = std::map<Ngram, int>;

Counts ngram_counts(const std::vector<std::string>& toks, int n) {
  Counts c;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i) {
    ++c[Ngram(toks.begin() + static_cast<std::ptrdiff_t>(i), toks.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  }
  return c;
}

void check_pairs(std::size_t candidates, const std::vector<std::vector<std::string>>& references, const char* who) {
  if (candidates == 0) throw MetricError(std::string(who) + ": empty candidate list");
  if (references.size() != candidates) throw MetricError(std::string(who) + ": one reference set per candidate required");
  for (const auto& r : references)
    if (r.empty()) throw MetricError(std::string(who) + ": every candidate needs at least one reference");
}

}  // namespace

double bleu4(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references) {
  check_pairs(candidates.size(), references, "bleu4");
  double correct[4] = {0, 0, 0, 0};
  double total[4] = {0, 0, 0, 0};
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto cand = metric_tokens(candidates[i]);
    std::vector<std::vector<std::string>> refs;
    for (const auto& r : references[i]) refs.push_back(metric_tokens(r));
    const int c = static_cast<int>(cand.size());
    int best = -1;
    for (const auto& r : refs) {
      const int len = static_cast<int>(r.size());
      if (best < 0 || std::abs(len - c) < std::abs(best - c) || (std::abs(len - c) == std::abs(best - c) && len < best)) {
        best = len;
      }
    }
    cand_len += c;
    ref_len += best;
    for (int n = 1; n <= 4; ++n) {
      Counts max_ref;
      for (const auto& r : refs)
        for (const auto& [g, k] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], k);
      for (const auto& [g, k] : ngram_counts(cand, n)) {
        auto it = max_ref.find(g);
        correct[n - 1] += std::min(k, it == max_ref.end() ? 0 : it->second);
        total[n - 1] += k;
      }
    }
  }
  double log_sum = 0.0;
  for (int n = 0; n < 4; ++n) {
    if (total[n] == 0.0) {
      log_sum += std::log(1e-6);
      continue;
    }
    if (correct[n] == 0.0) return 0.0;
    log_sum += std::log(correct[n] / total[n]);
  }
  double score = std::exp(log_sum / 4.0);
  if (cand_len < ref_len) score *= cand_len > 0 ? std::exp(1.0 - ref_len / cand_len) : 0.0;
  return score;
}

namespace {

constexpr double kCiderSigma = 6.0;

struct TfIdf {
  std::map<Ngram, double> vec[4];
  double norm[4] = {0, 0, 0, 0};
  double length = 0.0;
};

std::vector<Counts> all_orders(const std::vector<std::string>& toks) {
  std::vector<Counts> out;
  for (int n = 1; n <= 4; ++n) out.push_back(ngram_counts(toks, n));
  return out;
}

TfIdf to_vec(const std::vector<Counts>& counts, const std::map<Ngram, double>& df, double log_images) {
  TfIdf v;
  for (int n = 0; n < 4; ++n) {
    for (const auto& [g, tf] : counts[static_cast<std::size_t>(n)]) {
      auto it = df.find(g);
      const double dfv = std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
      const double w = tf * (log_images - dfv);
      v.vec[n][g] = w;
      v.norm[n] += w * w;
      if (n == 1) v.length += tf;
    }
    v.norm[n] = std::sqrt(v.norm[n]);
  }
  return v;
}

void cider_sim(const TfIdf& hyp, const TfIdf& ref, double out[4]) {
  const double delta = hyp.length - ref.length;
  for (int n = 0; n < 4; ++n) {
    double val = 0.0;
    for (const auto& [g, w] : hyp.vec[n]) {
      auto it = ref.vec[n].find(g);
      if (it == ref.vec[n].end()) continue;
      val += std::min(w, it->second) * it->second;
    }
    if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) val /= hyp.norm[n] * ref.norm[n];
    out[n] = val * std::exp(-(delta * delta) / (2.0 * kCiderSigma * kCiderSigma));
  }
}

}  // namespace

double cider(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references) {
  check_pairs(candidates.size(), references, "cider");
  if (candidates.size() == 1) spdlog::warn("cider: single-image corpus; document frequencies come from one image");

  std::vector<std::vector<std::vector<Counts>>> ref_counts(references.size());
  std::map<Ngram, double> df;
  for (std::size_t i = 0; i < references.size(); ++i) {
    std::set<Ngram> seen;
    for (const auto& r : references[i]) {
      ref_counts[i].push_back(all_orders(metric_tokens(r)));
      for (const auto& order : ref_counts[i].back())
        for (const auto& [g, k] : order) seen.insert(g);
    }
    for (const auto& g : seen) df[g] += 1.0;
  }
  const double log_images = std::log(static_cast<double>(references.size()));

  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const TfIdf hyp = to_vec(all_orders(metric_tokens(candidates[i])), df, log_images);
    double acc[4] = {0, 0, 0, 0};
    for (const auto& rc : ref_counts[i]) {
      double s[4];
      cider_sim(hyp, to_vec(rc, df, log_images), s);
      for (int n = 0; n < 4; ++n) acc[n] += s[n];
    }
    double mean = (acc[0] + acc[1] + acc[2] + acc[3]) / 4.0;
    mean /= static_cast<double>(ref_counts[i].size());
    total += mean * 10.0;
  }
  return total / static_cast<double>(candidates.size());
}

attr::AttributeRecord spec_attributes(const corpus::SceneSpec& spec, const attr::Tagger& tagger) {
  attr::AttributeRecord r;
  for (const auto& o : spec.objects) r.add(attr::Category::Object, tagger.lemmatize(o.shape));
  r.add(attr::Category::Action, tagger.lemmatize(spec.action));
  r.add(attr::Category::Environment, tagger.lemmatize(spec.environment));
  return r;
}

AttributeRecall attribute_recall(const std::vector<std::string>& candidates,
                                 const std::vector<corpus::SceneSpec>& specs, const attr::Tagger& tagger) {
  if (candidates.size() != specs.size()) throw MetricError("attribute_recall: one spec per candidate required");
  double found[3] = {0, 0, 0}, wanted[3] = {0, 0, 0};
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto gt = spec_attributes(specs[i], tagger);
    const auto got = attr::parse_caption(candidates[i], tagger);
    int ci = 0;
    for (attr::Category c : attr::kAttributeCategories) {
      for (const auto& t : gt.terms(c)) {
        wanted[ci] += 1.0;
        if (got.contains(c, t)) found[ci] += 1.0;
      }
      ++ci;
    }
  }
  auto ratio = [](double f, double w) { return w > 0.0 ? f / w : 0.0; };
  return {ratio(found[0], wanted[0]), ratio(found[1], wanted[1]), ratio(found[2], wanted[2])};
}

bool retrieval_hit(const attr::AttributeRecord& query, const attr::AttributeRecord& entry) {
  bool object = false;
  for (const auto& o : query.objects) object = object || entry.contains(attr::Category::Object, o);
  bool action = false;
  for (const auto& a : query.actions) action = action || entry.contains(attr::Category::Action, a);
  return object && action;
}

double retrieval_recall(const retrieval::RetrievalDatabase& db, const std::vector<attr::AttributeRecord>& entry_truth,
                        const std::vector<float>& queries, const std::vector<attr::AttributeRecord>& query_truth,
                        int k, const std::vector<std::string>& exclude_ids) {
  if (entry_truth.size() != db.size()) throw MetricError("retrieval_recall: one truth record per database entry");
  const int d = db.info().d_emb;
  if (queries.size() != query_truth.size() * static_cast<std::size_t>(d)) {
    throw MetricError("retrieval_recall: one query row per truth record");
  }
  if (query_truth.empty()) return 0.0;
  int hits = 0;
  for (std::size_t i = 0; i < query_truth.size(); ++i) {
    const std::string exclude = exclude_ids.empty() ? std::string() : exclude_ids[i];
    for (const auto& h : db.query(queries.data() + i * static_cast<std::size_t>(d), k, exclude)) {
      if (retrieval_hit(query_truth[i], entry_truth[h.index])) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(query_truth.size());
}

}  // namespace ragcap::eval
