#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cwe/corpus_filter.hpp"
#include "cwe/encoder.hpp"
#include "cwe/vocab.hpp"

namespace cwe::analysis {

// Which hidden states a contextualized vector is pooled from.
struct LayerPolicy {
  enum class Kind { kLast, kMeanLast4, kIndex };
  Kind kind = Kind::kLast;
  int index = 0;  // for kIndex: 0 = embedding output, i = after layer i

  static LayerPolicy last() { return {Kind::kLast, 0}; }
  static LayerPolicy mean_last_4() { return {Kind::kMeanLast4, 0}; }
  static LayerPolicy layer(int i) { return {Kind::kIndex, i}; }

  // Accepts "last", "mean-last-4", "layer(i)".
  static LayerPolicy parse(const std::string& text);
  std::string to_string() const;
};

struct Occurrence {
  std::size_t record_index = 0;  // into the corpus record vector
  std::int32_t word_index = 0;   // basic-token index of the term's first word
};

// Every paragraph position whose basic tokens match the (uncased) term;
// multi-word terms match as contiguous basic-token runs.
std::vector<Occurrence> find_occurrences(
    const std::vector<filter::ParagraphRecord>& corpus,
    const std::string& term);

struct EmbeddingRecord {
  std::vector<float> vector;
  std::string term;
  std::string arxiv_id;
  int position = 0;
  int year = 0;
  std::int32_t span_begin = 0;  // subword offsets within the sequence
  std::int32_t span_end = 0;
};

struct ExtractResult {
  std::vector<EmbeddingRecord> records;
  std::int64_t skipped_truncated = 0;
};

// Forward once per paragraph; the vector for each occurrence is the mean of
// its subword states at the policy's layer(s). Occurrences whose span fell
// past the 512-token cap are skipped and counted.
ExtractResult extract_cwe(const model::Parameters<float>& params,
                          const std::vector<filter::ParagraphRecord>& corpus,
                          const std::vector<Occurrence>& occurrences,
                          const tok::Vocab& vocab, const std::string& term,
                          LayerPolicy policy = LayerPolicy::last(),
                          int threads = 1);

struct SenseCluster {
  std::int32_t cluster_id = 0;
  std::vector<float> centroid;          // unit norm
  std::vector<std::size_t> member_ids;  // indices into the record vector
  std::vector<std::size_t> exemplar_ids;  // nearest-to-centroid members
};

inline constexpr int kAutoK = 0;

// Spherical k-means on length-normalized vectors: greedy farthest-point
// seeding from the seeded generator, iteration to an assignment fixpoint or
// 300 rounds. k = kAutoK picks k in [2, 10] by mean cosine silhouette.
// Clusters are labeled in decreasing size order. Throws
// std::invalid_argument when there are fewer records than k.
std::vector<SenseCluster> cluster_senses(
    const std::vector<EmbeddingRecord>& records, int k, std::uint64_t seed,
    std::size_t exemplars = 5);

// Mean cosine silhouette of an assignment (test hook + AUTO-k criterion).
double mean_silhouette(const std::vector<std::vector<float>>& unit_vectors,
                       const std::vector<std::int32_t>& assignment,
                       std::int32_t k);

struct SenseTimeline {
  // year -> (cluster_id -> proportion); only years with occurrences appear.
  std::map<int, std::map<std::int32_t, double>> proportions;
};

SenseTimeline sense_timeline(const std::vector<SenseCluster>& clusters,
                             const std::vector<EmbeddingRecord>& records);

// Texts of the n members closest to the centroid, ties broken by
// (arxiv_id, position). `paragraph_text` resolves provenance to text.
std::vector<std::string> nearest_contexts(
    const SenseCluster& cluster, const std::vector<EmbeddingRecord>& records,
    const std::function<std::string(const std::string&, int)>& paragraph_text,
    std::size_t n = 5);

}  // namespace cwe::analysis
