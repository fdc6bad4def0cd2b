#include "cwe/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "cwe/io_util.hpp"
#include "cwe/kernels.hpp"
#include "cwe/rng.hpp"
#include "cwe/tokenizer.hpp"

namespace cwe::analysis {

LayerPolicy LayerPolicy::parse(const std::string& text) {
  if (text == "last") return last();
  if (text == "mean-last-4") return mean_last_4();
  if (text.size() > 7 && text.rfind("layer(", 0) == 0 && text.back() == ')') {
    const std::string digits = text.substr(6, text.size() - 7);
    if (!digits.empty() &&
        digits.find_first_not_of("0123456789") == std::string::npos) {
      return layer(std::stoi(digits));
    }
  }
  throw std::invalid_argument(
      "layer policy must be 'last', 'mean-last-4' or 'layer(i)', got '" +
      text + "'");
}

std::string LayerPolicy::to_string() const {
  switch (kind) {
    case Kind::kLast:
      return "last";
    case Kind::kMeanLast4:
      return "mean-last-4";
    case Kind::kIndex:
      return "layer(" + std::to_string(index) + ")";
  }
  return "last";
}

std::vector<Occurrence> find_occurrences(
    const std::vector<filter::ParagraphRecord>& corpus,
    const std::string& term) {
  if (term.empty()) {
    throw std::invalid_argument("term must be non-empty");
  }
  const std::vector<std::string> needle = tok::basic_tokenize(term);
  std::vector<Occurrence> hits;
  if (needle.empty()) return hits;
  for (std::size_t r = 0; r < corpus.size(); ++r) {
    const std::vector<std::string> words = tok::basic_tokenize(corpus[r].text);
    if (words.size() < needle.size()) continue;
    for (std::size_t w = 0; w + needle.size() <= words.size(); ++w) {
      bool match = true;
      for (std::size_t j = 0; j < needle.size(); ++j) {
        if (words[w + j] != needle[j]) {
          match = false;
          break;
        }
      }
      if (match) {
        hits.push_back(Occurrence{r, static_cast<std::int32_t>(w)});
      }
    }
  }
  return hits;
}

ExtractResult extract_cwe(const model::Parameters<float>& params,
                          const std::vector<filter::ParagraphRecord>& corpus,
                          const std::vector<Occurrence>& occurrences,
                          const tok::Vocab& vocab, const std::string& term,
                          LayerPolicy policy, int threads) {
  const auto h = static_cast<std::size_t>(params.config.hidden_dim);
  const std::size_t needle_words = tok::basic_tokenize(term).size();
  // Worker threads cannot propagate exceptions; reject bad layer indices up
  // front.
  if (policy.kind == LayerPolicy::Kind::kIndex &&
      (policy.index < 0 || policy.index > params.config.num_layers)) {
    throw std::invalid_argument("layer index out of range: " +
                                std::to_string(policy.index));
  }

  // One forward per distinct paragraph.
  std::vector<std::size_t> record_of;
  std::vector<std::vector<std::size_t>> occ_of_record;
  {
    std::map<std::size_t, std::vector<std::size_t>> grouped;
    for (std::size_t i = 0; i < occurrences.size(); ++i) {
      grouped[occurrences[i].record_index].push_back(i);
    }
    for (auto& [rec, occs] : grouped) {
      record_of.push_back(rec);
      occ_of_record.push_back(std::move(occs));
    }
  }

  std::vector<std::vector<EmbeddingRecord>> partial(record_of.size());
  std::vector<std::int64_t> skipped(record_of.size(), 0);

  io::parallel_for(record_of.size(), threads, [&](std::size_t gi) {
    const filter::ParagraphRecord& rec = corpus[record_of[gi]];
    tok::TokenSequence seq =
        tok::encode(rec.text, vocab,
                    static_cast<std::size_t>(params.config.max_positions));
    model::BatchView view;
    std::vector<std::int32_t> mask(seq.ids.size(), 1);
    view.input_ids = seq.ids.data();
    view.attention_mask = mask.data();
    view.rows = 1;
    view.row_length = static_cast<std::int32_t>(seq.ids.size());
    model::ForwardCache<float> cache;
    model::forward(params, view, cache);

    const std::size_t n_outputs = cache.layer_outputs.size();
    std::vector<const std::vector<float>*> pooled_layers;
    switch (policy.kind) {
      case LayerPolicy::Kind::kLast:
        pooled_layers.push_back(&cache.layer_outputs.back());
        break;
      case LayerPolicy::Kind::kMeanLast4: {
        const std::size_t take = std::min<std::size_t>(4, n_outputs);
        for (std::size_t i = n_outputs - take; i < n_outputs; ++i) {
          pooled_layers.push_back(&cache.layer_outputs[i]);
        }
        break;
      }
      case LayerPolicy::Kind::kIndex: {
        if (policy.index < 0 ||
            static_cast<std::size_t>(policy.index) >= n_outputs) {
          throw std::invalid_argument("layer index out of range: " +
                                      std::to_string(policy.index));
        }
        pooled_layers.push_back(
            &cache.layer_outputs[static_cast<std::size_t>(policy.index)]);
        break;
      }
    }

    for (std::size_t oi : occ_of_record[gi]) {
      const Occurrence& occ = occurrences[oi];
      // Subword span of the matched word run.
      std::int32_t begin = -1;
      std::int32_t end = -1;
      for (std::size_t p = 0; p < seq.word_ids.size(); ++p) {
        const std::int32_t w = seq.word_ids[p];
        if (w == tok::kSpecialWordId) continue;
        if (w >= occ.word_index &&
            w < occ.word_index + static_cast<std::int32_t>(needle_words)) {
          if (begin < 0) begin = static_cast<std::int32_t>(p);
          end = static_cast<std::int32_t>(p) + 1;
        }
      }
      // The encoder cap may have truncated the term away.
      bool complete = begin >= 0;
      if (complete) {
        const std::int32_t last_word =
            seq.word_ids[static_cast<std::size_t>(end - 1)];
        complete = last_word ==
                   occ.word_index + static_cast<std::int32_t>(needle_words) -
                       1;
      }
      if (!complete) {
        ++skipped[gi];
        continue;
      }

      EmbeddingRecord er;
      er.term = term;
      er.arxiv_id = rec.arxiv_id;
      er.position = rec.position;
      er.year = rec.year;
      er.span_begin = begin;
      er.span_end = end;
      er.vector.assign(h, 0.0f);
      for (const auto* layer : pooled_layers) {
        for (std::int32_t p = begin; p < end; ++p) {
          kernels::axpy(1.0f,
                        layer->data() + static_cast<std::size_t>(p) * h,
                        er.vector.data(), h);
        }
      }
      const float denom = static_cast<float>(end - begin) *
                          static_cast<float>(pooled_layers.size());
      kernels::scale(er.vector.data(), 1.0f / denom, h);
      partial[gi].push_back(std::move(er));
    }
  });

  ExtractResult result;
  for (std::size_t gi = 0; gi < partial.size(); ++gi) {
    result.skipped_truncated += skipped[gi];
    for (auto& er : partial[gi]) result.records.push_back(std::move(er));
  }
  return result;
}

namespace {

std::vector<std::vector<float>> normalize_all(
    const std::vector<EmbeddingRecord>& records) {
  std::vector<std::vector<float>> unit(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    unit[i] = records[i].vector;
    const std::size_t h = unit[i].size();
    const float norm = std::sqrt(
        kernels::dot(unit[i].data(), unit[i].data(), h));
    if (norm > 0.0f) kernels::scale(unit[i].data(), 1.0f / norm, h);
  }
  return unit;
}

struct KMeansResult {
  std::vector<std::vector<float>> centroids;
  std::vector<std::int32_t> assignment;
};

KMeansResult spherical_kmeans(const std::vector<std::vector<float>>& points,
                              std::int32_t k, std::uint64_t seed) {
  const std::size_t n = points.size();
  const std::size_t h = points[0].size();
  DetRng rng(seed);

  // Greedy farthest-point seeding.
  std::vector<std::size_t> centers;
  centers.push_back(static_cast<std::size_t>(rng.next_below(n)));
  std::vector<float> best_sim(n, -2.0f);  // max similarity to any center
  while (centers.size() < static_cast<std::size_t>(k)) {
    const auto& c = points[centers.back()];
    for (std::size_t i = 0; i < n; ++i) {
      best_sim[i] = std::max(best_sim[i],
                             kernels::dot(points[i].data(), c.data(), h));
    }
    std::size_t farthest = 0;
    float lowest = 2.0f;
    for (std::size_t i = 0; i < n; ++i) {
      if (best_sim[i] < lowest) {
        lowest = best_sim[i];
        farthest = i;
      }
    }
    centers.push_back(farthest);
  }

  KMeansResult res;
  res.centroids.resize(static_cast<std::size_t>(k));
  for (std::int32_t c = 0; c < k; ++c) {
    res.centroids[static_cast<std::size_t>(c)] =
        points[centers[static_cast<std::size_t>(c)]];
  }
  res.assignment.assign(n, -1);

  for (int iter = 0; iter < 300; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::int32_t best = 0;
      float best_dot = -2.0f;
      for (std::int32_t c = 0; c < k; ++c) {
        const float d = kernels::dot(
            points[i].data(), res.centroids[static_cast<std::size_t>(c)].data(),
            h);
        if (d > best_dot) {
          best_dot = d;
          best = c;
        }
      }
      if (res.assignment[i] != best) {
        res.assignment[i] = best;
        changed = true;
      }
    }
    if (!changed) break;

    std::vector<std::vector<float>> sums(
        static_cast<std::size_t>(k), std::vector<float>(h, 0.0f));
    std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(res.assignment[i]);
      kernels::axpy(1.0f, points[i].data(), sums[c].data(), h);
      ++counts[c];
    }
    for (std::int32_t c = 0; c < k; ++c) {
      auto& sum = sums[static_cast<std::size_t>(c)];
      const float norm = std::sqrt(kernels::dot(sum.data(), sum.data(), h));
      if (counts[static_cast<std::size_t>(c)] == 0 || norm == 0.0f) {
        // Reseed an empty cluster at the globally worst-served point.
        std::size_t worst = 0;
        float lowest = 2.0f;
        for (std::size_t i = 0; i < n; ++i) {
          const float d = kernels::dot(
              points[i].data(),
              res.centroids[static_cast<std::size_t>(res.assignment[i])]
                  .data(),
              h);
          if (d < lowest) {
            lowest = d;
            worst = i;
          }
        }
        res.centroids[static_cast<std::size_t>(c)] = points[worst];
        continue;
      }
      kernels::scale(sum.data(), 1.0f / norm, h);
      res.centroids[static_cast<std::size_t>(c)] = sum;
    }
  }
  return res;
}

}  // namespace

double mean_silhouette(const std::vector<std::vector<float>>& unit_vectors,
                       const std::vector<std::int32_t>& assignment,
                       std::int32_t k) {
  const std::size_t n = unit_vectors.size();
  const std::size_t h = unit_vectors[0].size();
  std::vector<std::int64_t> sizes(static_cast<std::size_t>(k), 0);
  for (auto a : assignment) ++sizes[static_cast<std::size_t>(a)];

  double total = 0.0;
  std::vector<double> mean_dist(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(mean_dist.begin(), mean_dist.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double d = 1.0 - kernels::dot(unit_vectors[i].data(),
                                          unit_vectors[j].data(), h);
      mean_dist[static_cast<std::size_t>(assignment[j])] += d;
    }
    const auto own = static_cast<std::size_t>(assignment[i]);
    double a = 0.0;
    if (sizes[own] > 1) {
      a = mean_dist[own] / static_cast<double>(sizes[own] - 1);
    } else {
      continue;  // singleton: convention s = 0, contributes nothing
    }
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c) {
      if (c == own || sizes[c] == 0) continue;
      b = std::min(b, mean_dist[c] / static_cast<double>(sizes[c]));
    }
    const double denom = std::max(a, b);
    if (denom > 0.0 && std::isfinite(b)) total += (b - a) / denom;
  }
  return total / static_cast<double>(n);
}

std::vector<SenseCluster> cluster_senses(
    const std::vector<EmbeddingRecord>& records, int k, std::uint64_t seed,
    std::size_t exemplars) {
  const std::size_t n = records.size();
  if (n == 0) {
    throw std::invalid_argument("cluster_senses: no records");
  }
  std::vector<std::vector<float>> unit = normalize_all(records);

  std::int32_t chosen_k = static_cast<std::int32_t>(k);
  KMeansResult best;
  if (k == kAutoK) {
    // k = n would make every cluster a singleton (silhouette degenerate), so
    // the sweep stays strictly below n.
    const auto max_k = static_cast<std::int32_t>(
        std::min<std::size_t>(10, n - 1));
    if (max_k < 2) {
      throw std::invalid_argument(
          "cluster_senses: need at least 3 records for AUTO k");
    }
    double best_score = -2.0;
    for (std::int32_t kk = 2; kk <= max_k; ++kk) {
      KMeansResult candidate = spherical_kmeans(unit, kk, seed);
      const double score = mean_silhouette(unit, candidate.assignment, kk);
      if (score > best_score) {
        best_score = score;
        best = std::move(candidate);
        chosen_k = kk;
      }
    }
  } else {
    if (k < 1) throw std::invalid_argument("cluster_senses: k must be >= 1");
    if (n < static_cast<std::size_t>(k)) {
      throw std::invalid_argument(
          "cluster_senses: fewer records (" + std::to_string(n) +
          ") than clusters (" + std::to_string(k) + ")");
    }
    best = spherical_kmeans(unit, chosen_k, seed);
  }

  std::vector<SenseCluster> clusters(static_cast<std::size_t>(chosen_k));
  for (std::int32_t c = 0; c < chosen_k; ++c) {
    clusters[static_cast<std::size_t>(c)].centroid =
        best.centroids[static_cast<std::size_t>(c)];
  }
  for (std::size_t i = 0; i < n; ++i) {
    clusters[static_cast<std::size_t>(best.assignment[i])]
        .member_ids.push_back(i);
  }

  // Label in decreasing size order (stable under the original index).
  std::vector<std::size_t> order(clusters.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (clusters[a].member_ids.size() != clusters[b].member_ids.size()) {
      return clusters[a].member_ids.size() > clusters[b].member_ids.size();
    }
    return a < b;
  });
  std::vector<SenseCluster> out;
  out.reserve(clusters.size());
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    SenseCluster c = std::move(clusters[order[rank]]);
    c.cluster_id = static_cast<std::int32_t>(rank);
    // Exemplars: nearest to centroid, ties by provenance.
    std::vector<std::size_t> ex = c.member_ids;
    const std::size_t h = c.centroid.size();
    std::sort(ex.begin(), ex.end(), [&](std::size_t a, std::size_t b) {
      const float da = kernels::dot(unit[a].data(), c.centroid.data(), h);
      const float db = kernels::dot(unit[b].data(), c.centroid.data(), h);
      if (da != db) return da > db;
      if (records[a].arxiv_id != records[b].arxiv_id) {
        return records[a].arxiv_id < records[b].arxiv_id;
      }
      return records[a].position < records[b].position;
    });
    if (ex.size() > exemplars) ex.resize(exemplars);
    c.exemplar_ids = std::move(ex);
    out.push_back(std::move(c));
  }
  return out;
}

SenseTimeline sense_timeline(const std::vector<SenseCluster>& clusters,
                             const std::vector<EmbeddingRecord>& records) {
  SenseTimeline timeline;
  std::map<int, std::int64_t> totals;
  std::map<int, std::map<std::int32_t, std::int64_t>> counts;
  for (const auto& cluster : clusters) {
    for (std::size_t member : cluster.member_ids) {
      const int year = records[member].year;
      ++totals[year];
      ++counts[year][cluster.cluster_id];
    }
  }
  for (const auto& [year, total] : totals) {
    for (const auto& [cid, count] : counts[year]) {
      timeline.proportions[year][cid] =
          static_cast<double>(count) / static_cast<double>(total);
    }
  }
  return timeline;
}

std::vector<std::string> nearest_contexts(
    const SenseCluster& cluster, const std::vector<EmbeddingRecord>& records,
    const std::function<std::string(const std::string&, int)>& paragraph_text,
    std::size_t n) {
  std::vector<std::size_t> members = cluster.member_ids;
  const std::size_t h = cluster.centroid.size();
  // Cosine against the unit centroid; member vectors normalized on the fly.
  auto cosine = [&](std::size_t i) {
    const auto& v = records[i].vector;
    const float norm = std::sqrt(kernels::dot(v.data(), v.data(), h));
    if (norm == 0.0f) return -2.0f;
    return kernels::dot(v.data(), cluster.centroid.data(), h) / norm;
  };
  std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
    const float ca = cosine(a);
    const float cb = cosine(b);
    if (ca != cb) return ca > cb;
    if (records[a].arxiv_id != records[b].arxiv_id) {
      return records[a].arxiv_id < records[b].arxiv_id;
    }
    return records[a].position < records[b].position;
  });
  if (members.size() > n) members.resize(n);
  std::vector<std::string> texts;
  texts.reserve(members.size());
  for (std::size_t m : members) {
    texts.push_back(paragraph_text(records[m].arxiv_id, records[m].position));
  }
  return texts;
}

}  // namespace cwe::analysis
