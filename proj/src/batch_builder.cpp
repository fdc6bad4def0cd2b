#include "cwe/batch_builder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cwe::batch {

bool eligible(const tok::TokenSequence& seq, std::int32_t min_sub,
              std::int32_t max_sub) {
  const std::int32_t body = seq.body_size();
  return body >= min_sub && body <= max_sub;
}

namespace {

constexpr std::int64_t kBucketWidth = 16;

struct Packer {
  const std::vector<tok::TokenSequence>& seqs;
  std::int64_t lo;
  std::int64_t hi;
  double max_pad;

  std::int64_t len(std::size_t idx) const {
    return static_cast<std::int64_t>(seqs[idx].ids.size());
  }

  bool fits(std::size_t n_rows, std::int64_t row_len, std::int64_t sum_real,
            std::size_t candidate) const {
    const std::int64_t l = len(candidate);
    const std::int64_t new_len = std::max(row_len, l);
    const auto new_total =
        static_cast<std::int64_t>(n_rows + 1) * new_len;
    if (new_total > hi) return false;
    const std::int64_t new_pad = new_total - (sum_real + l);
    return static_cast<double>(new_pad) <=
           max_pad * static_cast<double>(new_total);
  }
};

}  // namespace

PackResult pack(std::vector<tok::TokenSequence> sequences, std::int64_t budget,
                double tolerance, double max_pad, std::uint64_t seed) {
  PackResult result;
  if (sequences.empty()) return result;

  const std::int64_t slack = std::llround(static_cast<double>(budget) *
                                          tolerance);
  const std::int64_t lo = budget - slack;
  const std::int64_t hi = budget + slack;

  std::int64_t max_len = 0;
  for (const auto& s : sequences) {
    max_len = std::max(max_len, static_cast<std::int64_t>(s.ids.size()));
  }
  if (max_len > budget) {
    throw std::invalid_argument(
        "sequence longer than the batch token budget (" +
        std::to_string(max_len) + " > " + std::to_string(budget) + ")");
  }

  Packer packer{sequences, lo, hi, max_pad};

  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), 0);
  DetRng rng(seed);
  rng.shuffle(order);

  // Length buckets of width 16, each holding indices in shuffled order.
  const auto n_buckets =
      static_cast<std::size_t>(max_len / kBucketWidth) + 1;
  std::vector<std::vector<std::size_t>> buckets(n_buckets);
  for (std::size_t idx : order) {
    buckets[static_cast<std::size_t>(packer.len(idx) / kBucketWidth)]
        .push_back(idx);
  }
  std::vector<std::size_t> heads(n_buckets, 0);

  auto bucket_empty = [&](std::size_t b) {
    return heads[b] >= buckets[b].size();
  };

  std::vector<std::size_t> retry_pool;

  auto emit = [&](std::vector<std::size_t>& row_idx, std::int64_t row_len) {
    PackedBatch b;
    b.row_length = static_cast<std::int32_t>(row_len);
    b.rows.reserve(row_idx.size());
    for (std::size_t idx : row_idx) {
      b.rows.push_back(std::move(sequences[idx]));
    }
    result.batches.push_back(std::move(b));
  };

  // Main pass: fill batches from the longest bucket downward, spilling into
  // the adjacent lower bucket whenever the current one runs dry.
  std::size_t b = n_buckets;
  while (b > 0) {
    --b;
    if (bucket_empty(b)) continue;
    std::vector<std::size_t> rows;
    std::int64_t row_len = 0;
    std::int64_t sum_real = 0;
    std::size_t cur = b;
    while (true) {
      while (cur > 0 && bucket_empty(cur)) --cur;
      if (bucket_empty(cur)) break;  // pool exhausted
      const std::size_t candidate = buckets[cur][heads[cur]];
      if (!packer.fits(rows.size(), row_len, sum_real, candidate)) break;
      ++heads[cur];
      rows.push_back(candidate);
      row_len = std::max(row_len, packer.len(candidate));
      sum_real += packer.len(candidate);
      if (static_cast<std::int64_t>(rows.size()) * row_len >= lo) break;
    }
    if (rows.empty()) continue;
    const std::int64_t total = static_cast<std::int64_t>(rows.size()) *
                               row_len;
    if (total >= lo && total <= hi) {
      emit(rows, row_len);
    } else {
      retry_pool.insert(retry_pool.end(), rows.begin(), rows.end());
    }
    // Revisit this bucket until it drains; every attempt consumes at least
    // one sequence, so this terminates.
    ++b;
  }

  // Endgame: retry the remainder across buckets, longest first, retiring
  // one unplaceable head at a time.
  std::sort(retry_pool.begin(), retry_pool.end(),
            [&](std::size_t a, std::size_t c) {
              if (packer.len(a) != packer.len(c)) {
                return packer.len(a) > packer.len(c);
              }
              return a < c;
            });
  std::vector<bool> used(retry_pool.size(), false);
  for (std::size_t start = 0; start < retry_pool.size(); ++start) {
    if (used[start]) continue;
    std::vector<std::size_t> rows = {retry_pool[start]};
    std::vector<std::size_t> taken = {start};
    std::int64_t row_len = packer.len(retry_pool[start]);
    std::int64_t sum_real = row_len;
    if (static_cast<std::int64_t>(rows.size()) * row_len < lo) {
      for (std::size_t j = start + 1; j < retry_pool.size(); ++j) {
        if (used[j]) continue;
        if (!packer.fits(rows.size(), row_len, sum_real, retry_pool[j])) {
          continue;
        }
        rows.push_back(retry_pool[j]);
        taken.push_back(j);
        row_len = std::max(row_len, packer.len(retry_pool[j]));
        sum_real += packer.len(retry_pool[j]);
        if (static_cast<std::int64_t>(rows.size()) * row_len >= lo) break;
      }
    }
    const std::int64_t total = static_cast<std::int64_t>(rows.size()) *
                               row_len;
    if (total >= lo && total <= hi) {
      for (std::size_t j : taken) used[j] = true;
      emit(rows, row_len);
    }
    // else: only the start row is given up; deeper rows stay available.
  }
  // Remaining rows carry less than one batch of tokens, so no new batch can
  // reach the window floor. Emitted batches stopped at the first crossing of
  // it, though, which leaves headroom up to the ceiling; slot the stragglers
  // into batches that can take them without breaking either constraint.
  for (std::size_t j = 0; j < retry_pool.size(); ++j) {
    if (used[j]) continue;
    const std::int64_t l = packer.len(retry_pool[j]);
    for (auto& b : result.batches) {
      if (l > b.row_length) continue;
      const auto new_total = static_cast<std::int64_t>(b.rows.size() + 1) *
                             b.row_length;
      if (new_total > hi) continue;
      const std::int64_t new_pad = b.padding_tokens() + (b.row_length - l);
      if (static_cast<double>(new_pad) >
          max_pad * static_cast<double>(new_total)) {
        continue;
      }
      b.rows.push_back(std::move(sequences[retry_pool[j]]));
      used[j] = true;
      break;
    }
  }
  for (std::size_t j = 0; j < retry_pool.size(); ++j) {
    if (!used[j]) {
      result.leftovers.push_back(std::move(sequences[retry_pool[j]]));
    }
  }
  return result;
}

MaskedBatch whole_word_mask(const PackedBatch& batch, const tok::Vocab& vocab,
                            double rate, std::uint64_t seed, double p_mask,
                            double p_random) {
  MaskedBatch out;
  out.rows = static_cast<std::int32_t>(batch.rows.size());
  out.row_length = batch.row_length;
  out.mask_seed = seed;
  const std::int64_t n = out.size();
  out.input_ids.assign(n, vocab.pad_id());
  out.labels.assign(n, kIgnoreLabel);
  out.attention_mask.assign(n, 0);

  DetRng rng(seed);
  const auto n_replacement_ids =
      static_cast<std::uint64_t>(vocab.non_special_size());

  for (std::int32_t r = 0; r < out.rows; ++r) {
    const tok::TokenSequence& seq = batch.rows[r];
    const std::int64_t base = static_cast<std::int64_t>(r) * out.row_length;
    for (std::size_t p = 0; p < seq.ids.size(); ++p) {
      out.input_ids[base + p] = seq.ids[p];
      out.attention_mask[base + p] = 1;
    }

    // Maximal word_id runs over the body positions.
    std::vector<std::pair<std::int32_t, std::int32_t>> words;
    for (std::size_t p = 0; p < seq.word_ids.size(); ++p) {
      if (seq.word_ids[p] == tok::kSpecialWordId) continue;
      if (!words.empty() &&
          seq.word_ids[p] == seq.word_ids[words.back().second - 1] &&
          static_cast<std::int32_t>(p) == words.back().second) {
        ++words.back().second;
      } else {
        words.emplace_back(static_cast<std::int32_t>(p),
                           static_cast<std::int32_t>(p) + 1);
      }
    }
    if (words.empty()) {
      ++out.rows_without_maskable_words;
      continue;
    }
    const auto body = static_cast<std::int64_t>(seq.body_size());
    const auto target = static_cast<std::int64_t>(
        std::ceil(rate * static_cast<double>(body)));
    if (target <= 0) continue;

    std::vector<std::size_t> order(words.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    std::int64_t selected = 0;
    for (std::size_t w : order) {
      if (selected >= target) break;
      const auto [begin_pos, end_pos] = words[w];
      for (std::int32_t p = begin_pos; p < end_pos; ++p) {
        out.labels[base + p] = seq.ids[p];
        const double u = rng.next_double();
        if (u < p_mask) {
          out.input_ids[base + p] = vocab.mask_id();
        } else if (u < p_mask + p_random) {
          out.input_ids[base + p] = vocab.non_special_id(
              static_cast<std::int32_t>(rng.next_below(n_replacement_ids)));
        }
        // else: keep the original id, label only.
      }
      selected += end_pos - begin_pos;
    }
  }
  return out;
}

}  // namespace cwe::batch
