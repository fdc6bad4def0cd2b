#pragma once

#include <cstdint>
#include <vector>

#include "cwe/rng.hpp"
#include "cwe/tokenizer.hpp"
#include "cwe/vocab.hpp"

namespace cwe::batch {

// Label value at positions that do not participate in the MLM loss.
inline constexpr std::int32_t kIgnoreLabel = -100;

struct PackedBatch {
  std::vector<tok::TokenSequence> rows;
  std::int32_t row_length = 0;

  std::int64_t total_tokens() const {
    return static_cast<std::int64_t>(rows.size()) * row_length;
  }
  std::int64_t padding_tokens() const {
    std::int64_t pad = 0;
    for (const auto& r : rows) {
      pad += row_length - static_cast<std::int64_t>(r.ids.size());
    }
    return pad;
  }
};

// Rectangular MLM training example: row-major [rows x row_length] arrays.
struct MaskedBatch {
  std::int32_t rows = 0;
  std::int32_t row_length = 0;
  std::vector<std::int32_t> input_ids;
  std::vector<std::int32_t> labels;          // kIgnoreLabel where unmasked
  std::vector<std::int32_t> attention_mask;  // 1 real, 0 padding
  std::uint64_t mask_seed = 0;
  // Rows that contained no maskable word and were emitted unmasked.
  std::int32_t rows_without_maskable_words = 0;

  std::int64_t size() const {
    return static_cast<std::int64_t>(rows) * row_length;
  }
};

struct PackResult {
  std::vector<PackedBatch> batches;
  std::vector<tok::TokenSequence> leftovers;
};

// True iff the body (excluding [CLS]/[SEP]) has min_sub..max_sub subwords.
bool eligible(const tok::TokenSequence& seq, std::int32_t min_sub = 48,
              std::int32_t max_sub = 510);

// Packs sequences into token-budgeted batches: shuffle, bucket by total
// length (bucket width 16), then fill each batch from one bucket, spilling
// into adjacent lower buckets as they empty, so rows stay similar in length.
// Every emitted batch satisfies
//   total_tokens in [budget*(1-tolerance), budget*(1+tolerance)]
//   padding_tokens <= max_pad * total_tokens.
// Sequences that cannot be placed under both constraints come back as
// leftovers; nothing is dropped. Throws std::invalid_argument when a single
// sequence is longer than the budget.
PackResult pack(std::vector<tok::TokenSequence> sequences,
                std::int64_t budget = 8192, double tolerance = 0.05,
                double max_pad = 0.20, std::uint64_t seed = 0);

// Whole-word masking: per row, whole words are selected in random order
// until the selected subword count first reaches ceil(rate * body subwords);
// every subword of a selected word is labeled, then independently replaced
// by [MASK] (p=0.8), a random non-special id (p=0.1), or kept (p=0.1).
// Specials and padding are never selected.
MaskedBatch whole_word_mask(const PackedBatch& batch, const tok::Vocab& vocab,
                            double rate = 0.15, std::uint64_t seed = 0,
                            double p_mask = 0.8, double p_random = 0.1);

}  // namespace cwe::batch
