#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cwe/vocab.hpp"

namespace cwe::tok {

// Word id assigned to [CLS]/[SEP]/[PAD] positions.
inline constexpr std::int32_t kSpecialWordId = -1;

// One encoded paragraph: ids framed by [CLS]/[SEP], plus the index of the
// source word each subword belongs to.
struct TokenSequence {
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> word_ids;
  std::string arxiv_id;
  int position = 0;

  // Subword count excluding the [CLS]/[SEP] framing.
  std::int32_t body_size() const {
    return static_cast<std::int32_t>(ids.size()) - 2;
  }
};

// Uncased pre-tokenization: lowercase, strip accents, split on whitespace,
// isolate punctuation code points, drop control characters.
std::vector<std::string> basic_tokenize(const std::string& text);

// Greedy longest-match-first segmentation; whole word becomes [UNK] when any
// position has no vocabulary match or the word exceeds max_word_chars code
// points.
std::vector<std::string> wordpiece(const std::string& word, const Vocab& vocab,
                                   std::size_t max_word_chars = 100);

// [CLS] + subwords + [SEP], at most max_len ids. Truncation drops whole
// trailing words so a word's subwords never straddle the cut.
TokenSequence encode(const std::string& text, const Vocab& vocab,
                     std::size_t max_len = 512);

// Subword count excluding specials, without any truncation.
std::int64_t count_subwords(const std::string& text, const Vocab& vocab);

}  // namespace cwe::tok
