#include "cwe/tokenizer.hpp"

#include "cwe/text_utils.hpp"

namespace cwe::tok {

std::vector<std::string> basic_tokenize(const std::string& text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&]() {
    if (!current.empty()) {
      words.push_back(current);
      current.clear();
    }
  };
  std::size_t pos = 0;
  while (pos < text.size()) {
    char32_t cp = text::decode_utf8(text, pos);
    if (text::is_dropped_control(cp)) continue;
    if (text::is_unicode_whitespace(cp)) {
      flush();
      continue;
    }
    if (text::is_punctuation(cp)) {
      flush();
      std::string punct;
      text::append_utf8(punct, cp);
      words.push_back(punct);
      continue;
    }
    for (char32_t folded : text::fold_codepoint(cp)) {
      text::append_utf8(current, folded);
    }
  }
  flush();
  return words;
}

std::vector<std::string> wordpiece(const std::string& word, const Vocab& vocab,
                                   std::size_t max_word_chars) {
  std::vector<char32_t> cps = text::to_codepoints(word);
  if (cps.empty()) return {};
  if (cps.size() > max_word_chars) return {kUnkToken};

  std::vector<std::string> pieces;
  std::size_t start = 0;
  while (start < cps.size()) {
    std::size_t end = cps.size();
    std::string match;
    while (start < end) {
      std::string candidate = start > 0 ? "##" : "";
      for (std::size_t i = start; i < end; ++i) {
        text::append_utf8(candidate, cps[i]);
      }
      if (vocab.contains(candidate)) {
        match = std::move(candidate);
        break;
      }
      --end;
    }
    if (match.empty()) return {kUnkToken};
    pieces.push_back(std::move(match));
    start = end;
  }
  return pieces;
}

TokenSequence encode(const std::string& text, const Vocab& vocab,
                     std::size_t max_len) {
  TokenSequence seq;
  seq.ids.push_back(vocab.cls_id());
  seq.word_ids.push_back(kSpecialWordId);

  const std::size_t budget = max_len >= 2 ? max_len - 2 : 0;
  std::vector<std::string> words = basic_tokenize(text);
  std::size_t used = 0;
  for (std::size_t w = 0; w < words.size(); ++w) {
    std::vector<std::string> pieces = wordpiece(words[w], vocab);
    if (used + pieces.size() > budget) break;  // drop the partial final word
    for (const auto& piece : pieces) {
      seq.ids.push_back(vocab.id_of(piece));
      seq.word_ids.push_back(static_cast<std::int32_t>(w));
    }
    used += pieces.size();
  }
  seq.ids.push_back(vocab.sep_id());
  seq.word_ids.push_back(kSpecialWordId);
  return seq;
}

std::int64_t count_subwords(const std::string& text, const Vocab& vocab) {
  std::int64_t count = 0;
  for (const auto& word : basic_tokenize(text)) {
    count += static_cast<std::int64_t>(wordpiece(word, vocab).size());
  }
  return count;
}

}  // namespace cwe::tok
