#include "support/synthetic.hpp"

#include <map>
#include <stdexcept>

namespace testsup {

std::vector<std::string> make_words(std::size_t n) {
  static const char* consonants = "bcdfgklmnprstvz";
  static const char* vowels = "aeiou";
  std::vector<std::string> syllables;
  for (const char* c = consonants; *c; ++c) {
    for (const char* v = vowels; *v; ++v) {
      syllables.push_back(std::string{*c, *v});
    }
  }
  std::vector<std::string> words;
  words.reserve(n);
  for (std::size_t i = 0; words.size() < n; ++i) {
    const std::string w =
        syllables[i / syllables.size() % syllables.size()] +
        syllables[i % syllables.size()];
    words.push_back(w);
    if (i > syllables.size() * syllables.size()) {
      throw std::runtime_error("word space exhausted");
    }
  }
  return words;
}

std::vector<std::string> vocab_lines(const std::vector<std::string>& words) {
  std::vector<std::string> lines = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                    "[MASK]"};
  lines.insert(lines.end(), words.begin(), words.end());
  return lines;
}

cwe::tok::Vocab make_vocab(const std::vector<std::string>& words) {
  return cwe::tok::Vocab::from_tokens(vocab_lines(words));
}

std::string TopicModel::paragraph(int topic, int len,
                                  cwe::DetRng& rng) const {
  const int m = words_per_topic;
  int cur = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(m)));
  std::string text;
  for (int i = 0; i < len; ++i) {
    if (i > 0) text += ' ';
    text += word(topic, cur);
    // Two possible successors keep the walk predictable but not constant.
    const int hop = rng.next_below(2) == 0 ? 1 : 3;
    cur = (cur + hop) % m;
  }
  return text;
}

TopicModel make_topic_model(int n_topics, int words_per_topic, int fillers) {
  TopicModel tm;
  tm.n_topics = n_topics;
  tm.words_per_topic = words_per_topic;
  tm.words = make_words(
      static_cast<std::size_t>(n_topics * words_per_topic + fillers));
  return tm;
}

std::vector<cwe::batch::MaskedBatch> make_batches(
    const std::vector<std::string>& texts, const cwe::tok::Vocab& vocab,
    std::int64_t budget, double rate, std::uint64_t seed, double tolerance,
    double max_pad) {
  std::vector<cwe::tok::TokenSequence> sequences;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    cwe::tok::TokenSequence seq = cwe::tok::encode(texts[i], vocab);
    seq.arxiv_id = "synthetic." + std::to_string(i);
    seq.position = 0;
    if (cwe::batch::eligible(seq)) sequences.push_back(std::move(seq));
  }
  auto packed = cwe::batch::pack(std::move(sequences), budget, tolerance,
                                 max_pad, seed);
  std::vector<cwe::batch::MaskedBatch> masked;
  masked.reserve(packed.batches.size());
  for (std::size_t i = 0; i < packed.batches.size(); ++i) {
    const std::uint64_t mask_seed = cwe::DetRng(seed).derive(i).next_u64();
    masked.push_back(cwe::batch::whole_word_mask(packed.batches[i], vocab,
                                                 rate, mask_seed));
  }
  return masked;
}

double heldout_loss(const cwe::model::Parameters<float>& params,
                    const std::vector<cwe::batch::MaskedBatch>& batches) {
  double weighted = 0.0;
  double labels = 0.0;
  for (const auto& b : batches) {
    std::int64_t n_labeled = 0;
    for (auto l : b.labels) {
      if (l != cwe::batch::kIgnoreLabel) ++n_labeled;
    }
    if (n_labeled == 0) continue;
    weighted += cwe::model::mlm_loss(params, b) *
                static_cast<double>(n_labeled);
    labels += static_cast<double>(n_labeled);
  }
  return labels > 0.0 ? weighted / labels : 0.0;
}

double adjusted_rand_index(const std::vector<int>& a,
                           const std::vector<int>& b) {
  const std::size_t n = a.size();
  std::map<int, std::map<int, std::int64_t>> table;
  std::map<int, std::int64_t> row_sum, col_sum;
  for (std::size_t i = 0; i < n; ++i) {
    ++table[a[i]][b[i]];
    ++row_sum[a[i]];
    ++col_sum[b[i]];
  }
  auto choose2 = [](std::int64_t x) {
    return static_cast<double>(x) * static_cast<double>(x - 1) / 2.0;
  };
  double sum_cells = 0.0;
  for (const auto& [ra, cols] : table) {
    for (const auto& [cb, count] : cols) sum_cells += choose2(count);
  }
  double sum_rows = 0.0;
  for (const auto& [k, v] : row_sum) sum_rows += choose2(v);
  double sum_cols = 0.0;
  for (const auto& [k, v] : col_sum) sum_cols += choose2(v);
  const double total = choose2(static_cast<std::int64_t>(n));
  const double expected = sum_rows * sum_cols / total;
  const double max_index = 0.5 * (sum_rows + sum_cols);
  if (max_index == expected) return 1.0;
  return (sum_cells - expected) / (max_index - expected);
}

}  // namespace testsup
