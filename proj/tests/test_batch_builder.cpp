#include <algorithm>
#include <map>
#include <set>
#include <vector>

#include "cwe/batch_builder.hpp"
#include "cwe/rng.hpp"
#include "doctest.h"
#include "support/synthetic.hpp"

using namespace cwe::batch;
using cwe::DetRng;
using cwe::tok::TokenSequence;

namespace {

// A sequence of `body` single-subword words (ids only matter for identity).
TokenSequence seq_of(std::int32_t body, const cwe::tok::Vocab& v,
                     int tag = 0) {
  TokenSequence s;
  s.ids.push_back(v.cls_id());
  s.word_ids.push_back(cwe::tok::kSpecialWordId);
  for (std::int32_t i = 0; i < body; ++i) {
    s.ids.push_back(v.non_special_id(i % v.non_special_size()));
    s.word_ids.push_back(i);
  }
  s.ids.push_back(v.sep_id());
  s.word_ids.push_back(cwe::tok::kSpecialWordId);
  s.arxiv_id = "t" + std::to_string(tag);
  s.position = tag;
  return s;
}

cwe::tok::Vocab small_vocab() {
  return testsup::make_vocab(testsup::make_words(64));
}

std::multiset<std::string> names_of(const std::vector<TokenSequence>& seqs) {
  std::multiset<std::string> names;
  for (const auto& s : seqs) {
    names.insert(s.arxiv_id + "#" + std::to_string(s.position));
  }
  return names;
}

}  // namespace

TEST_CASE("eligible bounds are inclusive at 48 and 510") {
  auto v = small_vocab();
  CHECK(eligible(seq_of(48, v)));
  CHECK(eligible(seq_of(510, v)));
  CHECK_FALSE(eligible(seq_of(47, v)));
  CHECK_FALSE(eligible(seq_of(511, v)));
  CHECK(eligible(seq_of(200, v)));
}

TEST_CASE("sixteen max-length sequences pack into one exact batch") {
  auto v = small_vocab();
  std::vector<TokenSequence> seqs;
  for (int i = 0; i < 16; ++i) seqs.push_back(seq_of(510, v, i));
  auto result = pack(std::move(seqs), 8192, 0.05, 0.20, 1);
  REQUIRE(result.batches.size() == 1);
  CHECK(result.leftovers.empty());
  CHECK(result.batches[0].total_tokens() == 8192);
  CHECK(result.batches[0].padding_tokens() == 0);
  CHECK(result.batches[0].row_length == 512);
}

TEST_CASE("empty input gives no batches and no leftovers") {
  auto result = pack({}, 8192, 0.05, 0.20, 1);
  CHECK(result.batches.empty());
  CHECK(result.leftovers.empty());
}

TEST_CASE("a sequence longer than the budget is a parameter error") {
  auto v = small_vocab();
  std::vector<TokenSequence> seqs = {seq_of(300, v)};
  CHECK_THROWS_AS(pack(std::move(seqs), 128, 0.05, 0.20, 1),
                  std::invalid_argument);
}

TEST_CASE("random workloads satisfy every packing constraint") {
  auto v = small_vocab();
  for (std::uint64_t seed : {11u, 22u, 33u}) {
    DetRng rng(seed);
    std::vector<TokenSequence> seqs;
    std::int64_t total_in = 0;
    for (int i = 0; i < 10000; ++i) {
      const auto body = static_cast<std::int32_t>(48 + rng.next_below(463));
      seqs.push_back(seq_of(body, v, i));
      total_in += body + 2;
    }
    const auto in_names = names_of(seqs);

    auto result = pack(std::move(seqs), 8192, 0.05, 0.20, seed);

    std::int64_t placed_rows = 0;
    for (const auto& b : result.batches) {
      CHECK(b.total_tokens() >= 7782);
      CHECK(b.total_tokens() <= 8602);
      CHECK(static_cast<double>(b.padding_tokens()) <=
            0.20 * static_cast<double>(b.total_tokens()));
      for (const auto& r : b.rows) {
        CHECK(static_cast<std::int32_t>(r.ids.size()) <= b.row_length);
      }
      placed_rows += static_cast<std::int64_t>(b.rows.size());
    }
    // Placement rate.
    CHECK(static_cast<double>(placed_rows) >= 0.99 * 10000.0);

    // Conservation: placed + leftovers is exactly the input multiset.
    std::vector<TokenSequence> all;
    for (const auto& b : result.batches) {
      for (const auto& r : b.rows) all.push_back(r);
    }
    for (const auto& r : result.leftovers) all.push_back(r);
    CHECK(names_of(all) == in_names);
  }
}

TEST_CASE("packing constraints hold across budgets and tolerances") {
  auto v = small_vocab();
  DetRng data_rng(77);
  for (std::int64_t budget : {1024, 2048, 4096}) {
    for (double tol : {0.05, 0.1}) {
      std::vector<TokenSequence> seqs;
      for (int i = 0; i < 1500; ++i) {
        const auto max_body = static_cast<std::uint64_t>(
            std::min<std::int64_t>(510, budget - 2) - 48);
        seqs.push_back(seq_of(
            static_cast<std::int32_t>(48 + data_rng.next_below(max_body + 1)),
            v, i));
      }
      const std::size_t n_in = seqs.size();
      auto result = pack(std::move(seqs), budget, tol, 0.20, 9);
      const auto slack = static_cast<std::int64_t>(
          std::llround(static_cast<double>(budget) * tol));
      std::size_t seen = result.leftovers.size();
      for (const auto& b : result.batches) {
        CHECK(b.total_tokens() >= budget - slack);
        CHECK(b.total_tokens() <= budget + slack);
        CHECK(static_cast<double>(b.padding_tokens()) <=
              0.20 * static_cast<double>(b.total_tokens()));
        seen += b.rows.size();
      }
      CHECK(seen == n_in);
    }
  }
}

TEST_CASE("packing is deterministic in the seed") {
  auto v = small_vocab();
  auto make = [&]() {
    DetRng rng(5);
    std::vector<TokenSequence> seqs;
    for (int i = 0; i < 500; ++i) {
      seqs.push_back(seq_of(static_cast<std::int32_t>(48 + rng.next_below(463)),
                            v, i));
    }
    return seqs;
  };
  auto a = pack(make(), 8192, 0.05, 0.20, 7);
  auto b = pack(make(), 8192, 0.05, 0.20, 7);
  REQUIRE(a.batches.size() == b.batches.size());
  for (std::size_t i = 0; i < a.batches.size(); ++i) {
    REQUIRE(a.batches[i].rows.size() == b.batches[i].rows.size());
    for (std::size_t r = 0; r < a.batches[i].rows.size(); ++r) {
      CHECK(a.batches[i].rows[r].arxiv_id == b.batches[i].rows[r].arxiv_id);
      CHECK(a.batches[i].rows[r].ids == b.batches[i].rows[r].ids);
    }
  }
  auto c = pack(make(), 8192, 0.05, 0.20, 8);
  bool same_order = a.batches.size() == c.batches.size();
  if (same_order) {
    same_order = a.batches[0].rows[0].arxiv_id == c.batches[0].rows[0].arxiv_id;
  }
  CHECK_FALSE(same_order);
}

TEST_CASE("whole_word_mask labels exactly the selected words") {
  auto v = small_vocab();

  SUBCASE("100 single-subword words -> exactly 15 labels") {
    TokenSequence s = seq_of(100, v);
    PackedBatch batch;
    batch.row_length = static_cast<std::int32_t>(s.ids.size());
    batch.rows = {s};
    MaskedBatch mb = whole_word_mask(batch, v, 0.15, 3);
    std::int64_t labeled = 0;
    for (auto l : mb.labels) {
      if (l != kIgnoreLabel) ++labeled;
    }
    CHECK(labeled == 15);
  }

  SUBCASE("multi-subword words are labeled atomically") {
    // Words of three subwords each: word w covers positions 1+3w..3w+3.
    TokenSequence s;
    s.ids.push_back(v.cls_id());
    s.word_ids.push_back(cwe::tok::kSpecialWordId);
    for (std::int32_t w = 0; w < 40; ++w) {
      for (int p = 0; p < 3; ++p) {
        s.ids.push_back(v.non_special_id(w % v.non_special_size()));
        s.word_ids.push_back(w);
      }
    }
    s.ids.push_back(v.sep_id());
    s.word_ids.push_back(cwe::tok::kSpecialWordId);
    PackedBatch batch;
    batch.row_length = static_cast<std::int32_t>(s.ids.size());
    batch.rows = {s};
    MaskedBatch mb = whole_word_mask(batch, v, 0.15, 11);
    // Per word: all three or none labeled.
    for (std::int32_t w = 0; w < 40; ++w) {
      int count = 0;
      for (int p = 0; p < 3; ++p) {
        if (mb.labels[1 + 3 * w + p] != kIgnoreLabel) ++count;
      }
      CHECK((count == 0 || count == 3));
    }
  }

  SUBCASE("rate zero is the identity") {
    TokenSequence s = seq_of(64, v);
    PackedBatch batch;
    batch.row_length = static_cast<std::int32_t>(s.ids.size());
    batch.rows = {s};
    MaskedBatch mb = whole_word_mask(batch, v, 0.0, 5);
    for (std::int64_t i = 0; i < mb.size(); ++i) {
      CHECK(mb.labels[i] == kIgnoreLabel);
      CHECK(mb.input_ids[i] == s.ids[static_cast<std::size_t>(i)]);
    }
  }

  SUBCASE("specials and padding are never labeled or replaced") {
    TokenSequence s = seq_of(60, v);
    PackedBatch batch;
    batch.row_length = 80;  // force padding
    batch.rows = {s};
    MaskedBatch mb = whole_word_mask(batch, v, 0.5, 5);
    CHECK(mb.labels[0] == kIgnoreLabel);
    CHECK(mb.input_ids[0] == v.cls_id());
    CHECK(mb.labels[61] == kIgnoreLabel);
    CHECK(mb.input_ids[61] == v.sep_id());
    for (std::int64_t i = 62; i < 80; ++i) {
      CHECK(mb.labels[i] == kIgnoreLabel);
      CHECK(mb.input_ids[i] == v.pad_id());
      CHECK(mb.attention_mask[i] == 0);
    }
  }

  SUBCASE("a row with no maskable word is emitted unmasked and counted") {
    TokenSequence s = seq_of(0, v);  // [CLS][SEP] only
    PackedBatch batch;
    batch.row_length = 2;
    batch.rows = {s};
    MaskedBatch mb = whole_word_mask(batch, v, 0.15, 5);
    CHECK(mb.rows_without_maskable_words == 1);
    CHECK(mb.labels[0] == kIgnoreLabel);
    CHECK(mb.labels[1] == kIgnoreLabel);
  }
}

TEST_CASE("masking statistics approach the configured rates") {
  auto v = small_vocab();
  DetRng rng(123);
  // Mixed word lengths, ~200k subwords; acceptance re-runs this at 1e6.
  std::vector<PackedBatch> batches;
  std::int64_t total_body = 0;
  for (int b = 0; b < 40; ++b) {
    PackedBatch batch;
    std::int32_t longest = 0;
    for (int r = 0; r < 16; ++r) {
      TokenSequence s;
      s.ids.push_back(v.cls_id());
      s.word_ids.push_back(cwe::tok::kSpecialWordId);
      std::int32_t w = 0;
      std::int32_t body = 0;
      while (body < 300) {
        const int pieces = 1 + static_cast<int>(rng.next_below(3));
        for (int p = 0; p < pieces; ++p) {
          s.ids.push_back(v.non_special_id(
              static_cast<std::int32_t>(rng.next_below(
                  static_cast<std::uint64_t>(v.non_special_size())))));
          s.word_ids.push_back(w);
        }
        body += pieces;
        ++w;
      }
      s.ids.push_back(v.sep_id());
      s.word_ids.push_back(cwe::tok::kSpecialWordId);
      total_body += body;
      longest = std::max(longest, static_cast<std::int32_t>(s.ids.size()));
      batch.rows.push_back(std::move(s));
    }
    batch.row_length = longest;
    batches.push_back(std::move(batch));
  }

  std::int64_t labeled = 0;
  std::int64_t masked = 0;
  std::int64_t randomized = 0;
  std::int64_t unchanged = 0;
  std::int64_t atomicity_violations = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    MaskedBatch mb = whole_word_mask(batches[b], v, 0.15,
                                     DetRng(9).derive(b).next_u64());
    for (std::size_t r = 0; r < batches[b].rows.size(); ++r) {
      const TokenSequence& s = batches[b].rows[r];
      const std::int64_t base =
          static_cast<std::int64_t>(r) * mb.row_length;
      std::map<std::int32_t, std::pair<int, int>> word_cover;
      for (std::size_t p = 0; p < s.ids.size(); ++p) {
        const auto w = s.word_ids[p];
        if (w == cwe::tok::kSpecialWordId) continue;
        auto& cover = word_cover[w];
        ++cover.second;
        if (mb.labels[base + static_cast<std::int64_t>(p)] != kIgnoreLabel) {
          ++cover.first;
          ++labeled;
          const auto in = mb.input_ids[base + static_cast<std::int64_t>(p)];
          if (in == v.mask_id()) {
            ++masked;
          } else if (in == s.ids[p]) {
            ++unchanged;
          } else {
            ++randomized;
          }
        }
      }
      for (const auto& [w, cover] : word_cover) {
        if (cover.first != 0 && cover.first != cover.second) {
          ++atomicity_violations;
        }
      }
    }
  }
  CHECK(atomicity_violations == 0);
  const double rate =
      static_cast<double>(labeled) / static_cast<double>(total_body);
  CHECK(rate >= 0.14);
  CHECK(rate <= 0.16);
  const double den = static_cast<double>(labeled);
  CHECK(static_cast<double>(masked) / den == doctest::Approx(0.8).epsilon(0.03));
  CHECK(static_cast<double>(randomized) / den ==
        doctest::Approx(0.1).epsilon(0.2));
  CHECK(static_cast<double>(unchanged) / den ==
        doctest::Approx(0.1).epsilon(0.2));
}

TEST_CASE("masking is deterministic in the seed") {
  auto v = small_vocab();
  TokenSequence s = seq_of(128, v);
  PackedBatch batch;
  batch.row_length = static_cast<std::int32_t>(s.ids.size());
  batch.rows = {s, s, s};
  MaskedBatch a = whole_word_mask(batch, v, 0.15, 99);
  MaskedBatch b = whole_word_mask(batch, v, 0.15, 99);
  CHECK(a.input_ids == b.input_ids);
  CHECK(a.labels == b.labels);
  MaskedBatch c = whole_word_mask(batch, v, 0.15, 100);
  CHECK(a.input_ids != c.input_ids);
}
