#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "cwe/rng.hpp"
#include "cwe/tokenizer.hpp"
#include "doctest.h"
#include "support/synthetic.hpp"

using namespace cwe::tok;
using cwe::DetRng;

namespace {

Vocab test_vocab() {
  std::vector<std::string> tokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                     "[MASK]", "dark", "matter", ".", ",",
                                     "un", "##aff", "##able", "the",
                                     "schrodinger", "planck"};
  for (char c = 'a'; c <= 'z'; ++c) {
    tokens.push_back(std::string(1, c));
    tokens.push_back("##" + std::string(1, c));
  }
  return Vocab::from_tokens(tokens);
}

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "cwe_tok_tests";
  std::filesystem::create_directories(dir);
  return dir;
}

void write_lines(const std::filesystem::path& p,
                 const std::vector<std::string>& lines) {
  std::ofstream out(p);
  for (const auto& l : lines) out << l << "\n";
}

}  // namespace

TEST_CASE("load_vocab reads one token per line") {
  const auto path = temp_dir() / "vocab_ok.txt";
  write_lines(path, {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"});
  Vocab v = Vocab::load(path);
  CHECK(v.size() == 5);
  CHECK(v.pad_id() == 0);
  CHECK(v.mask_id() == 4);

  SUBCASE("duplicate tokens name both lines") {
    const auto dup = temp_dir() / "vocab_dup.txt";
    write_lines(dup, {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "the",
                      "the"});
    CHECK_THROWS_WITH_AS(Vocab::load(dup),
                         doctest::Contains("duplicate vocabulary token"),
                         std::runtime_error);
  }
  SUBCASE("missing special token is named") {
    const auto missing = temp_dir() / "vocab_missing.txt";
    write_lines(missing, {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "word"});
    CHECK_THROWS_WITH_AS(Vocab::load(missing),
                         doctest::Contains("missing special token [MASK]"),
                         std::runtime_error);
  }
  SUBCASE("empty file") {
    const auto empty = temp_dir() / "vocab_empty.txt";
    write_lines(empty, {});
    CHECK_THROWS_WITH_AS(Vocab::load(empty),
                         doctest::Contains("empty vocabulary file"),
                         std::runtime_error);
  }
}

TEST_CASE("non_special_id maps onto the ids that are not special") {
  Vocab v = test_vocab();
  std::set<std::int32_t> seen;
  for (std::int32_t j = 0; j < v.non_special_size(); ++j) {
    const std::int32_t id = v.non_special_id(j);
    CHECK(!v.is_special(id));
    CHECK(id >= 0);
    CHECK(id < v.size());
    seen.insert(id);
  }
  CHECK(static_cast<std::int32_t>(seen.size()) == v.non_special_size());
}

TEST_CASE("basic_tokenize lowercases, splits punctuation, strips accents") {
  CHECK(basic_tokenize("Dark Matter.") ==
        std::vector<std::string>{"dark", "matter", "."});
  CHECK(basic_tokenize("Schrödinger") ==
        std::vector<std::string>{"schrodinger"});
  CHECK(basic_tokenize("").empty());
  CHECK(basic_tokenize("a,b") == std::vector<std::string>{"a", ",", "b"});
  CHECK(basic_tokenize("x\ty \r\n z") ==
        std::vector<std::string>{"x", "y", "z"});
  // Control characters vanish.
  CHECK(basic_tokenize(std::string("a\x01") + "b") ==
        std::vector<std::string>{"ab"});
  // Markers split into bracket + word + bracket.
  CHECK(basic_tokenize("[CIT]") ==
        std::vector<std::string>{"[", "cit", "]"});
}

TEST_CASE("wordpiece is greedy longest-match-first") {
  Vocab v = test_vocab();
  CHECK(wordpiece("unaffable", v) ==
        std::vector<std::string>{"un", "##aff", "##able"});
  CHECK(wordpiece("dark", v) == std::vector<std::string>{"dark"});
  CHECK(wordpiece("☃", v) == std::vector<std::string>{"[UNK]"});
  CHECK(wordpiece("zzz", v) ==
        std::vector<std::string>{"z", "##z", "##z"});
  SUBCASE("words over the length cap collapse to [UNK]") {
    std::string giant(101, 'a');
    CHECK(wordpiece(giant, v) == std::vector<std::string>{"[UNK]"});
    std::string ok(100, 'a');
    CHECK(wordpiece(ok, v).size() == 100);
  }
}

TEST_CASE("wordpiece output is never empty and always in-vocabulary") {
  Vocab v = test_vocab();
  DetRng rng(23);
  for (int trial = 0; trial < 300; ++trial) {
    std::string word;
    const std::size_t len = 1 + rng.next_below(12);
    for (std::size_t i = 0; i < len; ++i) {
      // Mostly letters, sometimes a code point with no vocab entry.
      if (rng.next_below(10) == 0) {
        word += "☃";
      } else {
        word += static_cast<char>('a' + rng.next_below(26));
      }
    }
    const auto pieces = wordpiece(word, v);
    REQUIRE(!pieces.empty());
    for (const auto& piece : pieces) {
      CHECK((v.contains(piece) || piece == kUnkToken));
    }
  }
}

TEST_CASE("encode frames with [CLS]/[SEP] and assigns word ids") {
  Vocab v = test_vocab();
  TokenSequence seq = encode("dark matter", v);
  REQUIRE(seq.ids.size() == 4);
  CHECK(seq.ids.front() == v.cls_id());
  CHECK(seq.ids.back() == v.sep_id());
  CHECK(seq.ids[1] == v.id_of("dark"));
  CHECK(seq.ids[2] == v.id_of("matter"));
  CHECK(seq.word_ids ==
        std::vector<std::int32_t>{kSpecialWordId, 0, 1, kSpecialWordId});

  SUBCASE("empty text encodes to the frame alone") {
    TokenSequence empty = encode("", v);
    REQUIRE(empty.ids.size() == 2);
    CHECK(empty.ids[0] == v.cls_id());
    CHECK(empty.ids[1] == v.sep_id());
  }
  SUBCASE("truncation drops whole trailing words and keeps [SEP]") {
    // 600 single-subword words.
    std::string text;
    for (int i = 0; i < 600; ++i) {
      text += "a ";
    }
    TokenSequence t = encode(text, v, 512);
    CHECK(t.ids.size() == 512);
    CHECK(t.ids.back() == v.sep_id());
    CHECK(t.word_ids[510] == 509);

    // Multi-subword word straddling the cut is dropped entirely.
    std::string mixed;
    for (int i = 0; i < 509; ++i) mixed += "a ";
    mixed += "unaffable";
    TokenSequence m = encode(mixed, v, 512);
    CHECK(m.ids.size() == 511);  // 509 + CLS + SEP; 3-piece word dropped
    CHECK(m.ids.back() == v.sep_id());
  }
}

TEST_CASE("count_subwords matches encode without truncation") {
  Vocab v = test_vocab();
  CHECK(count_subwords("dark matter", v) == 2);
  CHECK(count_subwords("unaffable", v) == 3);
  CHECK(count_subwords("", v) == 0);

  DetRng rng(3);
  const std::vector<std::string> lexicon = {"dark", "matter", "unaffable",
                                            "the", "ab", "zzz", "planck"};
  for (int trial = 0; trial < 50; ++trial) {
    std::string text;
    const std::size_t n = rng.next_below(40);
    for (std::size_t i = 0; i < n; ++i) {
      text += lexicon[rng.next_below(lexicon.size())];
      text += ' ';
    }
    TokenSequence seq = encode(text, v);
    if (seq.ids.size() < 512) {  // untruncated
      CHECK(count_subwords(text, v) ==
            static_cast<std::int64_t>(seq.ids.size()) - 2);
    }
  }
}

TEST_CASE("grouping subwords by word id reconstructs the basic tokens") {
  Vocab v = test_vocab();
  DetRng rng(17);
  const std::vector<std::string> lexicon = {"dark",  "matter", "unaffable",
                                            "the",   "cab",    "planck",
                                            "zzz",   "affable"};
  for (int trial = 0; trial < 100; ++trial) {
    std::string text;
    const std::size_t n = 1 + rng.next_below(30);
    for (std::size_t i = 0; i < n; ++i) {
      text += lexicon[rng.next_below(lexicon.size())];
      text += ' ';
    }
    const auto words = basic_tokenize(text);
    TokenSequence seq = encode(text, v);

    std::vector<std::string> rebuilt;
    for (std::size_t p = 0; p < seq.ids.size(); ++p) {
      if (seq.word_ids[p] == kSpecialWordId) continue;
      std::string piece = v.token_of(seq.ids[p]);
      if (piece.rfind("##", 0) == 0) {
        rebuilt.back() += piece.substr(2);
      } else if (!rebuilt.empty() &&
                 seq.word_ids[p] == seq.word_ids[p - 1]) {
        rebuilt.back() += piece;
      } else {
        rebuilt.push_back(piece);
      }
    }
    CHECK(rebuilt == words);
  }
}

TEST_CASE("the tokenizer accepts arbitrary byte soup") {
  Vocab v = test_vocab();
  DetRng rng(4242);
  for (int trial = 0; trial < 500; ++trial) {
    std::string text;
    const std::size_t n = rng.next_below(64);
    for (std::size_t i = 0; i < n; ++i) {
      text.push_back(static_cast<char>(rng.next_below(256)));
    }
    const auto words = basic_tokenize(text);
    for (const auto& w : words) CHECK(!w.empty());
    const TokenSequence seq = encode(text, v);
    CHECK(seq.ids.size() >= 2);
    CHECK(seq.ids.size() <= 512);
    for (auto id : seq.ids) {
      CHECK(id >= 0);
      CHECK(id < v.size());
    }
    CHECK(count_subwords(text, v) >= 0);
  }
}

TEST_CASE("tokenization is deterministic") {
  Vocab v = test_vocab();
  const std::string text = "the unaffable dark matter, planck.";
  const TokenSequence a = encode(text, v);
  const TokenSequence b = encode(text, v);
  CHECK(a.ids == b.ids);
  CHECK(a.word_ids == b.word_ids);
}
