#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cwe::text {

// Decodes the UTF-8 sequence starting at text[pos]. Returns the code point
// and advances pos past it. Invalid bytes decode as U+FFFD, one byte at a
// time, so iteration always terminates.
char32_t decode_utf8(std::string_view text, std::size_t& pos);

void append_utf8(std::string& out, char32_t cp);

std::vector<char32_t> to_codepoints(std::string_view text);

// Unicode code point count (not bytes, not grapheme clusters).
std::size_t codepoint_count(std::string_view text);

// Unicode White_Space property (space, tab, newline, NBSP, ideographic
// space, ...).
bool is_unicode_whitespace(char32_t cp);

// ASCII punctuation ranges plus the general punctuation and CJK symbol
// blocks; mirrors the classic uncased pre-tokenizer's notion of punctuation.
bool is_punctuation(char32_t cp);

// Control and format characters that the pre-tokenizer drops outright.
bool is_dropped_control(char32_t cp);

// Case fold + accent strip for one code point, as used by the uncased
// pre-tokenizer: ASCII upper -> lower, composed Latin/Greek letters ->
// lowercase base letter, combining marks -> empty. Returns the replacement
// (usually one code point; empty for pure marks; the input itself when no
// mapping applies).
std::u32string fold_codepoint(char32_t cp);

// (accent command char or name, base letter) -> composed code point, e.g.
// ('"', 'o') -> U+00F6. Returns 0 when the combination is not in the table.
char32_t compose_accent(std::string_view accent, char32_t base);

std::string trim(std::string_view s);

}  // namespace cwe::text
