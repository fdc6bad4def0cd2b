#include "cwe/text_utils.hpp"

#include <algorithm>
#include <array>
#include <unordered_map>

namespace cwe::text {

char32_t decode_utf8(std::string_view text, std::size_t& pos) {
  const unsigned char b0 = static_cast<unsigned char>(text[pos]);
  if (b0 < 0x80) {
    ++pos;
    return b0;
  }
  int extra = 0;
  char32_t cp = 0;
  if ((b0 & 0xE0) == 0xC0) {
    extra = 1;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    extra = 2;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    extra = 3;
    cp = b0 & 0x07;
  } else {
    ++pos;
    return 0xFFFD;
  }
  if (pos + static_cast<std::size_t>(extra) >= text.size()) {
    ++pos;
    return 0xFFFD;
  }
  for (int i = 1; i <= extra; ++i) {
    const unsigned char b = static_cast<unsigned char>(text[pos + i]);
    if ((b & 0xC0) != 0x80) {
      ++pos;
      return 0xFFFD;
    }
    cp = (cp << 6) | (b & 0x3F);
  }
  pos += 1 + extra;
  return cp;
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

std::vector<char32_t> to_codepoints(std::string_view text) {
  std::vector<char32_t> cps;
  cps.reserve(text.size());
  std::size_t pos = 0;
  while (pos < text.size()) cps.push_back(decode_utf8(text, pos));
  return cps;
}

std::size_t codepoint_count(std::string_view text) {
  std::size_t n = 0;
  for (char c : text) {
    if ((static_cast<unsigned char>(c) & 0xC0) != 0x80) ++n;
  }
  return n;
}

bool is_unicode_whitespace(char32_t cp) {
  switch (cp) {
    case 0x09:
    case 0x0A:
    case 0x0B:
    case 0x0C:
    case 0x0D:
    case 0x20:
    case 0x85:
    case 0xA0:
    case 0x1680:
    case 0x2028:
    case 0x2029:
    case 0x202F:
    case 0x205F:
    case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

bool is_punctuation(char32_t cp) {
  if ((cp >= 33 && cp <= 47) || (cp >= 58 && cp <= 64) ||
      (cp >= 91 && cp <= 96) || (cp >= 123 && cp <= 126)) {
    return true;
  }
  // General punctuation, superscript-ish symbol blocks commonly split by the
  // uncased pre-tokenizer.
  if (cp >= 0x2010 && cp <= 0x2027) return true;  // dashes, quotes, daggers
  if (cp >= 0x2030 && cp <= 0x205E) return true;
  if (cp == 0xA7 || cp == 0xB6 || cp == 0xAB || cp == 0xBB) return true;
  if (cp >= 0x3001 && cp <= 0x3011) return true;
  return false;
}

bool is_dropped_control(char32_t cp) {
  if (cp == 0 || cp == 0xFFFD) return true;
  if (cp == 0x7F) return true;
  if (cp < 0x20 && !is_unicode_whitespace(cp)) return true;
  if (cp >= 0x200B && cp <= 0x200F) return true;  // zero width / direction
  if (cp == 0xFEFF) return true;
  return false;
}

namespace {

// Composed Latin letters (Latin-1 Supplement + Latin Extended-A) and Greek
// letters mapped to lowercase unaccented base letters. Enough for English
// scientific prose; anything unmapped passes through unchanged.
const std::unordered_map<char32_t, const char*>& fold_table() {
  static const std::unordered_map<char32_t, const char*> table = {
      // Latin-1 supplement, uppercase.
      {0xC0, "a"}, {0xC1, "a"}, {0xC2, "a"}, {0xC3, "a"}, {0xC4, "a"},
      {0xC5, "a"}, {0xC6, "ae"}, {0xC7, "c"}, {0xC8, "e"}, {0xC9, "e"},
      {0xCA, "e"}, {0xCB, "e"}, {0xCC, "i"}, {0xCD, "i"}, {0xCE, "i"},
      {0xCF, "i"}, {0xD1, "n"}, {0xD2, "o"}, {0xD3, "o"}, {0xD4, "o"},
      {0xD5, "o"}, {0xD6, "o"}, {0xD8, "o"}, {0xD9, "u"}, {0xDA, "u"},
      {0xDB, "u"}, {0xDC, "u"}, {0xDD, "y"}, {0xDF, "ss"},
      // Latin-1 supplement, lowercase.
      {0xE0, "a"}, {0xE1, "a"}, {0xE2, "a"}, {0xE3, "a"}, {0xE4, "a"},
      {0xE5, "a"}, {0xE6, "ae"}, {0xE7, "c"}, {0xE8, "e"}, {0xE9, "e"},
      {0xEA, "e"}, {0xEB, "e"}, {0xEC, "i"}, {0xED, "i"}, {0xEE, "i"},
      {0xEF, "i"}, {0xF1, "n"}, {0xF2, "o"}, {0xF3, "o"}, {0xF4, "o"},
      {0xF5, "o"}, {0xF6, "o"}, {0xF8, "o"}, {0xF9, "u"}, {0xFA, "u"},
      {0xFB, "u"}, {0xFC, "u"}, {0xFD, "y"}, {0xFF, "y"},
      // Latin Extended-A (pairs upper/lower share a base).
      {0x100, "a"}, {0x101, "a"}, {0x102, "a"}, {0x103, "a"}, {0x104, "a"},
      {0x105, "a"}, {0x106, "c"}, {0x107, "c"}, {0x108, "c"}, {0x109, "c"},
      {0x10C, "c"}, {0x10D, "c"}, {0x10E, "d"}, {0x10F, "d"}, {0x110, "d"},
      {0x111, "d"}, {0x112, "e"}, {0x113, "e"}, {0x116, "e"}, {0x117, "e"},
      {0x118, "e"}, {0x119, "e"}, {0x11A, "e"}, {0x11B, "e"}, {0x11C, "g"},
      {0x11D, "g"}, {0x11E, "g"}, {0x11F, "g"}, {0x122, "g"}, {0x123, "g"},
      {0x124, "h"}, {0x125, "h"}, {0x126, "h"}, {0x127, "h"}, {0x128, "i"},
      {0x129, "i"}, {0x12A, "i"}, {0x12B, "i"}, {0x130, "i"}, {0x131, "i"},
      {0x134, "j"}, {0x135, "j"}, {0x136, "k"}, {0x137, "k"}, {0x139, "l"},
      {0x13A, "l"}, {0x141, "l"}, {0x142, "l"}, {0x143, "n"}, {0x144, "n"},
      {0x145, "n"}, {0x146, "n"}, {0x147, "n"}, {0x148, "n"}, {0x14C, "o"},
      {0x14D, "o"}, {0x150, "o"}, {0x151, "o"}, {0x152, "oe"}, {0x153, "oe"},
      {0x154, "r"}, {0x155, "r"}, {0x158, "r"}, {0x159, "r"}, {0x15A, "s"},
      {0x15B, "s"}, {0x15C, "s"}, {0x15D, "s"}, {0x15E, "s"}, {0x15F, "s"},
      {0x160, "s"}, {0x161, "s"}, {0x162, "t"}, {0x163, "t"}, {0x164, "t"},
      {0x165, "t"}, {0x168, "u"}, {0x169, "u"}, {0x16A, "u"}, {0x16B, "u"},
      {0x16C, "u"}, {0x16D, "u"}, {0x16E, "u"}, {0x16F, "u"}, {0x170, "u"},
      {0x171, "u"}, {0x172, "u"}, {0x173, "u"}, {0x174, "w"}, {0x175, "w"},
      {0x176, "y"}, {0x177, "y"}, {0x178, "y"}, {0x179, "z"}, {0x17A, "z"},
      {0x17B, "z"}, {0x17C, "z"}, {0x17D, "z"}, {0x17E, "z"},
  };
  return table;
}

}  // namespace

std::u32string fold_codepoint(char32_t cp) {
  if (cp >= 'A' && cp <= 'Z') {
    return std::u32string(1, cp + 32);
  }
  // Combining diacritical marks vanish under canonical-decomposition strip.
  if (cp >= 0x300 && cp <= 0x36F) return {};
  auto it = fold_table().find(cp);
  if (it != fold_table().end()) {
    std::u32string out;
    for (const char* p = it->second; *p; ++p) out.push_back(*p);
    return out;
  }
  // Greek uppercase -> lowercase.
  if (cp >= 0x391 && cp <= 0x3A9 && cp != 0x3A2) {
    return std::u32string(1, cp + 32);
  }
  return std::u32string(1, cp);
}

namespace {

struct AccentKey {
  std::string accent;
  char32_t base;
  bool operator==(const AccentKey& o) const {
    return accent == o.accent && base == o.base;
  }
};

struct AccentKeyHash {
  std::size_t operator()(const AccentKey& k) const {
    std::size_t h = std::hash<std::string>()(k.accent);
    return h * 1315423911u + k.base;
  }
};

const std::unordered_map<AccentKey, char32_t, AccentKeyHash>& accent_table() {
  static const std::unordered_map<AccentKey, char32_t, AccentKeyHash> table = {
      {{"`", 'a'}, 0xE0},  {{"'", 'a'}, 0xE1},  {{"^", 'a'}, 0xE2},
      {{"~", 'a'}, 0xE3},  {{"\"", 'a'}, 0xE4}, {{"r", 'a'}, 0xE5},
      {{"=", 'a'}, 0x101}, {{"u", 'a'}, 0x103}, {{"k", 'a'}, 0x105},
      {{"`", 'e'}, 0xE8},  {{"'", 'e'}, 0xE9},  {{"^", 'e'}, 0xEA},
      {{"\"", 'e'}, 0xEB}, {{"=", 'e'}, 0x113}, {{"u", 'e'}, 0x115},
      {{".", 'e'}, 0x117}, {{"k", 'e'}, 0x119}, {{"v", 'e'}, 0x11B},
      {{"`", 'i'}, 0xEC},  {{"'", 'i'}, 0xED},  {{"^", 'i'}, 0xEE},
      {{"\"", 'i'}, 0xEF}, {{"=", 'i'}, 0x12B},
      {{"`", 'o'}, 0xF2},  {{"'", 'o'}, 0xF3},  {{"^", 'o'}, 0xF4},
      {{"~", 'o'}, 0xF5},  {{"\"", 'o'}, 0xF6}, {{"=", 'o'}, 0x14D},
      {{"H", 'o'}, 0x151},
      {{"`", 'u'}, 0xF9},  {{"'", 'u'}, 0xFA},  {{"^", 'u'}, 0xFB},
      {{"\"", 'u'}, 0xFC}, {{"=", 'u'}, 0x16B}, {{"r", 'u'}, 0x16F},
      {{"H", 'u'}, 0x171},
      {{"'", 'y'}, 0xFD},  {{"\"", 'y'}, 0xFF},
      {{"~", 'n'}, 0xF1},  {{"'", 'n'}, 0x144}, {{"v", 'n'}, 0x148},
      {{"c", 'c'}, 0xE7},  {{"'", 'c'}, 0x107}, {{"v", 'c'}, 0x10D},
      {{"v", 's'}, 0x161}, {{"'", 's'}, 0x15B}, {{"c", 's'}, 0x15F},
      {{"v", 'z'}, 0x17E}, {{"'", 'z'}, 0x17A}, {{".", 'z'}, 0x17C},
      {{"v", 'r'}, 0x159}, {{"v", 't'}, 0x165}, {{"v", 'd'}, 0x10F},
      {{"c", 't'}, 0x163},
      {{"`", 'A'}, 0xC0},  {{"'", 'A'}, 0xC1},  {{"^", 'A'}, 0xC2},
      {{"~", 'A'}, 0xC3},  {{"\"", 'A'}, 0xC4}, {{"r", 'A'}, 0xC5},
      {{"`", 'E'}, 0xC8},  {{"'", 'E'}, 0xC9},  {{"^", 'E'}, 0xCA},
      {{"\"", 'E'}, 0xCB},
      {{"`", 'I'}, 0xCC},  {{"'", 'I'}, 0xCD},  {{"^", 'I'}, 0xCE},
      {{"\"", 'I'}, 0xCF},
      {{"`", 'O'}, 0xD2},  {{"'", 'O'}, 0xD3},  {{"^", 'O'}, 0xD4},
      {{"~", 'O'}, 0xD5},  {{"\"", 'O'}, 0xD6}, {{"H", 'O'}, 0x150},
      {{"`", 'U'}, 0xD9},  {{"'", 'U'}, 0xDA},  {{"^", 'U'}, 0xDB},
      {{"\"", 'U'}, 0xDC}, {{"H", 'U'}, 0x170},
      {{"'", 'Y'}, 0xDD},
      {{"~", 'N'}, 0xD1},  {{"c", 'C'}, 0xC7},  {{"v", 'C'}, 0x10C},
      {{"v", 'S'}, 0x160}, {{"v", 'Z'}, 0x17D},
  };
  return table;
}

}  // namespace

char32_t compose_accent(std::string_view accent, char32_t base) {
  auto it = accent_table().find(AccentKey{std::string(accent), base});
  return it == accent_table().end() ? 0 : it->second;
}

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && (static_cast<unsigned char>(s[b]) <= ' ')) ++b;
  while (e > b && (static_cast<unsigned char>(s[e - 1]) <= ' ')) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace cwe::text
