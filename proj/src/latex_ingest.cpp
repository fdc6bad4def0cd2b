#include "cwe/latex_ingest.hpp"

#include <array>
#include <cstddef>
#include <set>
#include <string_view>

#include "cwe/text_utils.hpp"

namespace cwe::ingest {

namespace {

bool is_letter(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
}

// True when text[pos] is preceded by an odd number of backslashes.
bool is_escaped(const std::string& text, std::size_t pos) {
  std::size_t n = 0;
  while (pos > n && text[pos - 1 - n] == '\\') ++n;
  return (n % 2) == 1;
}

// Reads the control word starting at the backslash at `pos` (letters only).
// Returns the name without the backslash; empty when the next char is not a
// letter (control symbol).
std::string control_word(const std::string& text, std::size_t pos) {
  std::string name;
  std::size_t i = pos + 1;
  while (i < text.size() && is_letter(text[i])) name.push_back(text[i++]);
  return name;
}

// Scans a balanced {...} group starting at text[pos] == '{'. On success sets
// `end` one past the closing brace and returns true.
bool scan_group(const std::string& text, std::size_t pos, std::size_t& end) {
  if (pos >= text.size() || text[pos] != '{') return false;
  int depth = 0;
  for (std::size_t i = pos; i < text.size(); ++i) {
    char c = text[i];
    if (c == '\\') {
      ++i;  // skip escaped char
      continue;
    }
    if (c == '{') ++depth;
    if (c == '}') {
      --depth;
      if (depth == 0) {
        end = i + 1;
        return true;
      }
    }
  }
  return false;
}

// Scans an optional [...] argument (no nesting). Returns true and sets `end`
// one past the closing bracket.
bool scan_optional(const std::string& text, std::size_t pos,
                   std::size_t& end) {
  if (pos >= text.size() || text[pos] != '[') return false;
  for (std::size_t i = pos + 1; i < text.size(); ++i) {
    if (text[i] == ']') {
      end = i + 1;
      return true;
    }
  }
  return false;
}

std::size_t skip_spaces(const std::string& text, std::size_t pos) {
  while (pos < text.size() && (text[pos] == ' ' || text[pos] == '\t')) ++pos;
  return pos;
}

}  // namespace

std::string strip_comments(const std::string& latex) {
  std::string out;
  out.reserve(latex.size());
  std::size_t i = 0;
  while (i < latex.size()) {
    char c = latex[i];
    if (c == '\\' && i + 1 < latex.size()) {
      out.push_back(c);
      out.push_back(latex[i + 1]);
      i += 2;
      continue;
    }
    if (c == '%') {
      while (i < latex.size() && latex[i] != '\n') ++i;
      continue;
    }
    out.push_back(c);
    ++i;
  }
  return out;
}

namespace {

const std::set<std::string>& spacing_words() {
  static const std::set<std::string> words = {"quad", "qquad", "newline"};
  return words;
}

}  // namespace

std::string normalize_commands(const std::string& latex) {
  std::string out;
  out.reserve(latex.size());
  std::size_t i = 0;
  const std::size_t n = latex.size();

  auto emit_space = [&](std::size_t resume) {
    // Collapse surrounding horizontal whitespace into one space.
    while (!out.empty() && (out.back() == ' ' || out.back() == '\t')) {
      out.pop_back();
    }
    out.push_back(' ');
    i = skip_spaces(latex, resume);
  };

  while (i < n) {
    char c = latex[i];
    if (c == '\\') {
      if (i + 1 >= n) {
        out.push_back(c);
        ++i;
        continue;
      }
      char next = latex[i + 1];
      // Accent control symbols: \"o, \'e, \`a, \^o, \~n, \=o, \.z and the
      // braced forms \"{o}.
      if (next == '"' || next == '\'' || next == '`' || next == '^' ||
          next == '~' || next == '=' || next == '.') {
        std::size_t base_pos = i + 2;
        bool braced = base_pos < n && latex[base_pos] == '{';
        if (braced) ++base_pos;
        if (base_pos < n && is_letter(latex[base_pos])) {
          char32_t composed = text::compose_accent(
              std::string_view(&latex[i + 1], 1), latex[base_pos]);
          std::size_t after = base_pos + 1;
          if (braced && after < n && latex[after] == '}') ++after;
          if (composed != 0 && (!braced || latex[base_pos + 1] == '}')) {
            text::append_utf8(out, composed);
            i = after;
            continue;
          }
          if (!braced || (base_pos + 1 < n && latex[base_pos + 1] == '}')) {
            out.push_back(latex[base_pos]);  // unknown combo: keep base
            i = after;
            continue;
          }
        }
        // Not an accent form we understand: pass through.
        out.push_back(c);
        out.push_back(next);
        i += 2;
        continue;
      }
      // Thin/medium space control symbols.
      if (next == ',' || next == ';') {
        emit_space(i + 2);
        continue;
      }
      // Line break \\ (optionally \\[len]) inside running text -> space.
      if (next == '\\') {
        std::size_t resume = i + 2;
        std::size_t opt_end = 0;
        if (resume < n && latex[resume] == '[' &&
            scan_optional(latex, resume, opt_end)) {
          resume = opt_end;
        }
        emit_space(resume);
        continue;
      }
      // Symbol macros -> literal characters.
      if (next == '&' || next == '_' || next == '#') {
        out.push_back(next);
        i += 2;
        continue;
      }
      if (is_letter(next)) {
        std::string word = control_word(latex, i);
        if (spacing_words().count(word)) {
          emit_space(i + 1 + word.size());
          continue;
        }
        // Letter-named accents: \u{o}, \v{c}, \H{o}, \c{c}, \k{a}, \r{a} —
        // only when followed by a braced single letter, so ordinary words
        // like \vec are left alone.
        if (word.size() == 1 && std::string("uvHckr").find(word) !=
                                    std::string::npos) {
          std::size_t p = i + 2;
          if (p + 2 < n && latex[p] == '{' && is_letter(latex[p + 1]) &&
              latex[p + 2] == '}') {
            char32_t composed = text::compose_accent(word, latex[p + 1]);
            if (composed != 0) {
              text::append_utf8(out, composed);
            } else {
              out.push_back(latex[p + 1]);
            }
            i = p + 3;
            continue;
          }
        }
        // Unknown command: pass through untouched.
        out.push_back('\\');
        out += word;
        i += 1 + word.size();
        continue;
      }
      // Other control symbols pass through.
      out.push_back(c);
      out.push_back(next);
      i += 2;
      continue;
    }
    if (c == '~') {
      emit_space(i + 1);
      continue;
    }
    if (c == '-' && i + 1 < n && latex[i + 1] == '-') {
      if (i + 2 < n && latex[i + 2] == '-') {
        out += "—";  // em dash
        i += 3;
      } else {
        out += "–";  // en dash
        i += 2;
      }
      continue;
    }
    out.push_back(c);
    ++i;
  }
  return out;
}

std::string replace_citations(const std::string& latex,
                              ConversionWarnings* warnings) {
  static const std::array<std::string, 6> kCiteCommands = {
      "citeauthor", "citeyear", "citealt", "citep", "citet", "cite"};

  std::string out;
  out.reserve(latex.size());
  std::size_t i = 0;
  const std::size_t n = latex.size();
  while (i < n) {
    char c = latex[i];
    if (c != '\\') {
      out.push_back(c);
      ++i;
      continue;
    }
    std::string word = control_word(latex, i);
    bool matched = false;
    for (const auto& cmd : kCiteCommands) {
      if (word == cmd) {
        matched = true;
        break;
      }
    }
    if (!matched) {
      // Copy backslash plus following char verbatim so an escaped brace
      // never desynchronizes the scanner.
      out.push_back('\\');
      if (i + 1 < n) {
        out.push_back(latex[i + 1]);
        i += 2;
      } else {
        ++i;
      }
      if (!word.empty()) {
        out += word.substr(1);
        i += word.size() - 1;
      }
      continue;
    }
    std::size_t p = i + 1 + word.size();
    if (p < n && latex[p] == '*') ++p;
    p = skip_spaces(latex, p);
    std::size_t scan_end = 0;
    while (p < n && latex[p] == '[' && scan_optional(latex, p, scan_end)) {
      p = skip_spaces(latex, scan_end);
    }
    if (p < n && latex[p] == '{' && scan_group(latex, p, scan_end)) {
      out += "[CIT]";
      i = scan_end;
      continue;
    }
    // Unbalanced or missing braces: blank out through end of line.
    if (warnings) ++warnings->unbalanced_citation;
    out += "[CIT]";
    while (i < n && latex[i] != '\n') ++i;
  }
  return out;
}

namespace {

const std::set<std::string>& display_math_envs() {
  static const std::set<std::string> envs = {
      "equation",  "equation*", "align",    "align*",
      "eqnarray",  "eqnarray*", "gather",   "gather*",
      "multline",  "multline*", "displaymath"};
  return envs;
}

// Reads the {env} name after \begin or \end at pos (the backslash). Returns
// empty when malformed; `end` points past the closing brace.
std::string read_env_name(const std::string& text, std::size_t pos,
                          std::size_t keyword_len, std::size_t& end) {
  std::size_t p = skip_spaces(text, pos + keyword_len);
  std::size_t close = 0;
  if (p < text.size() && text[p] == '{' && scan_group(text, p, close)) {
    end = close;
    return text.substr(p + 1, close - p - 2);
  }
  return std::string();
}

}  // namespace

std::string replace_display_math(const std::string& latex,
                                 ConversionWarnings* warnings) {
  std::string out;
  out.reserve(latex.size());
  std::size_t i = 0;
  const std::size_t n = latex.size();

  auto unterminated = [&]() {
    out += "FORMULA";
    if (warnings) ++warnings->unterminated_math;
    i = n;
  };

  while (i < n) {
    char c = latex[i];
    if (c == '\\' && i + 1 < n) {
      char next = latex[i + 1];
      if (next == '[') {
        std::size_t close = latex.find("\\]", i + 2);
        if (close == std::string::npos) {
          unterminated();
          continue;
        }
        out += "FORMULA";
        i = close + 2;
        continue;
      }
      if (next == '$') {  // escaped dollar: copy, do not treat as math
        out += "\\$";
        i += 2;
        continue;
      }
      std::string word = control_word(latex, i);
      if (word == "begin") {
        std::size_t after_name = 0;
        std::string env = read_env_name(latex, i, 1 + word.size(), after_name);
        if (!env.empty() && display_math_envs().count(env)) {
          std::string closer = "\\end{" + env + "}";
          std::size_t close = latex.find(closer, after_name);
          if (close == std::string::npos) {
            unterminated();
            continue;
          }
          out += "FORMULA";
          i = close + closer.size();
          continue;
        }
      }
      out.push_back('\\');
      out.push_back(next);
      i += 2;
      if (!word.empty()) {
        out += word.substr(1);
        i += word.size() - 1;
      }
      continue;
    }
    if (c == '$') {
      bool display = i + 1 < n && latex[i + 1] == '$';
      if (display) {
        std::size_t close = i + 2;
        while (true) {
          close = latex.find("$$", close);
          if (close == std::string::npos) break;
          if (!is_escaped(latex, close)) break;
          ++close;
        }
        if (close == std::string::npos) {
          unterminated();
          continue;
        }
        out += "FORMULA";
        i = close + 2;
        continue;
      }
      // Inline math: preserve verbatim through the matching $.
      std::size_t close = i + 1;
      while (close < n && !(latex[close] == '$' && !is_escaped(latex, close))) {
        ++close;
      }
      if (close >= n) {
        // Unpaired single $: keep the rest as ordinary text.
        out += latex.substr(i);
        i = n;
        continue;
      }
      out += latex.substr(i, close - i + 1);
      i = close + 1;
      continue;
    }
    out.push_back(c);
    ++i;
  }
  return out;
}

namespace {

const std::set<std::string>& dropped_envs() {
  static const std::set<std::string> envs = {
      "figure",   "figure*",   "table",        "table*",
      "tabular",  "tabular*",  "tabularx",     "longtable",
      "wrapfigure", "wraptable", "sidewaysfigure", "sidewaystable"};
  return envs;
}

const std::set<std::string>& section_commands() {
  static const std::set<std::string> cmds = {
      "chapter", "section", "subsection", "subsubsection",
      "paragraph", "subparagraph"};
  return cmds;
}

const std::set<std::string>& ref_commands() {
  static const std::set<std::string> cmds = {
      "label", "ref", "eqref", "pageref", "autoref",
      "cref",  "Cref", "vref",  "nameref"};
  return cmds;
}

// Commands whose arguments are machinery, not prose.
const std::set<std::string>& dropped_arg_commands() {
  static const std::set<std::string> cmds = {
      "includegraphics", "input",     "include",   "bibliography",
      "bibliographystyle", "usepackage", "documentclass", "vspace",
      "hspace",          "setlength", "addtolength", "graphicspath",
      "pagestyle",       "thispagestyle", "newcommand", "renewcommand",
      "def",             "setcounter", "numberwithin", "keywords"};
  return cmds;
}

class Demarkup {
 public:
  explicit Demarkup(ConversionWarnings* warnings) : warnings_(warnings) {}

  std::string run(const std::string& latex) {
    std::string body = latex;
    const std::string begin_doc = "\\begin{document}";
    std::size_t start = latex.find(begin_doc);
    if (start == std::string::npos) {
      if (warnings_) ++warnings_->missing_begin_document;
    } else {
      body = latex.substr(start + begin_doc.size());
    }
    std::size_t end_doc = body.find("\\end{document}");
    if (end_doc != std::string::npos) body = body.substr(0, end_doc);

    std::string out;
    process(body, out);
    return text::trim(collapse_blank_runs(out));
  }

  // Any whitespace run holding two or more newlines becomes exactly one
  // blank line, so block emission and source line breaks cannot stack.
  static std::string collapse_blank_runs(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
      const char c = s[i];
      if (c == '\n' || c == ' ' || c == '\t') {
        std::size_t j = i;
        int newlines = 0;
        while (j < s.size() &&
               (s[j] == '\n' || s[j] == ' ' || s[j] == '\t')) {
          if (s[j] == '\n') ++newlines;
          ++j;
        }
        if (newlines >= 2) {
          out += "\n\n";
        } else {
          out.append(s, i, j - i);
        }
        i = j;
        continue;
      }
      out.push_back(c);
      ++i;
    }
    return out;
  }

 private:
  ConversionWarnings* warnings_;

  // Ensures the output ends at a paragraph boundary before emitting a block
  // element such as a section title or caption.
  static void paragraph_break(std::string& out) {
    std::size_t e = out.size();
    while (e > 0 && (out[e - 1] == ' ' || out[e - 1] == '\t' ||
                     out[e - 1] == '\n')) {
      --e;
    }
    out.resize(e);
    if (!out.empty()) out += "\n\n";
  }

  void emit_block(const std::string& content, std::string& out) {
    std::string inner;
    process(content, inner);
    inner = text::trim(inner);
    if (inner.empty()) return;
    paragraph_break(out);
    out += inner;
    out += "\n\n";
  }

  // Skips a dropped environment body, emitting any \caption{...} contents
  // as standalone paragraphs. Handles nesting of the same environment name.
  std::size_t skip_environment(const std::string& text, std::size_t pos,
                               const std::string& env, std::string& out) {
    const std::string opener = "\\begin{" + env + "}";
    const std::string closer = "\\end{" + env + "}";
    int depth = 1;
    std::size_t i = pos;
    while (i < text.size() && depth > 0) {
      if (text[i] != '\\') {
        ++i;
        continue;
      }
      if (text.compare(i, opener.size(), opener) == 0) {
        ++depth;
        i += opener.size();
        continue;
      }
      if (text.compare(i, closer.size(), closer) == 0) {
        --depth;
        i += closer.size();
        continue;
      }
      std::string word = control_word(text, i);
      if (word == "caption") {
        std::size_t p = i + 1 + word.size();
        std::size_t scan_end = 0;
        if (p < text.size() && text[p] == '[' &&
            scan_optional(text, p, scan_end)) {
          p = scan_end;
        }
        if (p < text.size() && text[p] == '{' &&
            scan_group(text, p, scan_end)) {
          emit_block(text.substr(p + 1, scan_end - p - 2), out);
          i = scan_end;
          continue;
        }
      }
      i += word.empty() ? 1 : 1 + word.size();
    }
    return i;
  }

  void process(const std::string& text, std::string& out) {
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
      char c = text[i];
      if (c == '\\') {
        if (i + 1 >= n) {
          ++i;
          continue;
        }
        char next = text[i + 1];
        if (next == '%' || next == '$' || next == '{' || next == '}' ||
            next == '&' || next == '_' || next == '#') {
          out.push_back(next);  // escaped symbol -> literal
          i += 2;
          continue;
        }
        if (!is_letter(next)) {
          i += 2;  // unknown control symbol: delete
          continue;
        }
        std::string word = control_word(text, i);
        std::size_t p = i + 1 + word.size();
        if (p < n && text[p] == '*') ++p;  // starred variants
        std::size_t scan_end = 0;

        if (word == "begin") {
          std::string env = read_env_name(text, i, 1 + word.size(), scan_end);
          if (!env.empty()) {
            if (dropped_envs().count(env)) {
              i = skip_environment(text, scan_end, env, out);
            } else {
              i = scan_end;  // keep body, drop the marker itself
            }
            continue;
          }
          i = p;
          continue;
        }
        if (word == "end") {
          std::string env = read_env_name(text, i, 1 + word.size(), scan_end);
          i = env.empty() ? p : scan_end;
          continue;
        }
        if (word == "par") {
          out += "\n\n";
          i = p;
          continue;
        }
        if (section_commands().count(word) || word == "caption") {
          while (p < n && text[p] == '[' && scan_optional(text, p, scan_end)) {
            p = scan_end;
          }
          if (p < n && text[p] == '{' && scan_group(text, p, scan_end)) {
            emit_block(text.substr(p + 1, scan_end - p - 2), out);
            i = scan_end;
            continue;
          }
          i = p;
          continue;
        }
        if (ref_commands().count(word)) {
          while (p < n && text[p] == '[' && scan_optional(text, p, scan_end)) {
            p = scan_end;
          }
          if (p < n && text[p] == '{' && scan_group(text, p, scan_end)) {
            p = scan_end;
          }
          out += "[REF]";
          i = p;
          continue;
        }
        if (word == "item") {
          if (p < n && text[p] == '[' && scan_optional(text, p, scan_end)) {
            p = scan_end;
          }
          i = p;
          continue;
        }
        if (dropped_arg_commands().count(word)) {
          // Arguments may alternate between [..] and {..} in any order.
          while (p < n) {
            if (text[p] == '[' && scan_optional(text, p, scan_end)) {
              p = scan_end;
            } else if (text[p] == '{' && scan_group(text, p, scan_end)) {
              p = scan_end;
            } else {
              break;
            }
          }
          i = p;
          continue;
        }
        // Generic command: unwrap one braced argument, else delete. A
        // deleted control word gobbles one following space, as TeX does.
        while (p < n && text[p] == '[' && scan_optional(text, p, scan_end)) {
          p = scan_end;
        }
        if (p < n && text[p] == '{' && scan_group(text, p, scan_end)) {
          process(text.substr(p + 1, scan_end - p - 2), out);
          i = scan_end;
          continue;
        }
        if (p < n && text[p] == ' ') ++p;
        i = p;
        continue;
      }
      if (c == '$') {
        // Inline math: copy verbatim through the matching unescaped $.
        std::size_t close = i + 1;
        while (close < n &&
               !(text[close] == '$' && !is_escaped(text, close))) {
          ++close;
        }
        if (close < n) {
          out += text.substr(i, close - i + 1);
          i = close + 1;
        } else {
          out.push_back('$');
          ++i;
        }
        continue;
      }
      if (c == '{' || c == '}') {
        ++i;  // stray group braces
        continue;
      }
      out.push_back(c);
      ++i;
    }
  }
};

}  // namespace

std::string demarkup(const std::string& latex, ConversionWarnings* warnings) {
  return Demarkup(warnings).run(latex);
}

std::vector<RawParagraph> split_paragraphs(const std::string& plain,
                                           const std::string& doc_id) {
  std::vector<RawParagraph> paragraphs;
  std::string current;
  int position = 0;

  auto flush = [&]() {
    std::string trimmed = text::trim(current);
    if (!trimmed.empty()) {
      paragraphs.push_back(RawParagraph{doc_id, position++, trimmed});
    }
    current.clear();
  };

  std::size_t i = 0;
  const std::size_t n = plain.size();
  std::size_t line_start = 0;
  while (i <= n) {
    if (i == n || plain[i] == '\n') {
      std::string line = text::trim(plain.substr(line_start, i - line_start));
      if (line.empty()) {
        flush();
      } else {
        if (!current.empty()) current.push_back(' ');
        current += line;
      }
      line_start = i + 1;
    }
    ++i;
  }
  flush();
  return paragraphs;
}

std::vector<RawParagraph> convert_document(const SourceDocument& doc,
                                           ConversionWarnings* warnings) {
  std::string text = strip_comments(doc.latex);
  text = normalize_commands(text);
  text = replace_citations(text, warnings);
  text = replace_display_math(text, warnings);
  text = demarkup(text, warnings);
  return split_paragraphs(text, doc.doc_id);
}

}  // namespace cwe::ingest
