#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cwe::ingest {

struct DocumentDate {
  int year = 0;
  int month = 0;
  int day = 0;
};

struct SourceDocument {
  std::string doc_id;
  std::string latex;
  DocumentDate date;
};

struct RawParagraph {
  std::string doc_id;
  int position = 0;
  std::string text;
};

// Per-document counters for recoverable conversion problems.
struct ConversionWarnings {
  int unbalanced_citation = 0;
  int unterminated_math = 0;
  int missing_begin_document = 0;

  int total() const {
    return unbalanced_citation + unterminated_math + missing_begin_document;
  }
};

// Removes every unescaped % and the rest of its line; \% survives.
std::string strip_comments(const std::string& latex);

// Fixed normalization table: spacing macros -> single space, dash ligatures
// -> en/em dash, \& \_ \# -> literal characters, \\ and \newline -> space,
// accent commands -> composed Unicode. Unknown commands pass through.
std::string normalize_commands(const std::string& latex);

// Citation commands (\cite, \citep, \citet, \citealt, \citeauthor,
// \citeyear, with * and [..] variants) -> the literal token [CIT].
std::string replace_citations(const std::string& latex,
                              ConversionWarnings* warnings = nullptr);

// Display math ($$..$$, \[..\], equation/align/eqnarray/gather/multline/
// displaymath environments) -> the literal token FORMULA. Inline $..$ math
// is preserved verbatim.
std::string replace_display_math(const std::string& latex,
                                 ConversionWarnings* warnings = nullptr);

// Strips the preamble, reduces sectioning commands to their title text,
// drops figure/table/tabular bodies (keeping captions as standalone
// paragraphs), turns \label/\ref-family commands into [REF], unwraps
// formatting commands, and deletes leftover zero-argument commands. Inline
// $..$ spans are copied untouched.
std::string demarkup(const std::string& latex,
                     ConversionWarnings* warnings = nullptr);

// Splits on runs of blank lines; single newlines inside a block collapse to
// one space; blocks are trimmed and empty ones dropped.
std::vector<RawParagraph> split_paragraphs(const std::string& plain,
                                           const std::string& doc_id);

// Full per-document pipeline: comments, normalization, citations, display
// math, de-markup, paragraph split.
std::vector<RawParagraph> convert_document(const SourceDocument& doc,
                                           ConversionWarnings* warnings);

}  // namespace cwe::ingest
