#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cwe/latex_ingest.hpp"

namespace cwe::filter {

// One finished corpus paragraph with full provenance metadata.
struct ParagraphRecord {
  std::string text;
  std::int64_t characters = 0;
  std::int64_t subwords = 0;
  std::string arxiv_id;
  int year = 0;
  int month = 0;
  int day = 0;
  int position = 0;
};

struct Histogram {
  double min_edge = 0.0;
  double bin_width = 1.0;
  std::vector<std::int64_t> counts;
  std::int64_t underflow = 0;
  std::int64_t overflow = 0;

  std::int64_t total() const;
  // Merge of per-worker partials; requires identical binning.
  void merge(const Histogram& other);
};

struct FilterReport {
  std::int64_t input_count = 0;
  std::int64_t after_length_count = 0;
  std::int64_t after_whitespace_count = 0;
  Histogram length_histogram;      // over all input paragraphs
  Histogram whitespace_histogram;  // over the post-length survivors
};

// Unicode code points, not bytes.
std::int64_t char_count(const std::string& text);

// Fraction of code points with the Unicode White_Space property. Empty text
// rates 1.0 (degenerate, always filtered).
double whitespace_rate(const std::string& text);

std::vector<ingest::RawParagraph> filter_length(
    const std::vector<ingest::RawParagraph>& paragraphs,
    std::int64_t min_chars = 250);

// Retains rates inside the closed interval [low, high].
std::vector<ingest::RawParagraph> filter_whitespace(
    const std::vector<ingest::RawParagraph>& paragraphs, double low = 0.1,
    double high = 0.2);

// Left-closed right-open bins over [min_edge, max_edge); out-of-range values
// land in the underflow/overflow counters. Throws std::invalid_argument for
// non-positive bin_width.
Histogram histogram(const std::vector<double>& values, double bin_width,
                    double min_edge, double max_edge);

// Runs both filters and collects the stage counts and distributions.
FilterReport run_filters(const std::vector<ingest::RawParagraph>& input,
                         std::vector<ingest::RawParagraph>& survivors,
                         std::int64_t min_chars = 250, double ws_low = 0.1,
                         double ws_high = 0.2);

using SubwordCounter = std::function<std::int64_t(const std::string&)>;

// Joins surviving paragraphs with per-document metadata; output is sorted by
// (arxiv_id, position). Paragraphs of documents without metadata are skipped
// and counted in *skipped.
std::vector<ParagraphRecord> assemble_records(
    const std::vector<ingest::RawParagraph>& paragraphs,
    const std::map<std::string, ingest::DocumentDate>& metadata,
    const SubwordCounter& subword_counter, std::int64_t* skipped = nullptr);

}  // namespace cwe::filter
