#include "cwe/corpus_filter.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cwe/text_utils.hpp"

namespace cwe::filter {

std::int64_t Histogram::total() const {
  std::int64_t sum = underflow + overflow;
  for (std::int64_t c : counts) sum += c;
  return sum;
}

void Histogram::merge(const Histogram& other) {
  if (other.counts.size() != counts.size() || other.min_edge != min_edge ||
      other.bin_width != bin_width) {
    throw std::invalid_argument("histogram merge with mismatched binning");
  }
  underflow += other.underflow;
  overflow += other.overflow;
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

std::int64_t char_count(const std::string& text) {
  return static_cast<std::int64_t>(text::codepoint_count(text));
}

double whitespace_rate(const std::string& text) {
  std::int64_t total = 0;
  std::int64_t white = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    char32_t cp = text::decode_utf8(text, pos);
    ++total;
    if (text::is_unicode_whitespace(cp)) ++white;
  }
  if (total == 0) return 1.0;
  return static_cast<double>(white) / static_cast<double>(total);
}

std::vector<ingest::RawParagraph> filter_length(
    const std::vector<ingest::RawParagraph>& paragraphs,
    std::int64_t min_chars) {
  std::vector<ingest::RawParagraph> kept;
  kept.reserve(paragraphs.size());
  for (const auto& p : paragraphs) {
    if (char_count(p.text) >= min_chars) kept.push_back(p);
  }
  return kept;
}

std::vector<ingest::RawParagraph> filter_whitespace(
    const std::vector<ingest::RawParagraph>& paragraphs, double low,
    double high) {
  std::vector<ingest::RawParagraph> kept;
  kept.reserve(paragraphs.size());
  for (const auto& p : paragraphs) {
    double rate = whitespace_rate(p.text);
    if (rate >= low && rate <= high) kept.push_back(p);
  }
  return kept;
}

Histogram histogram(const std::vector<double>& values, double bin_width,
                    double min_edge, double max_edge) {
  if (!(bin_width > 0.0)) {
    throw std::invalid_argument("histogram bin_width must be positive");
  }
  if (!(max_edge > min_edge)) {
    throw std::invalid_argument("histogram range must be non-empty");
  }
  Histogram h;
  h.min_edge = min_edge;
  h.bin_width = bin_width;
  const auto n_bins = static_cast<std::size_t>(
      std::ceil((max_edge - min_edge) / bin_width - 1e-12));
  h.counts.assign(n_bins, 0);
  for (double v : values) {
    if (v < min_edge) {
      ++h.underflow;
      continue;
    }
    auto idx = static_cast<std::size_t>((v - min_edge) / bin_width);
    if (v >= max_edge || idx >= n_bins) {
      ++h.overflow;
      continue;
    }
    ++h.counts[idx];
  }
  return h;
}

FilterReport run_filters(const std::vector<ingest::RawParagraph>& input,
                         std::vector<ingest::RawParagraph>& survivors,
                         std::int64_t min_chars, double ws_low,
                         double ws_high) {
  FilterReport report;
  report.input_count = static_cast<std::int64_t>(input.size());

  std::vector<double> lengths;
  lengths.reserve(input.size());
  for (const auto& p : input) {
    lengths.push_back(static_cast<double>(char_count(p.text)));
  }
  report.length_histogram = histogram(lengths, 50.0, 0.0, 2000.0);

  auto after_length = filter_length(input, min_chars);
  report.after_length_count = static_cast<std::int64_t>(after_length.size());

  std::vector<double> rates;
  rates.reserve(after_length.size());
  for (const auto& p : after_length) rates.push_back(whitespace_rate(p.text));
  report.whitespace_histogram = histogram(rates, 0.01, 0.0, 0.5);

  survivors = filter_whitespace(after_length, ws_low, ws_high);
  report.after_whitespace_count = static_cast<std::int64_t>(survivors.size());
  return report;
}

std::vector<ParagraphRecord> assemble_records(
    const std::vector<ingest::RawParagraph>& paragraphs,
    const std::map<std::string, ingest::DocumentDate>& metadata,
    const SubwordCounter& subword_counter, std::int64_t* skipped) {
  std::vector<ParagraphRecord> records;
  records.reserve(paragraphs.size());
  std::int64_t n_skipped = 0;
  for (const auto& p : paragraphs) {
    auto it = metadata.find(p.doc_id);
    if (it == metadata.end()) {
      ++n_skipped;
      continue;
    }
    ParagraphRecord rec;
    rec.text = p.text;
    rec.characters = char_count(p.text);
    rec.subwords = subword_counter(p.text);
    rec.arxiv_id = p.doc_id;
    rec.year = it->second.year;
    rec.month = it->second.month;
    rec.day = it->second.day;
    rec.position = p.position;
    records.push_back(std::move(rec));
  }
  std::sort(records.begin(), records.end(),
            [](const ParagraphRecord& a, const ParagraphRecord& b) {
              if (a.arxiv_id != b.arxiv_id) return a.arxiv_id < b.arxiv_id;
              return a.position < b.position;
            });
  if (skipped) *skipped = n_skipped;
  return records;
}

}  // namespace cwe::filter
