#include "cwe/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <iostream>
#include <map>
#include <set>

#include "cwe/batch_builder.hpp"
#include "cwe/corpus_filter.hpp"
#include "cwe/embedding.hpp"
#include "cwe/latex_ingest.hpp"
#include "cwe/tokenizer.hpp"

namespace cwe::pipeline {

namespace fs = std::filesystem;
using io::json;

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c;
  const json paths = j.value("paths", json::object());
  c.sources_dir = paths.value("sources", c.sources_dir);
  c.metadata_path = paths.value("metadata", c.metadata_path);
  c.vocab_path = paths.value("vocab", c.vocab_path);
  c.work_dir = paths.value("work", c.work_dir);

  const json f = j.value("filter", json::object());
  c.min_chars = f.value("min_chars", c.min_chars);
  c.ws_low = f.value("ws_low", c.ws_low);
  c.ws_high = f.value("ws_high", c.ws_high);

  const json p = j.value("packing", json::object());
  c.budget = p.value("budget", c.budget);
  c.tolerance = p.value("tolerance", c.tolerance);
  c.max_pad = p.value("max_pad", c.max_pad);
  c.min_subwords = p.value("min_subwords", c.min_subwords);
  c.max_subwords = p.value("max_subwords", c.max_subwords);

  const json m = j.value("masking", json::object());
  c.mask_rate = m.value("rate", c.mask_rate);
  c.p_mask = m.value("p_mask", c.p_mask);
  c.p_random = m.value("p_random", c.p_random);

  const json e = j.value("encoder", json::object());
  c.encoder.vocab_size = e.value("vocab_size", 0);
  c.encoder.max_positions = e.value("max_positions", 512);
  c.encoder.hidden_dim = e.value("hidden_dim", 64);
  c.encoder.num_layers = e.value("num_layers", 2);
  c.encoder.num_heads = e.value("num_heads", 2);
  c.encoder.ff_dim = e.value("ff_dim", 128);
  c.encoder.dropout_rate = e.value("dropout_rate", 0.0);
  c.encoder.layer_norm_epsilon = e.value("layer_norm_epsilon", 1e-12);
  c.encoder.tie_output = e.value("tie_output", true);

  const json t = j.value("training", json::object());
  c.epochs = t.value("epochs", c.epochs);
  c.optimizer.learning_rate = t.value("learning_rate", 1e-4);
  c.optimizer.beta1 = t.value("beta1", 0.9);
  c.optimizer.beta2 = t.value("beta2", 0.999);
  c.optimizer.epsilon = t.value("epsilon", 1e-8);
  c.optimizer.weight_decay = t.value("weight_decay", 0.01);
  c.optimizer.clip_norm = t.value("clip_norm", 1.0);
  c.optimizer.warmup_fraction = t.value("warmup_fraction", 0.05);
  c.init_from = t.value("init_from", c.init_from);

  const json a = j.value("analysis", json::object());
  c.term = a.value("term", c.term);
  c.layer_policy = a.value("layer_policy", c.layer_policy);
  c.cluster_k = a.value("k", c.cluster_k);
  c.exemplars = a.value("exemplars", c.exemplars);

  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  return c;
}

json PipelineConfig::to_json() const {
  return json{
      {"paths",
       {{"sources", sources_dir},
        {"metadata", metadata_path},
        {"vocab", vocab_path},
        {"work", work_dir}}},
      {"filter",
       {{"min_chars", min_chars}, {"ws_low", ws_low}, {"ws_high", ws_high}}},
      {"packing",
       {{"budget", budget},
        {"tolerance", tolerance},
        {"max_pad", max_pad},
        {"min_subwords", min_subwords},
        {"max_subwords", max_subwords}}},
      {"masking",
       {{"rate", mask_rate}, {"p_mask", p_mask}, {"p_random", p_random}}},
      {"encoder",
       {{"vocab_size", encoder.vocab_size},
        {"max_positions", encoder.max_positions},
        {"hidden_dim", encoder.hidden_dim},
        {"num_layers", encoder.num_layers},
        {"num_heads", encoder.num_heads},
        {"ff_dim", encoder.ff_dim},
        {"dropout_rate", encoder.dropout_rate},
        {"layer_norm_epsilon", encoder.layer_norm_epsilon},
        {"tie_output", encoder.tie_output}}},
      {"training",
       {{"epochs", epochs},
        {"learning_rate", optimizer.learning_rate},
        {"beta1", optimizer.beta1},
        {"beta2", optimizer.beta2},
        {"epsilon", optimizer.epsilon},
        {"weight_decay", optimizer.weight_decay},
        {"clip_norm", optimizer.clip_norm},
        {"warmup_fraction", optimizer.warmup_fraction},
        {"init_from", init_from}}},
      {"analysis",
       {{"term", term},
        {"layer_policy", layer_policy},
        {"k", cluster_k},
        {"exemplars", exemplars}}},
      {"seed", seed},
      {"threads", threads}};
}

void PipelineConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("config field " + field + ": " + why);
  };
  if (min_chars < 0) fail("filter.min_chars", "must be >= 0");
  if (ws_low < 0.0 || ws_low > 1.0) fail("filter.ws_low", "must be in [0,1]");
  if (ws_high < ws_low || ws_high > 1.0) {
    fail("filter.ws_high", "must be in [ws_low,1]");
  }
  if (budget < 1) fail("packing.budget", "must be >= 1");
  if (tolerance < 0.0 || tolerance >= 1.0) {
    fail("packing.tolerance", "must be in [0,1)");
  }
  if (max_pad < 0.0 || max_pad >= 1.0) {
    fail("packing.max_pad", "must be in [0,1)");
  }
  if (min_subwords < 1) fail("packing.min_subwords", "must be >= 1");
  if (max_subwords < min_subwords || max_subwords > 510) {
    fail("packing.max_subwords", "must be in [min_subwords,510]");
  }
  if (mask_rate < 0.0 || mask_rate > 1.0) {
    fail("masking.rate", "must be in [0,1]");
  }
  if (p_mask < 0.0 || p_random < 0.0 || p_mask + p_random > 1.0) {
    fail("masking.p_mask/p_random", "must be >= 0 and sum to <= 1");
  }
  if (epochs < 1) fail("training.epochs", "must be >= 1");
  if (threads < 1) fail("threads", "must be >= 1");
}

namespace {

std::string digest_of_json(const json& j) { return io::fnv1a_hex(j.dump()); }

std::vector<fs::path> sorted_tex_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw MissingArtifactError("missing source directory: " + dir.string());
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".tex") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

void require_file(const fs::path& p, const std::string& producer) {
  if (!fs::is_regular_file(p)) {
    throw MissingArtifactError("missing upstream artifact: " + p.string() +
                               (producer.empty()
                                    ? std::string()
                                    : " (produce it with `cwe " + producer +
                                          "`)"));
  }
}

std::map<std::string, ingest::DocumentDate> load_metadata(
    const fs::path& path) {
  std::map<std::string, ingest::DocumentDate> meta;
  for (const json& row : io::read_jsonl(path)) {
    const std::string id = row.at("id").get<std::string>();
    ingest::DocumentDate d;
    d.year = row.at("year").get<int>();
    d.month = row.at("month").get<int>();
    d.day = row.at("day").get<int>();
    if (id.empty()) throw DataError("metadata entry with empty id");
    if (d.year < 1986 || d.year > 2100) {
      throw DataError("metadata year out of range [1986,2100] for " + id);
    }
    if (d.month < 1 || d.month > 12 || d.day < 1 || d.day > 31) {
      throw DataError("metadata month/day out of range for " + id);
    }
    meta[id] = d;
  }
  return meta;
}

std::vector<ingest::RawParagraph> load_paragraphs(const fs::path& path) {
  std::vector<ingest::RawParagraph> out;
  for (const json& row : io::read_jsonl(path)) {
    ingest::RawParagraph p;
    p.doc_id = row.at("arxiv_id").get<std::string>();
    p.position = row.at("position").get<int>();
    p.text = row.at("text").get<std::string>();
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<filter::ParagraphRecord> load_corpus(const fs::path& path) {
  std::vector<filter::ParagraphRecord> out;
  for (const json& row : io::read_jsonl(path)) {
    filter::ParagraphRecord r;
    r.text = row.at("text").get<std::string>();
    r.characters = row.at("characters").get<std::int64_t>();
    r.subwords = row.at("subwords").get<std::int64_t>();
    r.arxiv_id = row.at("arxiv_id").get<std::string>();
    r.year = row.at("year").get<int>();
    r.month = row.at("month").get<int>();
    r.day = row.at("day").get<int>();
    r.position = row.at("position").get<int>();
    out.push_back(std::move(r));
  }
  return out;
}

json histogram_to_json(const filter::Histogram& h) {
  return json{{"min_edge", h.min_edge},
              {"bin_width", h.bin_width},
              {"counts", h.counts},
              {"underflow", h.underflow},
              {"overflow", h.overflow}};
}

std::string histogram_to_csv(const filter::Histogram& h) {
  std::string csv = "bin_edge,count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    const double edge = h.min_edge + h.bin_width * static_cast<double>(i);
    json e = edge;  // reuse the JSON float formatter for stable output
    csv += e.dump();
    csv += ',';
    csv += std::to_string(h.counts[i]);
    csv += '\n';
  }
  return csv;
}

}  // namespace

Pipeline::Pipeline(PipelineConfig config, bool force)
    : config_(std::move(config)), force_(force), work_(config_.work_dir) {
  config_.validate();
  fs::create_directories(work_);
  lock_path_ = work_ / ".cwe_lock";
  // One invocation owns the work directory; a stale lock from a dead
  // process is reclaimed.
  for (int attempt = 0; attempt < 2; ++attempt) {
    lock_fd_ = ::open(lock_path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (lock_fd_ >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      [[maybe_unused]] auto n = ::write(lock_fd_, pid.data(), pid.size());
      return;
    }
    std::string old_pid;
    try {
      old_pid = io::read_file(lock_path_);
    } catch (const std::exception&) {
    }
    while (!old_pid.empty() &&
           (old_pid.back() == '\n' || old_pid.back() == '\r')) {
      old_pid.pop_back();
    }
    if (!old_pid.empty() && fs::exists(fs::path("/proc") / old_pid)) {
      throw MissingArtifactError("work directory " + work_.string() +
                                 " is locked by running process " + old_pid);
    }
    fs::remove(lock_path_);
  }
  throw MissingArtifactError("cannot acquire lock in " + work_.string());
}

Pipeline::~Pipeline() {
  if (lock_fd_ >= 0) {
    ::close(lock_fd_);
    std::error_code ec;
    fs::remove(lock_path_, ec);
  }
}

Pipeline::StagePlan Pipeline::plan_for(const std::string& name) const {
  StagePlan plan;
  json cfg;  // the stage-relevant configuration slice
  if (name == "ingest") {
    for (const auto& f : sorted_tex_files(config_.sources_dir)) {
      plan.inputs.push_back(f);
    }
    require_file(config_.metadata_path, "");
    plan.inputs.push_back(config_.metadata_path);
  } else if (name == "filter" || name == "stats") {
    require_file(work_ / "paragraphs.jsonl", "ingest");
    plan.inputs.push_back(work_ / "paragraphs.jsonl");
    cfg = json{{"min_chars", config_.min_chars},
               {"ws_low", config_.ws_low},
               {"ws_high", config_.ws_high}};
  } else if (name == "tokenize") {
    require_file(work_ / "filtered.jsonl", "filter");
    require_file(config_.metadata_path, "");
    require_file(config_.vocab_path, "");
    plan.inputs.push_back(work_ / "filtered.jsonl");
    plan.inputs.push_back(config_.metadata_path);
    plan.inputs.push_back(config_.vocab_path);
  } else if (name == "pack") {
    require_file(work_ / "sequences.jsonl", "tokenize");
    require_file(config_.vocab_path, "");
    plan.inputs.push_back(work_ / "sequences.jsonl");
    plan.inputs.push_back(config_.vocab_path);
    cfg = json{{"budget", config_.budget},
               {"tolerance", config_.tolerance},
               {"max_pad", config_.max_pad},
               {"min_subwords", config_.min_subwords},
               {"max_subwords", config_.max_subwords},
               {"rate", config_.mask_rate},
               {"p_mask", config_.p_mask},
               {"p_random", config_.p_random},
               {"seed", config_.seed}};
  } else if (name == "train") {
    require_file(work_ / "batch_manifest.jsonl", "pack");
    require_file(config_.vocab_path, "");
    plan.inputs.push_back(work_ / "batch_manifest.jsonl");
    plan.inputs.push_back(config_.vocab_path);
    if (!config_.init_from.empty()) {
      require_file(fs::path(config_.init_from) / "config.json", "train");
      plan.inputs.push_back(fs::path(config_.init_from) / "config.json");
    }
    json enc{{"vocab_size", config_.encoder.vocab_size},
             {"max_positions", config_.encoder.max_positions},
             {"hidden_dim", config_.encoder.hidden_dim},
             {"num_layers", config_.encoder.num_layers},
             {"num_heads", config_.encoder.num_heads},
             {"ff_dim", config_.encoder.ff_dim},
             {"dropout_rate", config_.encoder.dropout_rate},
             {"layer_norm_epsilon", config_.encoder.layer_norm_epsilon},
             {"tie_output", config_.encoder.tie_output}};
    cfg = json{{"encoder", enc},
               {"epochs", config_.epochs},
               {"learning_rate", config_.optimizer.learning_rate},
               {"beta1", config_.optimizer.beta1},
               {"beta2", config_.optimizer.beta2},
               {"epsilon", config_.optimizer.epsilon},
               {"weight_decay", config_.optimizer.weight_decay},
               {"clip_norm", config_.optimizer.clip_norm},
               {"warmup_fraction", config_.optimizer.warmup_fraction},
               {"init_from", config_.init_from},
               {"seed", config_.seed}};
  } else if (name == "embed") {
    require_file(work_ / "corpus.jsonl", "tokenize");
    require_file(work_ / "checkpoint" / "config.json", "train");
    require_file(config_.vocab_path, "");
    plan.inputs.push_back(work_ / "corpus.jsonl");
    plan.inputs.push_back(work_ / "checkpoint" / "config.json");
    plan.inputs.push_back(config_.vocab_path);
    cfg = json{{"term", config_.term}, {"layer_policy", config_.layer_policy}};
  } else if (name == "senses") {
    require_file(work_ / "embeddings.jsonl", "embed");
    require_file(work_ / "embeddings.bin", "embed");
    require_file(work_ / "corpus.jsonl", "tokenize");
    plan.inputs.push_back(work_ / "embeddings.jsonl");
    plan.inputs.push_back(work_ / "embeddings.bin");
    plan.inputs.push_back(work_ / "corpus.jsonl");
    cfg = json{{"k", config_.cluster_k},
               {"exemplars", config_.exemplars},
               {"seed", config_.seed}};
  } else {
    throw ConfigError("unknown stage: " + name);
  }
  plan.config_digest =
      digest_of_json(json{{"tool", kToolVersion}, {"stage", name},
                          {"cfg", cfg}});
  return plan;
}

namespace {

// Paths inside the work directory are stored work-relative, so two runs in
// different directories write byte-identical manifests.
std::string manifest_key(const fs::path& work, const fs::path& p) {
  const std::string n = p.lexically_normal().string();
  const std::string w = work.lexically_normal().string();
  if (n.size() > w.size() + 1 && n.compare(0, w.size(), w) == 0 &&
      n[w.size()] == '/') {
    return n.substr(w.size() + 1);
  }
  return n;
}

fs::path resolve_key(const fs::path& work, const std::string& key) {
  const fs::path p(key);
  if (p.is_absolute()) return p;
  const fs::path inside = work / p;
  if (fs::exists(inside)) return inside;
  return p;
}

}  // namespace

bool Pipeline::up_to_date(const std::string& name,
                          const StagePlan& plan) const {
  const fs::path manifest_path = work_ / (name + "_manifest.json");
  if (!fs::is_regular_file(manifest_path)) return false;
  json manifest;
  try {
    manifest = json::parse(io::read_file(manifest_path));
  } catch (const std::exception&) {
    return false;
  }
  if (manifest.value("config_digest", "") != plan.config_digest) return false;
  if (manifest.value("tool_version", "") != kToolVersion) return false;

  json inputs = manifest.value("inputs", json::object());
  if (inputs.size() != plan.inputs.size()) return false;
  for (const auto& p : plan.inputs) {
    const std::string key = manifest_key(work_, p);
    if (!inputs.contains(key)) return false;
    if (!fs::is_regular_file(p)) return false;
    if (inputs.at(key).get<std::string>() != io::digest_file(p)) {
      return false;
    }
  }
  const json outputs = manifest.value("outputs", json::object());
  for (const auto& [key, digest] : outputs.items()) {
    const fs::path p = resolve_key(work_, key);
    if (!fs::is_regular_file(p)) return false;
    if (digest.get<std::string>() != io::digest_file(p)) return false;
  }
  return true;
}

void Pipeline::write_manifest(
    const std::string& name, const StagePlan& plan,
    const std::vector<fs::path>& outputs, const io::json& extra) const {
  json inputs = json::object();
  for (const auto& p : plan.inputs) {
    inputs[manifest_key(work_, p)] = io::digest_file(p);
  }
  json outs = json::object();
  for (const auto& p : outputs) {
    outs[manifest_key(work_, p)] = io::digest_file(p);
  }
  json manifest{{"tool_version", kToolVersion},
                {"stage", name},
                {"config_digest", plan.config_digest},
                {"seed", config_.seed},
                {"threads", config_.threads},
                {"inputs", inputs},
                {"outputs", outs},
                {"stats", extra}};
  io::write_file(work_ / (name + "_manifest.json"), manifest.dump(2) + "\n");
}

StageResult Pipeline::run_stage(const std::string& name) {
  const StagePlan plan = plan_for(name);
  if (!force_ && up_to_date(name, plan)) {
    std::cout << name << ": up to date\n";
    return StageResult{name, true};
  }
  std::vector<fs::path> outputs;
  json extra = json::object();
  if (name == "ingest") {
    stage_ingest(plan, outputs, extra);
  } else if (name == "filter") {
    stage_filter(plan, outputs, extra);
  } else if (name == "stats") {
    stage_stats(plan, outputs, extra);
  } else if (name == "tokenize") {
    stage_tokenize(plan, outputs, extra);
  } else if (name == "pack") {
    stage_pack(plan, outputs, extra);
  } else if (name == "train") {
    stage_train(plan, outputs, extra);
  } else if (name == "embed") {
    stage_embed(plan, outputs, extra);
  } else if (name == "senses") {
    stage_senses(plan, outputs, extra);
  }
  write_manifest(name, plan, outputs, extra);
  std::cout << name << ": done\n";
  return StageResult{name, false};
}

std::vector<StageResult> Pipeline::run_all() {
  std::vector<StageResult> results;
  for (const char* stage : {"ingest", "filter", "stats", "tokenize", "pack",
                            "train", "embed", "senses"}) {
    results.push_back(run_stage(stage));
  }
  return results;
}

void Pipeline::stage_ingest(const StagePlan& plan,
                            std::vector<fs::path>& outputs, json& extra) {
  // Metadata is validated here even though paragraphs carry no dates yet;
  // bad metadata should fail the run before hours of conversion.
  load_metadata(config_.metadata_path);

  std::vector<fs::path> tex_files;
  for (const auto& p : plan.inputs) {
    if (p.extension() == ".tex") tex_files.push_back(p);
  }
  // File IO stays on this thread: exceptions cannot unwind out of workers.
  std::vector<ingest::SourceDocument> docs(tex_files.size());
  for (std::size_t i = 0; i < tex_files.size(); ++i) {
    docs[i].doc_id = tex_files[i].stem().string();
    docs[i].latex = io::read_file(tex_files[i]);
    if (docs[i].doc_id.empty()) {
      throw DataError("source file with empty document id: " +
                      tex_files[i].string());
    }
    if (docs[i].latex.empty()) {
      throw DataError("empty LaTeX source: " + tex_files[i].string());
    }
  }

  std::vector<std::vector<ingest::RawParagraph>> per_doc(tex_files.size());
  std::vector<ingest::ConversionWarnings> warnings(tex_files.size());
  io::parallel_for(tex_files.size(), config_.threads, [&](std::size_t i) {
    per_doc[i] = ingest::convert_document(docs[i], &warnings[i]);
  });

  std::vector<json> rows;
  std::vector<json> warn_rows;
  std::int64_t total = 0;
  for (std::size_t i = 0; i < per_doc.size(); ++i) {
    for (const auto& p : per_doc[i]) {
      rows.push_back(json{{"arxiv_id", p.doc_id},
                          {"position", p.position},
                          {"text", p.text}});
      ++total;
    }
    warn_rows.push_back(
        json{{"arxiv_id", docs[i].doc_id},
             {"unbalanced_citation", warnings[i].unbalanced_citation},
             {"unterminated_math", warnings[i].unterminated_math},
             {"missing_begin_document", warnings[i].missing_begin_document}});
  }
  io::write_jsonl(work_ / "paragraphs.jsonl", rows);
  io::write_jsonl(work_ / "ingest_warnings.jsonl", warn_rows);
  outputs = {work_ / "paragraphs.jsonl", work_ / "ingest_warnings.jsonl"};
  extra = json{{"documents", tex_files.size()}, {"paragraphs", total}};
}

void Pipeline::stage_filter(const StagePlan&, std::vector<fs::path>& outputs,
                            json& extra) {
  auto paragraphs = load_paragraphs(work_ / "paragraphs.jsonl");
  std::vector<ingest::RawParagraph> survivors;
  filter::FilterReport report =
      filter::run_filters(paragraphs, survivors, config_.min_chars,
                          config_.ws_low, config_.ws_high);

  std::vector<json> rows;
  rows.reserve(survivors.size());
  for (const auto& p : survivors) {
    rows.push_back(json{{"arxiv_id", p.doc_id},
                        {"position", p.position},
                        {"text", p.text}});
  }
  io::write_jsonl(work_ / "filtered.jsonl", rows);

  json report_json{
      {"input_count", report.input_count},
      {"after_length_count", report.after_length_count},
      {"after_whitespace_count", report.after_whitespace_count},
      {"length_histogram", histogram_to_json(report.length_histogram)},
      {"whitespace_histogram",
       histogram_to_json(report.whitespace_histogram)}};
  io::write_file(work_ / "filter_report.json", report_json.dump(2) + "\n");
  outputs = {work_ / "filtered.jsonl", work_ / "filter_report.json"};
  extra = json{{"input_count", report.input_count},
               {"after_length_count", report.after_length_count},
               {"after_whitespace_count", report.after_whitespace_count}};
}

void Pipeline::stage_stats(const StagePlan&, std::vector<fs::path>& outputs,
                           json& extra) {
  auto paragraphs = load_paragraphs(work_ / "paragraphs.jsonl");
  std::vector<ingest::RawParagraph> survivors;
  filter::FilterReport report =
      filter::run_filters(paragraphs, survivors, config_.min_chars,
                          config_.ws_low, config_.ws_high);
  io::write_file(work_ / "length_histogram.csv",
                 histogram_to_csv(report.length_histogram));
  io::write_file(work_ / "whitespace_histogram.csv",
                 histogram_to_csv(report.whitespace_histogram));
  outputs = {work_ / "length_histogram.csv",
             work_ / "whitespace_histogram.csv"};
  extra = json{{"input_count", report.input_count}};
}

void Pipeline::stage_tokenize(const StagePlan&,
                              std::vector<fs::path>& outputs, json& extra) {
  auto survivors = load_paragraphs(work_ / "filtered.jsonl");
  auto metadata = load_metadata(config_.metadata_path);
  const tok::Vocab vocab = tok::Vocab::load(config_.vocab_path);

  // Subword counts in parallel up front; assembly consumes them through an
  // ordinary counter closure (counting is pure in the text, so a text-keyed
  // lookup is exact).
  std::vector<std::int64_t> counts(survivors.size(), 0);
  io::parallel_for(survivors.size(), config_.threads, [&](std::size_t i) {
    counts[i] = tok::count_subwords(survivors[i].text, vocab);
  });
  std::map<std::string, std::int64_t> count_of;
  for (std::size_t i = 0; i < survivors.size(); ++i) {
    count_of[survivors[i].text] = counts[i];
  }
  std::int64_t skipped = 0;
  auto records = filter::assemble_records(
      survivors, metadata,
      [&](const std::string& text) {
        auto it = count_of.find(text);
        return it != count_of.end() ? it->second
                                    : tok::count_subwords(text, vocab);
      },
      &skipped);

  std::vector<json> corpus_rows;
  std::vector<json> seq_rows;
  corpus_rows.reserve(records.size());
  for (const auto& r : records) {
    corpus_rows.push_back(json{{"text", r.text},
                               {"characters", r.characters},
                               {"subwords", r.subwords},
                               {"arxiv_id", r.arxiv_id},
                               {"year", r.year},
                               {"month", r.month},
                               {"day", r.day},
                               {"position", r.position}});
  }
  std::vector<tok::TokenSequence> sequences(records.size());
  io::parallel_for(records.size(), config_.threads, [&](std::size_t i) {
    sequences[i] = tok::encode(records[i].text, vocab, 512);
    sequences[i].arxiv_id = records[i].arxiv_id;
    sequences[i].position = records[i].position;
  });
  seq_rows.reserve(sequences.size());
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto& s = sequences[i];
    // `subwords` is the untruncated count; eligibility filtering uses it so
    // over-long paragraphs are excluded rather than truncated into range.
    seq_rows.push_back(json{{"arxiv_id", s.arxiv_id},
                            {"position", s.position},
                            {"subwords", records[i].subwords},
                            {"ids", s.ids},
                            {"word_ids", s.word_ids}});
  }
  io::write_jsonl(work_ / "corpus.jsonl", corpus_rows);
  io::write_jsonl(work_ / "sequences.jsonl", seq_rows);

  // Temporal composition of the finished corpus.
  std::map<int, std::pair<std::set<std::string>, std::int64_t>> by_year;
  for (const auto& r : records) {
    by_year[r.year].first.insert(r.arxiv_id);
    ++by_year[r.year].second;
  }
  std::string year_csv = "year,documents,paragraphs\n";
  for (const auto& [year, entry] : by_year) {
    year_csv += std::to_string(year);
    year_csv += ',';
    year_csv += std::to_string(entry.first.size());
    year_csv += ',';
    year_csv += std::to_string(entry.second);
    year_csv += '\n';
  }
  io::write_file(work_ / "year_counts.csv", year_csv);

  outputs = {work_ / "corpus.jsonl", work_ / "sequences.jsonl",
             work_ / "year_counts.csv"};
  extra = json{{"records", records.size()},
               {"skipped_missing_metadata", skipped}};
}

namespace {

void write_batch_payload(const fs::path& bin_path, const fs::path& hdr_path,
                         const batch::MaskedBatch& mb) {
  std::vector<std::int32_t> flat;
  flat.reserve(static_cast<std::size_t>(mb.size()) * 3);
  flat.insert(flat.end(), mb.input_ids.begin(), mb.input_ids.end());
  flat.insert(flat.end(), mb.labels.begin(), mb.labels.end());
  flat.insert(flat.end(), mb.attention_mask.begin(), mb.attention_mask.end());
  io::write_i32(bin_path, flat);

  const std::int64_t count = mb.size();
  json header{{"rows", mb.rows},
              {"row_length", mb.row_length},
              {"dtype", "int32"},
              {"byte_order", "little"},
              {"arrays",
               json::array({json{{"name", "input_ids"}, {"offset", 0},
                                 {"count", count}},
                            json{{"name", "labels"}, {"offset", count},
                                 {"count", count}},
                            json{{"name", "attention_mask"},
                                 {"offset", 2 * count},
                                 {"count", count}}})}};
  io::write_file(hdr_path, header.dump(2) + "\n");
}

batch::MaskedBatch read_batch_payload(const fs::path& bin_path,
                                      const fs::path& hdr_path) {
  const json header = json::parse(io::read_file(hdr_path));
  batch::MaskedBatch mb;
  mb.rows = header.at("rows").get<std::int32_t>();
  mb.row_length = header.at("row_length").get<std::int32_t>();
  const std::vector<std::int32_t> flat = io::read_i32(bin_path);
  const auto count = static_cast<std::size_t>(mb.size());
  if (flat.size() != count * 3) {
    throw DataError("batch payload size mismatch: " + bin_path.string());
  }
  mb.input_ids.assign(flat.begin(), flat.begin() + count);
  mb.labels.assign(flat.begin() + count, flat.begin() + 2 * count);
  mb.attention_mask.assign(flat.begin() + 2 * count, flat.end());
  return mb;
}

}  // namespace

void Pipeline::stage_pack(const StagePlan&, std::vector<fs::path>& outputs,
                          json& extra) {
  const tok::Vocab vocab = tok::Vocab::load(config_.vocab_path);
  std::vector<tok::TokenSequence> sequences;
  std::int64_t ineligible = 0;
  for (const json& row : io::read_jsonl(work_ / "sequences.jsonl")) {
    tok::TokenSequence s;
    s.arxiv_id = row.at("arxiv_id").get<std::string>();
    s.position = row.at("position").get<int>();
    s.ids = row.at("ids").get<std::vector<std::int32_t>>();
    s.word_ids = row.at("word_ids").get<std::vector<std::int32_t>>();
    // The stored count is pre-truncation, so paragraphs beyond the upper
    // bound are excluded here not silently clipped by the encoder cap.
    const auto subwords = row.value("subwords",
                                    static_cast<std::int64_t>(s.body_size()));
    if (subwords >= config_.min_subwords && subwords <= config_.max_subwords) {
      sequences.push_back(std::move(s));
    } else {
      ++ineligible;
    }
  }

  batch::PackResult packed =
      batch::pack(std::move(sequences), config_.budget, config_.tolerance,
           config_.max_pad, config_.seed);

  const fs::path batches_dir = work_ / "batches";
  fs::create_directories(batches_dir);
  // Stale payloads from a previous differently-sized run would otherwise
  // survive as orphans.
  for (const auto& entry : fs::directory_iterator(batches_dir)) {
    fs::remove(entry.path());
  }

  std::vector<batch::MaskedBatch> masked(packed.batches.size());
  io::parallel_for(packed.batches.size(), config_.threads,
                   [&](std::size_t i) {
                     const std::uint64_t mask_seed =
                         DetRng(config_.seed).derive(i).next_u64();
                     masked[i] = batch::whole_word_mask(
                         packed.batches[i], vocab, config_.mask_rate,
                         mask_seed, config_.p_mask, config_.p_random);
                   });

  std::vector<json> manifest_rows;
  outputs.clear();
  char name[32];
  for (std::size_t i = 0; i < packed.batches.size(); ++i) {
    std::snprintf(name, sizeof(name), "batch_%05zu", i);
    const fs::path bin = batches_dir / (std::string(name) + ".bin");
    const fs::path hdr = batches_dir / (std::string(name) + ".json");
    write_batch_payload(bin, hdr, masked[i]);
    json rows = json::array();
    for (const auto& r : packed.batches[i].rows) {
      rows.push_back(json{{"arxiv_id", r.arxiv_id}, {"position", r.position}});
    }
    manifest_rows.push_back(
        json{{"batch_index", i},
             {"payload", manifest_key(work_, bin)},
             {"header", manifest_key(work_, hdr)},
             {"rows", rows},
             {"row_length", packed.batches[i].row_length},
             {"total_tokens", packed.batches[i].total_tokens()},
             {"padding_tokens", packed.batches[i].padding_tokens()},
             {"mask_seed", masked[i].mask_seed},
             {"rows_without_maskable_words",
              masked[i].rows_without_maskable_words}});
    outputs.push_back(bin);
    outputs.push_back(hdr);
  }
  io::write_jsonl(work_ / "batch_manifest.jsonl", manifest_rows);
  outputs.push_back(work_ / "batch_manifest.jsonl");

  std::vector<json> leftover_rows;
  for (const auto& s : packed.leftovers) {
    leftover_rows.push_back(
        json{{"arxiv_id", s.arxiv_id}, {"position", s.position}});
  }
  io::write_jsonl(work_ / "leftovers.jsonl", leftover_rows);
  outputs.push_back(work_ / "leftovers.jsonl");

  extra = json{{"batches", packed.batches.size()},
               {"leftovers", packed.leftovers.size()},
               {"ineligible", ineligible}};
}

void Pipeline::stage_train(const StagePlan&, std::vector<fs::path>& outputs,
                           json& extra) {
  const tok::Vocab vocab = tok::Vocab::load(config_.vocab_path);
  model::EncoderConfig enc = config_.encoder;
  if (enc.vocab_size == 0) enc.vocab_size = vocab.size();
  if (enc.vocab_size != vocab.size()) {
    throw ConfigError("config field encoder.vocab_size: " +
                      std::to_string(enc.vocab_size) +
                      " does not match vocabulary size " +
                      std::to_string(vocab.size()));
  }
  try {
    enc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  std::vector<batch::MaskedBatch> batches;
  for (const json& row : io::read_jsonl(work_ / "batch_manifest.jsonl")) {
    batches.push_back(read_batch_payload(
        resolve_key(work_, row.at("payload").get<std::string>()),
        resolve_key(work_, row.at("header").get<std::string>())));
  }
  if (batches.empty()) {
    throw DataError("no batches to train on (all sequences ineligible?)");
  }

  model::TrainState state;
  if (!config_.init_from.empty()) {
    state = model::load_checkpoint(config_.init_from, &enc);
    state.optimizer = config_.optimizer;
  } else {
    state = model::make_train_state(enc, config_.seed, config_.optimizer);
  }
  state.threads = config_.threads;

  // A previous run with more epochs or a different config would otherwise
  // leave stale tensors and epoch directories behind as orphans.
  std::error_code ec;
  fs::remove_all(work_ / "checkpoints", ec);
  fs::remove_all(work_ / "checkpoint", ec);

  model::TrainOptions options;
  options.epochs = config_.epochs;
  options.seed = config_.seed;
  options.checkpoint_dir = work_ / "checkpoints";
  train(state, batches, options);

  const fs::path final_dir = work_ / "checkpoint";
  save_checkpoint(state, final_dir);

  outputs.clear();
  for (const auto& entry : fs::recursive_directory_iterator(final_dir)) {
    if (entry.is_regular_file()) outputs.push_back(entry.path());
  }
  for (const auto& entry :
       fs::recursive_directory_iterator(work_ / "checkpoints")) {
    if (entry.is_regular_file()) outputs.push_back(entry.path());
  }
  std::sort(outputs.begin(), outputs.end());
  extra = json{{"steps", state.step},
               {"final_loss", state.loss_history.empty()
                                  ? 0.0
                                  : state.loss_history.back().second}};
}

void Pipeline::stage_embed(const StagePlan&, std::vector<fs::path>& outputs,
                           json& extra) {
  if (config_.term.empty()) {
    throw ConfigError("config field analysis.term: required for embed");
  }
  const tok::Vocab vocab = tok::Vocab::load(config_.vocab_path);
  const auto corpus = load_corpus(work_ / "corpus.jsonl");
  model::TrainState state = model::load_checkpoint(work_ / "checkpoint");
  if (state.params.config.vocab_size != vocab.size()) {
    throw ConfigError(
        "checkpoint was trained with vocab_size " +
        std::to_string(state.params.config.vocab_size) +
        " but the vocabulary file has " + std::to_string(vocab.size()) +
        " entries");
  }
  analysis::LayerPolicy policy;
  try {
    policy = analysis::LayerPolicy::parse(config_.layer_policy);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config field analysis.layer_policy: ") +
                      e.what());
  }

  const auto occurrences = analysis::find_occurrences(corpus, config_.term);
  analysis::ExtractResult result =
      analysis::extract_cwe(state.params, corpus, occurrences, vocab,
                            config_.term, policy, config_.threads);

  std::vector<json> rows;
  std::vector<float> flat;
  const std::size_t dim =
      static_cast<std::size_t>(state.params.config.hidden_dim);
  flat.reserve(result.records.size() * dim);
  for (std::size_t i = 0; i < result.records.size(); ++i) {
    const auto& r = result.records[i];
    rows.push_back(json{{"index", i},
                        {"term", r.term},
                        {"arxiv_id", r.arxiv_id},
                        {"position", r.position},
                        {"year", r.year},
                        {"token_span", json::array({r.span_begin, r.span_end})},
                        {"layer_policy", policy.to_string()}});
    flat.insert(flat.end(), r.vector.begin(), r.vector.end());
  }
  io::write_jsonl(work_ / "embeddings.jsonl", rows);
  io::write_f32(work_ / "embeddings.bin", flat);
  json shape{{"count", result.records.size()},
             {"dim", dim},
             {"dtype", "float32"},
             {"byte_order", "little"},
             {"file", "embeddings.bin"}};
  io::write_file(work_ / "embeddings_shape.json", shape.dump(2) + "\n");
  outputs = {work_ / "embeddings.jsonl", work_ / "embeddings.bin",
             work_ / "embeddings_shape.json"};
  extra = json{{"occurrences", occurrences.size()},
               {"embedded", result.records.size()},
               {"skipped_truncated", result.skipped_truncated}};
}

void Pipeline::stage_senses(const StagePlan&, std::vector<fs::path>& outputs,
                            json& extra) {
  const auto corpus = load_corpus(work_ / "corpus.jsonl");
  const json shape =
      json::parse(io::read_file(work_ / "embeddings_shape.json"));
  const auto dim = shape.at("dim").get<std::size_t>();
  const auto count = shape.at("count").get<std::size_t>();
  const std::vector<float> flat = io::read_f32(work_ / "embeddings.bin");
  if (dim == 0 || flat.size() != count * dim) {
    throw DataError("embeddings.bin holds " + std::to_string(flat.size()) +
                    " floats, expected " + std::to_string(count * dim));
  }

  std::vector<analysis::EmbeddingRecord> records;
  for (const json& row : io::read_jsonl(work_ / "embeddings.jsonl")) {
    analysis::EmbeddingRecord r;
    r.term = row.at("term").get<std::string>();
    r.arxiv_id = row.at("arxiv_id").get<std::string>();
    r.position = row.at("position").get<int>();
    r.year = row.at("year").get<int>();
    r.span_begin = row.at("token_span").at(0).get<std::int32_t>();
    r.span_end = row.at("token_span").at(1).get<std::int32_t>();
    const auto idx = row.at("index").get<std::size_t>();
    if (idx >= count) {
      throw DataError("embedding index " + std::to_string(idx) +
                      " out of range");
    }
    r.vector.assign(flat.begin() + idx * dim, flat.begin() + (idx + 1) * dim);
    records.push_back(std::move(r));
  }
  if (records.empty()) {
    throw DataError("no embeddings to cluster; did `embed` find the term?");
  }

  auto clusters = analysis::cluster_senses(
      records, config_.cluster_k, config_.seed,
      static_cast<std::size_t>(config_.exemplars));

  std::map<std::pair<std::string, int>, std::string> text_of;
  for (const auto& r : corpus) text_of[{r.arxiv_id, r.position}] = r.text;
  auto lookup = [&](const std::string& id, int pos) {
    auto it = text_of.find({id, pos});
    return it == text_of.end() ? std::string() : it->second;
  };

  json cluster_rows = json::array();
  for (const auto& c : clusters) {
    const auto texts = analysis::nearest_contexts(
        c, records, lookup, static_cast<std::size_t>(config_.exemplars));
    cluster_rows.push_back(json{{"cluster_id", c.cluster_id},
                                {"size", c.member_ids.size()},
                                {"centroid", c.centroid},
                                {"member_ids", c.member_ids},
                                {"exemplar_ids", c.exemplar_ids},
                                {"exemplar_texts", texts}});
  }
  json clusters_json{{"term", config_.term},
                     {"k", clusters.size()},
                     {"clusters", cluster_rows}};
  io::write_file(work_ / "clusters.json", clusters_json.dump(2) + "\n");

  const analysis::SenseTimeline timeline =
      analysis::sense_timeline(clusters, records);
  json years = json::array();
  std::string csv = "year,cluster_id,proportion\n";
  for (const auto& [year, props] : timeline.proportions) {
    json p = json::object();
    for (const auto& [cid, value] : props) {
      p[std::to_string(cid)] = value;
      csv += std::to_string(year);
      csv += ',';
      csv += std::to_string(cid);
      csv += ',';
      csv += json(value).dump();
      csv += '\n';
    }
    years.push_back(json{{"year", year}, {"proportions", p}});
  }
  io::write_file(work_ / "timeline.json",
                 json{{"term", config_.term}, {"years", years}}.dump(2) +
                     "\n");
  io::write_file(work_ / "timeline.csv", csv);
  outputs = {work_ / "clusters.json", work_ / "timeline.json",
             work_ / "timeline.csv"};
  extra = json{{"clusters", clusters.size()}, {"records", records.size()}};
}

}  // namespace cwe::pipeline
