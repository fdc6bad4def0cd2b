#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cwe/encoder.hpp"
#include "cwe/io_util.hpp"
#include "cwe/train.hpp"

namespace cwe::pipeline {

inline constexpr const char* kToolVersion = "0.1.0";

// Exit-code carriers for the CLI: 2 missing upstream artifact, 3 config
// violation, 4 data error.
class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PipelineConfig {
  // paths
  std::string sources_dir;
  std::string metadata_path;
  std::string vocab_path;
  std::string work_dir = "work";

  // filter thresholds
  std::int64_t min_chars = 250;
  double ws_low = 0.1;
  double ws_high = 0.2;

  // packing
  std::int64_t budget = 8192;
  double tolerance = 0.05;
  double max_pad = 0.20;
  std::int32_t min_subwords = 48;
  std::int32_t max_subwords = 510;

  // masking
  double mask_rate = 0.15;
  double p_mask = 0.8;
  double p_random = 0.1;

  // encoder (vocab_size 0 = take it from the vocabulary file)
  model::EncoderConfig encoder;

  // training
  int epochs = 3;
  model::OptimizerConfig optimizer;
  std::string init_from;  // checkpoint dir for continued pretraining

  // analysis
  std::string term;
  std::string layer_policy = "last";
  int cluster_k = 0;  // 0 = AUTO
  std::int64_t exemplars = 5;

  // global
  std::uint64_t seed = 42;
  int threads = 1;

  static PipelineConfig from_json(const io::json& j);
  io::json to_json() const;
  // Throws ConfigError naming the violated field.
  void validate() const;
};

struct StageResult {
  std::string stage;
  bool skipped = false;
};

// Owns a work directory (guarded by a lock file) and runs stages with
// digest-based up-to-date skipping.
class Pipeline {
 public:
  Pipeline(PipelineConfig config, bool force);
  ~Pipeline();

  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  // name in {ingest, filter, stats, tokenize, pack, train, embed, senses}.
  StageResult run_stage(const std::string& name);
  std::vector<StageResult> run_all();

  const PipelineConfig& config() const { return config_; }

 private:
  PipelineConfig config_;
  bool force_;
  std::filesystem::path work_;
  std::filesystem::path lock_path_;
  int lock_fd_ = -1;

  struct StagePlan {
    std::vector<std::filesystem::path> inputs;
    std::string config_digest;
  };

  StagePlan plan_for(const std::string& name) const;
  bool up_to_date(const std::string& name, const StagePlan& plan) const;
  void write_manifest(const std::string& name, const StagePlan& plan,
                      const std::vector<std::filesystem::path>& outputs,
                      const io::json& extra) const;

  void stage_ingest(const StagePlan&, std::vector<std::filesystem::path>&,
                    io::json&);
  void stage_filter(const StagePlan&, std::vector<std::filesystem::path>&,
                    io::json&);
  void stage_stats(const StagePlan&, std::vector<std::filesystem::path>&,
                   io::json&);
  void stage_tokenize(const StagePlan&, std::vector<std::filesystem::path>&,
                      io::json&);
  void stage_pack(const StagePlan&, std::vector<std::filesystem::path>&,
                  io::json&);
  void stage_train(const StagePlan&, std::vector<std::filesystem::path>&,
                   io::json&);
  void stage_embed(const StagePlan&, std::vector<std::filesystem::path>&,
                   io::json&);
  void stage_senses(const StagePlan&, std::vector<std::filesystem::path>&,
                    io::json&);
};

}  // namespace cwe::pipeline
