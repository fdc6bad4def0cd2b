#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cwe/batch_builder.hpp"
#include "cwe/encoder.hpp"

namespace cwe::model {

struct OptimizerConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;  // skipped for biases and layer norms
  double clip_norm = 1.0;      // global gradient norm
  double warmup_fraction = 0.05;

  bool operator==(const OptimizerConfig&) const = default;
};

struct TrainState {
  Parameters<float> params;
  Parameters<float> adam_m;
  Parameters<float> adam_v;
  std::int64_t step = 0;
  std::vector<std::pair<std::int64_t, double>> loss_history;
  OptimizerConfig optimizer;
  int threads = 1;  // recorded in the checkpoint for reproducibility
};

TrainState make_train_state(const EncoderConfig& config, std::uint64_t seed,
                            const OptimizerConfig& opt = {});

// Linear warmup to learning_rate, then linear decay to zero. `step` is
// 1-based.
double lr_at(const OptimizerConfig& opt, std::int64_t step,
             std::int64_t total_steps);

// Clips the global gradient norm, then applies one adaptive-moment update
// with decoupled weight decay. Returns the pre-clip gradient norm.
double apply_update(TrainState& state, Parameters<float>& grads, double lr);

struct TrainOptions {
  int epochs = 3;
  std::uint64_t seed = 0;       // batch order + dropout masks
  bool shuffle_batches = true;  // reshuffled per epoch, derived from seed
  // When set, a checkpoint is written after each epoch into
  // checkpoint_dir/epoch_<n>.
  std::filesystem::path checkpoint_dir;
};

// Raised when a training step produces a non-finite loss; carries the most
// recent usable checkpoint path ("none" when no checkpoint was written).
class TrainAbort : public std::runtime_error {
 public:
  TrainAbort(const std::string& msg, std::string last_checkpoint)
      : std::runtime_error(msg), last_checkpoint_(std::move(last_checkpoint)) {}
  const std::string& last_checkpoint() const { return last_checkpoint_; }

 private:
  std::string last_checkpoint_;
};

void train(TrainState& state, const std::vector<batch::MaskedBatch>& batches,
           const TrainOptions& options);

// Checkpoint directory layout: config.json (encoder + optimizer + step +
// thread count + tensor manifest), one little-endian float32 .bin per tensor
// (parameters and both moment accumulators), loss_history.csv. save ->
// load -> save round-trips byte-identically.
void save_checkpoint(const TrainState& state,
                     const std::filesystem::path& dir);

// `expected` (when given) is checked against the stored config; a mismatch
// raises naming the first offending tensor and both shapes.
TrainState load_checkpoint(const std::filesystem::path& dir,
                           const EncoderConfig* expected = nullptr);

}  // namespace cwe::model
