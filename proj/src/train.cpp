#include "cwe/train.hpp"

#include <charconv>
#include <cmath>
#include <numeric>

#include "cwe/io_util.hpp"

namespace cwe::model {

TrainState make_train_state(const EncoderConfig& config, std::uint64_t seed,
                            const OptimizerConfig& opt) {
  TrainState state;
  state.params = init_params<float>(config, seed);
  state.adam_m.config = config;
  state.adam_m.allocate();
  state.adam_v.config = config;
  state.adam_v.allocate();
  state.optimizer = opt;
  return state;
}

double lr_at(const OptimizerConfig& opt, std::int64_t step,
             std::int64_t total_steps) {
  if (total_steps <= 0) return 0.0;
  auto warmup = static_cast<std::int64_t>(
      std::llround(opt.warmup_fraction * static_cast<double>(total_steps)));
  warmup = std::max<std::int64_t>(warmup, 1);
  if (step <= warmup) {
    return opt.learning_rate * static_cast<double>(step) /
           static_cast<double>(warmup);
  }
  if (step >= total_steps) return 0.0;
  return opt.learning_rate *
         static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup);
}

double apply_update(TrainState& state, Parameters<float>& grads, double lr) {
  const OptimizerConfig& opt = state.optimizer;

  double norm_sq = 0.0;
  auto grad_refs = grads.tensors();
  for (auto& ref : grad_refs) {
    for (float g : *ref.data) {
      norm_sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  const double norm = std::sqrt(norm_sq);
  if (opt.clip_norm > 0.0 && norm > opt.clip_norm) {
    const auto s = static_cast<float>(opt.clip_norm / norm);
    for (auto& ref : grad_refs) {
      for (float& g : *ref.data) g *= s;
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(opt.beta1, t);
  const double bc2 = 1.0 - std::pow(opt.beta2, t);

  auto p_refs = state.params.tensors();
  auto m_refs = state.adam_m.tensors();
  auto v_refs = state.adam_v.tensors();
  for (std::size_t ti = 0; ti < p_refs.size(); ++ti) {
    auto& p = *p_refs[ti].data;
    auto& m = *m_refs[ti].data;
    auto& vv = *v_refs[ti].data;
    auto& g = *grad_refs[ti].data;
    const bool decay = p_refs[ti].kind == ParamKind::kWeight;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = static_cast<float>(opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i]);
      vv[i] = static_cast<float>(opt.beta2 * vv[i] +
                                 (1.0 - opt.beta2) * g[i] * g[i]);
      const double mhat = m[i] / bc1;
      const double vhat = vv[i] / bc2;
      double update = mhat / (std::sqrt(vhat) + opt.epsilon);
      if (decay) update += opt.weight_decay * p[i];
      p[i] = static_cast<float>(p[i] - lr * update);
    }
  }
  return norm;
}

void train(TrainState& state, const std::vector<batch::MaskedBatch>& batches,
           const TrainOptions& options) {
  if (batches.empty()) return;
  const std::int64_t total_steps =
      static_cast<std::int64_t>(options.epochs) *
      static_cast<std::int64_t>(batches.size());
  // The schedule spans this run; a continued-pretraining run re-warms from
  // its own step zero rather than resuming a finished decay.
  const std::int64_t step_offset = state.step;
  DetRng order_rng = DetRng(options.seed);
  std::string last_checkpoint = "none";

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::vector<std::size_t> order(batches.size());
    std::iota(order.begin(), order.end(), 0);
    if (options.shuffle_batches) {
      DetRng epoch_rng =
          order_rng.derive(0x5A5Au + static_cast<std::uint64_t>(epoch));
      epoch_rng.shuffle(order);
    }
    for (std::size_t bi : order) {
      Parameters<float> grads;
      DetRng dropout_rng = DetRng(options.seed)
                               .derive(0xD120u + static_cast<std::uint64_t>(
                                                     state.step));
      const double loss = mlm_loss_and_grad(state.params, batches[bi], grads,
                                            &dropout_rng);
      if (!std::isfinite(loss)) {
        throw TrainAbort("non-finite loss at step " +
                             std::to_string(state.step + 1) +
                             "; last usable checkpoint: " + last_checkpoint,
                         last_checkpoint);
      }
      const double lr = lr_at(state.optimizer, state.step - step_offset + 1,
                              total_steps);
      apply_update(state, grads, lr);
      state.loss_history.emplace_back(state.step, loss);
    }
    if (!options.checkpoint_dir.empty()) {
      const std::filesystem::path dir =
          options.checkpoint_dir / ("epoch_" + std::to_string(epoch + 1));
      save_checkpoint(state, dir);
      last_checkpoint = dir.string();
    }
  }
}

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, end);
}

io::json optimizer_to_json(const OptimizerConfig& o) {
  return io::json{{"learning_rate", o.learning_rate},
                  {"beta1", o.beta1},
                  {"beta2", o.beta2},
                  {"epsilon", o.epsilon},
                  {"weight_decay", o.weight_decay},
                  {"clip_norm", o.clip_norm},
                  {"warmup_fraction", o.warmup_fraction}};
}

OptimizerConfig optimizer_from_json(const io::json& j) {
  OptimizerConfig o;
  o.learning_rate = j.at("learning_rate").get<double>();
  o.beta1 = j.at("beta1").get<double>();
  o.beta2 = j.at("beta2").get<double>();
  o.epsilon = j.at("epsilon").get<double>();
  o.weight_decay = j.at("weight_decay").get<double>();
  o.clip_norm = j.at("clip_norm").get<double>();
  o.warmup_fraction = j.at("warmup_fraction").get<double>();
  return o;
}

io::json encoder_to_json(const EncoderConfig& c) {
  return io::json{{"vocab_size", c.vocab_size},
                  {"max_positions", c.max_positions},
                  {"hidden_dim", c.hidden_dim},
                  {"num_layers", c.num_layers},
                  {"num_heads", c.num_heads},
                  {"ff_dim", c.ff_dim},
                  {"dropout_rate", c.dropout_rate},
                  {"layer_norm_epsilon", c.layer_norm_epsilon},
                  {"tie_output", c.tie_output}};
}

EncoderConfig encoder_from_json(const io::json& j) {
  EncoderConfig c;
  c.vocab_size = j.at("vocab_size").get<std::int32_t>();
  c.max_positions = j.at("max_positions").get<std::int32_t>();
  c.hidden_dim = j.at("hidden_dim").get<std::int32_t>();
  c.num_layers = j.at("num_layers").get<std::int32_t>();
  c.num_heads = j.at("num_heads").get<std::int32_t>();
  c.ff_dim = j.at("ff_dim").get<std::int32_t>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.layer_norm_epsilon = j.at("layer_norm_epsilon").get<double>();
  c.tie_output = j.at("tie_output").get<bool>();
  return c;
}

std::string dims_to_string(const std::vector<std::int64_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

}  // namespace

void save_checkpoint(const TrainState& state,
                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  // const_cast: tensors() is non-const because it hands out mutable
  // pointers; saving only reads from them.
  auto& mutable_state = const_cast<TrainState&>(state);
  auto p_refs = mutable_state.params.tensors();
  auto m_refs = mutable_state.adam_m.tensors();
  auto v_refs = mutable_state.adam_v.tensors();

  io::json manifest = io::json::array();
  auto dump_group = [&](const char* prefix,
                        std::vector<TensorRef<float>>& refs) {
    for (auto& ref : refs) {
      const std::string file = std::string(prefix) + "_" + ref.name + ".bin";
      io::write_f32(dir / file, *ref.data);
      manifest.push_back(io::json{
          {"name", ref.name}, {"dims", ref.dims}, {"file", file}});
    }
  };
  dump_group("t", p_refs);
  dump_group("m", m_refs);
  dump_group("v", v_refs);

  io::json config{{"encoder", encoder_to_json(state.params.config)},
                  {"optimizer", optimizer_to_json(state.optimizer)},
                  {"step", state.step},
                  {"threads", state.threads},
                  {"loss_history", "loss_history.csv"},
                  {"tensors", manifest}};
  io::write_file(dir / "config.json", config.dump(2) + "\n");

  std::string csv = "step,loss\n";
  for (const auto& [step, loss] : state.loss_history) {
    csv += std::to_string(step);
    csv += ',';
    csv += format_double(loss);
    csv += '\n';
  }
  io::write_file(dir / "loss_history.csv", csv);
}

TrainState load_checkpoint(const std::filesystem::path& dir,
                           const EncoderConfig* expected) {
  const auto config_path = dir / "config.json";
  io::json config = io::json::parse(io::read_file(config_path));
  TrainState state;
  const EncoderConfig enc = encoder_from_json(config.at("encoder"));
  state.optimizer = optimizer_from_json(config.at("optimizer"));
  state.step = config.at("step").get<std::int64_t>();
  state.threads = config.at("threads").get<int>();
  state.params.config = enc;
  state.params.allocate();
  state.adam_m.config = enc;
  state.adam_m.allocate();
  state.adam_v.config = enc;
  state.adam_v.allocate();

  if (expected != nullptr && !(*expected == enc)) {
    // Name the first tensor whose shape differs under the two configs.
    Parameters<float> want;
    want.config = *expected;
    want.allocate();
    auto want_refs = want.tensors();
    auto have_refs = state.params.tensors();
    const std::size_t common = std::min(want_refs.size(), have_refs.size());
    for (std::size_t i = 0; i < common; ++i) {
      if (want_refs[i].name != have_refs[i].name ||
          want_refs[i].dims != have_refs[i].dims) {
        throw std::runtime_error(
            "checkpoint config mismatch at tensor " + have_refs[i].name +
            ": stored " + dims_to_string(have_refs[i].dims) + ", expected " +
            dims_to_string(want_refs[i].dims));
      }
    }
    throw std::runtime_error(
        "checkpoint config mismatch: tensor set differs (stored " +
        std::to_string(have_refs.size()) + " tensors, expected " +
        std::to_string(want_refs.size()) + ")");
  }

  auto p_refs = state.params.tensors();
  auto m_refs = state.adam_m.tensors();
  auto v_refs = state.adam_v.tensors();
  std::size_t cursor = 0;
  auto load_group = [&](std::vector<TensorRef<float>>& refs) {
    for (auto& ref : refs) {
      const io::json& entry = config.at("tensors").at(cursor++);
      const std::string file = entry.at("file").get<std::string>();
      std::vector<float> data = io::read_f32(dir / file);
      if (static_cast<std::int64_t>(data.size()) != ref.count()) {
        throw std::runtime_error(
            "checkpoint tensor " + ref.name + " has " +
            std::to_string(data.size()) + " values, expected " +
            dims_to_string(ref.dims));
      }
      *ref.data = std::move(data);
    }
  };
  load_group(p_refs);
  load_group(m_refs);
  load_group(v_refs);

  const auto csv_path =
      dir / config.at("loss_history").get<std::string>();
  std::string csv = io::read_file(csv_path);
  std::size_t pos = csv.find('\n');  // header
  while (pos != std::string::npos && pos + 1 < csv.size()) {
    const std::size_t next = csv.find('\n', pos + 1);
    const std::string line =
        csv.substr(pos + 1, next == std::string::npos ? std::string::npos
                                                      : next - pos - 1);
    pos = next;
    if (line.empty()) continue;
    const std::size_t comma = line.find(',');
    std::int64_t step = 0;
    double loss = 0.0;
    std::from_chars(line.data(), line.data() + comma, step);
    std::from_chars(line.data() + comma + 1, line.data() + line.size(), loss);
    state.loss_history.emplace_back(step, loss);
  }
  return state;
}

}  // namespace cwe::model
