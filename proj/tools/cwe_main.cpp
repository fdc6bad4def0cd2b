#include <bit>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "cwe/pipeline.hpp"

// Binary tensor and batch payloads are declared little-endian.
static_assert(std::endian::native == std::endian::little,
              "this tool assumes a little-endian host");

namespace {

using cwe::io::json;

// Collects only the flags the user actually set, as a JSON merge patch that
// wins over the config file.
struct OverrideBuilder {
  json patch = json::object();

  template <class T>
  void add(CLI::App& app, const std::string& flag, const char* sect,
           const char* key, const std::string& help) {
    app.add_option_function<T>(
        flag,
        [this, sect, key](const T& v) {
          if (sect[0] == '\0') {
            patch[key] = v;
          } else {
            patch[sect][key] = v;
          }
        },
        help);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "cwe: LaTeX corpus construction, masked-language-model pretraining "
      "and contextualized-embedding sense analysis"};
  app.fallthrough();
  app.require_subcommand(1);

  std::string config_path;
  bool force = false;
  app.add_option("--config", config_path, "pipeline configuration JSON file");
  app.add_flag("--force", force, "re-run stages even when up to date");

  OverrideBuilder ov;
  ov.add<std::string>(app, "--paths.sources", "paths", "sources",
                      "directory of <doc_id>.tex files");
  ov.add<std::string>(app, "--paths.metadata", "paths", "metadata",
                      "metadata JSONL ({id, year, month, day})");
  ov.add<std::string>(app, "--paths.vocab", "paths", "vocab",
                      "vocabulary file, one token per line");
  ov.add<std::string>(app, "--paths.work", "paths", "work",
                      "work directory for stage artifacts");
  ov.add<std::int64_t>(app, "--filter.min_chars", "filter", "min_chars",
                       "minimum paragraph length in characters");
  ov.add<double>(app, "--filter.ws_low", "filter", "ws_low",
                 "lowest retained whitespace rate");
  ov.add<double>(app, "--filter.ws_high", "filter", "ws_high",
                 "highest retained whitespace rate");
  ov.add<std::int64_t>(app, "--packing.budget", "packing", "budget",
                       "tokens per batch");
  ov.add<double>(app, "--packing.tolerance", "packing", "tolerance",
                 "relative batch size tolerance");
  ov.add<double>(app, "--packing.max_pad", "packing", "max_pad",
                 "maximum padding fraction per batch");
  ov.add<std::int32_t>(app, "--packing.min_subwords", "packing",
                       "min_subwords", "shortest eligible paragraph");
  ov.add<std::int32_t>(app, "--packing.max_subwords", "packing",
                       "max_subwords", "longest eligible paragraph");
  ov.add<double>(app, "--masking.rate", "masking", "rate",
                 "fraction of subwords to mask");
  ov.add<double>(app, "--masking.p_mask", "masking", "p_mask",
                 "probability of [MASK] replacement");
  ov.add<double>(app, "--masking.p_random", "masking", "p_random",
                 "probability of random-token replacement");
  ov.add<std::int32_t>(app, "--encoder.vocab_size", "encoder", "vocab_size",
                       "0 = take from vocabulary file");
  ov.add<std::int32_t>(app, "--encoder.max_positions", "encoder",
                       "max_positions", "maximum sequence length");
  ov.add<std::int32_t>(app, "--encoder.hidden_dim", "encoder", "hidden_dim",
                       "hidden width");
  ov.add<std::int32_t>(app, "--encoder.num_layers", "encoder", "num_layers",
                       "transformer layers");
  ov.add<std::int32_t>(app, "--encoder.num_heads", "encoder", "num_heads",
                       "attention heads");
  ov.add<std::int32_t>(app, "--encoder.ff_dim", "encoder", "ff_dim",
                       "feed-forward width");
  ov.add<double>(app, "--encoder.dropout_rate", "encoder", "dropout_rate",
                 "dropout rate");
  ov.add<double>(app, "--encoder.layer_norm_epsilon", "encoder",
                 "layer_norm_epsilon", "layer-norm variance epsilon");
  ov.add<bool>(app, "--encoder.tie_output", "encoder", "tie_output",
               "tie the output projection to the token embedding");
  ov.add<int>(app, "--training.epochs", "training", "epochs",
              "training epochs");
  ov.add<double>(app, "--training.learning_rate", "training", "learning_rate",
                 "peak learning rate");
  ov.add<double>(app, "--training.warmup_fraction", "training",
                 "warmup_fraction", "fraction of steps spent warming up");
  ov.add<double>(app, "--training.weight_decay", "training", "weight_decay",
                 "decoupled weight decay");
  ov.add<double>(app, "--training.clip_norm", "training", "clip_norm",
                 "global gradient-norm clip");
  ov.add<double>(app, "--training.beta1", "training", "beta1",
                 "first-moment decay");
  ov.add<double>(app, "--training.beta2", "training", "beta2",
                 "second-moment decay");
  ov.add<double>(app, "--training.epsilon", "training", "epsilon",
                 "optimizer denominator epsilon");
  ov.add<std::string>(app, "--training.init_from", "training", "init_from",
                      "checkpoint directory to continue pretraining from");
  ov.add<std::string>(app, "--analysis.term", "analysis", "term",
                      "target term for embedding extraction");
  ov.add<std::string>(app, "--analysis.layer_policy", "analysis",
                      "layer_policy", "last | mean-last-4 | layer(i)");
  ov.add<int>(app, "--analysis.k", "analysis", "k",
              "sense cluster count (0 = automatic)");
  ov.add<std::int64_t>(app, "--analysis.exemplars", "analysis", "exemplars",
                       "exemplar paragraphs kept per sense cluster");
  ov.add<std::uint64_t>(app, "--seed", "", "seed", "global random seed");
  ov.add<int>(app, "--threads", "", "threads", "worker threads");

  const char* stages[] = {"ingest", "filter",   "stats", "tokenize", "pack",
                          "train",  "embed",    "senses"};
  for (const char* s : stages) {
    app.add_subcommand(s, std::string("run the ") + s + " stage");
  }
  app.add_subcommand("pipeline", "run every stage in order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::flush;
    return 2;
  }

  const std::string stage = app.get_subcommands().front()->get_name();

  try {
    json cfg_json = json::object();
    if (!config_path.empty()) {
      std::string raw;
      try {
        raw = cwe::io::read_file(config_path);
      } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
      }
      try {
        cfg_json = json::parse(raw);
      } catch (const std::exception& e) {
        std::cerr << "error: config file " << config_path << ": " << e.what()
                  << "\n";
        return 3;
      }
    }
    cfg_json.merge_patch(ov.patch);

    cwe::pipeline::PipelineConfig cfg;
    try {
      cfg = cwe::pipeline::PipelineConfig::from_json(cfg_json);
    } catch (const std::exception& e) {
      std::cerr << "error: invalid config: " << e.what() << "\n";
      return 3;
    }

    cwe::pipeline::Pipeline pipe(cfg, force);
    if (stage == "pipeline") {
      pipe.run_all();
    } else {
      pipe.run_stage(stage);
    }
    return 0;
  } catch (const cwe::pipeline::MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const cwe::pipeline::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
