#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "cwe/io_util.hpp"
#include "doctest.h"

namespace fs = std::filesystem;
using cwe::io::json;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;
};

RunResult run_tool(const std::string& args) {
  const std::string cmd = std::string(CWE_TOOL_PATH) + " " + args + " 2>&1";
  std::array<char, 4096> buf{};
  RunResult result;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  while (std::fgets(buf.data(), buf.size(), pipe) != nullptr) {
    result.output += buf.data();
  }
  const int status = pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

fs::path fresh_dir(const std::string& leaf) {
  const fs::path dir = fs::temp_directory_path() / "cwe_cli_tests" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path fixture(const std::string& leaf) {
  return fs::path(CWE_FIXTURES_DIR) / leaf;
}

fs::path write_config(const fs::path& dir, const fs::path& work) {
  json cfg{
      {"paths",
       {{"sources", fixture("sources").string()},
        {"metadata", fixture("metadata.jsonl").string()},
        {"vocab", fixture("vocab.txt").string()},
        {"work", work.string()}}},
      {"packing", {{"budget", 1024}}},
      {"encoder",
       {{"hidden_dim", 32},
        {"num_layers", 1},
        {"num_heads", 2},
        {"ff_dim", 64}}},
      {"training", {{"epochs", 1}, {"learning_rate", 3e-3}}},
      {"analysis", {{"term", "planck"}, {"k", 2}}},
      {"seed", 1234},
      {"threads", 1},
  };
  const fs::path path = dir / "config.json";
  cwe::io::write_file(path, cfg.dump(2));
  return path;
}

}  // namespace

TEST_CASE("unknown subcommand exits 2 with usage") {
  auto r = run_tool("frobnicate");
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("Usage") != std::string::npos);
}

TEST_CASE("missing upstream artifact exits 2 naming the file") {
  const fs::path dir = fresh_dir("missing_upstream");
  const fs::path cfg = write_config(dir, dir / "work");
  auto r = run_tool("filter --config " + cfg.string());
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("paragraphs.jsonl") != std::string::npos);
  CHECK(r.output.find("ingest") != std::string::npos);
}

TEST_CASE("config violations exit 3 naming the field") {
  const fs::path dir = fresh_dir("bad_config");
  const fs::path cfg = write_config(dir, dir / "work");
  auto r = run_tool("ingest --config " + cfg.string() +
                    " --filter.ws_low 2.0");
  CHECK(r.exit_code == 3);
  CHECK(r.output.find("ws_low") != std::string::npos);
}

TEST_CASE("bad metadata is a data error with exit 4") {
  const fs::path dir = fresh_dir("bad_metadata");
  cwe::io::write_file(dir / "meta.jsonl",
                      "{\"id\": \"x\", \"year\": 1900, \"month\": 1, "
                      "\"day\": 1}\n");
  const fs::path srcdir = dir / "sources";
  fs::create_directories(srcdir);
  cwe::io::write_file(srcdir / "x.tex", "\\begin{document}hi\\end{document}");
  json cfg{{"paths",
            {{"sources", srcdir.string()},
             {"metadata", (dir / "meta.jsonl").string()},
             {"vocab", fixture("vocab.txt").string()},
             {"work", (dir / "work").string()}}}};
  cwe::io::write_file(dir / "config.json", cfg.dump());
  auto r = run_tool("ingest --config " + (dir / "config.json").string());
  CHECK(r.exit_code == 4);
  CHECK(r.output.find("1986") != std::string::npos);
}

TEST_CASE("ingest and filter produce the fixture report") {
  const fs::path dir = fresh_dir("filter_report");
  const fs::path work = dir / "work";
  const fs::path cfg = write_config(dir, work);

  auto ingest = run_tool("ingest --config " + cfg.string());
  CHECK(ingest.exit_code == 0);
  auto filter = run_tool("filter --config " + cfg.string());
  CHECK(filter.exit_code == 0);

  const json report =
      json::parse(cwe::io::read_file(work / "filter_report.json"));
  const json expected = json::parse(
      cwe::io::read_file(fixture("expected_filter_counts.json")));
  CHECK(report.at("input_count") == expected.at("input_count"));
  CHECK(report.at("after_length_count") == expected.at("after_length_count"));
  CHECK(report.at("after_whitespace_count") ==
        expected.at("after_whitespace_count"));

  SUBCASE("reruns with unchanged inputs are skipped") {
    auto again = run_tool("filter --config " + cfg.string());
    CHECK(again.exit_code == 0);
    CHECK(again.output.find("up to date") != std::string::npos);
  }
  SUBCASE("--force reruns the stage") {
    auto forced = run_tool("filter --config " + cfg.string() + " --force");
    CHECK(forced.exit_code == 0);
    CHECK(forced.output.find("up to date") == std::string::npos);
    CHECK(forced.output.find("filter: done") != std::string::npos);
  }
}

TEST_CASE("stats writes the histogram CSVs") {
  const fs::path dir = fresh_dir("stats");
  const fs::path work = dir / "work";
  const fs::path cfg = write_config(dir, work);
  REQUIRE(run_tool("ingest --config " + cfg.string()).exit_code == 0);
  REQUIRE(run_tool("stats --config " + cfg.string()).exit_code == 0);
  const std::string csv =
      cwe::io::read_file(work / "length_histogram.csv");
  CHECK(csv.rfind("bin_edge,count\n", 0) == 0);
  CHECK(cwe::io::read_file(work / "whitespace_histogram.csv")
            .rfind("bin_edge,count\n", 0) == 0);
}

TEST_CASE("training continues from another run's checkpoint") {
  const fs::path dir = fresh_dir("continue");
  const fs::path work1 = dir / "work1";
  const fs::path cfg1 = write_config(dir, work1);
  REQUIRE(run_tool("pipeline --config " + cfg1.string()).exit_code == 0);
  const json first = json::parse(
      cwe::io::read_file(work1 / "checkpoint" / "config.json"));
  const auto first_steps = first.at("step").get<std::int64_t>();
  REQUIRE(first_steps > 0);

  const fs::path work2 = dir / "work2";
  json cfg = json::parse(cwe::io::read_file(write_config(dir, work2)));
  cfg["training"]["init_from"] = (work1 / "checkpoint").string();
  const fs::path cfg2 = dir / "config2.json";
  cwe::io::write_file(cfg2, cfg.dump(2));
  for (const char* stage : {"ingest", "filter", "tokenize", "pack", "train"}) {
    auto r = run_tool(std::string(stage) + " --config " + cfg2.string());
    CAPTURE(stage);
    REQUIRE(r.exit_code == 0);
  }
  const json second = json::parse(
      cwe::io::read_file(work2 / "checkpoint" / "config.json"));
  CHECK(second.at("step").get<std::int64_t>() == 2 * first_steps);

  SUBCASE("a mismatched architecture is rejected with the tensor name") {
    cfg["encoder"]["hidden_dim"] = 48;
    cfg["paths"]["work"] = (dir / "work3").string();
    const fs::path cfg3 = dir / "config3.json";
    cwe::io::write_file(cfg3, cfg.dump(2));
    for (const char* stage : {"ingest", "filter", "tokenize", "pack"}) {
      REQUIRE(run_tool(std::string(stage) + " --config " +
                       cfg3.string()).exit_code == 0);
    }
    auto r = run_tool("train --config " + cfg3.string());
    CHECK(r.exit_code == 4);
    CHECK(r.output.find("token_embedding") != std::string::npos);
  }
}

TEST_CASE("a live lock blocks concurrent use of the work directory") {
  const fs::path dir = fresh_dir("locked");
  const fs::path work = dir / "work";
  fs::create_directories(work);
  const fs::path cfg = write_config(dir, work);
  // Our own pid is alive, so the lock reads as held.
  cwe::io::write_file(work / ".cwe_lock", std::to_string(getpid()) + "\n");
  auto r = run_tool("ingest --config " + cfg.string());
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("locked") != std::string::npos);

  SUBCASE("a dead process's lock is reclaimed") {
    cwe::io::write_file(work / ".cwe_lock", "999999999\n");
    auto ok = run_tool("ingest --config " + cfg.string());
    CHECK(ok.exit_code == 0);
  }
}

TEST_CASE("the full pipeline runs on the fixture corpus") {
  const fs::path dir = fresh_dir("pipeline");
  const fs::path work = dir / "work";
  const fs::path cfg = write_config(dir, work);
  auto r = run_tool("pipeline --config " + cfg.string());
  CHECK(r.exit_code == 0);
  for (const char* artifact :
       {"paragraphs.jsonl", "ingest_warnings.jsonl", "filtered.jsonl",
        "filter_report.json", "length_histogram.csv", "corpus.jsonl",
        "sequences.jsonl", "batch_manifest.jsonl", "leftovers.jsonl",
        "checkpoint/config.json", "checkpoint/loss_history.csv",
        "embeddings.jsonl", "embeddings.bin", "clusters.json",
        "timeline.json", "timeline.csv", "year_counts.csv"}) {
    CAPTURE(artifact);
    CHECK(fs::is_regular_file(work / artifact));
  }

  SUBCASE("every output is referenced by exactly one manifest") {
    std::map<std::string, int> referenced;
    for (const auto& entry : fs::directory_iterator(work)) {
      const std::string name = entry.path().filename().string();
      if (name.size() > 14 &&
          name.substr(name.size() - 14) == "_manifest.json") {
        const json manifest = json::parse(cwe::io::read_file(entry.path()));
        for (const auto& [key, digest] : manifest.at("outputs").items()) {
          ++referenced[key];
        }
      }
    }
    std::size_t files = 0;
    for (const auto& entry : fs::recursive_directory_iterator(work)) {
      if (!entry.is_regular_file()) continue;
      const std::string rel =
          entry.path().lexically_relative(work).string();
      if (rel.find("_manifest.json") != std::string::npos) continue;
      if (rel == "batch_manifest.jsonl") {
        // This one is itself an output of the pack stage.
      }
      ++files;
      CAPTURE(rel);
      CHECK(referenced[rel] == 1);
    }
    CHECK(files > 0);
  }

  SUBCASE("corpus rows carry the eight metadata columns in order") {
    std::ifstream in(work / "corpus.jsonl");
    std::string line;
    REQUIRE(std::getline(in, line));
    const json row = json::parse(line);
    std::vector<std::string> keys;
    for (const auto& [k, v] : row.items()) keys.push_back(k);
    CHECK(keys == std::vector<std::string>{"text", "characters", "subwords",
                                           "arxiv_id", "year", "month", "day",
                                           "position"});
  }

  SUBCASE("documents without metadata are skipped at tokenize") {
    const json manifest =
        json::parse(cwe::io::read_file(work / "tokenize_manifest.json"));
    CHECK(manifest.at("stats").at("skipped_missing_metadata")
              .get<int>() > 0);
  }

  SUBCASE("over-long paragraphs are ineligible, not truncated into range") {
    // Fixture 1001.0018 position 3 has ~2400 subwords; it must appear in
    // neither a batch nor the leftovers.
    const json manifest =
        json::parse(cwe::io::read_file(work / "pack_manifest.json"));
    CHECK(manifest.at("stats").at("ineligible").get<int>() >= 1);
    bool found = false;
    for (const auto& row :
         cwe::io::read_jsonl(work / "batch_manifest.jsonl")) {
      for (const auto& r : row.at("rows")) {
        if (r.at("arxiv_id") == "1001.0018" && r.at("position") == 3) {
          found = true;
        }
      }
    }
    for (const auto& row : cwe::io::read_jsonl(work / "leftovers.jsonl")) {
      if (row.at("arxiv_id") == "1001.0018" && row.at("position") == 3) {
        found = true;
      }
    }
    CHECK_FALSE(found);

    // Its corpus record still carries the true, untruncated subword count.
    bool record_seen = false;
    for (const auto& row : cwe::io::read_jsonl(work / "corpus.jsonl")) {
      if (row.at("arxiv_id") == "1001.0018" && row.at("position") == 3) {
        record_seen = true;
        CHECK(row.at("subwords").get<std::int64_t>() > 510);
      }
    }
    CHECK(record_seen);
  }
}
