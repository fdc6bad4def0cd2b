#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

namespace cwe::io {

using json = nlohmann::ordered_json;

std::string read_file(const std::filesystem::path& path);

void write_file(const std::filesystem::path& path, std::string_view content);

// One JSON object per line; blank lines skipped. Throws std::runtime_error
// naming the path and line on parse failure.
std::vector<json> read_jsonl(const std::filesystem::path& path);

void write_jsonl(const std::filesystem::path& path,
                 const std::vector<json>& rows);

// FNV-1a 64-bit over raw bytes, hex-encoded. Used for change detection in
// run manifests, not for security.
std::string fnv1a_hex(std::string_view bytes);

std::string digest_file(const std::filesystem::path& path);

// Flat little-endian binary tensor files. The writer assumes a little-endian
// host (checked once at startup in the CLI).
void write_f32(const std::filesystem::path& path,
               const std::vector<float>& values);
std::vector<float> read_f32(const std::filesystem::path& path);

void write_i32(const std::filesystem::path& path,
               const std::vector<std::int32_t>& values);
std::vector<std::int32_t> read_i32(const std::filesystem::path& path);

// Deterministic parallel map: items are sharded by index, results land in
// input order, so output is identical for any thread count.
void parallel_for(std::size_t count, int threads,
                  const std::function<void(std::size_t)>& fn);

}  // namespace cwe::io
