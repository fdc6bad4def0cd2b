#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace cwe::tok {

inline constexpr const char* kPadToken = "[PAD]";
inline constexpr const char* kUnkToken = "[UNK]";
inline constexpr const char* kClsToken = "[CLS]";
inline constexpr const char* kSepToken = "[SEP]";
inline constexpr const char* kMaskToken = "[MASK]";

// Fixed subword vocabulary: one token per line, line index = id.
class Vocab {
 public:
  static Vocab from_tokens(const std::vector<std::string>& tokens);

  // Throws std::runtime_error naming the offending line/token on duplicate
  // lines, empty tokens, empty files, or missing special tokens.
  static Vocab load(const std::filesystem::path& path);

  std::int32_t size() const { return static_cast<std::int32_t>(tokens_.size()); }

  // -1 when absent.
  std::int32_t id_of(const std::string& token) const;

  bool contains(const std::string& token) const {
    return id_of(token) >= 0;
  }

  const std::string& token_of(std::int32_t id) const { return tokens_.at(id); }

  std::int32_t pad_id() const { return pad_id_; }
  std::int32_t unk_id() const { return unk_id_; }
  std::int32_t cls_id() const { return cls_id_; }
  std::int32_t sep_id() const { return sep_id_; }
  std::int32_t mask_id() const { return mask_id_; }

  bool is_special(std::int32_t id) const {
    return id == pad_id_ || id == unk_id_ || id == cls_id_ || id == sep_id_ ||
           id == mask_id_;
  }

  // Number of ids that are not one of the five specials.
  std::int32_t non_special_size() const { return size() - 5; }

  // Maps j in [0, non_special_size()) to the j-th non-special id; used for
  // drawing random replacement tokens during masking.
  std::int32_t non_special_id(std::int32_t j) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> token_to_id_;
  std::int32_t pad_id_ = -1;
  std::int32_t unk_id_ = -1;
  std::int32_t cls_id_ = -1;
  std::int32_t sep_id_ = -1;
  std::int32_t mask_id_ = -1;

  void index_specials();
};

}  // namespace cwe::tok
