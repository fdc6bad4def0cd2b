#include "cwe/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace cwe::tok {

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  Vocab v;
  v.tokens_ = tokens;
  v.token_to_id_.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto [it, inserted] =
        v.token_to_id_.emplace(tokens[i], static_cast<std::int32_t>(i));
    if (!inserted) {
      throw std::runtime_error("duplicate vocabulary token '" + tokens[i] +
                               "' at lines " + std::to_string(it->second + 1) +
                               " and " + std::to_string(i + 1));
    }
  }
  v.index_specials();
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open vocabulary file: " + path.string());
  }
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) {
      line.pop_back();
    }
    if (line.empty()) {
      // A trailing newline after the last token is fine; an interior empty
      // line would shift every later id.
      if (in.peek() == EOF) break;
      throw std::runtime_error("empty vocabulary token at line " +
                               std::to_string(tokens.size() + 1) + " in " +
                               path.string());
    }
    tokens.push_back(line);
  }
  if (tokens.empty()) {
    throw std::runtime_error("empty vocabulary file: " + path.string());
  }
  return from_tokens(tokens);
}

void Vocab::index_specials() {
  pad_id_ = id_of(kPadToken);
  unk_id_ = id_of(kUnkToken);
  cls_id_ = id_of(kClsToken);
  sep_id_ = id_of(kSepToken);
  mask_id_ = id_of(kMaskToken);
  const char* missing = nullptr;
  if (pad_id_ < 0) missing = kPadToken;
  if (unk_id_ < 0) missing = kUnkToken;
  if (cls_id_ < 0) missing = kClsToken;
  if (sep_id_ < 0) missing = kSepToken;
  if (mask_id_ < 0) missing = kMaskToken;
  if (missing) {
    throw std::runtime_error(std::string("missing special token ") + missing);
  }
}

std::int32_t Vocab::id_of(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? -1 : it->second;
}

std::int32_t Vocab::non_special_id(std::int32_t j) const {
  // Specials are few; walk past them in id order.
  std::vector<std::int32_t> specials = {pad_id_, unk_id_, cls_id_, sep_id_,
                                        mask_id_};
  std::sort(specials.begin(), specials.end());
  std::int32_t id = j;
  for (std::int32_t s : specials) {
    if (id >= s) ++id;
  }
  return id;
}

}  // namespace cwe::tok
