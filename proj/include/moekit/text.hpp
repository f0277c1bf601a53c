#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "moekit/arch.hpp"

namespace moekit {

// Whitespace toy tokenizer: each whitespace-delimited word hashes to a fixed
// id below vocab_size. Deterministic across platforms; not a real tokenizer.
inline int32_t token_id(const std::string& word, int64_t vocab_size) {
  uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : word) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return static_cast<int32_t>(h % static_cast<uint64_t>(vocab_size));
}

inline std::vector<int32_t> tokenize(const std::string& text, int64_t vocab_size) {
  std::vector<int32_t> ids;
  std::istringstream in(text);
  std::string word;
  while (in >> word) ids.push_back(token_id(word, vocab_size));
  return ids;
}

inline std::vector<int32_t> load_prompt_tokens(const std::string& path,
                                               int64_t vocab_size) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open prompt file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return tokenize(buf.str(), vocab_size);
}

}  // namespace moekit
