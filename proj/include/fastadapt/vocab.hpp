#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace fastadapt {

// Token <-> id bijection. Ids 0..3 are reserved for the special tokens.
class Vocabulary {
 public:
  static constexpr int bos = 0;
  static constexpr int eos = 1;
  static constexpr int pad = 2;
  static constexpr int unk = 3;
  static constexpr int reserved = 4;

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& tokens);

  // Returns the existing id or appends a new one. Reserved spellings are rejected.
  int add(const std::string& token);
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  // Unknown tokens map to `unk`.
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  // One token per line, reserved tokens included, in id order.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

bool is_reserved_spelling(const std::string& token);

}  // namespace fastadapt
