#include "fastadapt/vocab.hpp"

#include <array>
#include <fstream>
#include <stdexcept>

namespace fastadapt {

namespace {
const std::array<std::string, 4> kReserved = {"<bos>", "<eos>", "<pad>", "<unk>"};
}

bool is_reserved_spelling(const std::string& token) {
  for (const auto& r : kReserved) {
    if (r == token) return true;
  }
  return false;
}

Vocabulary::Vocabulary() {
  for (std::size_t i = 0; i < kReserved.size(); ++i) {
    tokens_.push_back(kReserved[i]);
    index_.emplace(kReserved[i], static_cast<int>(i));
  }
}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) : Vocabulary() {
  for (const auto& t : tokens) {
    if (contains(t)) throw std::invalid_argument("vocabulary: duplicate token '" + t + "'");
    add(t);
  }
}

int Vocabulary::add(const std::string& token) {
  if (is_reserved_spelling(token)) throw std::invalid_argument("vocabulary: '" + token + "' is a reserved token");
  if (token.empty()) throw std::invalid_argument("vocabulary: empty token");
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? unk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("vocabulary: cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("vocabulary: cannot read " + path.string());
  Vocabulary v;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (n < kReserved.size()) {
      if (line != kReserved[n]) throw std::runtime_error("vocabulary: " + path.string() + " lacks reserved header");
    } else {
      if (v.contains(line)) throw std::runtime_error("vocabulary: duplicate token '" + line + "' in " + path.string());
      v.add(line);
    }
    ++n;
  }
  return v;
}

}  // namespace fastadapt
