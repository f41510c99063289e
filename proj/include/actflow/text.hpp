#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace actflow {

// Lowercased alphanumeric runs; punctuation and hyphens split tokens.
std::vector<std::string> split_tokens(const std::string& text);

// Word-level token table, sorted for a deterministic id assignment.
class Vocab {
 public:
  Vocab() = default;
  static Vocab build(std::span<const std::string> texts);
  static Vocab from_words(std::vector<std::string> sorted_words);

  // Throws std::invalid_argument naming the word when it is unknown.
  std::vector<int> encode(const std::string& text) const;
  bool covers(const std::string& text) const;

  const std::vector<std::string>& words() const { return words_; }
  int size() const { return static_cast<int>(words_.size()); }
  std::uint64_t hash() const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace actflow
