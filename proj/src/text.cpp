#include "actflow/text.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <stdexcept>

#include "actflow/rng.hpp"

namespace actflow {

std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

Vocab Vocab::build(std::span<const std::string> texts) {
  std::set<std::string> unique;
  for (const std::string& t : texts)
    for (std::string& w : split_tokens(t)) unique.insert(std::move(w));
  return from_words(std::vector<std::string>(unique.begin(), unique.end()));
}

Vocab Vocab::from_words(std::vector<std::string> sorted_words) {
  if (!std::is_sorted(sorted_words.begin(), sorted_words.end()))
    throw std::invalid_argument("Vocab: word list must be sorted");
  Vocab v;
  v.words_ = std::move(sorted_words);
  for (std::size_t i = 0; i < v.words_.size(); ++i)
    v.ids_.emplace(v.words_[i], static_cast<int>(i));
  return v;
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const std::string& w : split_tokens(text)) {
    auto it = ids_.find(w);
    if (it == ids_.end())
      throw std::invalid_argument("Vocab: word '" + w + "' is out of vocabulary");
    ids.push_back(it->second);
  }
  return ids;
}

bool Vocab::covers(const std::string& text) const {
  for (const std::string& w : split_tokens(text))
    if (!ids_.count(w)) return false;
  return true;
}

std::uint64_t Vocab::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const std::string& w : words_) {
    h = fnv1a(w.data(), w.size(), h);
    h = fnv1a("\x1f", 1, h);
  }
  return h;
}

}  // namespace actflow
