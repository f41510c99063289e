#include "actflow/paraphrase.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <httplib.h>
#include <json.hpp>

namespace actflow {

const char* to_string(FilterStatus s) {
  switch (s) {
    case FilterStatus::kept: return "kept";
    case FilterStatus::normalized: return "normalized";
    case FilterStatus::dropped_length: return "dropped_length";
    case FilterStatus::dropped_refusal: return "dropped_refusal";
    case FilterStatus::dropped_duplicate: return "dropped_duplicate";
  }
  return "unknown";
}

std::array<std::string, 7> build_prompts(const std::string& instruction) {
  if (instruction.empty()) throw std::invalid_argument("build_prompts: empty instruction");
  const std::string& t = instruction;
  return {
      "Rewrite the robotic command \"" + t +
          "\" as a natural expression of user intent, without using imperative mood or "
          "\"please\". Output only the rewritten sentence.",
      "Rephrase \"" + t +
          "\" as a functional goal that describes what should be achieved, not how to do it. "
          "Output only the rewritten sentence.",
      "Rewrite \"" + t +
          "\" by referring to objects based on their function or typical use instead of their "
          "names, do not mention the object name. Output only the rewritten sentence.",
      "Rewrite \"" + t +
          "\" as a polite and courteous request a human might naturally say. Output only the "
          "rewritten sentence.",
      "Make \"" + t +
          "\" as concise as possible while keeping all essential actions and objects. Output "
          "only the rewritten sentence.",
      "Explain the task \"" + t +
          "\" clearly as if teaching a new robot learner, focusing on purpose and clarity. "
          "Output only the rewritten sentence.",
      "Summarize the core objective of \"" + t +
          "\" at a high level, ignoring low-level details. Output only the rewritten sentence.",
  };
}

namespace {

const std::unordered_map<std::string, std::vector<std::string>>& synonym_table() {
  static const std::unordered_map<std::string, std::vector<std::string>> table{
      {"slide", {"move", "push", "bring", "take"}},
      {"move", {"slide", "push", "bring", "take"}},
      {"push", {"move", "slide", "nudge"}},
      {"put", {"place", "set", "drop"}},
      {"block", {"cube", "box", "piece"}},
      {"bin", {"basket", "container", "crate"}},
      {"shelf", {"rack", "ledge", "board"}},
      {"tray", {"dish", "holder", "plate"}},
      {"pad", {"mat", "tile", "spot"}},
  };
  return table;
}

// Spatial words are rewritten aggressively and with single-token synonyms,
// so paraphrases rarely leak the original region word.
const std::unordered_map<std::string, std::vector<std::string>>& region_table() {
  static const std::unordered_map<std::string, std::vector<std::string>> table{
      {"left", {"leftmost", "leftward", "western"}},
      {"right", {"rightmost", "rightward", "eastern"}},
      {"top", {"upper", "topmost", "northern"}},
      {"bottom", {"lower", "bottommost", "southern"}},
      {"center", {"middle", "central", "innermost"}},
  };
  return table;
}

// Object nouns get a function-style reference in style 3 ("do not mention
// the object name").
const std::unordered_map<std::string, std::vector<std::string>>& function_table() {
  static const std::unordered_map<std::string, std::vector<std::string>> table{
      {"block", {"object", "payload", "thing", "item"}},
      {"bin", {"receptacle", "drop zone", "holder"}},
      {"shelf", {"raised area", "upper zone"}},
      {"tray", {"flat holder", "lower zone"}},
      {"pad", {"marked area", "landing zone"}},
  };
  return table;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream is(text);
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

std::string substitute(const std::string& text, Rng& rng, double p_sub,
                       const std::unordered_map<std::string, std::vector<std::string>>& table,
                       bool force_objects = false, double p_region = 0.8) {
  std::vector<std::string> words = split_words(text);
  for (std::string& w : words) {
    if (auto rit = region_table().find(w); rit != region_table().end()) {
      if (rng.uniform() < p_region)
        w = rit->second[static_cast<std::size_t>(rng.uniform_int(
            static_cast<int>(rit->second.size())))];
      continue;
    }
    auto it = table.find(w);
    if (it == table.end()) continue;
    const bool is_object = function_table().count(w) != 0;
    if ((force_objects && is_object) || rng.uniform() < p_sub)
      w = it->second[static_cast<std::size_t>(rng.uniform_int(
          static_cast<int>(it->second.size())))];
  }
  return join_words(words);
}

std::string compress(const std::string& text) {
  static const std::unordered_set<std::string> filler{"the", "a",  "an", "into", "to",
                                                      "onto", "on", "of", "it",   "please"};
  std::vector<std::string> words;
  for (const std::string& w : split_words(text))
    if (!filler.count(w)) words.push_back(w);
  return join_words(words);
}

std::string rewrite_one(const std::string& t, int style, int k, Rng rng) {
  static const std::vector<std::string> intent{"I want ", "I need ", "I would like ",
                                               "I want you to ", "I expect "};
  static const std::vector<std::string> goal{"the goal is to ", "the task is to ",
                                             "the objective is to ", "make sure to ",
                                             "the aim is to "};
  static const std::vector<std::string> polite{"Could you please ", "Would you kindly ",
                                               "Please ", "Could you ", "Would you mind to "};
  static const std::vector<std::string> teach{"to complete this task, ", "here is the task: ",
                                              "remember, the procedure is to ",
                                              "as a first lesson, ", "step by step, "};
  static const std::vector<std::string> abstract_goal{"the core objective is to ",
                                                      "at a high level, ", "in short, ",
                                                      "overall, the goal is to ",
                                                      "ultimately, "};
  auto pick = [&](const std::vector<std::string>& v) {
    return v[static_cast<std::size_t>(k) % v.size()];
  };
  switch (style) {
    case 1: return pick(intent) + substitute(t, rng, 0.4, synonym_table());
    case 2: return pick(goal) + substitute(t, rng, 0.4, synonym_table());
    case 3: return "handle the task: " + substitute(t, rng, 0.3, function_table(), true);
    case 4: return pick(polite) + substitute(t, rng, k == 0 ? 0.0 : 0.4, synonym_table());
    case 5: {
      std::string c = substitute(compress(t), rng, 0.4, synonym_table());
      return c.size() >= 8 ? c : substitute(t, rng, 0.4, synonym_table());
    }
    case 6: return pick(teach) + substitute(t, rng, 0.4, synonym_table());
    case 7: return pick(abstract_goal) + substitute(compress(t), rng, 0.5, synonym_table());
    default: throw std::invalid_argument("rewrite_one: style " + std::to_string(style));
  }
}

}  // namespace

std::vector<std::string> fallback_rewrite(const std::string& instruction, Rng& rng,
                                          int samples_per_template) {
  if (instruction.empty()) throw std::invalid_argument("fallback_rewrite: empty instruction");
  std::vector<std::string> out;
  for (int style = 1; style <= 7; ++style)
    for (int k = 0; k < samples_per_template; ++k)
      out.push_back(rewrite_one(instruction, style, k,
                                rng.split(static_cast<std::uint64_t>(style * 131 + k))));
  return out;
}

std::string FallbackRewriter::complete(const RewriteRequest& req, const RewriterConfig&) {
  Rng base(Rng::mix(seed_, fnv1a(req.instruction.data(), req.instruction.size())));
  return rewrite_one(req.instruction, req.style_id, req.sample_index,
                     base.split(static_cast<std::uint64_t>(req.style_id * 131 + req.sample_index)));
}

HttpRewriter::HttpRewriter(std::string endpoint_url, std::string auth_token)
    : url_(std::move(endpoint_url)), token_(std::move(auth_token)) {}

std::string HttpRewriter::name() const { return "http:" + url_; }

std::string HttpRewriter::complete(const RewriteRequest& req, const RewriterConfig& cfg) {
  const auto scheme_end = url_.find("://");
  if (scheme_end == std::string::npos)
    throw std::runtime_error("rewriter backend '" + name() + "': malformed endpoint URL");
  const auto path_start = url_.find('/', scheme_end + 3);
  const std::string base = path_start == std::string::npos ? url_ : url_.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : url_.substr(path_start);

  nlohmann::json body{{"prompt", req.prompt},
                      {"temperature", cfg.temperature},
                      {"top_p", cfg.top_p},
                      {"max_tokens", cfg.max_new_tokens},
                      {"seed", req.sample_index}};
  httplib::Client client(base);
  client.set_connection_timeout(10);
  client.set_read_timeout(60);
  httplib::Headers headers;
  if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);

  auto res = client.Post(path, headers, body.dump(), "application/json");
  if (!res)
    throw std::runtime_error("rewriter backend '" + name() + "': connection failed");
  if (res->status != 200)
    throw std::runtime_error("rewriter backend '" + name() + "': HTTP " +
                             std::to_string(res->status));
  nlohmann::json reply = nlohmann::json::parse(res->body, nullptr, false);
  if (reply.is_discarded())
    throw std::runtime_error("rewriter backend '" + name() + "': invalid JSON reply");
  if (reply.contains("text") && reply["text"].is_string()) return reply["text"];
  if (reply.contains("choices") && reply["choices"].is_array() && !reply["choices"].empty()) {
    const auto& choice = reply["choices"][0];
    if (choice.contains("text") && choice["text"].is_string()) return choice["text"];
    if (choice.contains("message") && choice["message"].contains("content"))
      return choice["message"]["content"];
  }
  throw std::runtime_error("rewriter backend '" + name() + "': reply carries no text field");
}

std::unique_ptr<RewriterClient> make_rewriter(const std::string& backend_key,
                                              std::uint64_t fallback_seed) {
  if (backend_key == "fallback") return std::make_unique<FallbackRewriter>(fallback_seed);
  if (backend_key.rfind("http", 0) == 0) {
    const char* token = std::getenv("ACTFLOW_REWRITER_TOKEN");
    return std::make_unique<HttpRewriter>(backend_key, token ? token : "");
  }
  throw std::invalid_argument("make_rewriter: unknown backend key '" + backend_key +
                              "' (expected \"fallback\" or an http endpoint)");
}

CandidatePool generate_candidates(RewriterClient& client, const std::string& instruction,
                                  const RewriterConfig& cfg) {
  if (cfg.samples_per_template < 1)
    throw std::invalid_argument("generate_candidates: samples_per_template must be >= 1");
  const std::array<std::string, 7> prompts = build_prompts(instruction);

  CandidatePool pool;
  pool.items.push_back(RewriteCandidate{instruction, 0, 0, FilterStatus::kept});
  int successes = 0;
  std::string last_error;
  for (int style = 1; style <= 7; ++style) {
    for (int k = 0; k < cfg.samples_per_template; ++k) {
      RewriteRequest req{prompts[static_cast<std::size_t>(style - 1)], instruction, style, k};
      try {
        std::string text = client.complete(req, cfg);
        pool.items.push_back(RewriteCandidate{std::move(text), style, k, FilterStatus::kept});
        ++successes;
      } catch (const std::exception& e) {
        ++pool.client_failures;
        last_error = e.what();
      }
    }
  }
  if (successes == 0 && pool.client_failures > 0)
    throw std::runtime_error("rewriter backend '" + client.name() +
                             "' produced no candidates: " + last_error);
  return pool;
}

namespace {

bool starts_with_refusal(const std::string& text) {
  static const std::vector<std::string> patterns{"sorry", "i cannot", "i don't", "unable",
                                                 "error"};
  std::size_t begin = 0;
  while (begin < text.size() && std::isspace(static_cast<unsigned char>(text[begin]))) ++begin;
  std::string head = text.substr(begin, 16);
  std::transform(head.begin(), head.end(), head.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (const std::string& p : patterns)
    if (head.rfind(p, 0) == 0) return true;
  return false;
}

}  // namespace

FilterResult filter_and_dedup(const CandidatePool& pool) {
  if (pool.items.empty() || pool.items.front().style_id != 0)
    throw std::invalid_argument("filter_and_dedup: pool must start with the original");

  FilterResult out;
  out.instructions.original = pool.items.front().text;
  std::unordered_set<std::string> seen{out.instructions.original};

  out.report.reserve(pool.items.size());
  out.report.push_back(pool.items.front());

  static const std::string kUserWants = "The user wants";
  for (std::size_t i = 1; i < pool.items.size(); ++i) {
    RewriteCandidate cand = pool.items[i];
    bool was_normalized = false;
    if (cand.text.rfind(kUserWants, 0) == 0) {
      cand.text = "I want" + cand.text.substr(kUserWants.size());
      was_normalized = true;
    }
    if (cand.text.size() < 8) {
      cand.status = FilterStatus::dropped_length;
    } else if (starts_with_refusal(cand.text)) {
      cand.status = FilterStatus::dropped_refusal;
    } else if (!seen.insert(cand.text).second) {
      cand.status = FilterStatus::dropped_duplicate;
    } else {
      cand.status = was_normalized ? FilterStatus::normalized : FilterStatus::kept;
      out.instructions.paraphrases.push_back(cand.text);
    }
    out.report.push_back(std::move(cand));
  }
  out.instructions.validate();
  return out;
}

InstructionSet cap_paraphrases(const InstructionSet& set, int cap, Rng& rng) {
  if (cap < 0) throw std::invalid_argument("cap_paraphrases: cap must be >= 0");
  if (static_cast<int>(set.paraphrases.size()) <= cap) return set;
  std::vector<std::size_t> idx(set.paraphrases.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  // Partial Fisher-Yates, then restore order of the chosen subset.
  for (int i = 0; i < cap; ++i) {
    const int j = i + rng.uniform_int(static_cast<int>(idx.size()) - i);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(cap));
  std::sort(idx.begin(), idx.end());
  InstructionSet capped;
  capped.original = set.original;
  for (std::size_t i : idx) capped.paraphrases.push_back(set.paraphrases[i]);
  return capped;
}

ParaphraseOutcome paraphrase_instruction(RewriterClient& client, const std::string& instruction,
                                         const RewriterConfig& cfg, int cap, Rng& rng) {
  CandidatePool pool = generate_candidates(client, instruction, cfg);
  FilterResult filtered = filter_and_dedup(pool);
  ParaphraseOutcome out;
  out.instructions = cap_paraphrases(filtered.instructions, cap, rng);
  out.report = std::move(filtered.report);
  out.client_failures = pool.client_failures;
  return out;
}

}  // namespace actflow
