#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "actflow/consistency.hpp"
#include "actflow/rng.hpp"

namespace actflow {

enum class FilterStatus { kept, normalized, dropped_length, dropped_refusal, dropped_duplicate };
const char* to_string(FilterStatus s);

struct RewriteCandidate {
  std::string text;
  int style_id = 0;  // 1..7 for the prompt templates; 0 marks the original
  int sample_index = 0;
  FilterStatus status = FilterStatus::kept;
};

struct RewriterConfig {
  double temperature = 0.7;
  double top_p = 0.9;
  int max_new_tokens = 512;
  int samples_per_template = 5;
};

// The seven rewrite prompt styles, with the instruction substituted verbatim.
std::array<std::string, 7> build_prompts(const std::string& instruction);

struct RewriteRequest {
  std::string prompt;
  std::string instruction;  // raw instruction the prompt was built from
  int style_id = 1;
  int sample_index = 0;
};

// Chat-completion-style rewrite backend. Implementations throw
// std::runtime_error on a failed request.
class RewriterClient {
 public:
  virtual ~RewriterClient() = default;
  virtual std::string name() const = 0;
  virtual std::string complete(const RewriteRequest& request, const RewriterConfig& cfg) = 0;
};

// Deterministic offline rewriter: rule-based surface rewrites per style
// (intent framing, goal phrasing, object-function reference, politeness
// wrapper, imperative compression, teaching and abstract-goal phrasing),
// with seeded synonym substitution. Never fails.
class FallbackRewriter : public RewriterClient {
 public:
  explicit FallbackRewriter(std::uint64_t seed = 0) : seed_(seed) {}
  std::string name() const override { return "fallback"; }
  std::string complete(const RewriteRequest& request, const RewriterConfig& cfg) override;

 private:
  std::uint64_t seed_;
};

// Remote backend: POSTs JSON {prompt, temperature, top_p, max_tokens, seed}
// to the endpoint, with an optional bearer token, and reads the reply from
// "text", choices[0].text, or choices[0].message.content.
class HttpRewriter : public RewriterClient {
 public:
  HttpRewriter(std::string endpoint_url, std::string auth_token);
  std::string name() const override;
  std::string complete(const RewriteRequest& request, const RewriterConfig& cfg) override;

 private:
  std::string url_;
  std::string token_;
};

// backend_key is either "fallback" or an http(s) endpoint URL; the remote
// auth token is read from the ACTFLOW_REWRITER_TOKEN environment variable.
std::unique_ptr<RewriterClient> make_rewriter(const std::string& backend_key,
                                              std::uint64_t fallback_seed = 0);

// The pre-filter candidate pool: the original first, then template-major,
// sample-minor generations. Individual request failures are counted and
// skipped; a backend that yields no candidate at all is an error.
struct CandidatePool {
  std::vector<RewriteCandidate> items;
  int client_failures = 0;
};
CandidatePool generate_candidates(RewriterClient& client, const std::string& instruction,
                                  const RewriterConfig& cfg);

// Post-processing, in order: "The user wants" -> "I want" prefix
// normalization, empty/short-drop (< 8 chars), refusal-prefix drop, exact
// dedup keeping first occurrences. The original is exempt from drops.
struct FilterResult {
  InstructionSet instructions;
  std::vector<RewriteCandidate> report;  // pool order, final status per item
};
FilterResult filter_and_dedup(const CandidatePool& pool);

// Uniform subsample of the paraphrase list down to `cap` entries (original
// always kept), preserving order; no-op when already within the cap.
InstructionSet cap_paraphrases(const InstructionSet& set, int cap, Rng& rng);

// Offline candidate list for one instruction: 7 styles x samples, in
// template-then-sample order. Deterministic in (instruction, rng key).
std::vector<std::string> fallback_rewrite(const std::string& instruction, Rng& rng,
                                          int samples_per_template = 5);

// Full per-instruction pipeline: generate, filter, dedup, cap.
struct ParaphraseOutcome {
  InstructionSet instructions;
  std::vector<RewriteCandidate> report;
  int client_failures = 0;
};
ParaphraseOutcome paraphrase_instruction(RewriterClient& client, const std::string& instruction,
                                         const RewriterConfig& cfg, int cap, Rng& rng);

}  // namespace actflow
