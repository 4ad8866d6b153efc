#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "gist/util.hpp"

namespace gist {

struct PromptTemplate {
  std::string template_id;
  std::string body;  // placeholders: {class}, and {axis} when axis_values is set
  std::string axis_name;
  std::vector<std::string> axis_values;
};

/// Throws invalid_argument when the template breaks its invariants.
void validate_template(const PromptTemplate& t);

/// Built-in domain templates: "fitzpatrick40", "cub200", "flowers102",
/// "fgvc_aircraft". Throws not_found for other ids.
PromptTemplate builtin_template(const std::string& template_id);
std::vector<std::string> builtin_template_ids();

struct RenderedPrompt {
  std::string text;
  std::string axis_value;  // empty when the template has no axis
};

/// One prompt per axis value (a single prompt without an axis), in axis order.
std::vector<RenderedPrompt> render_prompts(const PromptTemplate& t,
                                           const std::string& class_name);

struct Provenance {
  std::string template_id;
  std::string axis_value;
  std::string model_id;
  std::string request_hash;
};

struct CaptionRecord {
  std::string caption_id;
  std::string label;
  std::string long_text;
  std::optional<std::string> short_text;
  bool short_truncated = false;
  Provenance provenance;
};

void validate_caption(const CaptionRecord& r);
json to_json(const CaptionRecord& r);
CaptionRecord caption_from_json(const json& j);

struct CaptionStore {
  std::string dataset_name;
  std::size_t m_per_class = 0;
  std::vector<CaptionRecord> records;

  /// Records for `label`, in store order.
  std::vector<const CaptionRecord*> for_label(const std::string& label) const;
  const CaptionRecord* find(const std::string& caption_id) const;
  CaptionRecord* find(const std::string& caption_id);
  std::map<std::string, std::size_t> counts_by_label() const;
};

/// Every label in `classes` has at least one caption and no caption carries a
/// label outside `classes`.
void validate_store(const CaptionStore& store, const std::vector<std::string>& classes);

/// JSON Lines: an optional header {"dataset_name", "m_per_class"} followed by
/// one CaptionRecord per line.
CaptionStore load_caption_store(const std::filesystem::path& path);
void save_caption_store(const CaptionStore& store, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Providers

enum class RequestKind { describe, summarize };

struct SamplingParams {
  double temperature = 0.7;
  double top_p = 1.0;
  std::size_t max_tokens = 256;
};

struct CompletionRequest {
  RequestKind kind = RequestKind::describe;
  std::string prompt;   // full text sent to the model
  std::string subject;  // summarize: the long caption being compressed
  std::size_t sample = 0;
  std::size_t attempt = 0;
  SamplingParams sampling;
};

/// Stable key over (model_id, request contents, sampling parameters).
std::string request_hash(const std::string& model_id, const CompletionRequest& request);

class CaptionProvider {
 public:
  virtual ~CaptionProvider() = default;
  virtual std::string model_id() const = 0;
  /// Returns raw model text. Throws Error(provider) on failure.
  virtual std::string complete(const CompletionRequest& request) = 0;
};

/// Canned responses from a JSON file:
///   {"model_id": "...",
///    "completions": {"<prompt>": ["text for sample 0", "sample 1", ...]},
///    "summaries": {"<long caption>": "short caption"}}
/// Pure and thread-safe after load.
class FixtureProvider final : public CaptionProvider {
 public:
  explicit FixtureProvider(const json& fixture);
  static std::shared_ptr<FixtureProvider> from_file(const std::filesystem::path& path);

  std::string model_id() const override { return model_id_; }
  std::string complete(const CompletionRequest& request) override;

 private:
  std::string model_id_;
  std::map<std::string, std::vector<std::string>> completions_;
  std::map<std::string, std::string> summaries_;
};

struct RemoteConfig {
  std::string base_url = "https://api.openai.com";
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-4";
  std::string api_key_env = "GIST_API_KEY";
  std::size_t max_retries = 3;
  double backoff_seconds = 1.0;
  double timeout_seconds = 60.0;
  // Request/response bodies are appended here when set.
  std::filesystem::path log_dir;
};

/// Chat-completions style HTTP client.
class RemoteProvider final : public CaptionProvider {
 public:
  explicit RemoteProvider(RemoteConfig config);

  std::string model_id() const override { return config_.model; }
  std::string complete(const CompletionRequest& request) override;

 private:
  RemoteConfig config_;
  std::string api_key_;
};

/// On-disk response cache: `<dir>/<request_hash>.json` holding the request and
/// the raw response text. Concurrent reads, exclusive writes.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir);

  std::optional<std::string> get(const std::string& hash) const;
  void put(const std::string& hash, const json& request, const std::string& response);

 private:
  std::filesystem::path dir_;
  mutable std::shared_mutex mutex_;
};

/// Decorator: serves repeated requests from a ResponseCache.
class CachingProvider final : public CaptionProvider {
 public:
  CachingProvider(std::shared_ptr<CaptionProvider> inner, std::shared_ptr<ResponseCache> cache);

  std::string model_id() const override { return inner_->model_id(); }
  std::string complete(const CompletionRequest& request) override;

  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }

 private:
  std::shared_ptr<CaptionProvider> inner_;
  std::shared_ptr<ResponseCache> cache_;
  std::mutex stats_mutex_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

/// {"kind": "fixture", "path"} or {"kind": "remote", ...RemoteConfig fields}.
/// When cache_dir is non-empty the provider is wrapped in a CachingProvider.
std::shared_ptr<CaptionProvider> make_provider(const json& spec,
                                               const std::filesystem::path& cache_dir);

// ---------------------------------------------------------------------------
// Generation and summarization

struct SkipReport {
  std::size_t empty_responses = 0;
  std::size_t duplicates = 0;
  std::vector<std::string> skipped_prompts;
};

struct GenerationOptions {
  std::size_t per_prompt = 5;
  SamplingParams sampling;
  std::size_t concurrency = 4;
};

/// Requests `per_prompt` completions for each prompt. Empty or whitespace-only
/// responses are skipped and counted; exact duplicate texts within the class
/// are dropped. Repeated identical prompts ask for further sample indices.
std::vector<CaptionRecord> generate_class_captions(CaptionProvider& provider,
                                                   const std::string& class_name,
                                                   const std::string& template_id,
                                                   const std::vector<RenderedPrompt>& prompts,
                                                   const GenerationOptions& options,
                                                   SkipReport* skips = nullptr);

inline constexpr std::size_t kDefaultSummaryBudget = 30;

struct Summary {
  std::string text;
  bool truncated = false;
};

std::string summary_prompt(const std::string& long_text, std::size_t budget_words, std::size_t attempt);

/// Summarizes a long caption to at most `budget_words` whitespace tokens. An
/// over-budget answer is retried once, then cut at a word boundary and flagged.
Summary summarize_caption(CaptionProvider& provider, const std::string& long_text,
                          std::size_t budget_words = kDefaultSummaryBudget,
                          const SamplingParams& sampling = {});

/// "<short_text>, <class_name>"; unchanged when class_name already ends it.
std::string append_class_name(const std::string& short_text, const std::string& class_name);

/// One "a photo of a <class>" caption per class, template_id "flyp".
CaptionStore build_flyp_captions(const std::vector<std::string>& class_names);

/// Deterministic caption id for the `index`-th caption of `label`.
std::string make_caption_id(const std::string& label, std::size_t index);

// ---------------------------------------------------------------------------
// Review (keep/discard vetting)

enum class Verdict { keep, discard };

struct VerdictEntry {
  std::string caption_id;
  Verdict verdict = Verdict::keep;
  std::string timestamp;
};

/// Loads the sidecar (JSON Lines of {caption_id, verdict, timestamp}). A
/// corrupted line truncates the file to the intact prefix with a warning.
/// Later entries for the same id win.
std::map<std::string, VerdictEntry> load_verdicts(const std::filesystem::path& path);

enum class ReviewAction { keep, discard, quit };

struct ReviewProgress {
  std::size_t reviewed = 0;
  std::size_t already_done = 0;
  std::size_t remaining = 0;
  bool quit = false;
};

/// Walks captions without a recorded verdict in store order, asking `decide`
/// for each and appending the verdict to the sidecar immediately (so an
/// interrupted session resumes where it stopped).
ReviewProgress review_captions(
    const CaptionStore& store, const std::filesystem::path& sidecar,
    const std::function<ReviewAction(const CaptionRecord&, std::size_t index, std::size_t total)>& decide);

/// The store without discarded captions.
CaptionStore apply_verdicts(const CaptionStore& store,
                            const std::map<std::string, VerdictEntry>& verdicts);

}  // namespace gist
