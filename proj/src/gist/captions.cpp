#include "gist/captions.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <set>
#include <sstream>
#include <unordered_set>

#include "gist/error.hpp"

namespace gist {

// ---------------------------------------------------------------------------
// Templates

void validate_template(const PromptTemplate& t) {
  if (t.template_id.empty()) {
    throw Error(ErrorCode::invalid_argument, "prompt template needs a template_id");
  }
  if (t.body.find("{class}") == std::string::npos) {
    throw Error(ErrorCode::invalid_argument,
                "template '" + t.template_id + "' body lacks a {class} placeholder");
  }
  if (!t.axis_values.empty() && t.body.find("{axis}") == std::string::npos) {
    throw Error(ErrorCode::invalid_argument,
                "template '" + t.template_id + "' has axis values but no {axis} placeholder");
  }
}

PromptTemplate builtin_template(const std::string& template_id) {
  if (template_id == "fitzpatrick40") {
    // Body-part list as used for the dermatology captions; "torso" is listed
    // twice in the original and kept that way.
    return {"fitzpatrick40",
            "You are a dermatology disease describer. Describe what an image of {class} "
            "might look like on a person's {axis}.",
            "body part",
            {"face", "neck", "arms", "torso", "legs", "torso", "scalp", "hands", "feet"}};
  }
  if (template_id == "cub200") {
    return {"cub200",
            "You are a bird species describer. Describe what an image of a {axis} {class} "
            "might look like.",
            "gender",
            {"male", "female"}};
  }
  if (template_id == "flowers102") {
    return {"flowers102",
            "You are a flower describer. Describe what an image of a flower of {class} "
            "might look like.",
            "",
            {}};
  }
  if (template_id == "fgvc_aircraft") {
    return {"fgvc_aircraft",
            "You are an airplane model describer. Please describe distinguishing "
            "characteristics of what the plane looks like in 2-3 sentences. What would a "
            "plane of type {class} look like?",
            "",
            {}};
  }
  throw Error(ErrorCode::not_found, "no built-in prompt template '" + template_id + "'");
}

std::vector<std::string> builtin_template_ids() {
  return {"fitzpatrick40", "cub200", "flowers102", "fgvc_aircraft"};
}

namespace {
// Single pass so substituted text is never rescanned for placeholders.
std::string substitute(const std::string& body, const std::string& class_name,
                       const std::string* axis_value) {
  std::string out;
  std::size_t i = 0;
  while (i < body.size()) {
    if (body[i] == '{') {
      const std::size_t close = body.find('}', i);
      if (close != std::string::npos) {
        const std::string name = body.substr(i + 1, close - i - 1);
        const bool ident = !name.empty() && std::all_of(name.begin(), name.end(), [](unsigned char c) {
          return std::isalnum(c) || c == '_';
        });
        if (ident) {
          if (name == "class") {
            out += class_name;
          } else if (name == "axis" && axis_value) {
            out += *axis_value;
          } else {
            throw Error(ErrorCode::invalid_argument,
                        "unresolved placeholder {" + name + "} in prompt template");
          }
          i = close + 1;
          continue;
        }
      }
    }
    out.push_back(body[i]);
    ++i;
  }
  return out;
}
}  // namespace

std::vector<RenderedPrompt> render_prompts(const PromptTemplate& t,
                                           const std::string& class_name) {
  validate_template(t);
  std::vector<RenderedPrompt> out;
  if (t.axis_values.empty()) {
    out.push_back({substitute(t.body, class_name, nullptr), ""});
    return out;
  }
  for (const auto& value : t.axis_values) {
    out.push_back({substitute(t.body, class_name, &value), value});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Records and stores

void validate_caption(const CaptionRecord& r) {
  if (r.caption_id.empty()) throw Error(ErrorCode::invalid_argument, "caption without caption_id");
  if (trim(r.long_text).empty()) {
    throw Error(ErrorCode::invalid_argument, "caption '" + r.caption_id + "' has empty long_text");
  }
  if (r.short_text) {
    if (trim(*r.short_text).empty()) {
      throw Error(ErrorCode::invalid_argument, "caption '" + r.caption_id + "' has empty short_text");
    }
    if (r.short_text->size() >= r.long_text.size()) {
      throw Error(ErrorCode::invalid_argument,
                  "caption '" + r.caption_id + "' short_text is not shorter than long_text");
    }
  }
}

json to_json(const CaptionRecord& r) {
  json j = {{"caption_id", r.caption_id},
            {"label", r.label},
            {"long_text", r.long_text},
            {"provenance",
             {{"template_id", r.provenance.template_id},
              {"axis_value", r.provenance.axis_value},
              {"model_id", r.provenance.model_id},
              {"request_hash", r.provenance.request_hash}}}};
  if (r.short_text) {
    j["short_text"] = *r.short_text;
    if (r.short_truncated) j["short_truncated"] = true;
  }
  return j;
}

CaptionRecord caption_from_json(const json& j) {
  CaptionRecord r;
  r.caption_id = j.at("caption_id").get<std::string>();
  r.label = j.at("label").get<std::string>();
  r.long_text = j.at("long_text").get<std::string>();
  if (j.contains("short_text") && !j.at("short_text").is_null()) {
    r.short_text = j.at("short_text").get<std::string>();
  }
  r.short_truncated = j.value("short_truncated", false);
  if (j.contains("provenance")) {
    const auto& p = j.at("provenance");
    r.provenance.template_id = p.value("template_id", "");
    r.provenance.axis_value = p.value("axis_value", "");
    r.provenance.model_id = p.value("model_id", "");
    r.provenance.request_hash = p.value("request_hash", "");
  }
  validate_caption(r);
  return r;
}

std::vector<const CaptionRecord*> CaptionStore::for_label(const std::string& label) const {
  std::vector<const CaptionRecord*> out;
  for (const auto& r : records) {
    if (r.label == label) out.push_back(&r);
  }
  return out;
}

const CaptionRecord* CaptionStore::find(const std::string& caption_id) const {
  for (const auto& r : records) {
    if (r.caption_id == caption_id) return &r;
  }
  return nullptr;
}

CaptionRecord* CaptionStore::find(const std::string& caption_id) {
  for (auto& r : records) {
    if (r.caption_id == caption_id) return &r;
  }
  return nullptr;
}

std::map<std::string, std::size_t> CaptionStore::counts_by_label() const {
  std::map<std::string, std::size_t> counts;
  for (const auto& r : records) ++counts[r.label];
  return counts;
}

void validate_store(const CaptionStore& store, const std::vector<std::string>& classes) {
  const std::set<std::string> known(classes.begin(), classes.end());
  std::unordered_set<std::string> ids;
  for (const auto& r : store.records) {
    validate_caption(r);
    if (!ids.insert(r.caption_id).second) {
      throw Error(ErrorCode::invalid_argument, "duplicate caption_id '" + r.caption_id + "'");
    }
    if (!known.contains(r.label)) {
      throw Error(ErrorCode::invalid_argument,
                  "caption '" + r.caption_id + "' has label '" + r.label + "' outside the class list");
    }
  }
  const auto counts = store.counts_by_label();
  for (const auto& c : classes) {
    if (!counts.contains(c)) {
      throw Error(ErrorCode::precondition, "class '" + c + "' has no captions");
    }
  }
}

CaptionStore load_caption_store(const std::filesystem::path& path) {
  CaptionStore store;
  const auto rows = read_jsonl(path);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    try {
      if (i == 0 && !row.contains("caption_id")) {
        store.dataset_name = row.value("dataset_name", "");
        store.m_per_class = row.value("m_per_class", std::size_t{0});
        continue;
      }
      store.records.push_back(caption_from_json(row));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::parse, path.string() + ": record " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return store;
}

void save_caption_store(const CaptionStore& store, const std::filesystem::path& path) {
  std::vector<json> rows;
  rows.push_back({{"dataset_name", store.dataset_name}, {"m_per_class", store.m_per_class}});
  for (const auto& r : store.records) rows.push_back(to_json(r));
  write_file(path, to_jsonl(rows));
}

// ---------------------------------------------------------------------------
// Providers

std::string request_hash(const std::string& model_id, const CompletionRequest& request) {
  json key = {{"model_id", model_id},
              {"kind", request.kind == RequestKind::describe ? "describe" : "summarize"},
              {"prompt", request.prompt},
              {"sample", request.sample},
              {"attempt", request.attempt},
              {"temperature", request.sampling.temperature},
              {"top_p", request.sampling.top_p},
              {"max_tokens", request.sampling.max_tokens}};
  return canonical_hash(key);
}

FixtureProvider::FixtureProvider(const json& fixture) {
  try {
    model_id_ = fixture.value("model_id", std::string("fixture"));
    if (fixture.contains("completions")) {
      completions_ = fixture.at("completions").get<std::map<std::string, std::vector<std::string>>>();
    }
    if (fixture.contains("summaries")) {
      summaries_ = fixture.at("summaries").get<std::map<std::string, std::string>>();
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse, std::string("malformed caption fixture: ") + e.what());
  }
}

std::shared_ptr<FixtureProvider> FixtureProvider::from_file(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::parse, path.string() + ": " + e.what());
  }
  return std::make_shared<FixtureProvider>(j);
}

std::string FixtureProvider::complete(const CompletionRequest& request) {
  if (request.kind == RequestKind::summarize) {
    auto it = summaries_.find(request.subject);
    if (it == summaries_.end()) {
      throw Error(ErrorCode::provider,
                  "fixture has no summary for \"" + request.subject.substr(0, 60) + "\"");
    }
    return it->second;
  }
  auto it = completions_.find(request.prompt);
  if (it == completions_.end()) {
    throw Error(ErrorCode::provider,
                "fixture has no completions for prompt \"" + request.prompt.substr(0, 80) + "\"");
  }
  if (request.sample >= it->second.size()) {
    throw Error(ErrorCode::provider, "fixture has only " + std::to_string(it->second.size()) +
                                         " completions for prompt \"" +
                                         request.prompt.substr(0, 80) + "\"");
  }
  return it->second[request.sample];
}

ResponseCache::ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::optional<std::string> ResponseCache::get(const std::string& hash) const {
  std::shared_lock lock(mutex_);
  const auto path = dir_ / (hash + ".json");
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    return json::parse(read_file(path)).at("response").get<std::string>();
  } catch (const std::exception&) {
    warn("corrupted response cache entry " + path.string() + "; treating as miss");
    return std::nullopt;
  }
}

void ResponseCache::put(const std::string& hash, const json& request, const std::string& response) {
  std::unique_lock lock(mutex_);
  json entry = {{"request", request}, {"response", response}, {"timestamp", utc_timestamp()}};
  write_file(dir_ / (hash + ".json"), entry.dump(2));
}

CachingProvider::CachingProvider(std::shared_ptr<CaptionProvider> inner,
                                 std::shared_ptr<ResponseCache> cache)
    : inner_(std::move(inner)), cache_(std::move(cache)) {}

std::string CachingProvider::complete(const CompletionRequest& request) {
  const std::string hash = request_hash(inner_->model_id(), request);
  if (auto hit = cache_->get(hash)) {
    std::lock_guard lock(stats_mutex_);
    ++hits_;
    return *hit;
  }
  std::string text = inner_->complete(request);
  json req = {{"model_id", inner_->model_id()},
              {"prompt", request.prompt},
              {"sample", request.sample},
              {"attempt", request.attempt}};
  cache_->put(hash, req, text);
  std::lock_guard lock(stats_mutex_);
  ++misses_;
  return text;
}

std::shared_ptr<CaptionProvider> make_provider(const json& spec,
                                               const std::filesystem::path& cache_dir) {
  const auto kind = spec.value("kind", std::string("fixture"));
  std::shared_ptr<CaptionProvider> provider;
  if (kind == "fixture") {
    if (!spec.contains("path")) throw Error(ErrorCode::config, "fixture provider needs a path");
    provider = FixtureProvider::from_file(spec.at("path").get<std::string>());
  } else if (kind == "remote") {
    RemoteConfig c;
    c.base_url = spec.value("base_url", c.base_url);
    c.path = spec.value("path", c.path);
    c.model = spec.value("model", c.model);
    c.api_key_env = spec.value("api_key_env", c.api_key_env);
    c.max_retries = spec.value("max_retries", c.max_retries);
    c.backoff_seconds = spec.value("backoff_seconds", c.backoff_seconds);
    c.timeout_seconds = spec.value("timeout_seconds", c.timeout_seconds);
    if (!cache_dir.empty()) c.log_dir = cache_dir;
    provider = std::make_shared<RemoteProvider>(c);
  } else {
    throw Error(ErrorCode::config, "unknown caption provider kind '" + kind + "'");
  }
  if (cache_dir.empty()) return provider;
  return std::make_shared<CachingProvider>(provider,
                                           std::make_shared<ResponseCache>(cache_dir / "responses"));
}

// ---------------------------------------------------------------------------
// Generation

std::string make_caption_id(const std::string& label, std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  return sha256_hex(label).substr(0, 8) + "-" + buf;
}

std::vector<CaptionRecord> generate_class_captions(CaptionProvider& provider,
                                                   const std::string& class_name,
                                                   const std::string& template_id,
                                                   const std::vector<RenderedPrompt>& prompts,
                                                   const GenerationOptions& options,
                                                   SkipReport* skips) {
  if (options.per_prompt == 0) {
    throw Error(ErrorCode::invalid_argument, "per_prompt must be at least 1");
  }
  struct Job {
    std::size_t prompt_index;
    CompletionRequest request;
  };
  std::vector<Job> jobs;
  std::map<std::string, std::size_t> occurrences;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    const std::size_t occ = occurrences[prompts[p].text]++;
    for (std::size_t j = 0; j < options.per_prompt; ++j) {
      CompletionRequest req;
      req.kind = RequestKind::describe;
      req.prompt = prompts[p].text;
      req.sample = occ * options.per_prompt + j;
      req.sampling = options.sampling;
      jobs.push_back({p, std::move(req)});
    }
  }
  std::vector<std::string> responses(jobs.size());
  parallel_for(jobs.size(), options.concurrency,
               [&](std::size_t i) { responses[i] = provider.complete(jobs[i].request); });

  SkipReport local;
  SkipReport& report = skips ? *skips : local;
  std::vector<CaptionRecord> out;
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const std::string text = trim(responses[i]);
    if (text.empty()) {
      ++report.empty_responses;
      report.skipped_prompts.push_back(jobs[i].request.prompt);
      continue;
    }
    if (!seen.insert(text).second) {
      ++report.duplicates;
      continue;
    }
    CaptionRecord r;
    r.caption_id = make_caption_id(class_name, out.size());
    r.label = class_name;
    r.long_text = text;
    r.provenance = {template_id, prompts[jobs[i].prompt_index].axis_value, provider.model_id(),
                    request_hash(provider.model_id(), jobs[i].request)};
    out.push_back(std::move(r));
  }
  return out;
}

std::string summary_prompt(const std::string& long_text, std::size_t budget_words,
                           std::size_t attempt) {
  std::string p = "Summarize the following image description into a concise, comma-separated "
                  "list of its key visual features, using at most " +
                  std::to_string(budget_words) + " words.";
  if (attempt > 0) p += " Your previous answer was too long; be strictly shorter.";
  p += "\n\nDescription: " + long_text;
  return p;
}

namespace {
// Cuts `text` after its `words`-th whitespace-delimited token.
std::string cut_words(const std::string& text, std::size_t words) {
  std::size_t pos = 0, count = 0, end = 0;
  while (pos < text.size() && count < words) {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    if (pos >= text.size()) break;
    while (pos < text.size() && !std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    end = pos;
    ++count;
  }
  std::string out = text.substr(0, end);
  while (!out.empty() && (out.back() == ',' || out.back() == ';' || out.back() == ':')) out.pop_back();
  return out;
}
}  // namespace

Summary summarize_caption(CaptionProvider& provider, const std::string& long_text,
                          std::size_t budget_words, const SamplingParams& sampling) {
  const std::string source = trim(long_text);
  if (source.empty()) throw Error(ErrorCode::precondition, "cannot summarize an empty caption");
  if (budget_words == 0) throw Error(ErrorCode::invalid_argument, "summary budget must be positive");
  std::string text;
  for (std::size_t attempt = 0; attempt < 2; ++attempt) {
    CompletionRequest req;
    req.kind = RequestKind::summarize;
    req.prompt = summary_prompt(source, budget_words, attempt);
    req.subject = source;
    req.attempt = attempt;
    req.sampling = sampling;
    text = trim(provider.complete(req));
    if (!text.empty() && split_words(text).size() <= budget_words) return {text, false};
  }
  if (text.empty()) throw Error(ErrorCode::provider, "provider returned an empty summary");
  return {cut_words(text, budget_words), true};
}

std::string append_class_name(const std::string& short_text, const std::string& class_name) {
  if (short_text.size() >= class_name.size() &&
      short_text.compare(short_text.size() - class_name.size(), class_name.size(), class_name) == 0) {
    return short_text;
  }
  return short_text + ", " + class_name;
}

CaptionStore build_flyp_captions(const std::vector<std::string>& class_names) {
  if (class_names.empty()) throw Error(ErrorCode::invalid_argument, "FLYP captions need at least one class");
  std::set<std::string> seen;
  CaptionStore store;
  store.m_per_class = 1;
  for (const auto& name : class_names) {
    if (!seen.insert(name).second) {
      throw Error(ErrorCode::invalid_argument, "duplicate class name '" + name + "'");
    }
    CaptionRecord r;
    r.caption_id = make_caption_id(name, 0);
    r.label = name;
    std::string display = name;
    std::replace(display.begin(), display.end(), '_', ' ');
    r.long_text = "a photo of a " + display;
    r.provenance = {"flyp", "", "", ""};
    store.records.push_back(std::move(r));
  }
  return store;
}

// ---------------------------------------------------------------------------
// Review

namespace {
const char* to_string(Verdict v) { return v == Verdict::keep ? "keep" : "discard"; }
}  // namespace

std::map<std::string, VerdictEntry> load_verdicts(const std::filesystem::path& path) {
  std::map<std::string, VerdictEntry> out;
  if (!std::filesystem::exists(path)) return out;
  const std::string text = read_file(path);
  std::size_t pos = 0;
  std::size_t intact_end = 0;
  bool corrupted = false;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    const bool terminated = end != std::string::npos;
    if (!terminated) end = text.size();
    std::string_view line(text.data() + pos, end - pos);
    if (!trim(line).empty()) {
      try {
        auto row = json::parse(line);
        VerdictEntry e;
        e.caption_id = row.at("caption_id").get<std::string>();
        const auto v = row.at("verdict").get<std::string>();
        if (v == "keep") {
          e.verdict = Verdict::keep;
        } else if (v == "discard") {
          e.verdict = Verdict::discard;
        } else {
          throw Error(ErrorCode::parse, "bad verdict");
        }
        e.timestamp = row.value("timestamp", "");
        if (!terminated) throw Error(ErrorCode::parse, "unterminated line");
        out[e.caption_id] = e;
      } catch (const std::exception&) {
        corrupted = true;
        break;
      }
    }
    pos = end + 1;
    intact_end = std::min(pos, text.size());
  }
  if (corrupted) {
    warn("verdict sidecar " + path.string() + " is corrupted; rebuilt from its intact prefix");
    write_file(path, std::string_view(text.data(), intact_end));
  }
  return out;
}

ReviewProgress review_captions(
    const CaptionStore& store, const std::filesystem::path& sidecar,
    const std::function<ReviewAction(const CaptionRecord&, std::size_t, std::size_t)>& decide) {
  const auto existing = load_verdicts(sidecar);
  ReviewProgress progress;
  const std::size_t total = store.records.size();
  for (std::size_t i = 0; i < total; ++i) {
    const auto& r = store.records[i];
    if (existing.contains(r.caption_id)) {
      ++progress.already_done;
      continue;
    }
    if (progress.quit) {
      ++progress.remaining;
      continue;
    }
    const ReviewAction action = decide(r, i, total);
    if (action == ReviewAction::quit) {
      progress.quit = true;
      ++progress.remaining;
      continue;
    }
    const Verdict v = action == ReviewAction::keep ? Verdict::keep : Verdict::discard;
    json row = {{"caption_id", r.caption_id}, {"verdict", to_string(v)}, {"timestamp", utc_timestamp()}};
    append_line(sidecar, row.dump());
    ++progress.reviewed;
  }
  return progress;
}

CaptionStore apply_verdicts(const CaptionStore& store,
                            const std::map<std::string, VerdictEntry>& verdicts) {
  CaptionStore out;
  out.dataset_name = store.dataset_name;
  out.m_per_class = store.m_per_class;
  for (const auto& r : store.records) {
    auto it = verdicts.find(r.caption_id);
    if (it != verdicts.end() && it->second.verdict == Verdict::discard) continue;
    out.records.push_back(r);
  }
  return out;
}

}  // namespace gist
