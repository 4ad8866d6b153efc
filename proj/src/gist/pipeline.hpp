#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gist/captions.hpp"
#include "gist/classifier.hpp"
#include "gist/eval.hpp"
#include "gist/matcher.hpp"
#include "gist/trainer.hpp"

namespace gist {

enum class CaptionSource { gist, flyp };

struct CaptionSettings {
  CaptionSource source = CaptionSource::gist;
  PromptTemplate prompt_template;
  std::size_t per_prompt = 5;
  std::size_t m_min = 1;
  std::size_t m_max = 0;  // 0: unbounded
  json provider = json::object();
  std::size_t summary_budget = kDefaultSummaryBudget;
  SamplingParams sampling;
  std::size_t concurrency = 4;
  std::filesystem::path review_sidecar;  // empty: no review filtering
};

struct MatchSettings {
  std::size_t n = 1;
  CaptionTextMode mode = CaptionTextMode::short_with_class;
};

struct EvalSettings {
  BootstrapConfig bootstrap;
  bool full = true;
  std::vector<std::size_t> kshot;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  StdKind kshot_std = StdKind::sample;
  bool linear_probe_baseline = true;
  bool zero_shot_baseline = true;
  std::vector<std::string> zeroshot_templates = kDefaultZeroShotTemplates;
};

/// Declarative description of one experiment. Relative paths in the source
/// JSON are resolved against the config file's directory.
struct PipelineConfig {
  std::string experiment_id;
  std::filesystem::path run_root;
  std::filesystem::path cache_root;
  std::filesystem::path dataset;
  std::string preset;
  json backend;
  CaptionSettings captions;
  MatchSettings match;
  TrainConfig train;
  std::size_t epochs_kshot = 50;
  ProbeConfig probe;
  EvalSettings eval;
  std::size_t threads = 4;
  json source = json::object();  // resolved config as given, for the run manifest
};

/// Per-dataset defaults: prompt template, match n and caption count bounds.
/// Returns an empty object for an unknown preset.
json dataset_preset(const std::string& preset);

/// Parses and validates a config. Throws Error(config) on any problem,
/// including missing referenced files and n outside [1, 5].
PipelineConfig parse_pipeline_config(const json& j, const std::filesystem::path& base_dir = {});
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

struct StageRecord {
  std::string stage;
  std::string setting;
  std::string input_hash;
  std::filesystem::path directory;
  bool cache_hit = false;
};

struct RunResult {
  EvalReport report;
  json manifest;
  std::vector<StageRecord> stages;
  std::filesystem::path report_path;
  std::filesystem::path manifest_path;

  std::size_t cache_hits() const;
};

/// Stage event hook, called after each stage finishes (for progress output).
using StageObserver = std::function<void(const StageRecord&)>;

/// generate -> match -> summarize -> finetune -> probe -> eval for the full
/// training split and each (k, seed), plus frozen linear-probe and zero-shot
/// baselines. Every stage writes to runs/<experiment>/<stage>/<hash>/ and is
/// skipped when a stage directory with matching input and output hashes
/// exists. A failing stage raises StageError naming it; completed stage
/// directories are left in place.
RunResult run_pipeline(const PipelineConfig& config, const StageObserver& observer = {});

/// Applies caption count bounds: more than m_max captions for a class are cut
/// to the first m_max; fewer than m_min throws precondition naming the class.
CaptionStore enforce_caption_bounds(const CaptionStore& store, const std::vector<std::string>& classes,
                                    std::size_t m_min, std::size_t m_max);

/// Generates the caption store for `classes` with the given settings.
CaptionStore generate_caption_store(CaptionProvider& provider, const std::string& dataset_name,
                                    const std::vector<std::string>& classes, const CaptionSettings& settings,
                                    SkipReport* skips = nullptr);

}  // namespace gist
