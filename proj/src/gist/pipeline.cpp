#include "gist/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <regex>
#include <set>

#include "gist/data_ingest.hpp"
#include "gist/error.hpp"

namespace gist {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

json dataset_preset(const std::string& preset) {
  if (preset == "fitzpatrick40") {
    return {{"template_id", "fitzpatrick40"}, {"per_prompt", 5}, {"m_min", 20}, {"m_max", 60}, {"n", 3}};
  }
  if (preset == "cub200") {
    return {{"template_id", "cub200"}, {"per_prompt", 15}, {"m_min", 20}, {"m_max", 60}, {"n", 1}};
  }
  if (preset == "flowers102") {
    return {{"template_id", "flowers102"}, {"per_prompt", 30}, {"m_min", 20}, {"m_max", 60}, {"n", 1}};
  }
  if (preset == "fgvc_aircraft") {
    return {{"template_id", "fgvc_aircraft"}, {"per_prompt", 30}, {"m_min", 20}, {"m_max", 60}, {"n", 4}};
  }
  return json::object();
}

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  if (path.is_absolute() || base.empty()) return path;
  return base / path;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw Error(ErrorCode::config, what + " not found: " + p.string());
}

PromptTemplate template_from_json(const json& j) {
  PromptTemplate t;
  t.template_id = j.at("template_id").get<std::string>();
  t.body = j.at("body").get<std::string>();
  t.axis_name = j.value("axis_name", "");
  t.axis_values = j.value("axis_values", std::vector<std::string>{});
  return t;
}

json template_to_json(const PromptTemplate& t) {
  return {{"template_id", t.template_id}, {"body", t.body}, {"axis_name", t.axis_name}, {"axis_values", t.axis_values}};
}

json sampling_to_json(const SamplingParams& s) {
  return {{"temperature", s.temperature}, {"top_p", s.top_p}, {"max_tokens", s.max_tokens}};
}

PipelineConfig parse_config_unchecked(const json& j, const fs::path& base_dir) {
  PipelineConfig c;
  c.source = j;
  c.experiment_id = j.at("experiment_id").get<std::string>();
  if (!std::regex_match(c.experiment_id, std::regex("[A-Za-z0-9_.-]+"))) {
    throw Error(ErrorCode::config, "experiment_id must match [A-Za-z0-9_.-]+");
  }
  c.run_root = resolve(base_dir, j.value("run_root", std::string("runs")));
  if (j.contains("cache_root")) {
    c.cache_root = resolve(base_dir, j.at("cache_root").get<std::string>());
  } else if (const char* env = std::getenv("GIST_CACHE_ROOT"); env && *env) {
    c.cache_root = env;
  } else {
    c.cache_root = c.run_root / "cache";
  }
  c.dataset = resolve(base_dir, j.at("dataset").get<std::string>());
  require_file(c.dataset, "dataset manifest");
  c.preset = j.value("preset", "");
  const json preset = dataset_preset(c.preset);
  if (!c.preset.empty() && preset.empty()) throw Error(ErrorCode::config, "unknown preset '" + c.preset + "'");

  if (!j.contains("backend")) throw Error(ErrorCode::config, "config needs a backend");
  c.backend = j.at("backend");
  try {
    make_encoder(c.backend);
  } catch (const Error& e) {
    throw Error(ErrorCode::config, std::string("backend: ") + e.what());
  }

  const json cap = j.value("captions", json::object());
  const auto source = cap.value("mode", std::string("gist"));
  if (source == "gist") {
    c.captions.source = CaptionSource::gist;
  } else if (source == "flyp") {
    c.captions.source = CaptionSource::flyp;
  } else {
    throw Error(ErrorCode::config, "captions.mode must be gist or flyp");
  }
  if (cap.contains("template")) {
    c.captions.prompt_template = template_from_json(cap.at("template"));
  } else {
    const auto id = cap.value("template_id", preset.value("template_id", std::string()));
    if (!id.empty()) c.captions.prompt_template = builtin_template(id);
  }
  c.captions.per_prompt = cap.value("per_prompt", preset.value("per_prompt", c.captions.per_prompt));
  c.captions.m_min = cap.value("m_min", preset.value("m_min", c.captions.m_min));
  c.captions.m_max = cap.value("m_max", preset.value("m_max", c.captions.m_max));
  c.captions.summary_budget = cap.value("summary_budget", c.captions.summary_budget);
  c.captions.concurrency = cap.value("concurrency", c.captions.concurrency);
  if (cap.contains("sampling")) {
    const auto& s = cap.at("sampling");
    c.captions.sampling.temperature = s.value("temperature", c.captions.sampling.temperature);
    c.captions.sampling.top_p = s.value("top_p", c.captions.sampling.top_p);
    c.captions.sampling.max_tokens = s.value("max_tokens", c.captions.sampling.max_tokens);
  }
  if (cap.contains("review_sidecar")) {
    c.captions.review_sidecar = resolve(base_dir, cap.at("review_sidecar").get<std::string>());
  }
  if (c.captions.m_max != 0 && c.captions.m_min > c.captions.m_max) {
    throw Error(ErrorCode::config, "captions.m_min exceeds captions.m_max");
  }
  if (c.captions.per_prompt < 1) throw Error(ErrorCode::config, "captions.per_prompt must be >= 1");

  const json match = j.value("match", json::object());
  const long long n = match.value("n", preset.value("n", 1LL));
  if (n < 1 || n > 5) throw Error(ErrorCode::config, "match.n must be in [1, 5], got " + std::to_string(n));
  c.match.n = static_cast<std::size_t>(n);
  c.match.mode = caption_mode_from_string(match.value("mode", std::string("short_with_class")));

  const bool needs_llm = c.captions.source == CaptionSource::gist;
  const bool needs_summary = needs_llm && c.match.mode == CaptionTextMode::short_with_class;
  if (c.captions.source == CaptionSource::flyp) {
    c.match.mode = CaptionTextMode::class_template;
  } else if (c.match.mode == CaptionTextMode::class_template) {
    throw Error(ErrorCode::config, "match.mode class_template is only valid with captions.mode flyp");
  }
  if (needs_llm) {
    validate_template(c.captions.prompt_template);
  }
  if (needs_llm || needs_summary) {
    if (!cap.contains("provider")) throw Error(ErrorCode::config, "captions.provider is required");
    c.captions.provider = cap.at("provider");
    const auto kind = c.captions.provider.value("kind", std::string());
    if (kind == "fixture") {
      const auto p = resolve(base_dir, c.captions.provider.at("path").get<std::string>());
      require_file(p, "caption fixture");
      c.captions.provider["path"] = p.string();
    } else if (kind != "remote") {
      throw Error(ErrorCode::config, "captions.provider.kind must be remote or fixture");
    }
  }

  json train = j.value("train", json::object());
  c.epochs_kshot = train.value("epochs_kshot", c.epochs_kshot);
  train.erase("epochs_kshot");
  c.train = train_config_from_json(train);
  c.probe = probe_config_from_json(j.value("probe", json::object()));

  const json ev = j.value("eval", json::object());
  if (ev.contains("bootstrap")) {
    const auto& b = ev.at("bootstrap");
    c.eval.bootstrap.resamples = b.value("resamples", c.eval.bootstrap.resamples);
    c.eval.bootstrap.seed = b.value("seed", c.eval.bootstrap.seed);
  }
  if (c.eval.bootstrap.resamples < 1) throw Error(ErrorCode::config, "eval.bootstrap.resamples must be >= 1");
  c.eval.full = ev.value("full", c.eval.full);
  c.eval.kshot = ev.value("kshot", c.eval.kshot);
  for (auto k : c.eval.kshot) {
    if (k < 1) throw Error(ErrorCode::config, "eval.kshot values must be >= 1");
  }
  c.eval.seeds = ev.value("seeds", c.eval.seeds);
  if (!c.eval.kshot.empty() && c.eval.seeds.empty()) throw Error(ErrorCode::config, "eval.seeds is empty");
  c.eval.kshot_std = std_kind_from_string(ev.value("kshot_std", std::string("sample")));
  const auto baselines = ev.value("baselines", std::vector<std::string>{"linear_probe", "zero_shot"});
  c.eval.linear_probe_baseline = false;
  c.eval.zero_shot_baseline = false;
  for (const auto& b : baselines) {
    if (b == "linear_probe") {
      c.eval.linear_probe_baseline = true;
    } else if (b == "zero_shot") {
      c.eval.zero_shot_baseline = true;
    } else {
      throw Error(ErrorCode::config, "unknown baseline '" + b + "'");
    }
  }
  c.eval.zeroshot_templates = ev.value("zeroshot_templates", c.eval.zeroshot_templates);
  if (!c.eval.full && c.eval.kshot.empty()) throw Error(ErrorCode::config, "eval selects no setting");

  c.threads = std::max<std::size_t>(1, j.value("threads", c.threads));
  c.eval.bootstrap.threads = c.threads;
  return c;
}

}  // namespace

PipelineConfig parse_pipeline_config(const json& j, const fs::path& base_dir) {
  try {
    return parse_config_unchecked(j, base_dir);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::config) throw;
    throw Error(ErrorCode::config, e.what());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, std::string("config: ") + e.what());
  }
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, "config " + path.string() + " is not valid JSON: " + e.what());
  } catch (const Error& e) {
    throw Error(ErrorCode::config, e.what());
  }
  return parse_pipeline_config(j, path.parent_path());
}

std::size_t RunResult::cache_hits() const {
  return static_cast<std::size_t>(std::count_if(stages.begin(), stages.end(), [](const StageRecord& s) {
    return s.cache_hit;
  }));
}

// ---------------------------------------------------------------------------
// Caption store helpers

CaptionStore enforce_caption_bounds(const CaptionStore& store, const std::vector<std::string>& classes,
                                    std::size_t m_min, std::size_t m_max) {
  std::map<std::string, std::size_t> kept;
  CaptionStore out;
  out.dataset_name = store.dataset_name;
  for (const auto& r : store.records) {
    auto& k = kept[r.label];
    if (m_max != 0 && k >= m_max) continue;
    ++k;
    out.records.push_back(r);
  }
  for (const auto& c : classes) {
    if (kept[c] < m_min) {
      throw Error(ErrorCode::precondition, "class '" + c + "' has " + std::to_string(kept[c]) +
                                               " captions, fewer than m_min=" + std::to_string(m_min));
    }
  }
  out.m_per_class = m_max;
  return out;
}

CaptionStore generate_caption_store(CaptionProvider& provider, const std::string& dataset_name,
                                    const std::vector<std::string>& classes, const CaptionSettings& settings,
                                    SkipReport* skips) {
  CaptionStore store;
  store.dataset_name = dataset_name;
  GenerationOptions opts;
  opts.per_prompt = settings.per_prompt;
  opts.sampling = settings.sampling;
  opts.concurrency = settings.concurrency;
  for (const auto& c : classes) {
    const auto prompts = render_prompts(settings.prompt_template, display_class_name(c));
    auto records =
        generate_class_captions(provider, c, settings.prompt_template.template_id, prompts, opts, skips);
    for (auto& r : records) store.records.push_back(std::move(r));
  }
  return store;
}

// ---------------------------------------------------------------------------
// Content-addressed stage store

namespace {

class StageStore {
 public:
  StageStore(fs::path root, std::vector<StageRecord>& records, const StageObserver& observer)
      : root_(std::move(root)), records_(records), observer_(observer) {}

  // Runs `compute` into a fresh stage directory unless a complete one with the
  // same input hash exists. Returns the directory.
  fs::path run(const std::string& stage, const std::string& setting, const json& inputs,
               const std::function<void(const fs::path&)>& compute) {
    const std::string hash = canonical_hash({{"stage", stage}, {"inputs", inputs}});
    const fs::path dir = root_ / stage / hash.substr(0, 16);
    StageRecord rec{stage, setting, hash, dir, false};
    if (complete(dir, hash)) {
      rec.cache_hit = true;
    } else {
      try {
        fs::remove_all(dir);
        fs::create_directories(dir);
        compute(dir);
        json files = json::object();
        for (const auto& entry : fs::directory_iterator(dir)) {
          if (!entry.is_regular_file()) continue;
          files[entry.path().filename().string()] = sha256_hex(read_file(entry.path()));
        }
        write_file(dir / "stage.json",
                   json{{"stage", stage}, {"input_hash", hash}, {"inputs", inputs}, {"files", files}}.dump(2));
      } catch (const StageError&) {
        throw;
      } catch (const std::exception& e) {
        throw StageError(stage, setting.empty() ? e.what() : setting + ": " + e.what());
      }
    }
    records_.push_back(rec);
    if (observer_) observer_(rec);
    return dir;
  }

 private:
  static bool complete(const fs::path& dir, const std::string& hash) {
    const auto meta_path = dir / "stage.json";
    if (!fs::is_regular_file(meta_path)) return false;
    try {
      const json meta = json::parse(read_file(meta_path));
      if (meta.at("input_hash").get<std::string>() != hash) return false;
      for (const auto& [name, sha] : meta.at("files").items()) {
        const auto p = dir / name;
        if (!fs::is_regular_file(p) || sha256_hex(read_file(p)) != sha.get<std::string>()) return false;
      }
      return true;
    } catch (const std::exception&) {
      return false;
    }
  }

  fs::path root_;
  std::vector<StageRecord>& records_;
  const StageObserver& observer_;
};

template <typename F>
auto guarded(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

std::string file_sha(const fs::path& p) { return sha256_hex(read_file(p)); }

json provider_identity(const json& spec) {
  if (spec.empty()) return nullptr;
  const auto kind = spec.value("kind", std::string());
  if (kind == "fixture") return {{"kind", kind}, {"sha256", file_sha(spec.at("path").get<std::string>())}};
  return {{"kind", kind},
          {"base_url", spec.value("base_url", std::string())},
          {"path", spec.value("path", std::string())},
          {"model", spec.value("model", std::string())}};
}

struct Setting {
  std::string name;       // "full", "5-shot"
  std::string label;      // "full", "5-shot/seed=1"
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  bool bootstrap = false;
  DatasetManifest manifest;
};

struct PointMetrics {
  double top1 = 0.0, top3 = 0.0;
  MeanStd boot1, boot3;
};

json metrics_to_json(const PointMetrics& m) {
  return {{"top1", m.top1},
          {"top3", m.top3},
          {"bootstrap_top1", {{"mean", m.boot1.mean}, {"std", m.boot1.std}}},
          {"bootstrap_top3", {{"mean", m.boot3.mean}, {"std", m.boot3.std}}}};
}

PointMetrics metrics_from_json(const json& j) {
  PointMetrics m;
  m.top1 = j.at("top1").get<double>();
  m.top3 = j.at("top3").get<double>();
  m.boot1 = {j.at("bootstrap_top1").at("mean").get<double>(), j.at("bootstrap_top1").at("std").get<double>()};
  m.boot3 = {j.at("bootstrap_top3").at("mean").get<double>(), j.at("bootstrap_top3").at("std").get<double>()};
  return m;
}

class Runner {
 public:
  Runner(const PipelineConfig& config, const StageObserver& observer)
      : config_(config), exp_dir_(config.run_root / config.experiment_id), stages_(exp_dir_, records_, observer) {}

  RunResult run();

 private:
  void load_inputs();
  void generate_captions();
  void embed();
  std::shared_ptr<CaptionProvider> provider();

  Eigen::MatrixXd base_rows(const std::vector<ImageRecord>& records) const;
  std::vector<int> labels_of(const std::vector<ImageRecord>& records) const;
  PointMetrics evaluate(const std::string& method, const Setting& s, const fs::path& probe_dir,
                        const std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>& transform,
                        const json& transform_id);
  PointMetrics score_metrics(const Eigen::MatrixXd& scores, std::span<const int> labels, bool bootstrap) const;
  fs::path train_probe(const std::string& method, const Setting& s,
                       const std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>& transform,
                       const json& transform_id);
  std::map<std::string, PointMetrics> run_setting(const Setting& s);
  PointMetrics run_zero_shot();

  const PipelineConfig& config_;
  fs::path exp_dir_;
  std::vector<StageRecord> records_;
  StageStore stages_;

  DatasetManifest manifest_;
  std::string dataset_hash_;
  std::shared_ptr<const Encoder> encoder_;
  std::string backend_id_;
  std::shared_ptr<CaptionProvider> provider_;
  CaptionStore captions_;
  std::string captions_hash_;
  std::map<std::string, EmbeddingVector> image_emb_;
  std::map<std::string, EmbeddingVector> caption_emb_;
  std::map<std::string, std::string> stage_hashes_;
};

std::shared_ptr<CaptionProvider> Runner::provider() {
  if (!provider_) provider_ = make_provider(config_.captions.provider, config_.cache_root / "llm");
  return provider_;
}

void Runner::load_inputs() {
  guarded("ingest", [&] {
    manifest_ = load_manifest(config_.dataset);
    dataset_hash_ = sha256_hex(serialize_manifest(manifest_));
    if (manifest_.count(Split::test) == 0) throw Error(ErrorCode::precondition, "manifest has no test split");
  });
  guarded("embed", [&] {
    encoder_ = with_cache(make_encoder(config_.backend), config_.cache_root / "embeddings");
    backend_id_ = encoder_->descriptor().model_id;
  });
}

void Runner::generate_captions() {
  const auto& cs = config_.captions;
  json sidecar = nullptr;
  if (!cs.review_sidecar.empty() && fs::exists(cs.review_sidecar)) sidecar = file_sha(cs.review_sidecar);
  const json inputs = {
      {"classes", manifest_.classes},
      {"dataset", manifest_.name},
      {"source", cs.source == CaptionSource::gist ? "gist" : "flyp"},
      {"template", cs.source == CaptionSource::gist ? template_to_json(cs.prompt_template) : json(nullptr)},
      {"per_prompt", cs.per_prompt},
      {"sampling", sampling_to_json(cs.sampling)},
      {"provider", cs.source == CaptionSource::gist ? provider_identity(cs.provider) : json(nullptr)},
      {"m_min", cs.m_min},
      {"m_max", cs.m_max},
      {"review", sidecar}};
  const auto dir = stages_.run("generate", "", inputs, [&](const fs::path& out) {
    CaptionStore store;
    SkipReport skips;
    if (cs.source == CaptionSource::flyp) {
      store = build_flyp_captions(manifest_.classes);
      store.dataset_name = manifest_.name;
    } else {
      store = generate_caption_store(*provider(), manifest_.name, manifest_.classes, cs, &skips);
    }
    if (!sidecar.is_null()) store = apply_verdicts(store, load_verdicts(cs.review_sidecar));
    store = enforce_caption_bounds(store, manifest_.classes, cs.m_min, cs.m_max);
    validate_store(store, manifest_.classes);
    save_caption_store(store, out / "captions.jsonl");
    write_file(out / "skips.json", json{{"empty_responses", skips.empty_responses},
                                        {"duplicates", skips.duplicates},
                                        {"skipped_prompts", skips.skipped_prompts}}
                                       .dump(2));
  });
  captions_ = guarded("generate", [&] { return load_caption_store(dir / "captions.jsonl"); });
  captions_hash_ = file_sha(dir / "captions.jsonl");
  stage_hashes_["generate"] = records_.back().input_hash;
}

void Runner::embed() {
  guarded("embed", [&] {
    std::vector<ImageInput> images;
    for (const auto& r : manifest_.records) images.push_back(manifest_.image_input(r));
    const auto vecs = encoder_->encode_images(images);
    for (std::size_t i = 0; i < images.size(); ++i) image_emb_[images[i].image_id] = vecs[i];
    std::vector<std::string> texts;
    for (const auto& r : captions_.records) texts.push_back(r.long_text);
    const auto tvecs = encoder_->encode_texts(texts);
    for (std::size_t i = 0; i < texts.size(); ++i) caption_emb_[captions_.records[i].caption_id] = tvecs[i];
  });
}

Eigen::MatrixXd Runner::base_rows(const std::vector<ImageRecord>& records) const {
  std::vector<EmbeddingVector> vecs;
  vecs.reserve(records.size());
  for (const auto& r : records) vecs.push_back(image_emb_.at(r.image_id));
  return stack_embeddings(vecs, true);
}

std::vector<int> Runner::labels_of(const std::vector<ImageRecord>& records) const {
  std::vector<int> labels;
  for (const auto& r : records) labels.push_back(static_cast<int>(manifest_.class_index(r.label)));
  return labels;
}

PointMetrics Runner::score_metrics(const Eigen::MatrixXd& scores, std::span<const int> labels,
                                   bool bootstrap) const {
  const std::size_t k3 = std::min<std::size_t>(3, static_cast<std::size_t>(scores.cols()));
  PointMetrics m;
  m.top1 = topk_accuracy(scores, labels, 1);
  m.top3 = topk_accuracy(scores, labels, k3);
  if (bootstrap) {
    m.boot1 = bootstrap_accuracy(scores, labels, config_.eval.bootstrap, 1);
    m.boot3 = bootstrap_accuracy(scores, labels, config_.eval.bootstrap, k3);
  }
  return m;
}

fs::path Runner::train_probe(const std::string& method, const Setting& s,
                             const std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>& transform,
                             const json& transform_id) {
  ProbeConfig pc = config_.probe;
  pc.seed = substream_seed(config_.probe.seed, s.seed);
  const auto train = s.manifest.in_split(Split::train);
  const json inputs = {{"method", method},
                       {"setting", sha256_hex(serialize_manifest(s.manifest))},
                       {"backend", backend_id_},
                       {"features", transform_id},
                       {"probe", to_json(pc)}};
  return stages_.run("probe", method + "/" + s.label, inputs, [&](const fs::path& out) {
    const Eigen::MatrixXd x = transform(base_rows(train));
    const auto y = labels_of(train);
    Eigen::MatrixXd val_x;
    std::vector<int> val_y;
    const auto val = s.manifest.in_split(Split::val);
    const bool early = pc.early_stopping && !val.empty();
    if (early) {
      val_x = transform(base_rows(val));
      val_y = labels_of(val);
    }
    auto result = train_linear_probe(x, y, manifest_.classes, pc, early ? &val_x : nullptr, val_y);
    result.probe.trained_on = s.label;
    save_probe(result.probe, out / "probe.bin");
  });
}

PointMetrics Runner::evaluate(const std::string& method, const Setting& s, const fs::path& probe_dir,
                              const std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>& transform,
                              const json& transform_id) {
  const auto test = s.manifest.in_split(Split::test);
  BootstrapConfig bc = config_.eval.bootstrap;
  const json inputs = {{"method", method},
                       {"probe", file_sha(probe_dir / "probe.bin")},
                       {"features", transform_id},
                       {"backend", backend_id_},
                       {"test", sha256_hex(json(labels_of(test)).dump() + [&] {
                          std::string ids;
                          for (const auto& r : test) ids += r.image_id + "\n";
                          return ids;
                        }())},
                       {"bootstrap", s.bootstrap ? json{{"resamples", bc.resamples}, {"seed", bc.seed}} : json()}};
  const auto dir = stages_.run("eval", method + "/" + s.label, inputs, [&](const fs::path& out) {
    const auto probe = load_probe(probe_dir / "probe.bin");
    const Eigen::MatrixXd scores = predict_all(probe, transform(base_rows(test)));
    const auto labels = labels_of(test);
    write_file(out / "metrics.json", metrics_to_json(score_metrics(scores, labels, s.bootstrap)).dump(2));
  });
  return metrics_from_json(json::parse(read_file(dir / "metrics.json")));
}

std::map<std::string, PointMetrics> Runner::run_setting(const Setting& s) {
  std::map<std::string, PointMetrics> out;
  const std::string setting_hash = sha256_hex(serialize_manifest(s.manifest));
  const auto train = s.manifest.in_split(Split::train);

  // match
  const json match_inputs = {{"setting", setting_hash}, {"captions", captions_hash_}, {"backend", backend_id_},
                             {"n", config_.match.n}};
  const auto match_dir = stages_.run("match", s.label, match_inputs, [&](const fs::path& dir) {
    const auto assignments =
        match_training_images(s.manifest, captions_, image_emb_, caption_emb_, config_.match.n, config_.threads);
    std::vector<json> rows;
    for (const auto& a : assignments) rows.push_back(to_json(a));
    write_file(dir / "assignments.jsonl", to_jsonl(rows));
  });
  std::vector<MatchAssignment> assignments;
  for (const auto& row : read_jsonl(match_dir / "assignments.jsonl")) assignments.push_back(assignment_from_json(row));
  const std::string assignments_hash = file_sha(match_dir / "assignments.jsonl");

  // summarize
  CaptionStore store = captions_;
  if (config_.match.mode == CaptionTextMode::short_with_class) {
    const json inputs = {{"captions", captions_hash_},
                         {"assignments", assignments_hash},
                         {"provider", provider_identity(config_.captions.provider)},
                         {"budget", config_.captions.summary_budget},
                         {"sampling", sampling_to_json(config_.captions.sampling)}};
    const auto dir = stages_.run("summarize", s.label, inputs, [&](const fs::path& out) {
      CaptionStore summarized = captions_;
      auto prov = provider();
      summarize_matched(
          summarized, assignments,
          [&](const std::string& text) {
            return summarize_caption(*prov, text, config_.captions.summary_budget, config_.captions.sampling);
          },
          config_.threads);
      save_caption_store(summarized, out / "captions.jsonl");
    });
    store = guarded("summarize", [&] { return load_caption_store(dir / "captions.jsonl"); });
  }
  const PairDataset pairs = guarded("summarize", [&] { return materialize_pairs(assignments, store, config_.match.mode); });

  // finetune
  TrainConfig tc = config_.train;
  tc.epochs = s.epochs;
  tc.seed = substream_seed(config_.train.seed, s.seed);
  const std::size_t images = pairs.image_count();
  if (tc.batch_size > images) {
    warn("batch size " + std::to_string(tc.batch_size) + " clamped to " + std::to_string(images) + " images (" +
         s.label + ")");
    tc.batch_size = images;
  }
  std::vector<json> pair_rows;
  for (const auto& p : pairs.pairs) pair_rows.push_back(to_json(p));
  const json ft_inputs = {{"pairs", canonical_hash(pair_rows)},
                          {"mode", to_string(pairs.mode)},
                          {"setting", setting_hash},
                          {"backend", backend_id_},
                          {"train", to_json(tc)}};
  const auto ft_dir = stages_.run("finetune", s.label, ft_inputs, [&](const fs::path& out) {
    EmbeddingTable image_base, text_base;
    for (const auto& r : train) image_base[r.image_id] = Eigen::Map<const Eigen::VectorXd>(
        image_emb_.at(r.image_id).values.data(), static_cast<Eigen::Index>(image_emb_.at(r.image_id).dim()));
    std::vector<std::string> ids, texts;
    std::set<std::string> seen;
    for (const auto& p : pairs.pairs) {
      if (!seen.insert(p.caption_id).second) continue;
      ids.push_back(p.caption_id);
      texts.push_back(p.text);
    }
    const auto tvecs = encoder_->encode_texts(texts);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      text_base[ids[i]] = Eigen::Map<const Eigen::VectorXd>(tvecs[i].values.data(),
                                                            static_cast<Eigen::Index>(tvecs[i].dim()));
    }
    std::optional<SelectionData> sel;
    const auto val = s.manifest.in_split(Split::val);
    if (!val.empty()) {
      sel = SelectionData{base_rows(train), labels_of(train), base_rows(val), labels_of(val), manifest_.classes};
    }
    const auto initial = ProjectionHeads::identity(encoder_->descriptor().dim, tc.logit_scale_init);
    const auto result = finetune(initial, pairs, image_base, text_base, tc, sel ? &*sel : nullptr);
    if (result.diverged) warn("fine-tuning diverged (" + s.label + "); keeping the last good heads");
    save_heads(result.heads, out / "heads.bin", {{"backend", backend_id_}, {"setting", s.label}});
    std::vector<json> log;
    for (const auto& l : result.log) {
      log.push_back({{"step", l.step},
                     {"epoch", l.epoch},
                     {"loss_sum", l.loss_sum},
                     {"loss_mean", l.loss_mean},
                     {"logit_scale", l.logit_scale},
                     {"lr", l.learning_rate}});
    }
    write_file(out / "log.jsonl", to_jsonl(log));
    json summary = {{"initial_loss", result.initial_loss}, {"final_loss", result.final_loss},
                    {"steps", result.steps},               {"batch_size", result.batch_size},
                    {"diverged", result.diverged},         {"best_epoch", nullptr},
                    {"best_val_accuracy", nullptr}};
    if (result.best_epoch) summary["best_epoch"] = *result.best_epoch;
    if (result.best_val_accuracy) summary["best_val_accuracy"] = *result.best_val_accuracy;
    write_file(out / "result.json", summary.dump(2));
  });
  const ProjectionHeads heads = guarded("finetune", [&] { return load_heads(ft_dir / "heads.bin"); });

  // probe + eval: GIST features and the frozen baseline
  const auto gist_transform = [&](const Eigen::MatrixXd& x) { return project_images(heads, x); };
  const json gist_id = {{"heads", heads.fingerprint()}};
  const auto gist_probe = train_probe("GIST", s, gist_transform, gist_id);
  out["GIST"] = guarded("eval", [&] { return evaluate("GIST", s, gist_probe, gist_transform, gist_id); });

  if (config_.eval.linear_probe_baseline) {
    const auto identity = [](const Eigen::MatrixXd& x) { return x; };
    const json lp_id = "frozen";
    const auto lp_probe = train_probe("LP", s, identity, lp_id);
    out["LP"] = guarded("eval", [&] { return evaluate("LP", s, lp_probe, identity, lp_id); });
  }
  return out;
}

PointMetrics Runner::run_zero_shot() {
  const auto& templates = config_.eval.zeroshot_templates;
  const json head_inputs = {{"backend", backend_id_}, {"classes", manifest_.classes}, {"templates", templates}};
  const auto head_dir = stages_.run("zeroshot", "", head_inputs, [&](const fs::path& out) {
    save_zeroshot_head(build_zeroshot_head(*encoder_, manifest_.classes, templates), out / "head.bin");
  });
  const auto test = manifest_.in_split(Split::test);
  const json inputs = {{"method", "ZS"},
                       {"head", file_sha(head_dir / "head.bin")},
                       {"dataset", dataset_hash_},
                       {"bootstrap", {{"resamples", config_.eval.bootstrap.resamples},
                                      {"seed", config_.eval.bootstrap.seed}}}};
  const auto dir = stages_.run("eval", "ZS", inputs, [&](const fs::path& out) {
    const auto head = load_zeroshot_head(head_dir / "head.bin");
    const Eigen::MatrixXd scores = predict_all(head, base_rows(test));
    write_file(out / "metrics.json", metrics_to_json(score_metrics(scores, labels_of(test), true)).dump(2));
  });
  return metrics_from_json(json::parse(read_file(dir / "metrics.json")));
}

RunResult Runner::run() {
  fs::create_directories(exp_dir_);
  load_inputs();
  generate_captions();
  embed();

  EvalReport report;
  report.experiment_id = config_.experiment_id;
  auto pct = [](double x) { return 100.0 * x; };

  if (config_.eval.full) {
    Setting s{"full", "full", 0, config_.train.epochs, true, manifest_};
    const auto metrics = run_setting(s);
    for (const char* method : {"GIST", "LP"}) {
      auto it = metrics.find(method);
      if (it == metrics.end()) continue;
      const auto& m = it->second;
      report.rows.push_back({method, "full", pct(m.boot1.mean), pct(m.boot1.std), pct(m.boot3.mean),
                             pct(m.boot3.std), "bootstrap", config_.eval.bootstrap.resamples});
    }
  }
  for (std::size_t k : config_.eval.kshot) {
    std::map<std::string, std::vector<double>> top1, top3;
    for (std::uint64_t seed : config_.eval.seeds) {
      const auto sub = guarded("kshot", [&] { return sample_kshot(manifest_, {k, seed, false}); });
      Setting s{std::to_string(k) + "-shot", std::to_string(k) + "-shot/seed=" + std::to_string(seed), seed,
                config_.epochs_kshot, false, sub};
      for (const auto& [method, m] : run_setting(s)) {
        top1[method].push_back(pct(m.top1));
        top3[method].push_back(pct(m.top3));
      }
    }
    for (const char* method : {"GIST", "LP"}) {
      if (!top1.count(method)) continue;
      const auto a1 = aggregate_kshot(top1[method], config_.eval.seeds.size(), config_.eval.kshot_std);
      const auto a3 = aggregate_kshot(top3[method], config_.eval.seeds.size(), config_.eval.kshot_std);
      report.rows.push_back({method, std::to_string(k) + "-shot", a1.mean, a1.std, a3.mean, a3.std,
                             std::string("kshot-") + to_string(config_.eval.kshot_std), config_.eval.seeds.size()});
    }
  }
  if (config_.eval.zero_shot_baseline) {
    const auto m = run_zero_shot();
    report.rows.push_back({"ZS", "zero-shot", pct(m.boot1.mean), pct(m.boot1.std), pct(m.boot3.mean),
                           pct(m.boot3.std), "bootstrap", config_.eval.bootstrap.resamples});
  }

  json stage_hashes = json::object();
  for (const auto& r : records_) {
    stage_hashes[r.stage + (r.setting.empty() ? "" : "/" + r.setting)] = r.input_hash;
  }
  report.provenance = {{"run_manifest", "run_manifest.json"},
                       {"dataset_hash", dataset_hash_},
                       {"caption_store_hash", captions_hash_},
                       {"backend", backend_id_},
                       {"stages", stage_hashes}};

  RunResult result;
  result.report = report;
  result.stages = records_;
  result.report_path = exp_dir_ / "report.json";
  result.manifest_path = exp_dir_ / "run_manifest.json";
  write_file(result.report_path, render_report(report, ReportFormat::json));
  write_file(exp_dir_ / "report.txt", render_report(report, ReportFormat::table_text));

  json stages = json::array();
  for (const auto& r : records_) {
    stages.push_back({{"stage", r.stage},
                      {"setting", r.setting},
                      {"input_hash", r.input_hash},
                      {"directory", fs::relative(r.directory, exp_dir_).string()},
                      {"cache_hit", r.cache_hit}});
  }
  result.manifest = {{"experiment_id", config_.experiment_id},
                     {"config", config_.source},
                     {"dataset", {{"path", config_.dataset.string()}, {"hash", dataset_hash_}}},
                     {"caption_store_hash", captions_hash_},
                     {"backend", backend_id_},
                     {"seeds",
                      {{"train", config_.train.seed},
                       {"probe", config_.probe.seed},
                       {"bootstrap", config_.eval.bootstrap.seed},
                       {"kshot", config_.eval.seeds}}},
                     {"train", to_json(config_.train)},
                     {"epochs_kshot", config_.epochs_kshot},
                     {"probe", to_json(config_.probe)},
                     {"stages", stages},
                     {"report_sha256", file_sha(result.report_path)},
                     {"finished", utc_timestamp()}};
  write_file(result.manifest_path, result.manifest.dump(2));
  return result;
}

}  // namespace

RunResult run_pipeline(const PipelineConfig& config, const StageObserver& observer) {
  Runner runner(config, observer);
  return runner.run();
}

}  // namespace gist
