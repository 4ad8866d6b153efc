#include "gist/commands.hpp"

#include <cstdlib>
#include <map>
#include <set>

#include "gist/captions.hpp"
#include "gist/classifier.hpp"
#include "gist/data_ingest.hpp"
#include "gist/error.hpp"
#include "gist/eval.hpp"
#include "gist/matcher.hpp"
#include "gist/pipeline.hpp"
#include "gist/trainer.hpp"

namespace gist {

namespace fs = std::filesystem;

namespace {

std::string req(const json& o, const char* key) {
  if (!o.contains(key)) throw Error(ErrorCode::invalid_argument, std::string("missing option '") + key + "'");
  return o.at(key).get<std::string>();
}

fs::path cache_root(const json& o) {
  if (o.contains("cache_root")) return o.at("cache_root").get<std::string>();
  if (const char* env = std::getenv("GIST_CACHE_ROOT"); env && *env) return env;
  return "cache";
}

std::shared_ptr<const Encoder> open_backend(const json& o) {
  if (!o.contains("backend")) throw Error(ErrorCode::invalid_argument, "missing option 'backend'");
  auto enc = with_cache(make_encoder(o.at("backend")), cache_root(o) / "embeddings");
  if (o.contains("heads")) enc = std::make_shared<ProjectedEncoder>(enc, load_heads(req(o, "heads")));
  return enc;
}

Split split_option(const json& o, const char* fallback) {
  return split_from_string(o.value("split", std::string(fallback)));
}

std::vector<ImageRecord> records_for(const DatasetManifest& m, const json& o, const char* fallback) {
  if (o.value("split", std::string(fallback)) == "all") return m.records;
  return m.in_split(split_option(o, fallback));
}

std::vector<EmbeddingVector> encode_records(const Encoder& enc, const DatasetManifest& m,
                                            const std::vector<ImageRecord>& records) {
  std::vector<ImageInput> inputs;
  for (const auto& r : records) inputs.push_back(m.image_input(r));
  return enc.encode_images(inputs);
}

std::vector<int> labels_of(const DatasetManifest& m, const std::vector<ImageRecord>& records) {
  std::vector<int> labels;
  for (const auto& r : records) labels.push_back(static_cast<int>(m.class_index(r.label)));
  return labels;
}

json counts(const DatasetManifest& m) {
  return {{"train", m.count(Split::train)}, {"val", m.count(Split::val)}, {"test", m.count(Split::test)}};
}

CaptionStore load_store_with_verdicts(const json& o) {
  auto store = load_caption_store(req(o, "captions"));
  if (o.contains("verdicts")) store = apply_verdicts(store, load_verdicts(req(o, "verdicts")));
  return store;
}

json write_scores(const json& o, const DatasetManifest& m, const std::vector<ImageRecord>& records,
                  const Eigen::MatrixXd& scores, const std::vector<std::string>& class_order) {
  const auto labels = labels_of(m, records);
  json result = {{"count", records.size()}};
  if (!records.empty()) {
    result["top1"] = topk_accuracy(scores, labels, 1);
    result["top3"] = topk_accuracy(scores, labels, std::min<std::size_t>(3, class_order.size()));
  }
  if (o.contains("output")) {
    json ids = json::array();
    for (const auto& r : records) ids.push_back(r.image_id);
    json rows = json::array();
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      json row = json::array();
      for (Eigen::Index c = 0; c < scores.cols(); ++c) row.push_back(scores(i, c));
      rows.push_back(std::move(row));
    }
    write_file(req(o, "output"),
               json{{"class_order", class_order}, {"image_ids", ids}, {"labels", labels}, {"scores", rows}}.dump());
    result["output"] = req(o, "output");
  }
  return result;
}

struct ScoreFile {
  Eigen::MatrixXd scores;
  std::vector<int> labels;
};

ScoreFile read_scores(const std::string& path) {
  const json j = json::parse(read_file(path));
  ScoreFile f;
  f.labels = j.at("labels").get<std::vector<int>>();
  const auto& rows = j.at("scores");
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto c = n ? static_cast<Eigen::Index>(rows[0].size()) : 0;
  f.scores.resize(n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) != c) {
      throw Error(ErrorCode::parse, "ragged score matrix in " + path);
    }
    for (Eigen::Index k = 0; k < c; ++k) f.scores(i, k) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
  }
  return f;
}

// ---------------------------------------------------------------------------

json cmd_data_validate(const json& o) {
  const auto m = load_manifest(req(o, "manifest"));
  return {{"name", m.name}, {"classes", m.classes.size()}, {"records", m.records.size()}, {"splits", counts(m)}};
}

json cmd_data_kshot(const json& o) {
  const auto m = load_manifest(req(o, "manifest"));
  KShotSpec spec{o.value("k", std::size_t{1}), o.value("seed", std::uint64_t{0}), o.value("clamp", false)};
  if (spec.k < 1) throw Error(ErrorCode::invalid_argument, "k must be >= 1");
  const auto sub = sample_kshot(m, spec);
  if (o.contains("output")) save_manifest(sub, req(o, "output"));
  return {{"k", spec.k}, {"seed", spec.seed}, {"splits", counts(sub)}};
}

json cmd_data_dedup(const json& o) {
  const auto m = load_manifest(req(o, "manifest"));
  const auto enc = open_backend(o);
  const auto vecs = encode_records(*enc, m, m.records);
  std::map<std::string, EmbeddingVector> emb;
  for (std::size_t i = 0; i < m.records.size(); ++i) emb[m.records[i].image_id] = vecs[i];
  const auto pairs = find_near_duplicates(emb, o.value("threshold", kDuplicateThreshold));
  json out_pairs = json::array();
  for (const auto& p : pairs) out_pairs.push_back(to_json(p));
  json result = {{"pairs", out_pairs}, {"count", pairs.size()}};
  if (o.contains("output")) {
    const auto resolved = resolve_split_leakage(m, pairs);
    save_manifest(resolved, req(o, "output"));
    std::size_t moved = 0;
    for (std::size_t i = 0; i < m.records.size(); ++i) moved += m.records[i].split != resolved.records[i].split;
    result["moved"] = moved;
    result["splits"] = counts(resolved);
  }
  return result;
}

json cmd_captions_generate(const json& o) {
  const auto m = load_manifest(req(o, "manifest"));
  CaptionStore store;
  SkipReport skips;
  if (o.value("mode", std::string("gist")) == "flyp") {
    store = build_flyp_captions(m.classes);
    store.dataset_name = m.name;
  } else {
    CaptionSettings s;
    if (o.contains("template")) {
      const auto& t = o.at("template");
      s.prompt_template = {t.at("template_id").get<std::string>(), t.at("body").get<std::string>(),
                           t.value("axis_name", ""), t.value("axis_values", std::vector<std::string>{})};
    } else {
      s.prompt_template = builtin_template(req(o, "template_id"));
    }
    s.per_prompt = o.value("per_prompt", s.per_prompt);
    s.concurrency = o.value("concurrency", s.concurrency);
    if (!o.contains("provider")) throw Error(ErrorCode::invalid_argument, "missing option 'provider'");
    auto provider = make_provider(o.at("provider"), cache_root(o) / "llm");
    store = generate_caption_store(*provider, m.name, m.classes, s, &skips);
  }
  store = enforce_caption_bounds(store, m.classes, o.value("m_min", std::size_t{1}), o.value("m_max", std::size_t{0}));
  validate_store(store, m.classes);
  save_caption_store(store, req(o, "output"));
  json per_class = json::object();
  for (const auto& [label, n] : store.counts_by_label()) per_class[label] = n;
  return {{"captions", store.records.size()},
          {"per_class", per_class},
          {"empty_responses", skips.empty_responses},
          {"duplicates", skips.duplicates}};
}

json cmd_captions_summarize(const json& o) {
  auto store = load_caption_store(req(o, "captions"));
  if (!o.contains("provider")) throw Error(ErrorCode::invalid_argument, "missing option 'provider'");
  auto provider = make_provider(o.at("provider"), cache_root(o) / "llm");
  const std::size_t budget = o.value("budget", kDefaultSummaryBudget);
  std::vector<MatchAssignment> assignments;
  if (o.contains("assignments")) {
    for (const auto& row : read_jsonl(req(o, "assignments"))) assignments.push_back(assignment_from_json(row));
  } else {
    MatchAssignment all;
    for (const auto& r : store.records) all.ranked.push_back({r.caption_id, 0.0});
    assignments.push_back(all);
  }
  summarize_matched(
      store, assignments, [&](const std::string& t) { return summarize_caption(*provider, t, budget); },
      o.value("threads", std::size_t{4}));
  save_caption_store(store, req(o, "output"));
  std::size_t summarized = 0, truncated = 0;
  for (const auto& r : store.records) {
    summarized += r.short_text.has_value();
    truncated += r.short_truncated;
  }
  return {{"summarized", summarized}, {"truncated", truncated}};
}

json write_embeddings(const json& o, const std::vector<std::string>& ids, const std::vector<EmbeddingVector>& vecs,
                      const Encoder& enc) {
  if (o.contains("output")) {
    std::vector<json> rows;
    for (std::size_t i = 0; i < ids.size(); ++i) rows.push_back({{"id", ids[i]}, {"values", vecs[i].values}});
    write_file(req(o, "output"), to_jsonl(rows));
  }
  json result = {{"count", ids.size()}, {"model_id", enc.descriptor().model_id}, {"dim", enc.descriptor().dim}};
  if (auto cached = dynamic_cast<const CachedEncoder*>(&enc)) {
    result["cache_hits"] = cached->hits();
    result["cache_misses"] = cached->misses();
  }
  return result;
}

json cmd_embed_images(const json& o) {
  const auto m = load_manifest(req(o, "manifest"));
  const auto enc = open_backend(o);
  const auto records = records_for(m, o, "all");
  const auto vecs = encode_records(*enc, m, records);
  std::vector<std::string> ids;
  for (const auto& r : records) ids.push_back(r.image_id);
  return write_embeddings(o, ids, vecs, *enc);
}

json cmd_embed_texts(const json& o) {
  const auto enc = open_backend(o);
  std::vector<std::string> ids, texts;
  if (o.contains("captions")) {
    for (const auto& r : load_caption_store(req(o, "captions")).records) {
      ids.push_back(r.caption_id);
      texts.push_back(r.long_text);
    }
  } else {
    texts = o.at("texts").get<std::vector<std::string>>();
    for (std::size_t i = 0; i < texts.size(); ++i) ids.push_back(std::to_string(i));
  }
  return write_embeddings(o, ids, enc->encode_texts(texts), *enc);
}

json cmd_match(const json& o) {
  const auto m = load_manifest(req(o, "manifest"));
  auto store = load_store_with_verdicts(o);
  const auto enc = open_backend(o);
  const std::size_t n = o.value("n", std::size_t{1});
  if (n < 1 || n > 5) throw Error(ErrorCode::invalid_argument, "n must be in [1, 5]");
  const auto mode = caption_mode_from_string(o.value("mode", std::string("short_with_class")));
  const auto train = m.in_split(Split::train);
  const auto vecs = encode_records(*enc, m, train);
  std::map<std::string, EmbeddingVector> images, captions;
  for (std::size_t i = 0; i < train.size(); ++i) images[train[i].image_id] = vecs[i];
  std::vector<std::string> texts;
  for (const auto& r : store.records) texts.push_back(r.long_text);
  const auto tvecs = enc->encode_texts(texts);
  for (std::size_t i = 0; i < texts.size(); ++i) captions[store.records[i].caption_id] = tvecs[i];
  const std::size_t threads = o.value("threads", std::size_t{4});
  const auto assignments = match_training_images(m, store, images, captions, n, threads);
  std::vector<json> rows;
  for (const auto& a : assignments) rows.push_back(to_json(a));
  write_file(req(o, "output"), to_jsonl(rows));
  json result = {{"images", assignments.size()}, {"n", n}};
  if (o.contains("pairs_output")) {
    if (mode == CaptionTextMode::short_with_class) {
      if (!o.contains("provider")) throw Error(ErrorCode::invalid_argument, "short_with_class pairs need a provider");
      auto provider = make_provider(o.at("provider"), cache_root(o) / "llm");
      const std::size_t budget = o.value("budget", kDefaultSummaryBudget);
      summarize_matched(
          store, assignments, [&](const std::string& t) { return summarize_caption(*provider, t, budget); }, threads);
      if (o.contains("captions_output")) save_caption_store(store, req(o, "captions_output"));
    }
    const auto pairs = materialize_pairs(assignments, store, mode);
    std::vector<json> prow;
    for (const auto& p : pairs.pairs) prow.push_back(to_json(p));
    write_file(req(o, "pairs_output"), to_jsonl(prow));
    result["pairs"] = pairs.pairs.size();
    result["label_violations"] = count_label_violations(pairs, m, store);
  }
  return result;
}

json cmd_finetune(const json& o) {
  const auto m = load_manifest(req(o, "manifest"));
  PairDataset pairs;
  pairs.mode = caption_mode_from_string(o.value("mode", std::string("short_with_class")));
  for (const auto& row : read_jsonl(req(o, "pairs"))) pairs.pairs.push_back(pair_from_json(row));
  json base_opts = o;
  base_opts.erase("heads");
  const auto enc = open_backend(base_opts);
  TrainConfig tc = train_config_from_json(o.value("train", json::object()));
  if (tc.batch_size > pairs.image_count()) {
    warn("batch size clamped to " + std::to_string(pairs.image_count()));
    tc.batch_size = pairs.image_count();
  }
  std::set<std::string> image_ids;
  for (const auto& p : pairs.pairs) image_ids.insert(p.image_id);
  std::vector<ImageRecord> recs;
  for (const auto& r : m.records) {
    if (image_ids.contains(r.image_id)) recs.push_back(r);
  }
  const auto ivecs = encode_records(*enc, m, recs);
  EmbeddingTable image_base, text_base;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    image_base[recs[i].image_id] =
        Eigen::Map<const Eigen::VectorXd>(ivecs[i].values.data(), static_cast<Eigen::Index>(ivecs[i].dim()));
  }
  std::vector<std::string> ids, texts;
  std::set<std::string> seen;
  for (const auto& p : pairs.pairs) {
    if (seen.insert(p.caption_id).second) {
      ids.push_back(p.caption_id);
      texts.push_back(p.text);
    }
  }
  const auto tvecs = enc->encode_texts(texts);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    text_base[ids[i]] =
        Eigen::Map<const Eigen::VectorXd>(tvecs[i].values.data(), static_cast<Eigen::Index>(tvecs[i].dim()));
  }
  std::optional<SelectionData> sel;
  if (o.value("select_on_val", true) && m.count(Split::val) > 0) {
    const auto train = m.in_split(Split::train);
    const auto val = m.in_split(Split::val);
    sel = SelectionData{stack_embeddings(encode_records(*enc, m, train), true), labels_of(m, train),
                        stack_embeddings(encode_records(*enc, m, val), true), labels_of(m, val), m.classes};
  }
  const auto initial = o.contains("heads") ? load_heads(req(o, "heads"))
                                           : ProjectionHeads::identity(enc->descriptor().dim, tc.logit_scale_init);
  const auto result = finetune(initial, pairs, image_base, text_base, tc, sel ? &*sel : nullptr);
  save_heads(result.heads, req(o, "output"),
             {{"backend", enc->descriptor().model_id}, {"train", to_json(tc)}, {"pairs", req(o, "pairs")}});
  if (o.contains("log_output")) {
    std::vector<json> rows;
    for (const auto& l : result.log) {
      rows.push_back({{"step", l.step}, {"epoch", l.epoch}, {"loss_sum", l.loss_sum},
                      {"loss_mean", l.loss_mean}, {"logit_scale", l.logit_scale}, {"lr", l.learning_rate}});
    }
    write_file(req(o, "log_output"), to_jsonl(rows));
  }
  json out = {{"initial_loss", result.initial_loss}, {"final_loss", result.final_loss}, {"steps", result.steps},
              {"batch_size", result.batch_size},     {"diverged", result.diverged}};
  if (result.best_epoch) out["best_epoch"] = *result.best_epoch;
  if (result.best_val_accuracy) out["best_val_accuracy"] = *result.best_val_accuracy;
  return out;
}

json cmd_probe_train(const json& o) {
  const auto m = load_manifest(req(o, "manifest"));
  const auto enc = open_backend(o);
  const ProbeConfig pc = probe_config_from_json(o.value("probe", json::object()));
  const auto train = records_for(m, o, "train");
  const Eigen::MatrixXd x = stack_embeddings(encode_records(*enc, m, train), true);
  Eigen::MatrixXd vx;
  std::vector<int> vy;
  if (pc.early_stopping && m.count(Split::val) > 0) {
    const auto val = m.in_split(Split::val);
    vx = stack_embeddings(encode_records(*enc, m, val), true);
    vy = labels_of(m, val);
  }
  auto result = train_linear_probe(x, labels_of(m, train), m.classes, pc, vy.empty() ? nullptr : &vx, vy);
  result.probe.trained_on = o.value("trained_on", req(o, "manifest"));
  save_probe(result.probe, req(o, "output"));
  return {{"epochs_run", result.epochs_run},
          {"final_objective", result.epoch_objective.empty() ? 0.0 : result.epoch_objective.back()},
          {"train_images", train.size()}};
}

json cmd_probe_predict(const json& o) {
  const auto m = load_manifest(req(o, "manifest"));
  const auto enc = open_backend(o);
  const auto probe = load_probe(req(o, "probe"));
  if (probe.class_order != m.classes) throw Error(ErrorCode::invalid_argument, "probe classes differ from the manifest");
  const auto records = records_for(m, o, "test");
  const Eigen::MatrixXd x = stack_embeddings(encode_records(*enc, m, records), true);
  return write_scores(o, m, records, records.empty() ? Eigen::MatrixXd() : predict_all(probe, x), probe.class_order);
}

json cmd_zeroshot_build(const json& o) {
  std::vector<std::string> classes;
  if (o.contains("manifest")) {
    classes = load_manifest(req(o, "manifest")).classes;
  } else {
    classes = o.at("classes").get<std::vector<std::string>>();
  }
  const auto enc = open_backend(o);
  const auto templates = o.value("templates", kDefaultZeroShotTemplates);
  save_zeroshot_head(build_zeroshot_head(*enc, classes, templates), req(o, "output"));
  return {{"classes", classes.size()}, {"templates", templates.size()}};
}

json cmd_zeroshot_predict(const json& o) {
  const auto m = load_manifest(req(o, "manifest"));
  const auto enc = open_backend(o);
  const auto head = load_zeroshot_head(req(o, "head"));
  if (head.class_order != m.classes) throw Error(ErrorCode::invalid_argument, "head classes differ from the manifest");
  const auto records = records_for(m, o, "test");
  const Eigen::MatrixXd x = stack_embeddings(encode_records(*enc, m, records), false);
  return write_scores(o, m, records, records.empty() ? Eigen::MatrixXd() : predict_all(head, x), head.class_order);
}

json cmd_eval_bootstrap(const json& o) {
  const auto f = read_scores(req(o, "scores"));
  BootstrapConfig bc;
  bc.resamples = o.value("resamples", bc.resamples);
  bc.seed = o.value("seed", bc.seed);
  bc.threads = o.value("threads", std::size_t{4});
  const std::size_t k3 = std::min<std::size_t>(3, static_cast<std::size_t>(f.scores.cols()));
  const auto b1 = bootstrap_accuracy(f.scores, f.labels, bc, 1);
  const auto b3 = bootstrap_accuracy(f.scores, f.labels, bc, k3);
  EvalReport report;
  report.experiment_id = o.value("experiment_id", std::string("eval"));
  report.rows.push_back({o.value("method", std::string("model")), o.value("setting", std::string("full")),
                         100 * b1.mean, 100 * b1.std, 100 * b3.mean, 100 * b3.std, "bootstrap", bc.resamples});
  report.provenance = {{"scores", req(o, "scores")}, {"seed", bc.seed}};
  if (o.contains("output")) write_file(req(o, "output"), render_report(report, ReportFormat::json));
  return {{"top1", {{"mean", b1.mean}, {"std", b1.std}}},
          {"top3", {{"mean", b3.mean}, {"std", b3.std}}},
          {"point_top1", topk_accuracy(f.scores, f.labels, 1)},
          {"resamples", bc.resamples},
          {"table", render_report(report, ReportFormat::table_text)}};
}

json cmd_eval_kshot(const json& o) {
  const auto seeds = o.value("seeds", std::vector<std::uint64_t>{0, 1, 2});
  const auto kind = std_kind_from_string(o.value("std", std::string("sample")));
  std::vector<double> top1, top3;
  if (o.contains("scores")) {
    for (const auto& path : o.at("scores").get<std::vector<std::string>>()) {
      const auto f = read_scores(path);
      top1.push_back(100 * topk_accuracy(f.scores, f.labels, 1));
      top3.push_back(100 * topk_accuracy(f.scores, f.labels, std::min<std::size_t>(3, f.scores.cols())));
    }
  } else {
    top1 = o.at("accuracies").get<std::vector<double>>();
  }
  const auto a1 = aggregate_kshot(top1, seeds.size(), kind);
  json out = {{"top1", {{"mean", a1.mean}, {"std", a1.std}, {"cell", format_cell(a1.mean, a1.std)}}},
              {"std_kind", to_string(kind)}};
  if (!top3.empty()) {
    const auto a3 = aggregate_kshot(top3, seeds.size(), kind);
    out["top3"] = {{"mean", a3.mean}, {"std", a3.std}, {"cell", format_cell(a3.mean, a3.std)}};
  }
  return out;
}

json cmd_run(const json& o) {
  const auto config = load_pipeline_config(req(o, "config"));
  const auto result = run_pipeline(config);
  return {{"report", to_json(result.report)},
          {"table", render_report(result.report, ReportFormat::table_text)},
          {"report_path", result.report_path.string()},
          {"manifest_path", result.manifest_path.string()},
          {"stages", result.stages.size()},
          {"cache_hits", result.cache_hits()}};
}

using Handler = json (*)(const json&);

const std::map<std::string, Handler>& handlers() {
  static const std::map<std::string, Handler> table = {
      {"data.validate", cmd_data_validate},     {"data.kshot", cmd_data_kshot},
      {"data.dedup", cmd_data_dedup},           {"captions.generate", cmd_captions_generate},
      {"captions.summarize", cmd_captions_summarize}, {"embed.images", cmd_embed_images},
      {"embed.texts", cmd_embed_texts},         {"match", cmd_match},
      {"finetune", cmd_finetune},               {"probe.train", cmd_probe_train},
      {"probe.predict", cmd_probe_predict},     {"zeroshot.build", cmd_zeroshot_build},
      {"zeroshot.predict", cmd_zeroshot_predict}, {"eval.bootstrap", cmd_eval_bootstrap},
      {"eval.kshot", cmd_eval_kshot},           {"run", cmd_run}};
  return table;
}

}  // namespace

json run_command(const std::string& name, const json& options) {
  auto it = handlers().find(name);
  if (it == handlers().end()) throw Error(ErrorCode::invalid_argument, "unknown command '" + name + "'");
  if (!options.is_object()) throw Error(ErrorCode::invalid_argument, "command options must be a JSON object");
  try {
    return it->second(options);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::invalid_argument, name + ": " + e.what());
  }
}

std::vector<std::string> command_names() {
  std::vector<std::string> names;
  for (const auto& [name, _] : handlers()) names.push_back(name);
  return names;
}

}  // namespace gist
