#include <algorithm>
#include <set>

#include "doctest.h"
#include "gist/error.hpp"
#include "gist/pipeline.hpp"
#include "support.hpp"

using namespace gist;
using gist::testing::TempDir;
namespace fs = std::filesystem;

namespace {
ErrorCode config_error_code(const testing::ToyExperiment& t) {
  try {
    load_pipeline_config(t.config_path);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::internal;
}
}  // namespace

TEST_CASE("dataset presets carry the per-dataset defaults") {
  CHECK(dataset_preset("fitzpatrick40")["n"] == 3);
  CHECK(dataset_preset("fgvc_aircraft")["n"] == 4);
  CHECK(dataset_preset("cub200")["n"] == 1);
  CHECK(dataset_preset("flowers102")["template_id"] == "flowers102");
  CHECK(dataset_preset("imagenet").empty());
}

TEST_CASE("configs resolve relative paths and apply presets") {
  TempDir dir("config");
  const auto t = testing::write_toy_experiment(dir.path(), 3, {4, 2, 2}, {{"preset", "cub200"}, {"match", nullptr}});
  const auto c = load_pipeline_config(t.config_path);
  CHECK(c.dataset == dir / "data/manifest.jsonl");
  CHECK(c.run_root == dir / "runs");
  CHECK(c.cache_root == dir / "cache");
  CHECK(c.match.n == 1);
  CHECK(c.captions.m_min == 1);
  CHECK(c.captions.m_max == 60);
  CHECK(c.captions.per_prompt == 4);
  CHECK(c.captions.prompt_template.template_id == "toy");
  CHECK(c.train.batch_size == 8);
  CHECK(c.epochs_kshot == 5);
}

TEST_CASE("invalid configs are rejected as configuration errors") {
  TempDir dir("config-bad");
  for (const json& overrides : {json{{"match", {{"n", 0}}}}, json{{"match", {{"n", 6}}}},
                                json{{"preset", "imagenet"}},
                                json{{"captions", {{"provider", {{"path", "missing.json"}}}}}},
                                json{{"captions", {{"provider", {{"kind", "carrier-pigeon"}}}}}},
                                json{{"match", {{"mode", "class_template"}}}},
                                json{{"backend", {{"kind", "mystery"}}}},
                                json{{"experiment_id", "bad id!"}},
                                json{{"eval", {{"baselines", {"oracle"}}}}},
                                json{{"eval", {{"full", false}}}},
                                json{{"train", {{"optimizer", "lion"}}}}}) {
    const auto t = testing::write_toy_experiment(dir.path(), 2, {2, 1, 1}, overrides);
    CAPTURE(overrides.dump());
    CHECK(config_error_code(t) == ErrorCode::config);
  }
  write_file(dir / "broken.json", "{");
  CHECK_THROWS_AS(load_pipeline_config(dir / "broken.json"), Error);
}

TEST_CASE("FLYP configs need no caption provider") {
  TempDir dir("config-flyp");
  json overrides = {{"captions", {{"mode", "flyp"}, {"provider", nullptr}}}};
  const auto t = testing::write_toy_experiment(dir.path(), 2, {2, 1, 1}, overrides);
  const auto c = load_pipeline_config(t.config_path);
  CHECK(c.match.mode == CaptionTextMode::class_template);
}

TEST_CASE("caption bounds cut surplus captions and reject sparse classes") {
  CaptionStore s;
  for (int i = 0; i < 5; ++i) s.records.push_back({"a" + std::to_string(i), "a", "text a" + std::to_string(i), {}, false, {}});
  s.records.push_back({"b0", "b", "text b", {}, false, {}});
  const auto cut = enforce_caption_bounds(s, {"a", "b"}, 1, 3);
  CHECK(cut.counts_by_label().at("a") == 3);
  CHECK(cut.records[2].caption_id == "a2");
  try {
    enforce_caption_bounds(s, {"a", "b"}, 2, 0);
    FAIL("expected precondition");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::precondition);
    CHECK(std::string(e.what()).find("'b'") != std::string::npos);
  }
}

TEST_CASE("a pipeline run reports every method and a rerun is served from the stage cache") {
  TempDir dir("pipeline");
  const auto t = testing::write_toy_experiment(dir.path(), 4, {6, 3, 6}, {{"eval", {{"kshot", {2}}}}});
  const auto config = load_pipeline_config(t.config_path);
  std::vector<std::string> seen;
  set_warning_sink([](const std::string&) {});
  const auto first = run_pipeline(config, [&](const StageRecord& r) { seen.push_back(r.stage); });
  set_warning_sink(nullptr);

  std::set<std::pair<std::string, std::string>> rows;
  for (const auto& r : first.report.rows) {
    rows.insert({r.method, r.setting});
    CHECK(r.top1_mean >= 0.0);
    CHECK(r.top1_mean <= 100.0);
    CHECK(r.top3_mean >= r.top1_mean);
  }
  CHECK(rows == std::set<std::pair<std::string, std::string>>{
                    {"GIST", "full"}, {"LP", "full"}, {"GIST", "2-shot"}, {"LP", "2-shot"}, {"ZS", "zero-shot"}});
  CHECK(first.cache_hits() == 0);
  CHECK(std::find(seen.begin(), seen.end(), "summarize") != seen.end());
  CHECK(fs::exists(first.report_path));
  CHECK(fs::exists(first.manifest_path));
  CHECK(fs::exists(dir / "runs/toy/report.txt"));
  CHECK(report_from_json(json::parse(read_file(first.report_path))) == first.report);
  CHECK(first.manifest["stages"].size() == first.stages.size());

  set_warning_sink([](const std::string&) {});
  const auto second = run_pipeline(config);
  set_warning_sink(nullptr);
  CHECK(second.cache_hits() == second.stages.size());
  CHECK(second.report == first.report);
  CHECK(read_file(second.report_path) == read_file(first.report_path));
}

TEST_CASE("a tampered stage output is recomputed") {
  TempDir dir("pipeline-tamper");
  const auto t = testing::write_toy_experiment(dir.path(), 3, {4, 2, 4}, {{"eval", {{"baselines", json::array()}}}});
  const auto config = load_pipeline_config(t.config_path);
  set_warning_sink([](const std::string&) {});
  const auto first = run_pipeline(config);
  fs::path match_dir;
  for (const auto& r : first.stages) {
    if (r.stage == "match") match_dir = r.directory;
  }
  REQUIRE_FALSE(match_dir.empty());
  append_line(match_dir / "assignments.jsonl", "");
  const auto second = run_pipeline(config);
  set_warning_sink(nullptr);
  for (const auto& r : second.stages) {
    if (r.stage == "match") CHECK_FALSE(r.cache_hit);
    if (r.stage == "generate") CHECK(r.cache_hit);
  }
  CHECK(second.report == first.report);
}

TEST_CASE("a failing stage is named and earlier stage outputs survive") {
  TempDir dir("pipeline-fail");
  auto t = testing::write_toy_experiment(dir.path(), 3, {4, 2, 4});
  auto fixture = json::parse(read_file(dir / "fixture.json"));
  fixture["summaries"] = json::object();
  write_file(dir / "fixture.json", fixture.dump());
  const auto config = load_pipeline_config(t.config_path);
  try {
    run_pipeline(config);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "summarize");
    CHECK(e.code() == ErrorCode::stage);
  }
  CHECK(fs::exists(dir / "runs/toy/generate"));
  CHECK(fs::exists(dir / "runs/toy/match"));
  bool has_captions = false;
  for (const auto& entry : fs::recursive_directory_iterator(dir / "runs/toy/generate")) {
    has_captions |= entry.path().filename() == "captions.jsonl";
  }
  CHECK(has_captions);
}

TEST_CASE("discarding every caption of a class stops the run naming that class") {
  TempDir dir("pipeline-review");
  const auto t =
      testing::write_toy_experiment(dir.path(), 3, {4, 2, 4}, {{"captions", {{"review_sidecar", "verdicts.jsonl"}}}});
  for (std::size_t i = 0; i < 4; ++i) {
    append_line(dir / "verdicts.jsonl",
                json{{"caption_id", make_caption_id("cobalt_wren", i)}, {"verdict", "discard"}}.dump());
  }
  const auto config = load_pipeline_config(t.config_path);
  try {
    run_pipeline(config);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "generate");
    CHECK(std::string(e.what()).find("cobalt_wren") != std::string::npos);
  }
}

TEST_CASE("FLYP runs end to end with class-name captions") {
  TempDir dir("pipeline-flyp");
  const auto t = testing::write_toy_experiment(
      dir.path(), 3, {4, 2, 4}, {{"captions", {{"mode", "flyp"}}}, {"eval", {{"baselines", json::array()}}}});
  set_warning_sink([](const std::string&) {});
  const auto r = run_pipeline(load_pipeline_config(t.config_path));
  set_warning_sink(nullptr);
  REQUIRE(r.report.rows.size() == 1);
  CHECK(r.report.rows[0].method == "GIST");
  for (const auto& s : r.stages) CHECK(s.stage != "summarize");
}
