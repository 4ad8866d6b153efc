// gist command-line front end. Talks to the library only through gist.h.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "gist/gist.h"

using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

int exit_code(gist_status s) {
  switch (s) {
    case GIST_OK: return kExitOk;
    case GIST_E_CONFIG:
    case GIST_E_INVALID_ARGUMENT:
    case GIST_E_PARSE:
    case GIST_E_NOT_FOUND:
      return kExitConfig;
    default: return kExitStage;
  }
}

int report_failure(gist_status s) {
  std::cerr << "gist: " << gist_status_name(s) << ": " << gist_last_error() << "\n";
  return exit_code(s);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A backend argument is a model id, inline JSON, or a path to a JSON file.
json backend_spec(const std::string& arg) {
  if (!arg.empty() && arg.front() == '{') return json::parse(arg);
  if (arg.size() > 5 && arg.substr(arg.size() - 5) == ".json") return json::parse(slurp(arg));
  return arg;
}

struct Common {
  std::string cache_root;
  bool raw_json = false;
};

struct ProviderArgs {
  std::string fixture;
  std::string config;

  void add(CLI::App* app) {
    app->add_option("--provider-fixture", fixture, "Fixture provider JSON file");
    app->add_option("--provider-config", config, "Provider spec JSON file (kind fixture or remote)");
  }
  bool given() const { return !fixture.empty() || !config.empty(); }
  json spec() const {
    if (!config.empty()) return json::parse(slurp(config));
    return {{"kind", "fixture"}, {"path", fixture}};
  }
};

int run_command(const Common& common, const std::string& name, json options) {
  if (!common.cache_root.empty() && !options.contains("cache_root")) options["cache_root"] = common.cache_root;
  char* out = nullptr;
  const gist_status s = gist_command(name.c_str(), options.dump().c_str(), &out);
  if (s != GIST_OK) return report_failure(s);
  json result = json::parse(out);
  gist_string_free(out);
  if (!common.raw_json && result.contains("table")) {
    std::cout << result["table"].get<std::string>();
    result.erase("table");
    if (result.contains("report")) result.erase("report");
  }
  std::cout << result.dump(2) << "\n";
  return kExitOk;
}

gist_review_action ask(const char* caption_id, const char* label, const char* text, size_t index, size_t total,
                       void*) {
  std::cout << "\n[" << index + 1 << "/" << total << "] " << label << " (" << caption_id << ")\n" << text << "\n";
  for (;;) {
    std::cout << "keep / discard / quit [k/d/q]: " << std::flush;
    std::string line;
    if (!std::getline(std::cin, line)) return GIST_REVIEW_QUIT;
    if (line == "k" || line == "keep") return GIST_REVIEW_KEEP;
    if (line == "d" || line == "discard") return GIST_REVIEW_DISCARD;
    if (line == "q" || line == "quit") return GIST_REVIEW_QUIT;
  }
}

void print_stage(const char* stage, const char* setting, int cache_hit, void*) {
  std::cerr << "[" << (cache_hit ? "cached" : "done") << "] " << stage << (*setting ? " " : "") << setting << "\n";
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GIST: image-specific text generation and contrastive fine-tuning for fine-grained classification"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--cache-root", common.cache_root, "Cache directory (default $GIST_CACHE_ROOT or ./cache)");
  app.add_flag("--json", common.raw_json, "Print raw JSON results");
  app.set_version_flag("--version", std::string(gist_version()));

  int rc = kExitOk;
  std::function<int()> action;

  // data
  auto* data = app.add_subcommand("data", "Dataset manifests")->require_subcommand(1);
  std::string manifest, output, backend = "synthetic-16", split;
  {
    auto* v = data->add_subcommand("validate", "Validate a manifest");
    v->add_option("manifest,--manifest", manifest)->required();
    v->callback([&] { action = [&] { return run_command(common, "data.validate", {{"manifest", manifest}}); }; });
  }
  std::size_t k = 1;
  std::uint64_t seed = 0;
  bool clamp = false;
  {
    auto* c = data->add_subcommand("kshot", "Sample k training images per class");
    c->add_option("--manifest", manifest)->required();
    c->add_option("--k", k)->required();
    c->add_option("--seed", seed);
    c->add_flag("--clamp", clamp, "Keep all images of classes with fewer than k");
    c->add_option("--output,-o", output);
    c->callback([&] {
      action = [&] {
        json o = {{"manifest", manifest}, {"k", k}, {"seed", seed}, {"clamp", clamp}};
        if (!output.empty()) o["output"] = output;
        return run_command(common, "data.kshot", o);
      };
    });
  }
  double threshold = 0.95605;
  {
    auto* c = data->add_subcommand("dedup", "Find near-duplicate images and move test-split leaks to train");
    c->add_option("--manifest", manifest)->required();
    c->add_option("--backend", backend);
    c->add_option("--threshold", threshold);
    c->add_option("--output,-o", output, "Write the leakage-resolved manifest here");
    c->callback([&] {
      action = [&] {
        json o = {{"manifest", manifest}, {"backend", backend_spec(backend)}, {"threshold", threshold}};
        if (!output.empty()) o["output"] = output;
        return run_command(common, "data.dedup", o);
      };
    });
  }

  // captions
  auto* captions = app.add_subcommand("captions", "Caption generation, summarization and review")->require_subcommand(1);
  ProviderArgs provider;
  std::string template_id, template_file, mode = "gist", captions_path, assignments, sidecar;
  std::size_t per_prompt = 5, m_min = 1, m_max = 0, budget = 30;
  {
    auto* c = captions->add_subcommand("generate", "Generate class captions");
    c->add_option("--manifest", manifest)->required();
    c->add_option("--template-id", template_id, "Built-in template: fitzpatrick40, cub200, flowers102, fgvc_aircraft");
    c->add_option("--template-file", template_file, "Custom template JSON");
    c->add_option("--per-prompt", per_prompt);
    c->add_option("--m-min", m_min);
    c->add_option("--m-max", m_max);
    c->add_option("--mode", mode, "gist or flyp");
    provider.add(c);
    c->add_option("--output,-o", output)->required();
    c->callback([&] {
      action = [&] {
        json o = {{"manifest", manifest}, {"per_prompt", per_prompt}, {"m_min", m_min}, {"m_max", m_max},
                  {"mode", mode},         {"output", output}};
        if (!template_id.empty()) o["template_id"] = template_id;
        if (!template_file.empty()) o["template"] = json::parse(slurp(template_file));
        if (provider.given()) o["provider"] = provider.spec();
        return run_command(common, "captions.generate", o);
      };
    });
  }
  {
    auto* c = captions->add_subcommand("summarize", "Summarize captions (all, or those in an assignments file)");
    c->add_option("--captions", captions_path)->required();
    c->add_option("--assignments", assignments);
    c->add_option("--budget", budget, "Word budget");
    provider.add(c);
    c->add_option("--output,-o", output)->required();
    c->callback([&] {
      action = [&] {
        json o = {{"captions", captions_path}, {"budget", budget}, {"output", output}};
        if (!assignments.empty()) o["assignments"] = assignments;
        if (provider.given()) o["provider"] = provider.spec();
        return run_command(common, "captions.summarize", o);
      };
    });
  }
  {
    auto* c = captions->add_subcommand("review", "Interactively keep or discard captions");
    c->add_option("--captions", captions_path)->required();
    c->add_option("--sidecar", sidecar, "Verdict file (default <captions>.verdicts.jsonl)");
    c->callback([&] {
      action = [&]() -> int {
        if (sidecar.empty()) sidecar = captions_path + ".verdicts.jsonl";
        gist_caption_store* store = nullptr;
        if (auto s = gist_captions_load(captions_path.c_str(), &store); s != GIST_OK) return report_failure(s);
        char* progress = nullptr;
        const auto s = gist_review_captions(store, sidecar.c_str(), ask, nullptr, &progress);
        gist_captions_free(store);
        if (s != GIST_OK) return report_failure(s);
        std::cout << "\n" << json::parse(progress).dump(2) << "\n";
        gist_string_free(progress);
        return kExitOk;
      };
    });
  }

  // embed
  auto* embed = app.add_subcommand("embed", "Compute and cache embeddings")->require_subcommand(1);
  {
    auto* c = embed->add_subcommand("images", "Embed manifest images");
    c->add_option("--manifest", manifest)->required();
    c->add_option("--backend", backend);
    c->add_option("--split", split, "train, val, test or all");
    c->add_option("--output,-o", output);
    c->callback([&] {
      action = [&] {
        json o = {{"manifest", manifest}, {"backend", backend_spec(backend)}, {"split", split.empty() ? "all" : split}};
        if (!output.empty()) o["output"] = output;
        return run_command(common, "embed.images", o);
      };
    });
  }
  std::vector<std::string> texts;
  {
    auto* c = embed->add_subcommand("texts", "Embed caption texts");
    c->add_option("--captions", captions_path);
    c->add_option("--text", texts, "Literal text (repeatable)");
    c->add_option("--backend", backend);
    c->add_option("--output,-o", output);
    c->callback([&] {
      action = [&] {
        json o = {{"backend", backend_spec(backend)}};
        if (!captions_path.empty()) {
          o["captions"] = captions_path;
        } else {
          o["texts"] = texts;
        }
        if (!output.empty()) o["output"] = output;
        return run_command(common, "embed.texts", o);
      };
    });
  }

  // match
  std::size_t n = 1;
  std::string match_mode = "short_with_class", verdicts, pairs_output, captions_output;
  {
    auto* c = app.add_subcommand("match", "Match training images to their top-n same-class captions");
    c->add_option("--manifest", manifest)->required();
    c->add_option("--captions", captions_path)->required();
    c->add_option("--backend", backend);
    c->add_option("--n", n);
    c->add_option("--mode", match_mode, "long, short_with_class or class_template");
    c->add_option("--verdicts", verdicts, "Review sidecar; discarded captions are excluded");
    c->add_option("--output,-o", output, "Assignments JSONL")->required();
    c->add_option("--pairs-output", pairs_output, "Training pairs JSONL");
    c->add_option("--captions-output", captions_output, "Caption store with summaries");
    c->add_option("--budget", budget);
    provider.add(c);
    c->callback([&] {
      action = [&] {
        json o = {{"manifest", manifest}, {"captions", captions_path}, {"backend", backend_spec(backend)},
                  {"n", n},               {"mode", match_mode},        {"output", output},
                  {"budget", budget}};
        if (!verdicts.empty()) o["verdicts"] = verdicts;
        if (!pairs_output.empty()) o["pairs_output"] = pairs_output;
        if (!captions_output.empty()) o["captions_output"] = captions_output;
        if (provider.given()) o["provider"] = provider.spec();
        return run_command(common, "match", o);
      };
    });
  }

  // finetune
  std::string config;
  {
    auto* c = app.add_subcommand("finetune", "Contrastive fine-tuning of projection heads on image-caption pairs");
    c->add_option("--config", config, "JSON: manifest, pairs, backend, train, output")->required();
    c->callback([&] { action = [&] { return run_command(common, "finetune", json::parse(slurp(config))); }; });
  }

  // probe
  auto* probe = app.add_subcommand("probe", "Linear probe")->require_subcommand(1);
  std::string heads, probe_path, probe_config;
  {
    auto* c = probe->add_subcommand("train", "Train a linear probe on frozen features");
    c->add_option("--manifest", manifest)->required();
    c->add_option("--backend", backend);
    c->add_option("--heads", heads, "Fine-tuned projection heads");
    c->add_option("--probe-config", probe_config, "Probe hyperparameters JSON");
    c->add_option("--seed", seed);
    c->add_option("--output,-o", output)->required();
    c->callback([&] {
      action = [&] {
        json pc = probe_config.empty() ? json::object() : json::parse(slurp(probe_config));
        if (!pc.contains("seed")) pc["seed"] = seed;
        json o = {{"manifest", manifest}, {"backend", backend_spec(backend)}, {"probe", pc}, {"output", output}};
        if (!heads.empty()) o["heads"] = heads;
        return run_command(common, "probe.train", o);
      };
    });
  }
  {
    auto* c = probe->add_subcommand("predict", "Score a split with a trained probe");
    c->add_option("--manifest", manifest)->required();
    c->add_option("--backend", backend);
    c->add_option("--heads", heads);
    c->add_option("--probe", probe_path)->required();
    c->add_option("--split", split);
    c->add_option("--output,-o", output, "Scores JSON");
    c->callback([&] {
      action = [&] {
        json o = {{"manifest", manifest}, {"backend", backend_spec(backend)}, {"probe", probe_path},
                  {"split", split.empty() ? "test" : split}};
        if (!heads.empty()) o["heads"] = heads;
        if (!output.empty()) o["output"] = output;
        return run_command(common, "probe.predict", o);
      };
    });
  }

  // zeroshot
  auto* zeroshot = app.add_subcommand("zeroshot", "Zero-shot classification")->require_subcommand(1);
  std::vector<std::string> templates;
  std::string head;
  {
    auto* c = zeroshot->add_subcommand("build", "Build class embeddings from templates");
    c->add_option("--manifest", manifest)->required();
    c->add_option("--backend", backend);
    c->add_option("--template", templates, "Template with {class} (repeatable)");
    c->add_option("--output,-o", output)->required();
    c->callback([&] {
      action = [&] {
        json o = {{"manifest", manifest}, {"backend", backend_spec(backend)}, {"output", output}};
        if (!templates.empty()) o["templates"] = templates;
        return run_command(common, "zeroshot.build", o);
      };
    });
  }
  {
    auto* c = zeroshot->add_subcommand("predict", "Score a split with a zero-shot head");
    c->add_option("--manifest", manifest)->required();
    c->add_option("--backend", backend);
    c->add_option("--head", head)->required();
    c->add_option("--split", split);
    c->add_option("--output,-o", output);
    c->callback([&] {
      action = [&] {
        json o = {{"manifest", manifest}, {"backend", backend_spec(backend)}, {"head", head},
                  {"split", split.empty() ? "test" : split}};
        if (!output.empty()) o["output"] = output;
        return run_command(common, "zeroshot.predict", o);
      };
    });
  }

  // eval
  std::string scores, seeds = "0,1,2", accuracies, std_kind = "sample";
  std::size_t resamples = 1000;
  auto* eval = app.add_subcommand("eval", "Bootstrap evaluation of a score file");
  eval->add_option("--scores", scores);
  eval->add_option("--bootstrap", resamples, "Number of resamples");
  eval->add_option("--seed", seed);
  eval->add_option("--output,-o", output, "Report JSON");
  {
    auto* c = eval->add_subcommand("kshot", "Aggregate per-seed k-shot results");
    c->add_option("--seeds", seeds, "Comma-separated seeds (one result per seed)");
    c->add_option("--scores", scores, "Comma-separated score files, in seed order");
    c->add_option("--accuracies", accuracies, "Comma-separated top-1 accuracies (percent)");
    c->add_option("--std", std_kind, "sample or population");
    c->callback([&] {
      action = [&] {
        json seed_list = json::array();
        for (const auto& s : split_csv(seeds)) seed_list.push_back(std::stoull(s));
        json o = {{"seeds", seed_list}, {"std", std_kind}};
        if (!scores.empty()) {
          o["scores"] = split_csv(scores);
        } else {
          json acc = json::array();
          for (const auto& a : split_csv(accuracies)) acc.push_back(std::stod(a));
          o["accuracies"] = acc;
        }
        return run_command(common, "eval.kshot", o);
      };
    });
  }
  eval->callback([&] {
    if (action) return;
    action = [&]() -> int {
      if (scores.empty()) {
        std::cerr << "gist: eval needs --scores\n";
        return kExitConfig;
      }
      json o = {{"scores", scores}, {"resamples", resamples}, {"seed", seed}};
      if (!output.empty()) o["output"] = output;
      return run_command(common, "eval.bootstrap", o);
    };
  });

  // run
  {
    auto* c = app.add_subcommand("run", "Run a full experiment from a config file");
    c->add_option("--config", config)->required();
    c->callback([&] {
      action = [&]() -> int {
        char* out = nullptr;
        const auto s = gist_run_pipeline(config.c_str(), print_stage, nullptr, &out);
        if (s != GIST_OK) return report_failure(s);
        const json result = json::parse(out);
        gist_string_free(out);
        if (common.raw_json) {
          std::cout << result.dump(2) << "\n";
        } else {
          std::cout << result["table"].get<std::string>() << "report: " << result["report_path"].get<std::string>()
                    << "\nmanifest: " << result["manifest_path"].get<std::string>() << "\n";
        }
        return kExitOk;
      };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }
  try {
    rc = action ? action() : kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "gist: " << e.what() << "\n";
    rc = kExitConfig;
  }
  return rc;
}
