#include "support.hpp"

#include <atomic>
#include <unistd.h>

#include "gist/classifier.hpp"

namespace gist::testing {

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("gist-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

std::vector<std::string> toy_class_names(std::size_t n) {
  static const char* adjectives[] = {"amber", "cobalt", "crimson", "dusky", "ember", "frosted", "golden",
                                     "hazel", "indigo", "jade", "khaki", "lilac", "mossy", "navy",
                                     "ochre", "pewter", "quartz", "russet", "sable", "teal"};
  static const char* nouns[] = {"wren", "finch", "heron", "plover", "thrush", "warbler", "sparrow"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(std::string(adjectives[i % 20]) + "_" + nouns[(i / 20) % 7]);
  }
  return out;
}

DatasetManifest write_toy_dataset(const fs::path& dir, const std::string& name,
                                  const std::vector<std::string>& classes, SplitSizes sizes,
                                  std::uint64_t seed) {
  DatasetManifest m;
  m.name = name;
  m.classes = classes;
  GaussianStream g(seed);
  fs::create_directories(dir / "images");
  for (const auto& c : classes) {
    const std::size_t total = sizes.train + sizes.val + sizes.test;
    for (std::size_t i = 0; i < total; ++i) {
      const std::string id = c + "_" + std::to_string(i);
      std::string bytes(64, '\0');
      for (auto& b : bytes) b = static_cast<char>(static_cast<int>(g.next_uniform() * 256.0) & 0xff);
      const fs::path rel = fs::path("images") / (id + ".bin");
      write_file(dir / rel, bytes);
      const Split split = i < sizes.train ? Split::train : (i < sizes.train + sizes.val ? Split::val : Split::test);
      m.records.push_back({id, dir / rel, c, split});
    }
  }
  DatasetManifest on_disk = m;
  for (auto& r : on_disk.records) r.path = fs::relative(r.path, dir);
  save_manifest(on_disk, dir / "manifest.jsonl");
  return m;
}

namespace {
const char* kFeatures[] = {"speckled", "banded", "glossy", "mottled", "streaked", "pale", "dark", "rufous",
                           "barred", "crested", "slender", "stout", "iridescent", "dull", "scaly", "spotted"};
const char* kParts[] = {"crown", "nape", "wing coverts", "tail", "breast", "flanks", "bill", "legs"};
}  // namespace

json make_caption_fixture(const PromptTemplate& t, const std::vector<std::string>& classes,
                          std::size_t per_prompt, std::uint64_t seed) {
  json completions = json::object();
  json summaries = json::object();
  GaussianStream g(seed);
  auto pick = [&](std::size_t n) { return static_cast<std::size_t>(g.next_uniform() * static_cast<double>(n)) % n; };
  for (const auto& c : classes) {
    const auto prompts = render_prompts(t, display_class_name(c));
    std::map<std::string, std::size_t> occurrences;
    for (const auto& p : prompts) {
      // Repeated prompts ask for further sample indices, so give them more texts.
      const std::size_t occurrence = occurrences[p.text]++;
      auto& list = completions[p.text];
      if (!list.is_array()) list = json::array();
      for (std::size_t s = 0; s < per_prompt; ++s) {
        const std::string f1 = kFeatures[pick(16)], f2 = kFeatures[pick(16)];
        const std::string p1 = kParts[pick(8)], p2 = kParts[pick(8)];
        const std::string idx = std::to_string(occurrence * per_prompt + s);
        std::string long_text = "This " + display_class_name(c) + " variant " + idx + " shows a " + f1 + " " + p1 +
                                " and a " + f2 + " " + p2 +
                                ", with the overall shape and posture that field guides describe for the species,"
                                " seen against a plain background in soft daylight from a moderate distance.";
        if (!p.axis_value.empty()) long_text += " Axis: " + p.axis_value + ".";
        list.push_back(long_text);
        summaries[long_text] = f1 + " " + p1 + ", " + f2 + " " + p2 + " (" + idx + ")";
      }
    }
  }
  return {{"model_id", "fixture-llm"}, {"completions", completions}, {"summaries", summaries}};
}

PromptTemplate toy_template() {
  return {"toy", "Describe what an image of a {class} might look like.", "", {}};
}

ToyExperiment write_toy_experiment(const fs::path& dir, std::size_t classes, SplitSizes sizes,
                                   const json& overrides, std::uint64_t seed) {
  ToyExperiment t;
  const auto names = toy_class_names(classes);
  t.manifest = write_toy_dataset(dir / "data", "toy", names, sizes, seed);
  const auto tmpl = toy_template();
  write_file(dir / "fixture.json", make_caption_fixture(tmpl, names, 4, seed + 1).dump());
  t.config = {
      {"experiment_id", "toy"},
      {"run_root", "runs"},
      {"cache_root", "cache"},
      {"dataset", "data/manifest.jsonl"},
      {"backend",
       {{"kind", "synthetic"},
        {"dim", 16},
        {"seed", seed},
        {"classes", names},
        {"image_signal", 2.0},
        {"text_signal", 3.0}}},
      {"captions",
       {{"mode", "gist"},
        {"template", {{"template_id", tmpl.template_id}, {"body", tmpl.body}}},
        {"per_prompt", 4},
        {"m_min", 1},
        {"provider", {{"kind", "fixture"}, {"path", "fixture.json"}}}}},
      {"match", {{"n", 2}, {"mode", "short_with_class"}}},
      {"train", {{"batch_size", 8}, {"epochs", 5}, {"learning_rate", 1e-2}, {"logit_scale_init", 10.0},
                 {"selection_probe_epochs", 20}, {"epochs_kshot", 5}}},
      {"probe", {{"epochs", 30}}},
      {"eval", {{"bootstrap", {{"resamples", 100}, {"seed", 0}}}, {"full", true}}},
      {"threads", 2}};
  t.config.merge_patch(overrides);
  t.config_path = dir / "experiment.json";
  write_file(t.config_path, t.config.dump(2));
  return t;
}

Eigen::MatrixXd random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  GaussianStream g(seed);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = g.next();
  }
  return m;
}

Eigen::MatrixXd random_unit_rows(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Eigen::MatrixXd m = random_matrix(rows, cols, seed);
  for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i).normalize();
  return m;
}

}  // namespace gist::testing
