#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gist/captions.hpp"
#include "gist/data_ingest.hpp"
#include "gist/util.hpp"

namespace gist::testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

/// "amber_wren", "cobalt_finch", ... distinct names, none a substring of another.
std::vector<std::string> toy_class_names(std::size_t n);

struct SplitSizes {
  std::size_t train = 8;
  std::size_t val = 4;
  std::size_t test = 8;
};

/// Writes one small random file per image under dir/images and a manifest at
/// dir/manifest.jsonl. Image ids are "<class>_<i>".
DatasetManifest write_toy_dataset(const fs::path& dir, const std::string& name,
                                  const std::vector<std::string>& classes, SplitSizes sizes,
                                  std::uint64_t seed);

/// Fixture provider JSON covering every prompt of `t` for `classes` with
/// `per_prompt` distinct descriptions each (long, > 30 words) and a short
/// summary for every description.
json make_caption_fixture(const PromptTemplate& t, const std::vector<std::string>& classes,
                          std::size_t per_prompt, std::uint64_t seed);

/// A one-prompt template used by toy experiments.
PromptTemplate toy_template();

struct ToyExperiment {
  fs::path config_path;
  json config;
  DatasetManifest manifest;
};

/// Writes a dataset, a caption fixture for toy_template() and an experiment
/// config under `dir`. `overrides` is merge-patched onto the default config.
ToyExperiment write_toy_experiment(const fs::path& dir, std::size_t classes, SplitSizes sizes,
                                   const json& overrides = json::object(), std::uint64_t seed = 0);

/// Random matrix with unit-norm rows.
Eigen::MatrixXd random_unit_rows(std::size_t rows, std::size_t cols, std::uint64_t seed);
Eigen::MatrixXd random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed);

}  // namespace gist::testing
