#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "gist/embedding.hpp"

namespace gist {

enum class Split { train, val, test };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct ImageRecord {
  std::string image_id;
  std::filesystem::path path;
  std::string label;
  Split split = Split::train;

  bool operator==(const ImageRecord&) const = default;
};

struct DatasetManifest {
  std::string name;
  std::vector<std::string> classes;
  std::vector<ImageRecord> records;

  bool operator==(const DatasetManifest&) const = default;

  std::size_t count(Split s) const;
  /// Index of `label` in classes; throws not_found.
  std::size_t class_index(const std::string& label) const;
  std::vector<ImageRecord> in_split(Split s) const;
  ImageInput image_input(const ImageRecord& r) const;
};

struct KShotSpec {
  std::size_t k = 1;
  std::uint64_t seed = 0;
  bool clamp = false;
};

struct DuplicatePair {
  std::string id_a;
  std::string id_b;
  double similarity = 0.0;

  bool operator==(const DuplicatePair&) const = default;
};

/// Default threshold for near-duplicate detection on L2-normalized embeddings.
inline constexpr double kDuplicateThreshold = 0.95605;

/// Default k-shot seeds (three draws per setting).
inline const std::vector<std::uint64_t> kDefaultKShotSeeds = {0, 1, 2};

/// Checks every manifest invariant; throws Error(parse|invalid_argument)
/// naming the offending record.
void validate_manifest(const DatasetManifest& manifest);

/// Parses the JSON Lines manifest format: one header object
/// {"name", "classes"} followed by one {"image_id", "path", "label", "split"}
/// object per line. Relative record paths resolve against the manifest's
/// directory.
DatasetManifest parse_manifest(const std::string& text,
                               const std::filesystem::path& base_dir = {});
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Serializes to the same format. Paths are written as stored.
std::string serialize_manifest(const DatasetManifest& manifest);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Keeps exactly k train records per class (or min(k, available) with clamp).
/// Each class draws without replacement from its own substream derived from
/// (seed, class index); selected records keep their original manifest order.
DatasetManifest sample_kshot(const DatasetManifest& manifest, const KShotSpec& spec);

/// Every unordered pair whose cosine similarity over L2-normalized embeddings
/// is >= threshold, sorted by descending similarity then by (id_a, id_b).
/// Within a pair id_a < id_b.
std::vector<DuplicatePair> find_near_duplicates(
    const std::map<std::string, EmbeddingVector>& embeddings, double threshold);

/// Moves both members of every pair that touches the test split into train.
/// Pair membership is evaluated against the input splits, so the result does
/// not depend on pair order. Records are never removed.
DatasetManifest resolve_split_leakage(const DatasetManifest& manifest,
                                      const std::vector<DuplicatePair>& pairs);

json to_json(const DuplicatePair& p);

}  // namespace gist
