#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gist/captions.hpp"
#include "gist/data_ingest.hpp"
#include "gist/embedding.hpp"

namespace gist {

struct RankedCaption {
  std::string caption_id;
  double score = 0.0;

  bool operator==(const RankedCaption&) const = default;
};

struct MatchAssignment {
  std::string image_id;
  std::string label;
  std::size_t n = 0;
  std::vector<RankedCaption> ranked;  // score descending, ties by caption_id

  bool operator==(const MatchAssignment&) const = default;
};

struct CaptionCandidate {
  std::string caption_id;
  EmbeddingVector embedding;
};

/// Top-n candidates by cosine similarity over L2-normalized embeddings.
/// Candidates must already be restricted to the image's label.
MatchAssignment match_image_to_captions(const EmbeddingVector& image_embedding,
                                        std::span<const CaptionCandidate> candidates,
                                        std::size_t n);

/// Matches every train-split image against the long captions of its own
/// label. Output follows manifest order. Throws precondition naming a class
/// that has no captions left.
std::vector<MatchAssignment> match_training_images(
    const DatasetManifest& manifest, const CaptionStore& store,
    const std::map<std::string, EmbeddingVector>& image_embeddings,
    const std::map<std::string, EmbeddingVector>& caption_embeddings, std::size_t n,
    std::size_t threads = 1);

enum class CaptionTextMode { long_text, short_with_class, class_template };

const char* to_string(CaptionTextMode m);
CaptionTextMode caption_mode_from_string(const std::string& s);

struct TrainingPair {
  std::string image_id;
  std::string caption_id;
  std::string label;
  std::string text;

  bool operator==(const TrainingPair&) const = default;
};

struct PairDataset {
  CaptionTextMode mode = CaptionTextMode::short_with_class;
  std::vector<TrainingPair> pairs;

  std::size_t image_count() const;
};

/// Fills short_text for every caption referenced by `assignments` that lacks
/// one, using `summarize`. Summaries not shorter than the long caption are
/// cut back and flagged.
void summarize_matched(CaptionStore& store, const std::vector<MatchAssignment>& assignments,
                       const std::function<Summary(const std::string&)>& summarize,
                       std::size_t threads = 1);

/// Expands assignments into (image, caption) pairs. long_text mode appends the
/// class name to the long caption; short_with_class appends it to the summary
/// (which must exist); class_template uses the caption text verbatim.
PairDataset materialize_pairs(const std::vector<MatchAssignment>& assignments,
                              const CaptionStore& store, CaptionTextMode mode);

/// match -> summarize (short mode only) -> materialize, encoding with `encoder`.
PairDataset build_pair_dataset(const DatasetManifest& manifest, CaptionStore& store,
                               const Encoder& encoder, std::size_t n, CaptionTextMode mode,
                               const std::function<Summary(const std::string&)>& summarize = {});

/// Number of pairs whose caption label differs from the image label.
std::size_t count_label_violations(const PairDataset& pairs, const DatasetManifest& manifest,
                                   const CaptionStore& store);

json to_json(const MatchAssignment& a);
MatchAssignment assignment_from_json(const json& j);
json to_json(const TrainingPair& p);
TrainingPair pair_from_json(const json& j);

/// Per-dataset default n for matched captions.
std::size_t default_match_n(const std::string& dataset_preset);

}  // namespace gist
