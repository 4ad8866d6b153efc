#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gist/classifier.hpp"
#include "gist/embedding.hpp"
#include "gist/matcher.hpp"

namespace gist {

// ---------------------------------------------------------------------------
// Symmetric contrastive objective
//
// For a batch of B image/text pairs with unit-norm rows I and T and logits
// S = s * I T^T:
//
//   L = sum_i -log softmax_j(S_ij)|_{j=i}  +  sum_i -log softmax_j(S_ji)|_{j=i}
//
// i.e. image->text plus text->image cross-entropy with diagonal targets, as a
// sum over the batch (not a mean).

struct ContrastiveLoss {
  double value = 0.0;
  Eigen::MatrixXd grad_image;  // dL/dI, B x d
  Eigen::MatrixXd grad_text;   // dL/dT, B x d
  double grad_logit_scale = 0.0;
};

struct LossOptions {
  bool compute_gradients = true;
  // Rows whose norm differs from 1 by more than this are rejected.
  double norm_tolerance = 1e-3;
  // When non-empty (size B), off-diagonal pairs sharing a label are dropped
  // from both softmax denominators.
  std::span<const int> mask_labels;
};

ContrastiveLoss contrastive_loss(const Eigen::MatrixXd& image_embs, const Eigen::MatrixXd& text_embs,
                                 double logit_scale, const LossOptions& options = {});

// ---------------------------------------------------------------------------
// Batching

struct TrainBatch {
  std::vector<std::string> image_ids;
  std::vector<std::string> caption_ids;  // positional pairing with image_ids
};

/// One pass over the images of `pairs` in a shuffled order, each image with
/// one caption drawn uniformly from its matched set. A trailing partial batch
/// is dropped. Throws when B exceeds the number of images.
std::vector<TrainBatch> sample_epoch_batches(const PairDataset& pairs, std::size_t batch_size,
                                             std::uint64_t epoch_seed);

// ---------------------------------------------------------------------------
// Trainable heads

enum class OptimizerKind { sgd_momentum, adamw };
enum class Precision { fp32, mixed };

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 10;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double momentum = 0.9;  // sgd-momentum only
  double logit_scale_init = 100.0;
  bool logit_scale_learnable = true;
  double logit_scale_max = 100.0;
  std::uint64_t seed = 0;
  Precision precision = Precision::fp32;
  bool cosine_decay = true;
  bool label_masked = false;
  // Linear-probe epochs used for validation-based checkpoint selection.
  std::size_t selection_probe_epochs = 100;
};

json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const json& j);

/// Linear projection heads applied on top of frozen base encoders:
/// f'_I(x) = image * f_I(x), f'_T(t) = text * f_T(t). Initialized to the
/// identity so an untrained model reproduces the base encoders exactly.
struct ProjectionHeads {
  Eigen::MatrixXd image;
  Eigen::MatrixXd text;
  double log_logit_scale = 0.0;

  static ProjectionHeads identity(std::size_t dim, double logit_scale);
  double logit_scale() const;
  std::string fingerprint() const;
};

void save_heads(const ProjectionHeads& heads, const std::filesystem::path& path,
                const json& metadata = json::object());
ProjectionHeads load_heads(const std::filesystem::path& path);

/// Encoder f' = heads applied to a frozen base encoder.
class ProjectedEncoder final : public Encoder {
 public:
  ProjectedEncoder(std::shared_ptr<const Encoder> base, ProjectionHeads heads);

  const BackendDescriptor& descriptor() const override { return desc_; }
  std::vector<EmbeddingVector> encode_images(std::span<const ImageInput> images) const override;
  std::vector<EmbeddingVector> encode_texts(std::span<const std::string> texts) const override;

  const ProjectionHeads& heads() const { return heads_; }

 private:
  std::shared_ptr<const Encoder> base_;
  ProjectionHeads heads_;
  BackendDescriptor desc_;
};

using EmbeddingTable = std::map<std::string, Eigen::VectorXd>;

struct SelectionData {
  Eigen::MatrixXd train_features;  // base image embeddings, rows
  std::vector<int> train_labels;
  Eigen::MatrixXd val_features;
  std::vector<int> val_labels;
  std::vector<std::string> class_order;
};

struct StepLog {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss_sum = 0.0;   // the objective as written (sum over the batch)
  double loss_mean = 0.0;  // loss_sum / B, the optimized quantity
  double logit_scale = 0.0;
  double learning_rate = 0.0;
};

struct FinetuneResult {
  ProjectionHeads heads;
  std::vector<StepLog> log;
  // Mean loss over the epoch-0 batch sequence before and after training.
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t steps = 0;
  std::size_t batch_size = 0;
  bool diverged = false;
  std::optional<std::size_t> best_epoch;
  std::optional<double> best_val_accuracy;
};

/// Contrastive fine-tuning of the projection heads on image/caption pairs.
/// `image_base` is keyed by image_id and `text_base` by caption_id; both hold
/// frozen base-encoder outputs. With `selection`, the heads with the best
/// validation linear-probe accuracy (over epoch ends) are returned. A NaN loss
/// stops training and returns the last good heads with diverged = true.
FinetuneResult finetune(const ProjectionHeads& initial, const PairDataset& pairs,
                        const EmbeddingTable& image_base, const EmbeddingTable& text_base,
                        const TrainConfig& config, const SelectionData* selection = nullptr);

/// Row-normalized projected features.
Eigen::MatrixXd project_images(const ProjectionHeads& heads, const Eigen::MatrixXd& base_rows);

}  // namespace gist
