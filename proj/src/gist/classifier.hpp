#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gist/embedding.hpp"

namespace gist {

/// SGD linear-probe schedule. Defaults match the CLIP linear-probe baseline:
/// 500 epochs, lr 0.05, batch 64, momentum 0.9, weight decay 1e-4.
struct ProbeConfig {
  std::size_t epochs = 500;
  double learning_rate = 0.05;
  std::size_t batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  bool early_stopping = false;  // only with validation data
  std::size_t patience = 25;
};

json to_json(const ProbeConfig& c);
ProbeConfig probe_config_from_json(const json& j);

struct LinearProbe {
  Eigen::MatrixXd weights;  // classes x d
  Eigen::VectorXd bias;     // classes
  std::vector<std::string> class_order;
  std::string trained_on;   // run-manifest reference
};

struct ProbeTrainResult {
  LinearProbe probe;
  // Regularized full-data objective after each epoch.
  std::vector<double> epoch_objective;
  std::size_t epochs_run = 0;
};

/// Multinomial logistic regression on frozen features (rows of `features`).
/// Labels index into class_order. Throws precondition when N < |classes| or a
/// class has no training example.
ProbeTrainResult train_linear_probe(const Eigen::MatrixXd& features, std::span<const int> labels,
                                    const std::vector<std::string>& class_order,
                                    const ProbeConfig& config,
                                    const Eigen::MatrixXd* val_features = nullptr,
                                    std::span<const int> val_labels = {});

/// Class scores W x + b.
Eigen::VectorXd predict(const LinearProbe& probe, const Eigen::VectorXd& embedding);
Eigen::MatrixXd predict_all(const LinearProbe& probe, const Eigen::MatrixXd& features);

inline const std::vector<std::string> kDefaultZeroShotTemplates = {"a photo of a {class}.",
                                                                   "a picture of a {class}."};

struct ZeroShotHead {
  Eigen::MatrixXd class_embeddings;  // classes x d, unit rows
  std::vector<std::string> templates;
  std::vector<std::string> class_order;
};

/// Class-name display form used when filling templates: underscores -> spaces.
std::string display_class_name(const std::string& class_name);

/// Per class: encode every filled template, normalize each, average, and
/// renormalize the mean. The average is accumulated in sorted template order
/// so the head does not depend on template order.
ZeroShotHead build_zeroshot_head(const Encoder& encoder, const std::vector<std::string>& class_names,
                                 const std::vector<std::string>& templates = kDefaultZeroShotTemplates);

/// Cosine similarity of the embedding against every class row.
Eigen::VectorXd predict(const ZeroShotHead& head, const Eigen::VectorXd& embedding);
Eigen::MatrixXd predict_all(const ZeroShotHead& head, const Eigen::MatrixXd& features);

/// Indices of the k largest scores; ties go to the lower class index.
std::vector<std::size_t> topk_indices(const Eigen::VectorXd& scores, std::size_t k);

/// Binary weights (float32, row-major) at `path`, JSON metadata at `path.json`.
void save_probe(const LinearProbe& probe, const std::filesystem::path& path);
LinearProbe load_probe(const std::filesystem::path& path);
void save_zeroshot_head(const ZeroShotHead& head, const std::filesystem::path& path);
ZeroShotHead load_zeroshot_head(const std::filesystem::path& path);

/// Row-stacks embeddings (optionally L2-normalizing each row).
Eigen::MatrixXd stack_embeddings(const std::vector<EmbeddingVector>& vectors, bool normalize);

}  // namespace gist
