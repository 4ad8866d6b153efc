#include "gist/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "gist/error.hpp"
#include "gist/matrix_io.hpp"

namespace gist {

namespace {
constexpr char kProbeMagic[9] = "GISTPRB1";
constexpr char kHeadMagic[9] = "GISTZSH1";

double softmax_ce_row(const Eigen::VectorXd& logits, int label, Eigen::VectorXd* probs) {
  const double mx = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - mx).exp();
  const double sum = e.sum();
  if (probs) *probs = e / sum;
  return std::log(sum) + mx - logits(label);
}

double objective(const LinearProbe& p, const Eigen::MatrixXd& x, std::span<const int> y, double wd) {
  double loss = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::VectorXd logits = p.weights * x.row(i).transpose() + p.bias;
    loss += softmax_ce_row(logits, y[static_cast<std::size_t>(i)], nullptr);
  }
  loss /= static_cast<double>(x.rows());
  return loss + 0.5 * wd * (p.weights.squaredNorm() + p.bias.squaredNorm());
}

double accuracy(const LinearProbe& p, const Eigen::MatrixXd& x, std::span<const int> y) {
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto top = topk_indices(predict(p, x.row(i).transpose()), 1);
    if (static_cast<int>(top[0]) == y[static_cast<std::size_t>(i)]) ++hits;
  }
  return x.rows() ? static_cast<double>(hits) / static_cast<double>(x.rows()) : 0.0;
}
}  // namespace

json to_json(const ProbeConfig& c) {
  return {{"epochs", c.epochs},           {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},   {"momentum", c.momentum},
          {"weight_decay", c.weight_decay}, {"seed", c.seed},
          {"early_stopping", c.early_stopping}, {"patience", c.patience}};
}

ProbeConfig probe_config_from_json(const json& j) {
  ProbeConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  c.early_stopping = j.value("early_stopping", c.early_stopping);
  c.patience = j.value("patience", c.patience);
  return c;
}

ProbeTrainResult train_linear_probe(const Eigen::MatrixXd& features, std::span<const int> labels,
                                    const std::vector<std::string>& class_order,
                                    const ProbeConfig& config, const Eigen::MatrixXd* val_features,
                                    std::span<const int> val_labels) {
  const auto n = static_cast<std::size_t>(features.rows());
  const auto d = features.cols();
  const auto classes = static_cast<Eigen::Index>(class_order.size());
  if (labels.size() != n) throw Error(ErrorCode::invalid_argument, "feature/label count mismatch");
  if (n < class_order.size()) {
    throw Error(ErrorCode::precondition, "linear probe needs at least one example per class (N=" +
                                             std::to_string(n) + " < " +
                                             std::to_string(class_order.size()) + " classes)");
  }
  if (config.batch_size == 0 || !(config.learning_rate > 0.0)) {
    throw Error(ErrorCode::invalid_argument, "probe batch size and learning rate must be positive");
  }
  std::vector<std::size_t> per_class(class_order.size(), 0);
  for (int y : labels) {
    if (y < 0 || y >= classes) throw Error(ErrorCode::invalid_argument, "label index out of range");
    ++per_class[static_cast<std::size_t>(y)];
  }
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (per_class[c] == 0) {
      throw Error(ErrorCode::precondition,
                  "class '" + class_order[c] + "' is absent from the probe training labels");
    }
  }

  ProbeTrainResult result;
  LinearProbe& probe = result.probe;
  probe.weights = Eigen::MatrixXd::Zero(classes, d);
  probe.bias = Eigen::VectorXd::Zero(classes);
  probe.class_order = class_order;
  Eigen::MatrixXd vel_w = Eigen::MatrixXd::Zero(classes, d);
  Eigen::VectorXd vel_b = Eigen::VectorXd::Zero(classes);

  const bool early = config.early_stopping && val_features && !val_labels.empty();
  LinearProbe best = probe;
  double best_acc = -1.0;
  std::size_t since_best = 0;

  std::vector<std::size_t> order(n);
  Eigen::MatrixXd grad_w(classes, d);
  Eigen::VectorXd grad_b(classes), probs(classes);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(substream_seed(config.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      grad_w.setZero();
      grad_b.setZero();
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        const Eigen::VectorXd x = features.row(static_cast<Eigen::Index>(i)).transpose();
        softmax_ce_row(probe.weights * x + probe.bias, labels[i], &probs);
        probs(labels[i]) -= 1.0;
        grad_w.noalias() += probs * x.transpose();
        grad_b += probs;
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      grad_w = grad_w * inv + config.weight_decay * probe.weights;
      grad_b = grad_b * inv + config.weight_decay * probe.bias;
      vel_w = config.momentum * vel_w + grad_w;
      vel_b = config.momentum * vel_b + grad_b;
      probe.weights -= config.learning_rate * vel_w;
      probe.bias -= config.learning_rate * vel_b;
    }
    result.epoch_objective.push_back(objective(probe, features, labels, config.weight_decay));
    result.epochs_run = epoch + 1;
    if (!std::isfinite(result.epoch_objective.back())) {
      throw Error(ErrorCode::numeric, "linear probe diverged at epoch " + std::to_string(epoch));
    }
    if (early) {
      const double acc = accuracy(probe, *val_features, val_labels);
      if (acc > best_acc) {
        best_acc = acc;
        best = probe;
        since_best = 0;
      } else if (++since_best >= config.patience) {
        break;
      }
    }
  }
  if (early) probe = best;
  return result;
}

Eigen::VectorXd predict(const LinearProbe& probe, const Eigen::VectorXd& embedding) {
  if (embedding.size() != probe.weights.cols()) {
    throw Error(ErrorCode::dimension_mismatch, "probe expects d=" + std::to_string(probe.weights.cols()) +
                                                   ", got " + std::to_string(embedding.size()));
  }
  return probe.weights * embedding + probe.bias;
}

Eigen::MatrixXd predict_all(const LinearProbe& probe, const Eigen::MatrixXd& features) {
  if (features.cols() != probe.weights.cols()) {
    throw Error(ErrorCode::dimension_mismatch, "probe expects d=" + std::to_string(probe.weights.cols()) +
                                                   ", got " + std::to_string(features.cols()));
  }
  return (features * probe.weights.transpose()).rowwise() + probe.bias.transpose();
}

std::string display_class_name(const std::string& class_name) {
  std::string out = class_name;
  std::replace(out.begin(), out.end(), '_', ' ');
  return out;
}

ZeroShotHead build_zeroshot_head(const Encoder& encoder, const std::vector<std::string>& class_names,
                                 const std::vector<std::string>& templates) {
  if (class_names.empty()) throw Error(ErrorCode::invalid_argument, "zero-shot head needs classes");
  if (templates.empty()) throw Error(ErrorCode::invalid_argument, "zero-shot head needs a template");
  std::vector<std::string> ordered = templates;
  std::sort(ordered.begin(), ordered.end());
  const auto d = static_cast<Eigen::Index>(encoder.descriptor().dim);
  ZeroShotHead head;
  head.templates = templates;
  head.class_order = class_names;
  head.class_embeddings = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(class_names.size()), d);
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    std::vector<std::string> texts;
    for (const auto& t : ordered) {
      const auto pos = t.find("{class}");
      if (pos == std::string::npos) {
        throw Error(ErrorCode::invalid_argument, "zero-shot template lacks {class}: " + t);
      }
      texts.push_back(t.substr(0, pos) + display_class_name(class_names[c]) + t.substr(pos + 7));
    }
    const auto vecs = encoder.encode_texts(texts);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    for (const auto& v : vecs) {
      const auto unit = l2_normalize(v);
      mean += Eigen::Map<const Eigen::VectorXd>(unit.values.data(), d);
    }
    mean /= static_cast<double>(vecs.size());
    const double norm = mean.norm();
    if (!(norm > 0.0)) {
      throw Error(ErrorCode::numeric, "template embeddings cancel out for class '" + class_names[c] + "'");
    }
    head.class_embeddings.row(static_cast<Eigen::Index>(c)) = (mean / norm).transpose();
  }
  return head;
}

Eigen::VectorXd predict(const ZeroShotHead& head, const Eigen::VectorXd& embedding) {
  if (embedding.size() != head.class_embeddings.cols()) {
    throw Error(ErrorCode::dimension_mismatch,
                "zero-shot head expects d=" + std::to_string(head.class_embeddings.cols()) + ", got " +
                    std::to_string(embedding.size()));
  }
  const double norm = embedding.norm();
  if (!(norm > 0.0)) throw Error(ErrorCode::precondition, "zero image embedding");
  return head.class_embeddings * (embedding / norm);
}

Eigen::MatrixXd predict_all(const ZeroShotHead& head, const Eigen::MatrixXd& features) {
  Eigen::MatrixXd out(features.rows(), head.class_embeddings.rows());
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    out.row(i) = predict(head, features.row(i).transpose()).transpose();
  }
  return out;
}

std::vector<std::size_t> topk_indices(const Eigen::VectorXd& scores, std::size_t k) {
  const auto c = static_cast<std::size_t>(scores.size());
  k = std::min(k, c);
  std::vector<std::size_t> idx(c);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double sa = scores(static_cast<Eigen::Index>(a));
                      const double sb = scores(static_cast<Eigen::Index>(b));
                      if (sa != sb) return sa > sb;
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

void save_probe(const LinearProbe& probe, const std::filesystem::path& path) {
  std::string bin;
  append_matrix(bin, kProbeMagic, probe.weights, MatrixDtype::float32);
  append_matrix(bin, kProbeMagic, probe.bias.transpose(), MatrixDtype::float32);
  write_file(path, bin);
  json meta = {{"format", "gist-linear-probe"},
               {"version", 1},
               {"classes", probe.class_order},
               {"d", probe.weights.cols()},
               {"trained_on", probe.trained_on}};
  auto meta_path = path;
  meta_path += ".json";
  write_file(meta_path, meta.dump(2));
}

LinearProbe load_probe(const std::filesystem::path& path) {
  auto meta_path = path;
  meta_path += ".json";
  const json meta = json::parse(read_file(meta_path));
  const std::string bin = read_file(path);
  std::string_view cursor(bin);
  LinearProbe p;
  p.weights = read_matrix(cursor, kProbeMagic);
  p.bias = read_matrix(cursor, kProbeMagic).transpose();
  p.class_order = meta.at("classes").get<std::vector<std::string>>();
  p.trained_on = meta.value("trained_on", "");
  if (static_cast<std::size_t>(p.weights.rows()) != p.class_order.size() ||
      p.bias.size() != p.weights.rows()) {
    throw Error(ErrorCode::parse, "probe weights do not match its class list");
  }
  return p;
}

void save_zeroshot_head(const ZeroShotHead& head, const std::filesystem::path& path) {
  std::string bin;
  append_matrix(bin, kHeadMagic, head.class_embeddings, MatrixDtype::float32);
  write_file(path, bin);
  json meta = {{"format", "gist-zeroshot-head"},
               {"version", 1},
               {"classes", head.class_order},
               {"templates", head.templates},
               {"d", head.class_embeddings.cols()}};
  auto meta_path = path;
  meta_path += ".json";
  write_file(meta_path, meta.dump(2));
}

ZeroShotHead load_zeroshot_head(const std::filesystem::path& path) {
  auto meta_path = path;
  meta_path += ".json";
  const json meta = json::parse(read_file(meta_path));
  const std::string bin = read_file(path);
  std::string_view cursor(bin);
  ZeroShotHead h;
  h.class_embeddings = read_matrix(cursor, kHeadMagic);
  h.class_order = meta.at("classes").get<std::vector<std::string>>();
  h.templates = meta.at("templates").get<std::vector<std::string>>();
  if (static_cast<std::size_t>(h.class_embeddings.rows()) != h.class_order.size()) {
    throw Error(ErrorCode::parse, "zero-shot head rows do not match its class list");
  }
  return h;
}

Eigen::MatrixXd stack_embeddings(const std::vector<EmbeddingVector>& vectors, bool normalize) {
  if (vectors.empty()) return {};
  const auto d = static_cast<Eigen::Index>(vectors.front().dim());
  Eigen::MatrixXd out(static_cast<Eigen::Index>(vectors.size()), d);
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (static_cast<Eigen::Index>(vectors[i].dim()) != d) {
      throw Error(ErrorCode::dimension_mismatch, "embeddings of differing dimension");
    }
    const EmbeddingVector v = normalize ? l2_normalize(vectors[i]) : vectors[i];
    out.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(v.values.data(), d);
  }
  return out;
}

}  // namespace gist
