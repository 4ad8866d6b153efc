#include "gist/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <unordered_map>

#include "gist/error.hpp"
#include "gist/matrix_io.hpp"

namespace gist {

ContrastiveLoss contrastive_loss(const Eigen::MatrixXd& image_embs, const Eigen::MatrixXd& text_embs,
                                 double logit_scale, const LossOptions& options) {
  const Eigen::Index b = image_embs.rows();
  if (b < 1) throw Error(ErrorCode::invalid_argument, "contrastive loss needs B >= 1");
  if (text_embs.rows() != b || text_embs.cols() != image_embs.cols()) {
    throw Error(ErrorCode::dimension_mismatch, "image and text batches must have the same shape");
  }
  if (!(logit_scale > 0.0) || !std::isfinite(logit_scale)) {
    throw Error(ErrorCode::invalid_argument, "logit scale must be positive and finite");
  }
  if (!options.mask_labels.empty() && static_cast<Eigen::Index>(options.mask_labels.size()) != b) {
    throw Error(ErrorCode::invalid_argument, "mask labels must have one entry per pair");
  }
  for (Eigen::Index i = 0; i < b; ++i) {
    const double ni = image_embs.row(i).norm();
    const double nt = text_embs.row(i).norm();
    if (!(std::abs(ni - 1.0) <= options.norm_tolerance) || !(std::abs(nt - 1.0) <= options.norm_tolerance)) {
      throw Error(ErrorCode::precondition,
                  "contrastive loss expects L2-normalized rows (row " + std::to_string(i) + ")");
    }
  }

  const Eigen::MatrixXd sims = image_embs * text_embs.transpose();
  const Eigen::MatrixXd logits = logit_scale * sims;
  if (!logits.allFinite()) throw Error(ErrorCode::numeric, "non-finite contrastive logits");

  auto allowed = [&](Eigen::Index i, Eigen::Index j) {
    if (i == j || options.mask_labels.empty()) return true;
    return options.mask_labels[static_cast<std::size_t>(i)] != options.mask_labels[static_cast<std::size_t>(j)];
  };

  Eigen::MatrixXd p_row = Eigen::MatrixXd::Zero(b, b);
  Eigen::MatrixXd p_col = Eigen::MatrixXd::Zero(b, b);
  double loss = 0.0;
  // image -> text: softmax across row i.
  for (Eigen::Index i = 0; i < b; ++i) {
    double mx = logits(i, i);
    for (Eigen::Index j = 0; j < b; ++j) {
      if (allowed(i, j)) mx = std::max(mx, logits(i, j));
    }
    double sum = 0.0;
    for (Eigen::Index j = 0; j < b; ++j) {
      if (allowed(i, j)) sum += std::exp(logits(i, j) - mx);
    }
    const double lse = mx + std::log(sum);
    loss += lse - logits(i, i);
    for (Eigen::Index j = 0; j < b; ++j) {
      if (allowed(i, j)) p_row(i, j) = std::exp(logits(i, j) - lse);
    }
  }
  // text -> image: softmax down column j.
  for (Eigen::Index j = 0; j < b; ++j) {
    double mx = logits(j, j);
    for (Eigen::Index i = 0; i < b; ++i) {
      if (allowed(i, j)) mx = std::max(mx, logits(i, j));
    }
    double sum = 0.0;
    for (Eigen::Index i = 0; i < b; ++i) {
      if (allowed(i, j)) sum += std::exp(logits(i, j) - mx);
    }
    const double lse = mx + std::log(sum);
    loss += lse - logits(j, j);
    for (Eigen::Index i = 0; i < b; ++i) {
      if (allowed(i, j)) p_col(i, j) = std::exp(logits(i, j) - lse);
    }
  }
  if (!std::isfinite(loss)) throw Error(ErrorCode::numeric, "non-finite contrastive loss");

  ContrastiveLoss out;
  out.value = loss;
  if (options.compute_gradients) {
    const Eigen::MatrixXd g = p_row + p_col - 2.0 * Eigen::MatrixXd::Identity(b, b);
    out.grad_image = logit_scale * g * text_embs;
    out.grad_text = logit_scale * g.transpose() * image_embs;
    out.grad_logit_scale = g.cwiseProduct(sims).sum();
  }
  return out;
}

std::vector<TrainBatch> sample_epoch_batches(const PairDataset& pairs, std::size_t batch_size,
                                             std::uint64_t epoch_seed) {
  if (pairs.pairs.empty()) throw Error(ErrorCode::precondition, "pair dataset is empty");
  if (batch_size == 0) throw Error(ErrorCode::invalid_argument, "batch size must be at least 1");
  std::vector<std::string> images;
  std::unordered_map<std::string, std::vector<std::string>> captions;
  for (const auto& p : pairs.pairs) {
    auto& list = captions[p.image_id];
    if (list.empty()) images.push_back(p.image_id);
    list.push_back(p.caption_id);
  }
  if (batch_size > images.size()) {
    throw Error(ErrorCode::invalid_argument, "batch size " + std::to_string(batch_size) +
                                                 " exceeds the " + std::to_string(images.size()) +
                                                 " images in the pair dataset");
  }
  std::mt19937_64 rng(epoch_seed);
  for (std::size_t i = images.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(images[i - 1], images[pick(rng)]);
  }
  std::vector<TrainBatch> batches;
  const std::size_t full = images.size() / batch_size;
  for (std::size_t b = 0; b < full; ++b) {
    TrainBatch batch;
    for (std::size_t k = 0; k < batch_size; ++k) {
      const auto& id = images[b * batch_size + k];
      const auto& options = captions.at(id);
      std::uniform_int_distribution<std::size_t> pick(0, options.size() - 1);
      batch.image_ids.push_back(id);
      batch.caption_ids.push_back(options[pick(rng)]);
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

// ---------------------------------------------------------------------------

namespace {
const char* to_string(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "sgd-momentum"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adamw") return OptimizerKind::adamw;
  if (s == "sgd-momentum") return OptimizerKind::sgd_momentum;
  throw Error(ErrorCode::config, "unknown optimizer '" + s + "'");
}
}  // namespace

json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"optimizer", to_string(c.optimizer)},
          {"momentum", c.momentum},
          {"logit_scale_init", c.logit_scale_init},
          {"logit_scale_learnable", c.logit_scale_learnable},
          {"logit_scale_max", c.logit_scale_max},
          {"seed", c.seed},
          {"precision", c.precision == Precision::fp32 ? "fp32" : "mixed"},
          {"cosine_decay", c.cosine_decay},
          {"label_masked", c.label_masked},
          {"selection_probe_epochs", c.selection_probe_epochs}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
  c.momentum = j.value("momentum", c.momentum);
  c.logit_scale_init = j.value("logit_scale_init", c.logit_scale_init);
  c.logit_scale_learnable = j.value("logit_scale_learnable", c.logit_scale_learnable);
  c.logit_scale_max = j.value("logit_scale_max", c.logit_scale_max);
  // "fixed:<value>" pins the scale; "fixed:1.0" is the bare objective.
  if (j.contains("logit_scale")) {
    const auto spec = j.at("logit_scale").get<std::string>();
    if (spec.rfind("fixed:", 0) == 0) {
      c.logit_scale_init = std::stod(spec.substr(6));
      c.logit_scale_learnable = false;
    } else if (spec.rfind("learnable:", 0) == 0) {
      c.logit_scale_init = std::stod(spec.substr(10));
      c.logit_scale_learnable = true;
    } else {
      throw Error(ErrorCode::config, "logit_scale must be fixed:<v> or learnable:<v>");
    }
  }
  c.seed = j.value("seed", c.seed);
  if (j.contains("precision")) {
    const auto p = j.at("precision").get<std::string>();
    if (p == "fp32") {
      c.precision = Precision::fp32;
    } else if (p == "mixed") {
      c.precision = Precision::mixed;
    } else {
      throw Error(ErrorCode::config, "unknown precision '" + p + "'");
    }
  }
  c.cosine_decay = j.value("cosine_decay", c.cosine_decay);
  c.label_masked = j.value("label_masked", c.label_masked);
  c.selection_probe_epochs = j.value("selection_probe_epochs", c.selection_probe_epochs);
  if (c.batch_size < 1) throw Error(ErrorCode::config, "batch_size must be >= 1");
  if (!(c.learning_rate > 0.0)) throw Error(ErrorCode::config, "learning_rate must be > 0");
  if (!(c.logit_scale_init > 0.0)) throw Error(ErrorCode::config, "logit scale must be > 0");
  return c;
}

ProjectionHeads ProjectionHeads::identity(std::size_t dim, double logit_scale) {
  ProjectionHeads h;
  const auto d = static_cast<Eigen::Index>(dim);
  h.image = Eigen::MatrixXd::Identity(d, d);
  h.text = Eigen::MatrixXd::Identity(d, d);
  h.log_logit_scale = std::log(logit_scale);
  return h;
}

double ProjectionHeads::logit_scale() const { return std::exp(log_logit_scale); }

namespace {
constexpr char kHeadsMagic[9] = "GISTHEAD";

std::string heads_bytes(const ProjectionHeads& h) {
  std::string bin;
  append_matrix(bin, kHeadsMagic, h.image, MatrixDtype::float64);
  append_matrix(bin, kHeadsMagic, h.text, MatrixDtype::float64);
  Eigen::MatrixXd scale(1, 1);
  scale(0, 0) = h.log_logit_scale;
  append_matrix(bin, kHeadsMagic, scale, MatrixDtype::float64);
  return bin;
}
}  // namespace

std::string ProjectionHeads::fingerprint() const { return sha256_hex(heads_bytes(*this)); }

void save_heads(const ProjectionHeads& heads, const std::filesystem::path& path, const json& metadata) {
  write_file(path, heads_bytes(heads));
  json meta = metadata;
  meta["format"] = "gist-projection-heads";
  meta["version"] = 1;
  meta["fingerprint"] = heads.fingerprint();
  auto meta_path = path;
  meta_path += ".json";
  write_file(meta_path, meta.dump(2));
}

ProjectionHeads load_heads(const std::filesystem::path& path) {
  const std::string bin = read_file(path);
  std::string_view cursor(bin);
  ProjectionHeads h;
  h.image = read_matrix(cursor, kHeadsMagic);
  h.text = read_matrix(cursor, kHeadsMagic);
  const auto scale = read_matrix(cursor, kHeadsMagic);
  if (scale.size() != 1) throw Error(ErrorCode::parse, "bad logit scale block in " + path.string());
  h.log_logit_scale = scale(0, 0);
  return h;
}

ProjectedEncoder::ProjectedEncoder(std::shared_ptr<const Encoder> base, ProjectionHeads heads)
    : base_(std::move(base)), heads_(std::move(heads)) {
  const auto d_in = static_cast<Eigen::Index>(base_->descriptor().dim);
  if (heads_.image.cols() != d_in || heads_.text.cols() != d_in ||
      heads_.image.rows() != heads_.text.rows()) {
    throw Error(ErrorCode::dimension_mismatch, "projection heads do not fit backend " +
                                                   base_->descriptor().model_id);
  }
  desc_ = base_->descriptor();
  desc_.model_id += "+ft-" + heads_.fingerprint().substr(0, 12);
  desc_.dim = static_cast<std::size_t>(heads_.image.rows());
  desc_.trainable = true;
}

namespace {
std::vector<EmbeddingVector> project(const std::vector<EmbeddingVector>& in, const Eigen::MatrixXd& w,
                                     const std::string& model_id) {
  std::vector<EmbeddingVector> out;
  out.reserve(in.size());
  for (const auto& v : in) {
    const Eigen::VectorXd y = w * Eigen::Map<const Eigen::VectorXd>(v.values.data(), w.cols());
    EmbeddingVector e;
    e.values.assign(y.data(), y.data() + y.size());
    e.source = v.source;
    e.model_id = model_id;
    out.push_back(std::move(e));
  }
  return out;
}
}  // namespace

std::vector<EmbeddingVector> ProjectedEncoder::encode_images(std::span<const ImageInput> images) const {
  return project(base_->encode_images(images), heads_.image, desc_.model_id);
}

std::vector<EmbeddingVector> ProjectedEncoder::encode_texts(std::span<const std::string> texts) const {
  return project(base_->encode_texts(texts), heads_.text, desc_.model_id);
}

Eigen::MatrixXd project_images(const ProjectionHeads& heads, const Eigen::MatrixXd& base_rows) {
  Eigen::MatrixXd z = base_rows * heads.image.transpose();
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double n = z.row(i).norm();
    if (n > 0.0) z.row(i) /= n;
  }
  return z;
}

// ---------------------------------------------------------------------------

namespace {

struct BatchTensors {
  Eigen::MatrixXd image;  // d_in x B
  Eigen::MatrixXd text;   // d_in x B
  std::vector<int> labels;
};

BatchTensors gather(const TrainBatch& batch, const EmbeddingTable& image_base, const EmbeddingTable& text_base,
                    const std::unordered_map<std::string, int>& label_of, Eigen::Index d_in) {
  const auto b = static_cast<Eigen::Index>(batch.image_ids.size());
  BatchTensors t{Eigen::MatrixXd(d_in, b), Eigen::MatrixXd(d_in, b), {}};
  for (Eigen::Index k = 0; k < b; ++k) {
    const auto& iid = batch.image_ids[static_cast<std::size_t>(k)];
    const auto& cid = batch.caption_ids[static_cast<std::size_t>(k)];
    auto ii = image_base.find(iid);
    if (ii == image_base.end()) throw Error(ErrorCode::not_found, "no base embedding for image '" + iid + "'");
    auto tt = text_base.find(cid);
    if (tt == text_base.end()) throw Error(ErrorCode::not_found, "no base embedding for caption '" + cid + "'");
    if (ii->second.size() != d_in || tt->second.size() != d_in) {
      throw Error(ErrorCode::dimension_mismatch, "base embedding dimension differs from the heads");
    }
    t.image.col(k) = ii->second;
    t.text.col(k) = tt->second;
    t.labels.push_back(label_of.at(iid));
  }
  return t;
}

struct Forward {
  Eigen::MatrixXd unit;   // d_out x B
  Eigen::VectorXd norms;  // B
};

Forward forward(const Eigen::MatrixXd& w, const Eigen::MatrixXd& x, Precision precision) {
  Forward f;
  const Eigen::MatrixXd z = w * x;
  f.norms = z.colwise().norm().transpose();
  f.unit = z;
  for (Eigen::Index k = 0; k < z.cols(); ++k) {
    if (!(f.norms(k) > 0.0)) throw Error(ErrorCode::numeric, "projection collapsed to zero");
    f.unit.col(k) /= f.norms(k);
  }
  if (precision == Precision::mixed) f.unit = f.unit.cast<float>().cast<double>();
  return f;
}

// Backprop through z -> z / |z|, then through z = W x.
Eigen::MatrixXd grad_weights(const Forward& f, const Eigen::MatrixXd& grad_unit, const Eigen::MatrixXd& x) {
  Eigen::MatrixXd gz = grad_unit;
  for (Eigen::Index k = 0; k < gz.cols(); ++k) {
    const double proj = f.unit.col(k).dot(grad_unit.col(k));
    gz.col(k) = (grad_unit.col(k) - proj * f.unit.col(k)) / f.norms(k);
  }
  return gz * x.transpose();
}

struct StepResult {
  double loss_sum;
  Eigen::MatrixXd grad_image_w;
  Eigen::MatrixXd grad_text_w;
  double grad_log_scale;
};

StepResult step_gradients(const ProjectionHeads& h, const BatchTensors& t, const TrainConfig& config,
                          bool with_gradients) {
  const Forward fi = forward(h.image, t.image, config.precision);
  const Forward ft = forward(h.text, t.text, config.precision);
  LossOptions opts;
  opts.compute_gradients = with_gradients;
  if (config.label_masked) opts.mask_labels = t.labels;
  const double scale = h.logit_scale();
  const auto loss = contrastive_loss(fi.unit.transpose(), ft.unit.transpose(), scale, opts);
  StepResult r{loss.value, {}, {}, 0.0};
  if (with_gradients) {
    const double inv_b = 1.0 / static_cast<double>(t.image.cols());
    r.grad_image_w = grad_weights(fi, loss.grad_image.transpose() * inv_b, t.image);
    r.grad_text_w = grad_weights(ft, loss.grad_text.transpose() * inv_b, t.text);
    r.grad_log_scale = scale * loss.grad_logit_scale * inv_b;
  }
  return r;
}

struct AdamState {
  Eigen::MatrixXd m, v;
  explicit AdamState(const Eigen::MatrixXd& like)
      : m(Eigen::MatrixXd::Zero(like.rows(), like.cols())), v(Eigen::MatrixXd::Zero(like.rows(), like.cols())) {}
};

void update(Eigen::MatrixXd& param, const Eigen::MatrixXd& grad, AdamState& s, const TrainConfig& c, double lr,
            std::size_t t, double weight_decay) {
  if (c.optimizer == OptimizerKind::adamw) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    s.m = b1 * s.m + (1 - b1) * grad;
    s.v = b2 * s.v + (1 - b2) * grad.cwiseProduct(grad);
    const double c1 = 1 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1 - std::pow(b2, static_cast<double>(t));
    const Eigen::MatrixXd step = (s.m / c1).array() / ((s.v / c2).array().sqrt() + eps);
    param -= lr * (step + weight_decay * param);
  } else {
    s.m = c.momentum * s.m + grad + weight_decay * param;
    param -= lr * s.m;
  }
}

double selection_accuracy(const ProjectionHeads& h, const SelectionData& sel, const TrainConfig& config) {
  ProbeConfig pc;
  pc.epochs = config.selection_probe_epochs;
  pc.seed = config.seed;
  const auto probe = train_linear_probe(project_images(h, sel.train_features), sel.train_labels,
                                        sel.class_order, pc);
  const Eigen::MatrixXd scores = predict_all(probe.probe, project_images(h, sel.val_features));
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    if (static_cast<int>(topk_indices(scores.row(i).transpose(), 1)[0]) ==
        sel.val_labels[static_cast<std::size_t>(i)]) {
      ++hits;
    }
  }
  return scores.rows() ? static_cast<double>(hits) / static_cast<double>(scores.rows()) : 0.0;
}

}  // namespace

FinetuneResult finetune(const ProjectionHeads& initial, const PairDataset& pairs, const EmbeddingTable& image_base,
                        const EmbeddingTable& text_base, const TrainConfig& config, const SelectionData* selection) {
  if (pairs.pairs.empty()) throw Error(ErrorCode::precondition, "cannot fine-tune on an empty pair set");
  std::unordered_map<std::string, int> label_of;
  {
    std::unordered_map<std::string, int> label_ids;
    for (const auto& p : pairs.pairs) {
      auto [it, _] = label_ids.emplace(p.label, static_cast<int>(label_ids.size()));
      label_of.emplace(p.image_id, it->second);
    }
  }
  const Eigen::Index d_in = initial.image.cols();
  FinetuneResult result;
  result.heads = initial;
  result.batch_size = config.batch_size;
  ProjectionHeads& h = result.heads;

  const auto epoch0 = sample_epoch_batches(pairs, config.batch_size, substream_seed(config.seed, 0));
  auto mean_loss = [&](const ProjectionHeads& heads) {
    double total = 0.0;
    for (const auto& b : epoch0) {
      total += step_gradients(heads, gather(b, image_base, text_base, label_of, d_in), config, false).loss_sum /
               static_cast<double>(b.image_ids.size());
    }
    return total / static_cast<double>(epoch0.size());
  };
  result.initial_loss = mean_loss(h);

  const std::size_t total_steps = config.epochs * epoch0.size();
  AdamState si(h.image), st(h.text);
  double m_scale = 0.0, v_scale = 0.0;

  std::optional<ProjectionHeads> best;
  if (selection) {
    result.best_val_accuracy = selection_accuracy(h, *selection, config);
    result.best_epoch = 0;
    best = h;
  }

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs && !result.diverged; ++epoch) {
    const auto batches =
        epoch == 0 ? epoch0 : sample_epoch_batches(pairs, config.batch_size, substream_seed(config.seed, epoch));
    for (const auto& batch : batches) {
      const auto tensors = gather(batch, image_base, text_base, label_of, d_in);
      StepResult g;
      try {
        g = step_gradients(h, tensors, config, true);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::numeric) throw;
        result.diverged = true;
        break;
      }
      if (!std::isfinite(g.loss_sum) || !g.grad_image_w.allFinite() || !g.grad_text_w.allFinite()) {
        result.diverged = true;
        break;
      }
      double lr = config.learning_rate;
      if (config.cosine_decay && total_steps > 0) {
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
      }
      const double b = static_cast<double>(batch.image_ids.size());
      result.log.push_back({step, epoch, g.loss_sum, g.loss_sum / b, h.logit_scale(), lr});
      ++step;
      const ProjectionHeads last_good = h;
      update(h.image, g.grad_image_w, si, config, lr, step, config.weight_decay);
      update(h.text, g.grad_text_w, st, config, lr, step, config.weight_decay);
      if (config.logit_scale_learnable) {
        Eigen::MatrixXd ls(1, 1), gs(1, 1);
        ls(0, 0) = h.log_logit_scale;
        gs(0, 0) = g.grad_log_scale;
        AdamState ss(ls);
        ss.m(0, 0) = m_scale;
        ss.v(0, 0) = v_scale;
        update(ls, gs, ss, config, lr, step, 0.0);
        m_scale = ss.m(0, 0);
        v_scale = ss.v(0, 0);
        h.log_logit_scale = std::min(ls(0, 0), std::log(config.logit_scale_max));
      }
      if (!h.image.allFinite() || !h.text.allFinite() || !std::isfinite(h.log_logit_scale)) {
        h = last_good;
        result.diverged = true;
        break;
      }
    }
    if (selection && !result.diverged) {
      const double acc = selection_accuracy(h, *selection, config);
      if (acc > *result.best_val_accuracy) {
        result.best_val_accuracy = acc;
        result.best_epoch = epoch + 1;
        best = h;
      }
    }
  }
  result.steps = step;
  if (best) h = *best;
  try {
    result.final_loss = mean_loss(h);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::numeric) throw;
    result.final_loss = std::numeric_limits<double>::quiet_NaN();
  }
  return result;
}

}  // namespace gist
