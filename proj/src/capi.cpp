#include "gist/gist.h"

#include <cstdlib>
#include <cstring>
#include <mutex>
#include <new>
#include <string>

#include "gist/captions.hpp"
#include "gist/commands.hpp"
#include "gist/data_ingest.hpp"
#include "gist/error.hpp"
#include "gist/eval.hpp"
#include "gist/matcher.hpp"
#include "gist/pipeline.hpp"
#include "gist/trainer.hpp"

struct gist_manifest {
  gist::DatasetManifest value;
};

struct gist_backend {
  std::shared_ptr<const gist::Encoder> encoder;
};

struct gist_caption_store {
  gist::CaptionStore value;
};

namespace {

thread_local std::string last_error;

gist_status fail(gist_status status, const std::string& message) {
  last_error = message;
  return status;
}

template <typename F>
gist_status guard(F&& body) {
  last_error.clear();
  try {
    body();
    return GIST_OK;
  } catch (const gist::Error& e) {
    return fail(static_cast<gist_status>(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(GIST_E_PARSE, e.what());
  } catch (const std::bad_alloc&) {
    return fail(GIST_E_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(GIST_E_INTERNAL, e.what());
  } catch (...) {
    return fail(GIST_E_INTERNAL, "unknown error");
  }
}

void require(const void* p, const char* name) {
  if (!p) throw gist::Error(gist::ErrorCode::invalid_argument, std::string(name) + " is NULL");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

std::vector<gist::ImageRecord> split_records(const gist::DatasetManifest& m, gist_split split) {
  switch (split) {
    case GIST_SPLIT_TRAIN: return m.in_split(gist::Split::train);
    case GIST_SPLIT_VAL: return m.in_split(gist::Split::val);
    case GIST_SPLIT_TEST: return m.in_split(gist::Split::test);
    case GIST_SPLIT_ALL: return m.records;
  }
  throw gist::Error(gist::ErrorCode::invalid_argument, "unknown split");
}

Eigen::MatrixXd view(const double* data, std::size_t rows, std::size_t cols) {
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void store_rows(const Eigen::MatrixXd& m, double* out) {
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(out, m.rows(), m.cols()) = m;
}

void copy_vectors(const std::vector<gist::EmbeddingVector>& vecs, std::size_t dim, double* out) {
  for (std::size_t i = 0; i < vecs.size(); ++i) {
    std::memcpy(out + i * dim, vecs[i].values.data(), dim * sizeof(double));
  }
}

struct WarningTarget {
  std::mutex mutex;
  gist_warning_fn fn = nullptr;
  void* user = nullptr;
};

WarningTarget& warning_target() {
  static WarningTarget t;
  return t;
}

}  // namespace

extern "C" {

const char* gist_version(void) { return "1.0.0"; }

const char* gist_status_name(gist_status status) {
  switch (status) {
    case GIST_OK: return "ok";
    case GIST_E_INVALID_ARGUMENT: return "invalid_argument";
    case GIST_E_PARSE: return "parse";
    case GIST_E_IO: return "io";
    case GIST_E_NOT_FOUND: return "not_found";
    case GIST_E_DIMENSION_MISMATCH: return "dimension_mismatch";
    case GIST_E_PRECONDITION: return "precondition";
    case GIST_E_PROVIDER: return "provider";
    case GIST_E_NUMERIC: return "numeric";
    case GIST_E_CONFIG: return "config";
    case GIST_E_STAGE: return "stage";
    case GIST_E_CONFLICT: return "conflict";
    case GIST_E_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* gist_last_error(void) { return last_error.c_str(); }

void gist_string_free(char* s) { std::free(s); }

void gist_set_warning_handler(gist_warning_fn fn, void* user) {
  auto& t = warning_target();
  {
    std::lock_guard lock(t.mutex);
    t.fn = fn;
    t.user = user;
  }
  if (!fn) {
    gist::set_warning_sink(nullptr);
    return;
  }
  gist::set_warning_sink([](const std::string& msg) {
    auto& target = warning_target();
    std::lock_guard lock(target.mutex);
    if (target.fn) target.fn(msg.c_str(), target.user);
  });
}

// ---- manifests

gist_status gist_manifest_load(const char* path, gist_manifest** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    *out = new gist_manifest{gist::load_manifest(path)};
  });
}

gist_status gist_manifest_parse(const char* text, const char* base_dir, gist_manifest** out) {
  return guard([&] {
    require(text, "text");
    require(out, "out");
    *out = new gist_manifest{gist::parse_manifest(text, base_dir ? base_dir : "")};
  });
}

void gist_manifest_free(gist_manifest* manifest) { delete manifest; }

gist_status gist_manifest_save(const gist_manifest* manifest, const char* path) {
  return guard([&] {
    require(manifest, "manifest");
    require(path, "path");
    gist::save_manifest(manifest->value, path);
  });
}

gist_status gist_manifest_count(const gist_manifest* manifest, gist_split split, size_t* out) {
  return guard([&] {
    require(manifest, "manifest");
    require(out, "out");
    *out = split == GIST_SPLIT_ALL ? manifest->value.records.size() : split_records(manifest->value, split).size();
  });
}

gist_status gist_manifest_class_count(const gist_manifest* manifest, size_t* out) {
  return guard([&] {
    require(manifest, "manifest");
    require(out, "out");
    *out = manifest->value.classes.size();
  });
}

gist_status gist_manifest_class_name(const gist_manifest* manifest, size_t index, char** out) {
  return guard([&] {
    require(manifest, "manifest");
    require(out, "out");
    if (index >= manifest->value.classes.size()) {
      throw gist::Error(gist::ErrorCode::invalid_argument, "class index out of range");
    }
    *out = dup_string(manifest->value.classes[index]);
  });
}

gist_status gist_manifest_to_jsonl(const gist_manifest* manifest, char** out) {
  return guard([&] {
    require(manifest, "manifest");
    require(out, "out");
    *out = dup_string(gist::serialize_manifest(manifest->value));
  });
}

gist_status gist_manifest_kshot(const gist_manifest* manifest, size_t k, uint64_t seed, int clamp,
                                gist_manifest** out) {
  return guard([&] {
    require(manifest, "manifest");
    require(out, "out");
    if (k < 1) throw gist::Error(gist::ErrorCode::invalid_argument, "k must be >= 1");
    *out = new gist_manifest{gist::sample_kshot(manifest->value, {k, seed, clamp != 0})};
  });
}

// ---- backends

gist_status gist_backend_create(const char* spec_json, const char* cache_root, gist_backend** out) {
  return guard([&] {
    require(spec_json, "spec_json");
    require(out, "out");
    gist::json spec;
    try {
      spec = gist::json::parse(spec_json);
    } catch (const gist::json::exception&) {
      spec = std::string(spec_json);  // bare model id
    }
    auto enc = gist::make_encoder(spec);
    if (cache_root && *cache_root) enc = gist::with_cache(enc, cache_root);
    *out = new gist_backend{enc};
  });
}

gist_status gist_backend_with_heads(const gist_backend* base, const char* heads_path, gist_backend** out) {
  return guard([&] {
    require(base, "base");
    require(heads_path, "heads_path");
    require(out, "out");
    *out = new gist_backend{std::make_shared<gist::ProjectedEncoder>(base->encoder, gist::load_heads(heads_path))};
  });
}

void gist_backend_free(gist_backend* backend) { delete backend; }

gist_status gist_backend_dim(const gist_backend* backend, size_t* out) {
  return guard([&] {
    require(backend, "backend");
    require(out, "out");
    *out = backend->encoder->descriptor().dim;
  });
}

gist_status gist_backend_model_id(const gist_backend* backend, char** out) {
  return guard([&] {
    require(backend, "backend");
    require(out, "out");
    *out = dup_string(backend->encoder->descriptor().model_id);
  });
}

gist_status gist_backend_encode_texts(const gist_backend* backend, const char* const* texts, size_t count,
                                      double* out) {
  return guard([&] {
    require(backend, "backend");
    if (count == 0) return;
    require(texts, "texts");
    require(out, "out");
    std::vector<std::string> in;
    for (size_t i = 0; i < count; ++i) {
      require(texts[i], "texts[i]");
      in.emplace_back(texts[i]);
    }
    copy_vectors(backend->encoder->encode_texts(in), backend->encoder->descriptor().dim, out);
  });
}

gist_status gist_backend_encode_manifest(const gist_backend* backend, const gist_manifest* manifest,
                                         gist_split split, double* out) {
  return guard([&] {
    require(backend, "backend");
    require(manifest, "manifest");
    const auto records = split_records(manifest->value, split);
    if (records.empty()) return;
    require(out, "out");
    std::vector<gist::ImageInput> inputs;
    for (const auto& r : records) inputs.push_back(manifest->value.image_input(r));
    copy_vectors(backend->encoder->encode_images(inputs), backend->encoder->descriptor().dim, out);
  });
}

// ---- captions

gist_status gist_captions_load(const char* path, gist_caption_store** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    *out = new gist_caption_store{gist::load_caption_store(path)};
  });
}

void gist_captions_free(gist_caption_store* store) { delete store; }

gist_status gist_captions_save(const gist_caption_store* store, const char* path) {
  return guard([&] {
    require(store, "store");
    require(path, "path");
    gist::save_caption_store(store->value, path);
  });
}

gist_status gist_captions_count(const gist_caption_store* store, size_t* out) {
  return guard([&] {
    require(store, "store");
    require(out, "out");
    *out = store->value.records.size();
  });
}

gist_status gist_captions_apply_verdicts(gist_caption_store* store, const char* sidecar_path) {
  return guard([&] {
    require(store, "store");
    require(sidecar_path, "sidecar_path");
    store->value = gist::apply_verdicts(store->value, gist::load_verdicts(sidecar_path));
  });
}

gist_status gist_review_captions(const gist_caption_store* store, const char* sidecar_path, gist_review_fn decide,
                                 void* user, char** progress_json) {
  return guard([&] {
    require(store, "store");
    require(sidecar_path, "sidecar_path");
    require(reinterpret_cast<const void*>(decide), "decide");
    const auto progress = gist::review_captions(
        store->value, sidecar_path, [&](const gist::CaptionRecord& r, std::size_t index, std::size_t total) {
          switch (decide(r.caption_id.c_str(), r.label.c_str(), r.long_text.c_str(), index, total, user)) {
            case GIST_REVIEW_KEEP: return gist::ReviewAction::keep;
            case GIST_REVIEW_DISCARD: return gist::ReviewAction::discard;
            default: return gist::ReviewAction::quit;
          }
        });
    if (progress_json) {
      *progress_json = dup_string(gist::json{{"reviewed", progress.reviewed},
                                             {"already_done", progress.already_done},
                                             {"remaining", progress.remaining},
                                             {"quit", progress.quit}}
                                      .dump());
    }
  });
}

// ---- numerics

gist_status gist_l2_normalize(const double* in, size_t dim, double* out) {
  return guard([&] {
    require(in, "in");
    require(out, "out");
    gist::EmbeddingVector v;
    v.values.assign(in, in + dim);
    const auto n = gist::l2_normalize(v);
    std::memcpy(out, n.values.data(), dim * sizeof(double));
  });
}

gist_status gist_cosine_similarity(const double* a, const double* b, size_t dim, double* out) {
  return guard([&] {
    require(a, "a");
    require(b, "b");
    require(out, "out");
    *out = gist::cosine_similarity(std::span<const double>(a, dim), std::span<const double>(b, dim));
  });
}

gist_status gist_contrastive_loss(const double* image, const double* text, size_t batch, size_t dim,
                                  double logit_scale, double* loss, double* grad_image, double* grad_text,
                                  double* grad_logit_scale) {
  return guard([&] {
    require(image, "image");
    require(text, "text");
    require(loss, "loss");
    gist::LossOptions opts;
    opts.compute_gradients = grad_image || grad_text || grad_logit_scale;
    const auto r = gist::contrastive_loss(view(image, batch, dim), view(text, batch, dim), logit_scale, opts);
    *loss = r.value;
    if (grad_image) store_rows(r.grad_image, grad_image);
    if (grad_text) store_rows(r.grad_text, grad_text);
    if (grad_logit_scale) *grad_logit_scale = r.grad_logit_scale;
  });
}

gist_status gist_match_top_n(const double* image, size_t dim, const double* candidates,
                             const char* const* candidate_ids, size_t count, size_t n, size_t* out_indices,
                             double* out_scores, size_t* out_count) {
  return guard([&] {
    require(image, "image");
    require(out_indices, "out_indices");
    require(out_count, "out_count");
    if (count > 0) {
      require(candidates, "candidates");
      require(candidate_ids, "candidate_ids");
    }
    gist::EmbeddingVector img;
    img.values.assign(image, image + dim);
    std::vector<gist::CaptionCandidate> cands;
    std::map<std::string, std::size_t> position;
    for (size_t i = 0; i < count; ++i) {
      require(candidate_ids[i], "candidate_ids[i]");
      gist::CaptionCandidate c;
      c.caption_id = candidate_ids[i];
      c.embedding.values.assign(candidates + i * dim, candidates + (i + 1) * dim);
      position[c.caption_id] = i;
      cands.push_back(std::move(c));
    }
    const auto a = gist::match_image_to_captions(img, cands, n);
    for (size_t i = 0; i < a.ranked.size(); ++i) {
      out_indices[i] = position.at(a.ranked[i].caption_id);
      if (out_scores) out_scores[i] = a.ranked[i].score;
    }
    *out_count = a.ranked.size();
  });
}

gist_status gist_topk_accuracy(const double* scores, size_t rows, size_t classes, const int* labels, size_t k,
                               double* out) {
  return guard([&] {
    require(out, "out");
    if (rows > 0) {
      require(scores, "scores");
      require(labels, "labels");
    }
    *out = gist::topk_accuracy(view(scores, rows, classes), std::span<const int>(labels, rows), k);
  });
}

gist_status gist_bootstrap_accuracy(const double* scores, size_t rows, size_t classes, const int* labels, size_t k,
                                    size_t resamples, uint64_t seed, size_t threads, double* mean,
                                    double* std_dev) {
  return guard([&] {
    require(mean, "mean");
    require(std_dev, "std_dev");
    if (rows > 0) {
      require(scores, "scores");
      require(labels, "labels");
    }
    gist::BootstrapConfig bc{resamples, seed, threads == 0 ? 1 : threads};
    const auto r = gist::bootstrap_accuracy(view(scores, rows, classes), std::span<const int>(labels, rows), bc, k);
    *mean = r.mean;
    *std_dev = r.std;
  });
}

gist_status gist_aggregate_kshot(const double* accuracies, size_t count, size_t expected_runs, int population,
                                 double* mean, double* std_dev) {
  return guard([&] {
    require(mean, "mean");
    require(std_dev, "std_dev");
    if (count > 0) require(accuracies, "accuracies");
    const auto r = gist::aggregate_kshot(std::span<const double>(accuracies, count), expected_runs,
                                         population ? gist::StdKind::population : gist::StdKind::sample);
    *mean = r.mean;
    *std_dev = r.std;
  });
}

gist_status gist_format_cell(double mean, double std_dev, char* buf, size_t buf_len) {
  return guard([&] {
    require(buf, "buf");
    const std::string cell = gist::format_cell(mean, std_dev);
    if (buf_len < cell.size() + 1) {
      throw gist::Error(gist::ErrorCode::invalid_argument,
                        "buffer too small: need " + std::to_string(cell.size() + 1) + " bytes");
    }
    std::memcpy(buf, cell.c_str(), cell.size() + 1);
  });
}

// ---- commands

gist_status gist_command(const char* name, const char* options_json, char** result_json) {
  return guard([&] {
    require(name, "name");
    require(result_json, "result_json");
    const auto options = options_json && *options_json ? gist::json::parse(options_json) : gist::json::object();
    *result_json = dup_string(gist::run_command(name, options).dump());
  });
}

gist_status gist_run_pipeline(const char* config_path, gist_stage_fn on_stage, void* user, char** report_json) {
  return guard([&] {
    require(config_path, "config_path");
    const auto config = gist::load_pipeline_config(config_path);
    gist::StageObserver observer;
    if (on_stage) {
      observer = [&](const gist::StageRecord& r) { on_stage(r.stage.c_str(), r.setting.c_str(), r.cache_hit, user); };
    }
    const auto result = gist::run_pipeline(config, observer);
    if (report_json) {
      gist::json out = gist::to_json(result.report);
      out["table"] = gist::render_report(result.report, gist::ReportFormat::table_text);
      out["report_path"] = result.report_path.string();
      out["manifest_path"] = result.manifest_path.string();
      out["cache_hits"] = result.cache_hits();
      out["stages"] = result.stages.size();
      *report_json = dup_string(out.dump());
    }
  });
}

}  // extern "C"
