#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "gist/util.hpp"

namespace gist {

enum class Modality { image, text };

const char* to_string(Modality m);
Modality modality_from_string(const std::string& s);

struct EmbeddingVector {
  std::vector<double> values;
  bool normalized = false;
  Modality source = Modality::image;
  std::string model_id;

  std::size_t dim() const noexcept { return values.size(); }
};

double l2_norm(std::span<const double> v);

/// Unit-norm copy of `v`. Throws precondition on a zero (or non-finite) vector.
EmbeddingVector l2_normalize(const EmbeddingVector& v);

/// Cosine similarity computed in double precision. When both inputs carry the
/// normalized flag the plain dot product is returned.
double cosine_similarity(const EmbeddingVector& u, const EmbeddingVector& v);
double cosine_similarity(std::span<const double> u, std::span<const double> v);

enum class BackendKind { pretrained_vlm, synthetic };

struct BackendDescriptor {
  std::string model_id;
  std::size_t dim = 0;
  bool trainable = false;
  BackendKind kind = BackendKind::synthetic;
  // Text inputs longer than this many whitespace tokens are truncated with a
  // warning.
  std::size_t context_limit = 77;
};

struct ImageInput {
  std::string image_id;
  std::filesystem::path path;
  // Ground-truth label; only the class-correlated synthetic backend reads it.
  std::string label_hint;
};

/// Uniform interface over f_I / f_T. Implementations are immutable after
/// construction and safe to call concurrently. Outputs are unnormalized and in
/// input order.
class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual const BackendDescriptor& descriptor() const = 0;
  virtual std::vector<EmbeddingVector> encode_images(
      std::span<const ImageInput> images) const = 0;
  virtual std::vector<EmbeddingVector> encode_texts(
      std::span<const std::string> texts) const = 0;
};

struct SyntheticConfig {
  std::string model_id = "synthetic-16";
  std::size_t dim = 16;
  std::uint64_t seed = 0;
  // Class-correlated mode: when `classes` is non-empty, image vectors get a
  // per-class image centroid (scaled by image_signal) keyed by label_hint, and
  // text vectors get a per-class text centroid (scaled by text_signal) for the
  // longest class name found in the text. Noise is unit-variance per dim.
  std::vector<std::string> classes;
  double image_signal = 0.0;
  double text_signal = 0.0;
  // Shared nuisance subspace added to images only (class independent).
  std::size_t nuisance_dims = 0;
  double nuisance_scale = 0.0;
};

/// Deterministic encoder: each vector is a Gaussian expansion of the SHA-256
/// of the input content (file bytes or UTF-8 text), seeded by config.seed.
class SyntheticEncoder final : public Encoder {
 public:
  explicit SyntheticEncoder(SyntheticConfig config);

  const BackendDescriptor& descriptor() const override { return desc_; }
  std::vector<EmbeddingVector> encode_images(
      std::span<const ImageInput> images) const override;
  std::vector<EmbeddingVector> encode_texts(
      std::span<const std::string> texts) const override;

  const SyntheticConfig& config() const { return config_; }

 private:
  std::vector<double> expand(const std::string& content_hash,
                             std::uint64_t salt) const;
  std::vector<double> centroid(std::size_t class_index,
                               std::uint64_t salt) const;
  std::optional<std::size_t> class_in_text(const std::string& text) const;

  SyntheticConfig config_;
  BackendDescriptor desc_;
  std::vector<std::vector<double>> image_centroids_;
  std::vector<std::vector<double>> text_centroids_;
  std::vector<std::vector<double>> nuisance_basis_;
};

enum class CacheDtype : std::uint32_t { float32 = 1, float64 = 2 };

struct CacheKey {
  std::string model_id;
  std::string content_hash;
  Modality source = Modality::image;
};

/// Append-only embedding store at `<root>/<model_id>/{vectors.bin,index.jsonl}`.
///
/// vectors.bin layout (little-endian): a 32-byte header
///   magic "GISTEMB\0" (8) | version u32 | dim u32 | dtype u32 | reserved u32 |
///   count u64
/// followed by `count` contiguous records of `dim` values of `dtype`.
/// index.jsonl maps {"content_hash", "source"} to a record "offset" (index).
///
/// Concurrent readers are allowed; writers are serialized.
class EmbeddingCache {
 public:
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::size_t kHeaderSize = 32;

  EmbeddingCache(std::filesystem::path root, std::string model_id,
                 std::size_t dim, CacheDtype dtype = CacheDtype::float32);

  std::optional<EmbeddingVector> get(const CacheKey& key) const;
  /// Stores `value`. Re-putting identical bytes is a no-op; a different value
  /// for an existing key throws conflict.
  void put(const CacheKey& key, const EmbeddingVector& value);

  std::size_t size() const;
  std::size_t dim() const noexcept { return dim_; }
  CacheDtype dtype() const noexcept { return dtype_; }
  const std::filesystem::path& directory() const noexcept { return dir_; }

  /// Rounds values through the storage dtype, i.e. what get() would return.
  std::vector<double> quantize(std::span<const double> values) const;

 private:
  std::string encode_record(std::span<const double> values) const;
  std::optional<std::string> read_record(std::uint64_t offset) const;
  void load_index();

  std::filesystem::path dir_;
  std::string model_id_;
  std::size_t dim_;
  CacheDtype dtype_;
  mutable std::shared_mutex mutex_;
  std::map<std::pair<std::string, std::string>, std::uint64_t> index_;
  std::uint64_t count_ = 0;
};

/// Encoder decorator that consults an EmbeddingCache before the wrapped
/// encoder and stores misses. Returned values always pass through the cache
/// dtype so cold and warm runs agree bit for bit.
class CachedEncoder final : public Encoder {
 public:
  CachedEncoder(std::shared_ptr<const Encoder> inner,
                std::shared_ptr<EmbeddingCache> cache);

  const BackendDescriptor& descriptor() const override {
    return inner_->descriptor();
  }
  std::vector<EmbeddingVector> encode_images(
      std::span<const ImageInput> images) const override;
  std::vector<EmbeddingVector> encode_texts(
      std::span<const std::string> texts) const override;

  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }

 private:
  std::shared_ptr<const Encoder> inner_;
  std::shared_ptr<EmbeddingCache> cache_;
  mutable std::mutex stats_mutex_;
  mutable std::size_t hits_ = 0;
  mutable std::size_t misses_ = 0;
};

/// Backend for a real vision-language checkpoint whose features were exported
/// by an external inference runtime into the cache layout above, under
/// `$GIST_MODEL_DIR/<model_id>/`. Lookups are by content hash; a missing entry
/// is an error naming the input.
class FeatureStoreEncoder final : public Encoder {
 public:
  FeatureStoreEncoder(std::filesystem::path model_dir, std::string model_id,
                      std::size_t dim);

  const BackendDescriptor& descriptor() const override { return desc_; }
  std::vector<EmbeddingVector> encode_images(
      std::span<const ImageInput> images) const override;
  std::vector<EmbeddingVector> encode_texts(
      std::span<const std::string> texts) const override;

 private:
  BackendDescriptor desc_;
  std::shared_ptr<EmbeddingCache> store_;
};

/// Content hash used for cache keys.
std::string image_content_hash(const ImageInput& image);
std::string text_content_hash(const std::string& text);

/// Builds a backend from a JSON spec:
///   {"kind": "synthetic", "model_id", "dim", "seed", "classes",
///    "image_signal", "text_signal", "nuisance_dims", "nuisance_scale"}
///   {"kind": "pretrained-vlm", "model_id", "dim", "model_dir"?}
/// A bare string is treated as a model id: "synthetic-<d>" or a pretrained
/// feature store under $GIST_MODEL_DIR.
std::shared_ptr<const Encoder> make_encoder(const json& spec);

/// Wraps `encoder` with the cache at `<cache_root>/<model_id>`.
std::shared_ptr<const Encoder> with_cache(std::shared_ptr<const Encoder> encoder,
                                          const std::filesystem::path& cache_root);

}  // namespace gist
