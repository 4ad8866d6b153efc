#include "gist/embedding.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>

#include "gist/error.hpp"

namespace gist {

static_assert(std::endian::native == std::endian::little,
              "embedding cache I/O assumes a little-endian host");

const char* to_string(Modality m) {
  return m == Modality::image ? "image" : "text";
}

Modality modality_from_string(const std::string& s) {
  if (s == "image") return Modality::image;
  if (s == "text") return Modality::text;
  throw Error(ErrorCode::invalid_argument, "unknown modality '" + s + "'");
}

double l2_norm(std::span<const double> v) {
  double sum = 0.0;
  for (double x : v) sum += x * x;
  return std::sqrt(sum);
}

EmbeddingVector l2_normalize(const EmbeddingVector& v) {
  const double norm = l2_norm(v.values);
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    throw Error(ErrorCode::precondition,
                "cannot normalize a zero or non-finite vector");
  }
  EmbeddingVector out = v;
  for (double& x : out.values) x /= norm;
  out.normalized = true;
  return out;
}

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw Error(ErrorCode::dimension_mismatch,
                "cosine_similarity: dimensions " + std::to_string(u.size()) +
                    " and " + std::to_string(v.size()));
  }
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (!(uu > 0.0) || !(vv > 0.0)) {
    throw Error(ErrorCode::precondition, "cosine_similarity: zero vector");
  }
  return std::clamp(dot / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

double cosine_similarity(const EmbeddingVector& u, const EmbeddingVector& v) {
  if (u.normalized && v.normalized) {
    if (u.dim() != v.dim()) {
      throw Error(ErrorCode::dimension_mismatch,
                  "cosine_similarity: dimensions " + std::to_string(u.dim()) +
                      " and " + std::to_string(v.dim()));
    }
    double dot = 0.0;
    for (std::size_t i = 0; i < u.dim(); ++i) dot += u.values[i] * v.values[i];
    return std::clamp(dot, -1.0, 1.0);
  }
  return cosine_similarity(std::span<const double>(u.values),
                           std::span<const double>(v.values));
}

// ---------------------------------------------------------------------------
// Synthetic backend

namespace {
constexpr std::uint64_t kImageSalt = 0x1111;
constexpr std::uint64_t kTextSalt = 0x2222;
constexpr std::uint64_t kImageCentroidSalt = 0x3333;
constexpr std::uint64_t kTextCentroidSalt = 0x4444;
constexpr std::uint64_t kNuisanceSalt = 0x5555;
constexpr std::uint64_t kNuisanceCoefSalt = 0x6666;

std::vector<double> unit_gaussian(std::uint64_t seed, std::size_t dim) {
  GaussianStream g(seed);
  std::vector<double> v(dim);
  for (auto& x : v) x = g.next();
  const double n = l2_norm(v);
  for (auto& x : v) x /= n;
  return v;
}
}  // namespace

SyntheticEncoder::SyntheticEncoder(SyntheticConfig config)
    : config_(std::move(config)) {
  if (config_.dim == 0) {
    throw Error(ErrorCode::invalid_argument, "synthetic backend needs dim > 0");
  }
  desc_.model_id = config_.model_id;
  desc_.dim = config_.dim;
  desc_.trainable = false;
  desc_.kind = BackendKind::synthetic;
  for (std::size_t c = 0; c < config_.classes.size(); ++c) {
    image_centroids_.push_back(centroid(c, kImageCentroidSalt));
    text_centroids_.push_back(centroid(c, kTextCentroidSalt));
  }
  for (std::size_t k = 0; k < config_.nuisance_dims; ++k) {
    nuisance_basis_.push_back(unit_gaussian(
        substream_seed(config_.seed ^ kNuisanceSalt, k), config_.dim));
  }
}

std::vector<double> SyntheticEncoder::expand(const std::string& content_hash,
                                             std::uint64_t salt) const {
  GaussianStream g(substream_seed(config_.seed ^ salt, seed_from_hex(content_hash)));
  std::vector<double> v(config_.dim);
  for (auto& x : v) x = g.next();
  return v;
}

std::vector<double> SyntheticEncoder::centroid(std::size_t class_index,
                                               std::uint64_t salt) const {
  return unit_gaussian(substream_seed(config_.seed ^ salt, class_index),
                       config_.dim);
}

std::optional<std::size_t> SyntheticEncoder::class_in_text(
    const std::string& text) const {
  std::optional<std::size_t> best;
  for (std::size_t c = 0; c < config_.classes.size(); ++c) {
    const auto& name = config_.classes[c];
    if (name.empty()) continue;
    std::string display = name;
    std::replace(display.begin(), display.end(), '_', ' ');
    if (text.find(name) == std::string::npos && text.find(display) == std::string::npos) continue;
    if (!best || name.size() > config_.classes[*best].size()) best = c;
  }
  return best;
}

std::vector<EmbeddingVector> SyntheticEncoder::encode_images(
    std::span<const ImageInput> images) const {
  std::vector<EmbeddingVector> out;
  out.reserve(images.size());
  for (const auto& image : images) {
    const std::string hash = image_content_hash(image);
    EmbeddingVector v;
    v.values = expand(hash, kImageSalt);
    v.source = Modality::image;
    v.model_id = desc_.model_id;
    if (!config_.classes.empty()) {
      auto it = std::find(config_.classes.begin(), config_.classes.end(),
                          image.label_hint);
      if (it != config_.classes.end()) {
        const auto& mu = image_centroids_[static_cast<std::size_t>(
            it - config_.classes.begin())];
        for (std::size_t i = 0; i < v.values.size(); ++i) {
          v.values[i] += config_.image_signal * mu[i];
        }
      }
      if (!nuisance_basis_.empty()) {
        GaussianStream g(substream_seed(config_.seed ^ kNuisanceCoefSalt,
                                        seed_from_hex(hash)));
        for (const auto& basis : nuisance_basis_) {
          const double coef = config_.nuisance_scale * g.next();
          for (std::size_t i = 0; i < v.values.size(); ++i) {
            v.values[i] += coef * basis[i];
          }
        }
      }
    }
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<EmbeddingVector> SyntheticEncoder::encode_texts(
    std::span<const std::string> texts) const {
  std::vector<EmbeddingVector> out;
  out.reserve(texts.size());
  for (const auto& raw : texts) {
    if (trim(raw).empty()) {
      throw Error(ErrorCode::invalid_argument, "cannot encode an empty text");
    }
    std::string text = raw;
    const auto words = split_words(raw);
    if (words.size() > desc_.context_limit) {
      warn("text truncated to " + std::to_string(desc_.context_limit) +
           " tokens for model " + desc_.model_id);
      text.clear();
      for (std::size_t i = 0; i < desc_.context_limit; ++i) {
        if (i) text += ' ';
        text += words[i];
      }
    }
    EmbeddingVector v;
    v.values = expand(text_content_hash(text), kTextSalt);
    v.source = Modality::text;
    v.model_id = desc_.model_id;
    if (auto c = class_in_text(text)) {
      const auto& mu = text_centroids_[*c];
      for (std::size_t i = 0; i < v.values.size(); ++i) {
        v.values[i] += config_.text_signal * mu[i];
      }
    }
    out.push_back(std::move(v));
  }
  return out;
}

std::string image_content_hash(const ImageInput& image) {
  std::string bytes;
  try {
    bytes = read_file(image.path);
  } catch (const Error&) {
    throw Error(ErrorCode::io, "cannot decode image '" + image.image_id +
                                   "' at " + image.path.string());
  }
  if (bytes.empty()) {
    throw Error(ErrorCode::io, "cannot decode image '" + image.image_id +
                                   "': empty file");
  }
  return sha256_hex(bytes);
}

std::string text_content_hash(const std::string& text) { return sha256_hex(text); }

// ---------------------------------------------------------------------------
// Embedding cache

namespace {
constexpr char kMagic[8] = {'G', 'I', 'S', 'T', 'E', 'M', 'B', '\0'};

std::size_t dtype_size(CacheDtype d) {
  return d == CacheDtype::float32 ? 4 : 8;
}

struct Header {
  std::uint32_t version = EmbeddingCache::kVersion;
  std::uint32_t dim = 0;
  std::uint32_t dtype = 0;
  std::uint64_t count = 0;
};

std::string encode_header(const Header& h) {
  std::string out(EmbeddingCache::kHeaderSize, '\0');
  std::memcpy(out.data(), kMagic, 8);
  std::memcpy(out.data() + 8, &h.version, 4);
  std::memcpy(out.data() + 12, &h.dim, 4);
  std::memcpy(out.data() + 16, &h.dtype, 4);
  // bytes 20..23 reserved
  std::memcpy(out.data() + 24, &h.count, 8);
  return out;
}

std::optional<Header> decode_header(const std::string& bytes) {
  if (bytes.size() < EmbeddingCache::kHeaderSize ||
      std::memcmp(bytes.data(), kMagic, 8) != 0) {
    return std::nullopt;
  }
  Header h;
  std::memcpy(&h.version, bytes.data() + 8, 4);
  std::memcpy(&h.dim, bytes.data() + 12, 4);
  std::memcpy(&h.dtype, bytes.data() + 16, 4);
  std::memcpy(&h.count, bytes.data() + 24, 8);
  return h;
}
}  // namespace

EmbeddingCache::EmbeddingCache(std::filesystem::path root, std::string model_id,
                               std::size_t dim, CacheDtype dtype)
    : dir_(root / model_id), model_id_(std::move(model_id)), dim_(dim),
      dtype_(dtype) {
  const auto bin = dir_ / "vectors.bin";
  if (std::filesystem::exists(bin)) {
    std::ifstream in(bin, std::ios::binary);
    std::string head(kHeaderSize, '\0');
    in.read(head.data(), kHeaderSize);
    auto h = decode_header(head);
    if (!h || h->version != kVersion) {
      throw Error(ErrorCode::parse, "bad embedding cache header in " + bin.string());
    }
    if (dim_ == 0) dim_ = h->dim;
    if (h->dim != dim_) {
      throw Error(ErrorCode::dimension_mismatch,
                  "cache " + bin.string() + " holds d=" + std::to_string(h->dim) +
                      ", expected " + std::to_string(dim_));
    }
    dtype_ = static_cast<CacheDtype>(h->dtype);
    if (dtype_ != CacheDtype::float32 && dtype_ != CacheDtype::float64) {
      throw Error(ErrorCode::parse, "unknown dtype code in " + bin.string());
    }
    const auto file_size = std::filesystem::file_size(bin);
    const std::uint64_t rec = dim_ * dtype_size(dtype_);
    const std::uint64_t available = (file_size - kHeaderSize) / rec;
    count_ = std::min<std::uint64_t>(h->count, available);
    if (count_ != h->count) {
      warn("embedding cache " + bin.string() + " is truncated; using " +
           std::to_string(count_) + " of " + std::to_string(h->count) + " records");
    }
  } else {
    if (dim_ == 0) {
      throw Error(ErrorCode::not_found, "no embedding cache at " + dir_.string());
    }
    Header h;
    h.dim = static_cast<std::uint32_t>(dim_);
    h.dtype = static_cast<std::uint32_t>(dtype_);
    write_file(bin, encode_header(h));
  }
  load_index();
}

void EmbeddingCache::load_index() {
  const auto path = dir_ / "index.jsonl";
  if (!std::filesystem::exists(path)) return;
  const std::string text = read_file(path);
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    if (trim(line).empty()) continue;
    try {
      auto row = json::parse(line);
      const std::uint64_t offset = row.at("offset").get<std::uint64_t>();
      if (offset >= count_) {
        warn("embedding cache index entry past end of vectors.bin; ignored");
        continue;
      }
      index_.emplace(std::make_pair(row.at("content_hash").get<std::string>(),
                                    row.at("source").get<std::string>()),
                     offset);
    } catch (const std::exception&) {
      warn("corrupted embedding cache index line in " + path.string() + "; ignored");
    }
  }
}

std::string EmbeddingCache::encode_record(std::span<const double> values) const {
  std::string out(dim_ * dtype_size(dtype_), '\0');
  for (std::size_t i = 0; i < dim_; ++i) {
    if (dtype_ == CacheDtype::float32) {
      const float f = static_cast<float>(values[i]);
      std::memcpy(out.data() + i * 4, &f, 4);
    } else {
      std::memcpy(out.data() + i * 8, &values[i], 8);
    }
  }
  return out;
}

std::vector<double> EmbeddingCache::quantize(std::span<const double> values) const {
  std::vector<double> out(values.begin(), values.end());
  if (dtype_ == CacheDtype::float32) {
    for (auto& x : out) x = static_cast<double>(static_cast<float>(x));
  }
  return out;
}

std::optional<std::string> EmbeddingCache::read_record(std::uint64_t offset) const {
  const std::size_t rec = dim_ * dtype_size(dtype_);
  std::ifstream in(dir_ / "vectors.bin", std::ios::binary);
  if (!in) return std::nullopt;
  in.seekg(static_cast<std::streamoff>(kHeaderSize + offset * rec));
  std::string bytes(rec, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(rec));
  if (static_cast<std::size_t>(in.gcount()) != rec) return std::nullopt;
  return bytes;
}

std::optional<EmbeddingVector> EmbeddingCache::get(const CacheKey& key) const {
  std::shared_lock lock(mutex_);
  auto it = index_.find({key.content_hash, to_string(key.source)});
  if (it == index_.end()) return std::nullopt;
  auto bytes = read_record(it->second);
  if (!bytes) {
    warn("corrupted embedding cache entry " + key.content_hash + "; treating as miss");
    return std::nullopt;
  }
  EmbeddingVector v;
  v.values.resize(dim_);
  for (std::size_t i = 0; i < dim_; ++i) {
    if (dtype_ == CacheDtype::float32) {
      float f;
      std::memcpy(&f, bytes->data() + i * 4, 4);
      v.values[i] = f;
    } else {
      std::memcpy(&v.values[i], bytes->data() + i * 8, 8);
    }
  }
  v.source = key.source;
  v.model_id = key.model_id.empty() ? model_id_ : key.model_id;
  return v;
}

void EmbeddingCache::put(const CacheKey& key, const EmbeddingVector& value) {
  if (value.dim() != dim_) {
    throw Error(ErrorCode::dimension_mismatch,
                "cache for " + model_id_ + " stores d=" + std::to_string(dim_) +
                    ", got " + std::to_string(value.dim()));
  }
  const std::string record = encode_record(value.values);
  std::unique_lock lock(mutex_);
  auto index_key = std::make_pair(key.content_hash, std::string(to_string(key.source)));
  if (auto it = index_.find(index_key); it != index_.end()) {
    auto existing = read_record(it->second);
    if (existing && *existing == record) return;
    if (existing) {
      throw Error(ErrorCode::conflict,
                  "embedding cache is append-only; key " + key.content_hash +
                      " already holds a different vector");
    }
  }
  const auto bin = dir_ / "vectors.bin";
  {
    std::fstream io(bin, std::ios::binary | std::ios::in | std::ios::out);
    if (!io) throw Error(ErrorCode::io, "cannot open " + bin.string());
    io.seekp(static_cast<std::streamoff>(kHeaderSize + count_ * record.size()));
    io.write(record.data(), static_cast<std::streamsize>(record.size()));
    Header h;
    h.dim = static_cast<std::uint32_t>(dim_);
    h.dtype = static_cast<std::uint32_t>(dtype_);
    h.count = count_ + 1;
    const std::string head = encode_header(h);
    io.seekp(0);
    io.write(head.data(), static_cast<std::streamsize>(head.size()));
    if (!io) throw Error(ErrorCode::io, "write failed on " + bin.string());
  }
  json row = {{"content_hash", key.content_hash},
              {"source", to_string(key.source)},
              {"offset", count_}};
  append_line(dir_ / "index.jsonl", row.dump());
  index_[index_key] = count_;
  ++count_;
}

std::size_t EmbeddingCache::size() const {
  std::shared_lock lock(mutex_);
  return index_.size();
}

// ---------------------------------------------------------------------------

CachedEncoder::CachedEncoder(std::shared_ptr<const Encoder> inner,
                             std::shared_ptr<EmbeddingCache> cache)
    : inner_(std::move(inner)), cache_(std::move(cache)) {
  if (cache_->dim() != inner_->descriptor().dim) {
    throw Error(ErrorCode::dimension_mismatch,
                "cache dimension does not match backend " +
                    inner_->descriptor().model_id);
  }
}

namespace {
template <typename Input, typename HashFn, typename EncodeFn>
std::vector<EmbeddingVector> cached_encode(
    std::span<const Input> inputs, Modality modality, const std::string& model_id,
    EmbeddingCache& cache, HashFn hash_of, EncodeFn encode, std::size_t& hits,
    std::size_t& misses) {
  std::vector<EmbeddingVector> out(inputs.size());
  std::vector<std::string> hashes(inputs.size());
  std::vector<Input> missing;
  std::vector<std::size_t> missing_at;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    hashes[i] = hash_of(inputs[i]);
    if (auto hit = cache.get({model_id, hashes[i], modality})) {
      out[i] = std::move(*hit);
      ++hits;
    } else {
      missing.push_back(inputs[i]);
      missing_at.push_back(i);
    }
  }
  if (!missing.empty()) {
    auto fresh = encode(std::span<const Input>(missing));
    for (std::size_t j = 0; j < fresh.size(); ++j) {
      const std::size_t i = missing_at[j];
      fresh[j].values = cache.quantize(fresh[j].values);
      cache.put({model_id, hashes[i], modality}, fresh[j]);
      out[i] = std::move(fresh[j]);
      ++misses;
    }
  }
  return out;
}
}  // namespace

std::vector<EmbeddingVector> CachedEncoder::encode_images(
    std::span<const ImageInput> images) const {
  std::size_t h = 0, m = 0;
  auto out = cached_encode<ImageInput>(
      images, Modality::image, inner_->descriptor().model_id, *cache_,
      [](const ImageInput& i) { return image_content_hash(i); },
      [&](std::span<const ImageInput> s) { return inner_->encode_images(s); }, h, m);
  std::lock_guard lock(stats_mutex_);
  hits_ += h;
  misses_ += m;
  return out;
}

std::vector<EmbeddingVector> CachedEncoder::encode_texts(
    std::span<const std::string> texts) const {
  for (const auto& t : texts) {
    if (trim(t).empty()) {
      throw Error(ErrorCode::invalid_argument, "cannot encode an empty text");
    }
  }
  std::size_t h = 0, m = 0;
  auto out = cached_encode<std::string>(
      texts, Modality::text, inner_->descriptor().model_id, *cache_,
      [](const std::string& t) { return text_content_hash(t); },
      [&](std::span<const std::string> s) { return inner_->encode_texts(s); }, h, m);
  std::lock_guard lock(stats_mutex_);
  hits_ += h;
  misses_ += m;
  return out;
}

// ---------------------------------------------------------------------------

FeatureStoreEncoder::FeatureStoreEncoder(std::filesystem::path model_dir,
                                         std::string model_id, std::size_t dim) {
  store_ = std::make_shared<EmbeddingCache>(std::move(model_dir), model_id, dim);
  desc_.model_id = std::move(model_id);
  desc_.dim = store_->dim();
  desc_.trainable = false;
  desc_.kind = BackendKind::pretrained_vlm;
}

std::vector<EmbeddingVector> FeatureStoreEncoder::encode_images(
    std::span<const ImageInput> images) const {
  std::vector<EmbeddingVector> out;
  for (const auto& image : images) {
    auto hit = store_->get({desc_.model_id, image_content_hash(image), Modality::image});
    if (!hit) {
      throw Error(ErrorCode::not_found, "image '" + image.image_id +
                                            "' has no exported features for " +
                                            desc_.model_id);
    }
    out.push_back(std::move(*hit));
  }
  return out;
}

std::vector<EmbeddingVector> FeatureStoreEncoder::encode_texts(
    std::span<const std::string> texts) const {
  std::vector<EmbeddingVector> out;
  for (const auto& text : texts) {
    if (trim(text).empty()) {
      throw Error(ErrorCode::invalid_argument, "cannot encode an empty text");
    }
    auto hit = store_->get({desc_.model_id, text_content_hash(text), Modality::text});
    if (!hit) {
      throw Error(ErrorCode::not_found, "text \"" + text.substr(0, 60) +
                                            "\" has no exported features for " +
                                            desc_.model_id);
    }
    out.push_back(std::move(*hit));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::shared_ptr<const Encoder> make_encoder(const json& spec) {
  if (spec.is_string()) {
    const auto id = spec.get<std::string>();
    if (id.rfind("synthetic-", 0) == 0) {
      SyntheticConfig c;
      c.model_id = id;
      try {
        c.dim = std::stoul(id.substr(10));
      } catch (const std::exception&) {
        throw Error(ErrorCode::config, "cannot parse dimension from model id '" + id + "'");
      }
      return std::make_shared<SyntheticEncoder>(c);
    }
    return make_encoder(json{{"kind", "pretrained-vlm"}, {"model_id", id}});
  }
  if (!spec.is_object()) {
    throw Error(ErrorCode::config, "backend spec must be a model id or an object");
  }
  const auto kind = spec.value("kind", std::string("synthetic"));
  if (kind == "synthetic") {
    SyntheticConfig c;
    c.dim = spec.value("dim", std::size_t{16});
    c.seed = spec.value("seed", std::uint64_t{0});
    c.classes = spec.value("classes", std::vector<std::string>{});
    c.image_signal = spec.value("image_signal", 0.0);
    c.text_signal = spec.value("text_signal", 0.0);
    c.nuisance_dims = spec.value("nuisance_dims", std::size_t{0});
    c.nuisance_scale = spec.value("nuisance_scale", 0.0);
    if (spec.contains("model_id")) {
      c.model_id = spec.at("model_id").get<std::string>();
    } else {
      // Distinct configurations must not share a cache directory.
      c.model_id = "synthetic-" + std::to_string(c.dim);
      if (c.seed != 0 || !c.classes.empty() || c.nuisance_dims != 0) {
        json key = spec;
        key.erase("kind");
        c.model_id += "-" + canonical_hash(key).substr(0, 12);
      }
    }
    return std::make_shared<SyntheticEncoder>(c);
  }
  if (kind == "pretrained-vlm") {
    std::filesystem::path dir;
    if (spec.contains("model_dir")) {
      dir = spec.at("model_dir").get<std::string>();
    } else if (const char* env = std::getenv("GIST_MODEL_DIR")) {
      dir = env;
    } else {
      throw Error(ErrorCode::config,
                  "pretrained backend needs GIST_MODEL_DIR or a model_dir entry");
    }
    return std::make_shared<FeatureStoreEncoder>(
        dir, spec.at("model_id").get<std::string>(), spec.value("dim", std::size_t{0}));
  }
  throw Error(ErrorCode::config, "unknown backend kind '" + kind + "'");
}

std::shared_ptr<const Encoder> with_cache(std::shared_ptr<const Encoder> encoder,
                                          const std::filesystem::path& cache_root) {
  // One EmbeddingCache per directory per process, so writers share a mutex.
  static std::mutex registry_mutex;
  static std::map<std::string, std::weak_ptr<EmbeddingCache>> registry;
  const auto& desc = encoder->descriptor();
  const auto key = std::filesystem::weakly_canonical(cache_root / desc.model_id).string();
  std::shared_ptr<EmbeddingCache> cache;
  {
    std::lock_guard lock(registry_mutex);
    cache = registry[key].lock();
    if (!cache) {
      cache = std::make_shared<EmbeddingCache>(cache_root, desc.model_id, desc.dim);
      registry[key] = cache;
    }
  }
  return std::make_shared<CachedEncoder>(std::move(encoder), std::move(cache));
}

}  // namespace gist
