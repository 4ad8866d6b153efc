#include "gist/data_ingest.hpp"

#include <algorithm>
#include <random>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "gist/error.hpp"

namespace gist {

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw Error(ErrorCode::parse, "unknown split '" + s + "'");
}

std::size_t DatasetManifest::count(Split s) const {
  return static_cast<std::size_t>(std::count_if(
      records.begin(), records.end(), [s](const ImageRecord& r) { return r.split == s; }));
}

std::size_t DatasetManifest::class_index(const std::string& label) const {
  auto it = std::find(classes.begin(), classes.end(), label);
  if (it == classes.end()) {
    throw Error(ErrorCode::not_found, "unknown class '" + label + "'");
  }
  return static_cast<std::size_t>(it - classes.begin());
}

std::vector<ImageRecord> DatasetManifest::in_split(Split s) const {
  std::vector<ImageRecord> out;
  for (const auto& r : records) {
    if (r.split == s) out.push_back(r);
  }
  return out;
}

ImageInput DatasetManifest::image_input(const ImageRecord& r) const {
  return ImageInput{r.image_id, r.path, r.label};
}

void validate_manifest(const DatasetManifest& manifest) {
  std::unordered_set<std::string> classes;
  for (const auto& c : manifest.classes) {
    if (c.empty()) throw Error(ErrorCode::invalid_argument, "empty class name");
    if (!classes.insert(c).second) {
      throw Error(ErrorCode::invalid_argument, "duplicate class '" + c + "'");
    }
  }
  std::unordered_set<std::string> ids;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    const std::string where = "record " + std::to_string(i + 1) + " ('" + r.image_id + "')";
    if (r.image_id.empty()) {
      throw Error(ErrorCode::invalid_argument, "record " + std::to_string(i + 1) + ": empty image_id");
    }
    if (!ids.insert(r.image_id).second) {
      throw Error(ErrorCode::invalid_argument, where + ": duplicate image_id");
    }
    if (r.path.empty()) {
      throw Error(ErrorCode::invalid_argument, where + ": empty path");
    }
    if (!classes.contains(r.label)) {
      throw Error(ErrorCode::invalid_argument,
                  where + ": label '" + r.label + "' is not a declared class");
    }
  }
}

DatasetManifest parse_manifest(const std::string& text,
                               const std::filesystem::path& base_dir) {
  DatasetManifest m;
  bool have_header = false;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    if (trim(line).empty()) continue;
    const std::string where = "manifest line " + std::to_string(line_no);
    json row;
    try {
      row = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::parse, where + ": " + e.what());
    }
    try {
      if (!have_header) {
        m.name = row.at("name").get<std::string>();
        m.classes = row.at("classes").get<std::vector<std::string>>();
        have_header = true;
        continue;
      }
      ImageRecord r;
      r.image_id = row.at("image_id").get<std::string>();
      std::filesystem::path p = row.at("path").get<std::string>();
      r.path = (p.is_relative() && !base_dir.empty()) ? (base_dir / p).lexically_normal() : p;
      r.label = row.at("label").get<std::string>();
      r.split = split_from_string(row.at("split").get<std::string>());
      m.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::parse, where + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorCode::parse, where + ": " + e.what());
    }
  }
  if (!have_header) throw Error(ErrorCode::parse, "manifest has no header line");
  try {
    validate_manifest(m);
  } catch (const Error& e) {
    throw Error(ErrorCode::parse, e.what());
  }
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_file(path), path.parent_path());
}

std::string serialize_manifest(const DatasetManifest& manifest) {
  std::string out = json{{"name", manifest.name}, {"classes", manifest.classes}}.dump();
  out += '\n';
  for (const auto& r : manifest.records) {
    json row = {{"image_id", r.image_id},
                {"path", r.path.string()},
                {"label", r.label},
                {"split", to_string(r.split)}};
    out += row.dump();
    out += '\n';
  }
  return out;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  write_file(path, serialize_manifest(manifest));
}

DatasetManifest sample_kshot(const DatasetManifest& manifest, const KShotSpec& spec) {
  if (spec.k < 1) throw Error(ErrorCode::invalid_argument, "k-shot requires k >= 1");
  std::vector<std::vector<std::size_t>> train_by_class(manifest.classes.size());
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    if (r.split == Split::train) train_by_class[manifest.class_index(r.label)].push_back(i);
  }
  std::vector<bool> keep(manifest.records.size(), true);
  for (std::size_t c = 0; c < train_by_class.size(); ++c) {
    auto& pool = train_by_class[c];
    if (pool.size() < spec.k && !spec.clamp) {
      throw Error(ErrorCode::precondition,
                  "class '" + manifest.classes[c] + "' has " + std::to_string(pool.size()) +
                      " training images, fewer than k=" + std::to_string(spec.k));
    }
    const std::size_t take = std::min(spec.k, pool.size());
    std::mt19937_64 rng(substream_seed(spec.seed, c));
    // Partial Fisher-Yates: the first `take` slots become the sample.
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    for (std::size_t i = take; i < pool.size(); ++i) keep[pool[i]] = false;
  }
  DatasetManifest out;
  out.name = manifest.name;
  out.classes = manifest.classes;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    if (keep[i]) out.records.push_back(manifest.records[i]);
  }
  return out;
}

std::vector<DuplicatePair> find_near_duplicates(
    const std::map<std::string, EmbeddingVector>& embeddings, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw Error(ErrorCode::invalid_argument, "duplicate threshold must be in (0, 1]");
  }
  std::vector<std::string> ids;
  std::vector<EmbeddingVector> unit;
  std::size_t dim = 0;
  for (const auto& [id, v] : embeddings) {
    if (ids.empty()) dim = v.dim();
    if (v.dim() != dim) {
      throw Error(ErrorCode::dimension_mismatch,
                  "embedding for '" + id + "' has d=" + std::to_string(v.dim()) +
                      ", expected " + std::to_string(dim));
    }
    ids.push_back(id);  // std::map iteration is already lexicographic
    unit.push_back(l2_normalize(v));
  }
  std::vector<DuplicatePair> pairs;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = i + 1; j < ids.size(); ++j) {
      const double s = cosine_similarity(unit[i], unit[j]);
      if (s >= threshold) pairs.push_back({ids[i], ids[j], s});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const DuplicatePair& a, const DuplicatePair& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    if (a.id_a != b.id_a) return a.id_a < b.id_a;
    return a.id_b < b.id_b;
  });
  return pairs;
}

DatasetManifest resolve_split_leakage(const DatasetManifest& manifest,
                                      const std::vector<DuplicatePair>& pairs) {
  std::unordered_map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    where.emplace(manifest.records[i].image_id, i);
  }
  auto lookup = [&](const std::string& id) {
    auto it = where.find(id);
    if (it == where.end()) {
      throw Error(ErrorCode::not_found, "duplicate pair references unknown image_id '" + id + "'");
    }
    return it->second;
  };
  DatasetManifest out = manifest;
  for (const auto& p : pairs) {
    const std::size_t a = lookup(p.id_a);
    const std::size_t b = lookup(p.id_b);
    if (manifest.records[a].split == Split::test || manifest.records[b].split == Split::test) {
      out.records[a].split = Split::train;
      out.records[b].split = Split::train;
    }
  }
  return out;
}

json to_json(const DuplicatePair& p) {
  return {{"id_a", p.id_a}, {"id_b", p.id_b}, {"similarity", p.similarity}};
}

}  // namespace gist
