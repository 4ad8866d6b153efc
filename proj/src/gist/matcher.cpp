#include "gist/matcher.hpp"

#include <algorithm>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "gist/classifier.hpp"
#include "gist/error.hpp"

namespace gist {

MatchAssignment match_image_to_captions(const EmbeddingVector& image_embedding,
                                        std::span<const CaptionCandidate> candidates,
                                        std::size_t n) {
  if (candidates.empty()) {
    throw Error(ErrorCode::precondition, "no candidate captions to match against");
  }
  if (n == 0) throw Error(ErrorCode::invalid_argument, "n must be at least 1");
  const EmbeddingVector image = l2_normalize(image_embedding);
  std::vector<RankedCaption> scored;
  scored.reserve(candidates.size());
  std::unordered_set<std::string> seen;
  for (const auto& c : candidates) {
    if (c.embedding.dim() != image.dim()) {
      throw Error(ErrorCode::dimension_mismatch,
                  "caption '" + c.caption_id + "' has d=" + std::to_string(c.embedding.dim()) +
                      ", image has d=" + std::to_string(image.dim()));
    }
    if (!seen.insert(c.caption_id).second) {
      throw Error(ErrorCode::invalid_argument, "duplicate candidate caption '" + c.caption_id + "'");
    }
    scored.push_back({c.caption_id, cosine_similarity(image, l2_normalize(c.embedding))});
  }
  const std::size_t keep = std::min(n, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(),
                    [](const RankedCaption& a, const RankedCaption& b) {
                      if (a.score != b.score) return a.score > b.score;
                      return a.caption_id < b.caption_id;
                    });
  scored.resize(keep);
  MatchAssignment out;
  out.n = n;
  out.ranked = std::move(scored);
  return out;
}

std::vector<MatchAssignment> match_training_images(
    const DatasetManifest& manifest, const CaptionStore& store,
    const std::map<std::string, EmbeddingVector>& image_embeddings,
    const std::map<std::string, EmbeddingVector>& caption_embeddings, std::size_t n,
    std::size_t threads) {
  std::unordered_map<std::string, std::vector<CaptionCandidate>> by_label;
  for (const auto& r : store.records) {
    auto it = caption_embeddings.find(r.caption_id);
    if (it == caption_embeddings.end()) {
      throw Error(ErrorCode::not_found, "no embedding for caption '" + r.caption_id + "'");
    }
    by_label[r.label].push_back({r.caption_id, it->second});
  }
  const auto train = manifest.in_split(Split::train);
  for (const auto& record : train) {
    if (by_label[record.label].empty()) {
      throw Error(ErrorCode::precondition, "class '" + record.label + "' has no captions to match");
    }
  }
  std::vector<MatchAssignment> out(train.size());
  parallel_for(train.size(), threads, [&](std::size_t i) {
    const auto& record = train[i];
    auto it = image_embeddings.find(record.image_id);
    if (it == image_embeddings.end()) {
      throw Error(ErrorCode::not_found, "no embedding for image '" + record.image_id + "'");
    }
    out[i] = match_image_to_captions(it->second, by_label.at(record.label), n);
    out[i].image_id = record.image_id;
    out[i].label = record.label;
  });
  return out;
}

const char* to_string(CaptionTextMode m) {
  switch (m) {
    case CaptionTextMode::long_text: return "long";
    case CaptionTextMode::short_with_class: return "short_with_class";
    case CaptionTextMode::class_template: return "class_template";
  }
  return "short_with_class";
}

CaptionTextMode caption_mode_from_string(const std::string& s) {
  if (s == "long") return CaptionTextMode::long_text;
  if (s == "short_with_class") return CaptionTextMode::short_with_class;
  if (s == "class_template") return CaptionTextMode::class_template;
  throw Error(ErrorCode::invalid_argument, "unknown caption text mode '" + s + "'");
}

std::size_t PairDataset::image_count() const {
  std::set<std::string> ids;
  for (const auto& p : pairs) ids.insert(p.image_id);
  return ids.size();
}

namespace {
std::string first_words(const std::string& text, std::size_t words) {
  const auto tokens = split_words(text);
  std::string out;
  for (std::size_t i = 0; i < std::min(words, tokens.size()); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  while (!out.empty() && (out.back() == ',' || out.back() == ';')) out.pop_back();
  return out;
}
}  // namespace

void summarize_matched(CaptionStore& store, const std::vector<MatchAssignment>& assignments,
                       const std::function<Summary(const std::string&)>& summarize,
                       std::size_t threads) {
  std::vector<CaptionRecord*> todo;
  std::unordered_set<std::string> queued;
  for (const auto& a : assignments) {
    for (const auto& rc : a.ranked) {
      CaptionRecord* r = store.find(rc.caption_id);
      if (!r) throw Error(ErrorCode::not_found, "unknown caption '" + rc.caption_id + "'");
      if (r->short_text || !queued.insert(r->caption_id).second) continue;
      todo.push_back(r);
    }
  }
  if (!todo.empty() && !summarize) {
    throw Error(ErrorCode::precondition, "matched captions need summaries but no summarizer was given");
  }
  std::vector<Summary> results(todo.size());
  parallel_for(todo.size(), threads, [&](std::size_t i) { results[i] = summarize(todo[i]->long_text); });
  for (std::size_t i = 0; i < todo.size(); ++i) {
    Summary s = std::move(results[i]);
    if (s.text.size() >= todo[i]->long_text.size()) {
      std::size_t words = split_words(s.text).size();
      while (words > 0 && first_words(s.text, words).size() >= todo[i]->long_text.size()) --words;
      s.text = first_words(s.text, words);
      s.truncated = true;
    }
    if (trim(s.text).empty()) {
      throw Error(ErrorCode::provider, "summary for caption '" + todo[i]->caption_id + "' is empty");
    }
    todo[i]->short_text = s.text;
    todo[i]->short_truncated = s.truncated;
  }
}

PairDataset materialize_pairs(const std::vector<MatchAssignment>& assignments,
                              const CaptionStore& store, CaptionTextMode mode) {
  PairDataset out;
  out.mode = mode;
  for (const auto& a : assignments) {
    for (const auto& rc : a.ranked) {
      const CaptionRecord* r = store.find(rc.caption_id);
      if (!r) throw Error(ErrorCode::not_found, "unknown caption '" + rc.caption_id + "'");
      if (r->label != a.label) {
        throw Error(ErrorCode::precondition, "caption '" + r->caption_id + "' (" + r->label +
                                                 ") matched to image '" + a.image_id + "' (" + a.label + ")");
      }
      std::string text;
      switch (mode) {
        case CaptionTextMode::long_text:
          text = append_class_name(r->long_text, display_class_name(r->label));
          break;
        case CaptionTextMode::short_with_class:
          if (!r->short_text) {
            throw Error(ErrorCode::precondition, "caption '" + r->caption_id + "' has no summary");
          }
          text = append_class_name(*r->short_text, display_class_name(r->label));
          break;
        case CaptionTextMode::class_template:
          text = r->long_text;
          break;
      }
      out.pairs.push_back({a.image_id, r->caption_id, r->label, std::move(text)});
    }
  }
  return out;
}

PairDataset build_pair_dataset(const DatasetManifest& manifest, CaptionStore& store,
                               const Encoder& encoder, std::size_t n, CaptionTextMode mode,
                               const std::function<Summary(const std::string&)>& summarize) {
  std::vector<ImageInput> images;
  for (const auto& r : manifest.records) {
    if (r.split == Split::train) images.push_back(manifest.image_input(r));
  }
  std::vector<std::string> texts;
  for (const auto& r : store.records) texts.push_back(r.long_text);
  const auto image_vecs = encoder.encode_images(images);
  const auto text_vecs = encoder.encode_texts(texts);
  std::map<std::string, EmbeddingVector> image_map, caption_map;
  for (std::size_t i = 0; i < images.size(); ++i) image_map[images[i].image_id] = image_vecs[i];
  for (std::size_t i = 0; i < store.records.size(); ++i) {
    caption_map[store.records[i].caption_id] = text_vecs[i];
  }
  const auto assignments = match_training_images(manifest, store, image_map, caption_map, n);
  if (mode == CaptionTextMode::short_with_class) summarize_matched(store, assignments, summarize);
  return materialize_pairs(assignments, store, mode);
}

std::size_t count_label_violations(const PairDataset& pairs, const DatasetManifest& manifest,
                                   const CaptionStore& store) {
  std::unordered_map<std::string, std::string> image_label;
  for (const auto& r : manifest.records) image_label.emplace(r.image_id, r.label);
  std::size_t bad = 0;
  for (const auto& p : pairs.pairs) {
    const CaptionRecord* c = store.find(p.caption_id);
    auto it = image_label.find(p.image_id);
    if (!c || it == image_label.end() || c->label != it->second || p.label != it->second) ++bad;
  }
  return bad;
}

json to_json(const MatchAssignment& a) {
  json ranked = json::array();
  for (const auto& r : a.ranked) ranked.push_back({{"caption_id", r.caption_id}, {"score", r.score}});
  return {{"image_id", a.image_id}, {"label", a.label}, {"n", a.n}, {"ranked", ranked}};
}

MatchAssignment assignment_from_json(const json& j) {
  MatchAssignment a;
  a.image_id = j.at("image_id").get<std::string>();
  a.label = j.value("label", "");
  a.n = j.at("n").get<std::size_t>();
  for (const auto& r : j.at("ranked")) {
    a.ranked.push_back({r.at("caption_id").get<std::string>(), r.at("score").get<double>()});
  }
  return a;
}

json to_json(const TrainingPair& p) {
  return {{"image_id", p.image_id}, {"caption_id", p.caption_id}, {"label", p.label}, {"text", p.text}};
}

TrainingPair pair_from_json(const json& j) {
  return {j.at("image_id").get<std::string>(), j.at("caption_id").get<std::string>(),
          j.at("label").get<std::string>(), j.at("text").get<std::string>()};
}

std::size_t default_match_n(const std::string& dataset_preset) {
  if (dataset_preset == "fitzpatrick40") return 3;
  if (dataset_preset == "fgvc_aircraft") return 4;
  if (dataset_preset == "cub200" || dataset_preset == "flowers102") return 1;
  return 1;
}

}  // namespace gist
