#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

#include "doctest.h"
#include "gist/data_ingest.hpp"
#include "gist/error.hpp"
#include "support.hpp"

using namespace gist;
using gist::testing::TempDir;

namespace {
ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::internal;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}
}  // namespace

TEST_CASE("manifest round-trips through JSON Lines") {
  TempDir dir("manifest");
  const auto m = testing::write_toy_dataset(dir.path(), "toy", testing::toy_class_names(3), {}, 1);
  const auto loaded = load_manifest(dir / "manifest.jsonl");
  CHECK(loaded == m);
  CHECK(loaded.count(Split::train) == 24);
  CHECK(loaded.count(Split::val) == 12);
  CHECK(loaded.count(Split::test) == 24);
  CHECK(parse_manifest(serialize_manifest(loaded)) == loaded);
}

TEST_CASE("manifest parse errors name the line") {
  const std::string header = R"({"name":"x","classes":["a","b"]})";
  const std::string good = R"({"image_id":"i1","path":"p1","label":"a","split":"train"})";
  CHECK(code_of([&] { parse_manifest(header + "\n" + good + "\n{broken\n"); }) == ErrorCode::parse);
  CHECK(message_of([&] { parse_manifest(header + "\n" + good + "\n{broken\n"); }).find("line 3") !=
        std::string::npos);
  CHECK(message_of([&] {
          parse_manifest(header + "\n" + R"({"image_id":"i1","path":"p","label":"a","split":"dev"})");
        }).find("dev") != std::string::npos);
  CHECK(message_of([&] {
          parse_manifest(header + "\n" + R"({"image_id":"i1","path":"p","label":"zebra","split":"train"})");
        }).find("zebra") != std::string::npos);
  CHECK(message_of([&] { parse_manifest(header + "\n" + good + "\n" + good); }).find("duplicate image_id") !=
        std::string::npos);
  CHECK(code_of([&] { parse_manifest(""); }) == ErrorCode::parse);
  CHECK(code_of([&] { parse_manifest(R"({"name":"x","classes":["a","a"]})"); }) == ErrorCode::parse);
}

TEST_CASE("relative paths resolve against the manifest directory") {
  const auto m = parse_manifest(
      "{\"name\":\"x\",\"classes\":[\"a\"]}\n{\"image_id\":\"i\",\"path\":\"img/1.bin\",\"label\":\"a\",\"split\":\"test\"}\n",
      "/data/set");
  CHECK(m.records[0].path == std::filesystem::path("/data/set/img/1.bin"));
}

TEST_CASE("k-shot sampling keeps exactly k train images per class") {
  TempDir dir("kshot");
  const auto m = testing::write_toy_dataset(dir.path(), "toy", testing::toy_class_names(5), {}, 2);
  for (std::size_t k : {1, 3, 5, 8}) {
    const auto s = sample_kshot(m, {k, 7, false});
    std::map<std::string, std::size_t> per_class;
    std::set<std::string> original_ids;
    for (const auto& r : m.records) original_ids.insert(r.image_id);
    for (const auto& r : s.records) {
      CHECK(original_ids.contains(r.image_id));
      if (r.split == Split::train) per_class[r.label]++;
    }
    for (const auto& c : m.classes) CHECK(per_class[c] == k);
    CHECK(s.count(Split::val) == m.count(Split::val));
    CHECK(s.count(Split::test) == m.count(Split::test));
    CHECK(sample_kshot(m, {k, 7, false}) == s);
  }
  CHECK(sample_kshot(m, {3, 0, false}) != sample_kshot(m, {3, 1, false}));
}

TEST_CASE("k-shot errors without clamp and clamps on request") {
  TempDir dir("kshot-small");
  const auto m = testing::write_toy_dataset(dir.path(), "toy", testing::toy_class_names(2), {2, 1, 1}, 3);
  CHECK(code_of([&] { sample_kshot(m, {3, 0, false}); }) == ErrorCode::precondition);
  CHECK(message_of([&] { sample_kshot(m, {3, 0, false}); }).find("amber_wren") != std::string::npos);
  CHECK(sample_kshot(m, {3, 0, true}).count(Split::train) == 4);
  CHECK(code_of([&] { sample_kshot(m, {0, 0, false}); }) == ErrorCode::invalid_argument);
}

TEST_CASE("near-duplicate detection agrees with a brute-force scan") {
  const auto x = testing::random_matrix(30, 6, 11);
  std::map<std::string, EmbeddingVector> emb;
  for (int i = 0; i < 30; ++i) {
    EmbeddingVector v;
    for (int j = 0; j < 6; ++j) v.values.push_back(x(i, j));
    emb["img" + std::to_string(100 + i)] = v;
  }
  // Plant a near copy.
  auto copy = emb["img105"];
  copy.values[0] += 1e-3;
  emb["img999"] = copy;

  const double threshold = 0.8;
  const auto pairs = find_near_duplicates(emb, threshold);
  std::set<std::pair<std::string, std::string>> expected;
  for (const auto& [a, va] : emb) {
    for (const auto& [b, vb] : emb) {
      if (a >= b) continue;
      long double dot = 0, na = 0, nb = 0;
      for (std::size_t k = 0; k < va.values.size(); ++k) {
        dot += static_cast<long double>(va.values[k]) * vb.values[k];
        na += static_cast<long double>(va.values[k]) * va.values[k];
        nb += static_cast<long double>(vb.values[k]) * vb.values[k];
      }
      if (dot / std::sqrt(na * nb) >= threshold) expected.insert({a, b});
    }
  }
  std::set<std::pair<std::string, std::string>> got;
  for (const auto& p : pairs) {
    CHECK(p.id_a < p.id_b);
    got.insert({p.id_a, p.id_b});
  }
  CHECK(got == expected);
  CHECK(pairs.front().id_a == "img105");
  CHECK(pairs.front().id_b == "img999");
  for (std::size_t i = 1; i < pairs.size(); ++i) CHECK(pairs[i - 1].similarity >= pairs[i].similarity);
  CHECK(code_of([&] { find_near_duplicates(emb, 0.0); }) == ErrorCode::invalid_argument);
}

TEST_CASE("leakage resolution moves test members of duplicate pairs into train") {
  DatasetManifest m;
  m.name = "x";
  m.classes = {"a"};
  m.records = {{"t1", "p1", "a", Split::train}, {"e1", "p2", "a", Split::test},
               {"v1", "p3", "a", Split::val},   {"v2", "p4", "a", Split::val},
               {"e2", "p5", "a", Split::test},  {"e3", "p6", "a", Split::test}};
  const std::vector<DuplicatePair> pairs{{"e1", "t1", 0.99}, {"v1", "e2", 0.97}, {"v1", "v2", 0.96}};
  const auto out = resolve_split_leakage(m, pairs);
  CHECK(out.records.size() == m.records.size());
  CHECK(out.records[0].split == Split::train);
  CHECK(out.records[1].split == Split::train);
  CHECK(out.records[2].split == Split::train);
  CHECK(out.records[3].split == Split::val);
  CHECK(out.records[4].split == Split::train);
  CHECK(out.records[5].split == Split::test);
  auto reversed = pairs;
  std::reverse(reversed.begin(), reversed.end());
  CHECK(resolve_split_leakage(m, reversed) == out);
  CHECK(code_of([&] { resolve_split_leakage(m, {{"ghost", "t1", 1.0}}); }) == ErrorCode::not_found);
}
