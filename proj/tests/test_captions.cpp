#include <algorithm>
#include <atomic>
#include <functional>
#include <thread>

#include "doctest.h"
#include "gist/captions.hpp"
#include "gist/error.hpp"
#include "support.hpp"

// After Eigen: resolv.h defines a _res macro that clashes with Eigen internals.
// Same configuration as the library build so both see one set of inline definitions.
#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

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

// Provider that replays a fixed script and records every request.
class ScriptedProvider final : public CaptionProvider {
 public:
  explicit ScriptedProvider(std::function<std::string(const CompletionRequest&)> f) : f_(std::move(f)) {}
  std::string model_id() const override { return "scripted"; }
  std::string complete(const CompletionRequest& r) override {
    std::lock_guard lock(mutex_);
    requests.push_back(r);
    return f_(r);
  }
  std::vector<CompletionRequest> requests;

 private:
  std::function<std::string(const CompletionRequest&)> f_;
  std::mutex mutex_;
};
}  // namespace

TEST_CASE("templates render one prompt per axis value") {
  const auto t = builtin_template("fitzpatrick40");
  const auto prompts = render_prompts(t, "psoriasis");
  REQUIRE(prompts.size() == 9);
  CHECK(prompts[0].text ==
        "You are a dermatology disease describer. Describe what an image of psoriasis might look like on a "
        "person's face.");
  CHECK(prompts[3].text == prompts[5].text);
  CHECK(prompts[8].axis_value == "feet");
  CHECK(render_prompts(builtin_template("flowers102"), "rose").size() == 1);
  for (const auto& id : builtin_template_ids()) CHECK_NOTHROW(validate_template(builtin_template(id)));
  CHECK(code_of([] { builtin_template("nope"); }) == ErrorCode::not_found);
}

TEST_CASE("substituted class names are not rescanned for placeholders") {
  const PromptTemplate t{"t", "Describe {class}.", "", {}};
  CHECK(render_prompts(t, "{axis} moth")[0].text == "Describe {axis} moth.");
  CHECK(code_of([] { render_prompts({"t", "Describe {class} {color}.", "", {}}, "x"); }) ==
        ErrorCode::invalid_argument);
  CHECK(code_of([] { validate_template({"t", "no class", "", {}}); }) == ErrorCode::invalid_argument);
  CHECK(code_of([] { validate_template({"t", "{class}", "axis", {"a"}}); }) == ErrorCode::invalid_argument);
}

TEST_CASE("generation skips empty responses and drops duplicates") {
  ScriptedProvider p([](const CompletionRequest& r) -> std::string {
    if (r.sample == 1) return "   ";
    if (r.sample == 2) return "same text";
    if (r.sample == 3) return "same text";
    return "text " + std::to_string(r.sample);
  });
  SkipReport skips;
  const std::vector<RenderedPrompt> prompts{{"prompt A", "a"}};
  const auto recs = generate_class_captions(p, "wren", "toy", prompts, {5, {}, 2}, &skips);
  REQUIRE(recs.size() == 3);
  CHECK(recs[0].long_text == "text 0");
  CHECK(recs[1].long_text == "same text");
  CHECK(recs[2].long_text == "text 4");
  CHECK(skips.empty_responses == 1);
  CHECK(skips.duplicates == 1);
  CHECK(recs[0].provenance.axis_value == "a");
  CHECK(recs[0].provenance.model_id == "scripted");
  CHECK(recs[0].caption_id != recs[1].caption_id);
  CHECK(recs[0].caption_id == make_caption_id("wren", 0));
}

TEST_CASE("repeated prompts request further sample indices") {
  ScriptedProvider p([](const CompletionRequest& r) { return "t" + std::to_string(r.sample); });
  const std::vector<RenderedPrompt> prompts{{"same", "x"}, {"same", "y"}};
  const auto recs = generate_class_captions(p, "c", "toy", prompts, {3, {}, 1});
  CHECK(recs.size() == 6);
  CHECK(recs[5].long_text == "t5");
}

TEST_CASE("summaries respect the word budget with one retry then truncation") {
  ScriptedProvider ok([](const CompletionRequest&) { return "red crown, black wings"; });
  const auto s = summarize_caption(ok, "a long description", 30);
  CHECK(s.text == "red crown, black wings");
  CHECK_FALSE(s.truncated);
  CHECK(ok.requests.size() == 1);

  ScriptedProvider retry([](const CompletionRequest& r) {
    return r.attempt == 0 ? std::string("one two three four five") : std::string("one two");
  });
  const auto s2 = summarize_caption(retry, "desc", 3);
  CHECK(s2.text == "one two");
  CHECK_FALSE(s2.truncated);
  CHECK(retry.requests.size() == 2);

  ScriptedProvider verbose([](const CompletionRequest&) { return "alpha, beta, gamma, delta"; });
  const auto s3 = summarize_caption(verbose, "desc", 2);
  CHECK(s3.text == "alpha, beta");
  CHECK(s3.truncated);

  CHECK(code_of([&] { summarize_caption(ok, "   "); }) == ErrorCode::precondition);
}

TEST_CASE("append_class_name adds the label once") {
  CHECK(append_class_name("red crown", "cardinal") == "red crown, cardinal");
  CHECK(append_class_name("red crown, cardinal", "cardinal") == "red crown, cardinal");
}

TEST_CASE("FLYP captions are one templated caption per class") {
  const auto store = build_flyp_captions({"sea_holly", "rose"});
  REQUIRE(store.records.size() == 2);
  CHECK(store.records[0].long_text == "a photo of a sea holly");
  CHECK(store.records[0].label == "sea_holly");
  CHECK(code_of([] { build_flyp_captions({"a", "a"}); }) == ErrorCode::invalid_argument);
}

TEST_CASE("caption store round-trips and validates coverage") {
  TempDir dir("store");
  CaptionStore store;
  store.dataset_name = "toy";
  store.m_per_class = 2;
  CaptionRecord a{"c1", "wren", "long one", std::string("short"), true, {"toy", "male", "m", "h"}};
  CaptionRecord b{"c2", "finch", "long two", std::nullopt, false, {"toy", "", "m", "h2"}};
  store.records = {a, b};
  save_caption_store(store, dir / "captions.jsonl");
  const auto loaded = load_caption_store(dir / "captions.jsonl");
  CHECK(loaded.dataset_name == "toy");
  CHECK(loaded.m_per_class == 2);
  REQUIRE(loaded.records.size() == 2);
  CHECK(loaded.records[0].short_text == std::optional<std::string>("short"));
  CHECK(loaded.records[0].short_truncated);
  CHECK(loaded.records[0].provenance.axis_value == "male");
  CHECK_FALSE(loaded.records[1].short_text);
  CHECK_NOTHROW(validate_store(loaded, {"wren", "finch"}));
  CHECK(code_of([&] { validate_store(loaded, {"wren", "finch", "heron"}); }) == ErrorCode::precondition);
  CHECK(code_of([&] { validate_store(loaded, {"wren"}); }) == ErrorCode::invalid_argument);
}

TEST_CASE("fixture provider answers describe and summarize requests") {
  FixtureProvider p(json{{"model_id", "fx"},
                         {"completions", {{"P", {"first", "second"}}}},
                         {"summaries", {{"first", "short"}}}});
  CompletionRequest r;
  r.prompt = "P";
  r.sample = 1;
  CHECK(p.complete(r) == "second");
  r.sample = 2;
  CHECK(code_of([&] { p.complete(r); }) == ErrorCode::provider);
  CompletionRequest s;
  s.kind = RequestKind::summarize;
  s.subject = "first";
  CHECK(p.complete(s) == "short");
  CHECK(code_of([] { FixtureProvider(json{{"completions", 3}}); }) == ErrorCode::parse);
}

TEST_CASE("caching provider serves repeats from disk") {
  TempDir dir("response-cache");
  std::atomic<int> calls{0};
  auto inner = std::make_shared<ScriptedProvider>([&](const CompletionRequest& r) {
    ++calls;
    return "answer " + r.prompt;
  });
  CompletionRequest r;
  r.prompt = "q";
  {
    CachingProvider p(inner, std::make_shared<ResponseCache>(dir.path()));
    CHECK(p.complete(r) == "answer q");
    CHECK(p.complete(r) == "answer q");
    CHECK(p.hits() == 1);
    CHECK(p.misses() == 1);
  }
  CachingProvider again(inner, std::make_shared<ResponseCache>(dir.path()));
  CHECK(again.complete(r) == "answer q");
  CHECK(calls == 1);
  r.sampling.temperature = 0.1;
  CHECK(request_hash("m", r) != request_hash("m", CompletionRequest{RequestKind::describe, "q", "", 0, 0, {}}));
}

TEST_CASE("remote provider speaks chat completions and retries server errors") {
  httplib::Server server;
  std::atomic<int> hits{0};
  json last_body;
  std::mutex body_mutex;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    if (hits++ == 0) {
      res.status = 503;
      return;
    }
    {
      std::lock_guard lock(body_mutex);
      last_body = json::parse(req.body);
    }
    json reply = {{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", "a red bird"}}}}})}};
    res.set_content(reply.dump(), "application/json");
  });
  server.Post("/bad", [](const httplib::Request&, httplib::Response& res) {
    res.status = 400;
    res.set_content("nope", "text/plain");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  RemoteConfig c;
  c.base_url = "http://127.0.0.1:" + std::to_string(port);
  c.model = "test-model";
  c.backoff_seconds = 0.01;
  c.timeout_seconds = 5;
  RemoteProvider p(c);
  CompletionRequest r;
  r.prompt = "Describe a cardinal.";
  r.sample = 3;
  CHECK(p.complete(r) == "a red bird");
  CHECK(hits == 2);
  {
    std::lock_guard lock(body_mutex);
    CHECK(last_body["model"] == "test-model");
    CHECK(last_body["messages"][0]["content"] == "Describe a cardinal.");
    CHECK(last_body["seed"] == 3);
  }
  c.path = "/bad";
  RemoteProvider bad(c);
  CHECK(code_of([&] { bad.complete(r); }) == ErrorCode::provider);

  server.stop();
  t.join();
}

TEST_CASE("review resumes from the sidecar and verdicts filter the store") {
  TempDir dir("review");
  CaptionStore store;
  for (int i = 0; i < 4; ++i) {
    store.records.push_back({"c" + std::to_string(i), i < 2 ? "a" : "b", "text " + std::to_string(i), {}, false, {}});
  }
  const auto sidecar = dir / "verdicts.jsonl";
  auto p1 = review_captions(store, sidecar, [](const CaptionRecord& r, std::size_t, std::size_t) {
    if (r.caption_id == "c0") return ReviewAction::discard;
    if (r.caption_id == "c1") return ReviewAction::keep;
    return ReviewAction::quit;
  });
  CHECK(p1.reviewed == 2);
  CHECK(p1.quit);
  CHECK(p1.remaining == 2);

  std::vector<std::string> asked;
  auto p2 = review_captions(store, sidecar, [&](const CaptionRecord& r, std::size_t, std::size_t) {
    asked.push_back(r.caption_id);
    return ReviewAction::discard;
  });
  CHECK(asked == std::vector<std::string>{"c2", "c3"});
  CHECK(p2.already_done == 2);

  const auto verdicts = load_verdicts(sidecar);
  const auto kept = apply_verdicts(store, verdicts);
  REQUIRE(kept.records.size() == 1);
  CHECK(kept.records[0].caption_id == "c1");
  CHECK(code_of([&] { validate_store(kept, {"a", "b"}); }) == ErrorCode::precondition);
}

TEST_CASE("a corrupted verdict sidecar is cut back to its intact prefix") {
  TempDir dir("review-corrupt");
  const auto sidecar = dir / "v.jsonl";
  write_file(sidecar,
             "{\"caption_id\":\"a\",\"verdict\":\"keep\"}\n{\"caption_id\":\"b\",\"verdict\":\"discard\"}\n{\"capt");
  std::vector<std::string> warnings;
  set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
  const auto v = load_verdicts(sidecar);
  set_warning_sink(nullptr);
  CHECK(v.size() == 2);
  CHECK(v.at("b").verdict == Verdict::discard);
  CHECK(warnings.size() == 1);
  const auto kept = read_file(sidecar);
  CHECK(std::count(kept.begin(), kept.end(), '\n') == 2);
  CHECK(kept.back() == '\n');
}
