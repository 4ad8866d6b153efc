// Acceptance gate: one PASS/FAIL line per criterion. Exit status is the number
// of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gist/classifier.hpp"
#include "gist/data_ingest.hpp"
#include "gist/error.hpp"
#include "gist/eval.hpp"
#include "gist/matcher.hpp"
#include "gist/pipeline.hpp"
#include "gist/trainer.hpp"
#include "support.hpp"

using namespace gist;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const std::function<Outcome()>& body) {
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::printf("criterion %d %s: %s (%s)\n", id, o.pass ? "PASS" : "FAIL", title.c_str(), o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<double> gaussian_vector(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> n;
  std::vector<double> v(d);
  for (auto& x : v) x = n(rng);
  return v;
}

EmbeddingVector embedding(std::vector<double> values) {
  EmbeddingVector v;
  v.values = std::move(values);
  return v;
}

long double dot_ld(const std::vector<double>& a, const std::vector<double>& b) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * b[i];
  return s;
}

long double cosine_ld(const std::vector<double>& a, const std::vector<double>& b) {
  return dot_ld(a, b) / std::sqrt(dot_ld(a, a) * dot_ld(b, b));
}

// Random label-restricted matching instance.
struct MatchInstance {
  DatasetManifest manifest;
  CaptionStore store;
  std::map<std::string, EmbeddingVector> images;
  std::map<std::string, EmbeddingVector> captions;
};

MatchInstance random_match_instance(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  MatchInstance m;
  const std::size_t classes = uniform(1, 6);
  const std::size_t d = uniform(2, 64);
  const std::size_t images = uniform(classes, 200);
  m.manifest.name = "match";
  for (std::size_t c = 0; c < classes; ++c) m.manifest.classes.push_back("class" + std::to_string(c));
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t count = uniform(1, 50);
    std::vector<double> last;
    for (std::size_t k = 0; k < count; ++k) {
      const std::string id = "cap" + std::to_string(c) + "_" + std::to_string(uniform(0, 99999));
      if (m.captions.count(id)) continue;
      // Occasionally repeat the previous vector to exercise the tie-break.
      auto values = (!last.empty() && uniform(0, 4) == 0) ? last : gaussian_vector(rng, d);
      last = values;
      m.captions[id] = embedding(values);
      m.store.records.push_back({id, m.manifest.classes[c], "caption " + id, std::nullopt, false, {}});
    }
  }
  for (std::size_t i = 0; i < images; ++i) {
    const std::string id = "img" + std::to_string(i);
    const auto& label = m.manifest.classes[i % classes];
    m.manifest.records.push_back({id, "images/" + id, label, Split::train});
    m.images[id] = embedding(gaussian_vector(rng, d));
  }
  return m;
}

std::vector<std::string> brute_force_top_n(const MatchInstance& m, const ImageRecord& r, std::size_t n) {
  std::vector<std::pair<long double, std::string>> scored;
  for (const auto& c : m.store.records) {
    if (c.label != r.label) continue;
    scored.push_back({-cosine_ld(m.images.at(r.image_id).values, m.captions.at(c.caption_id).values),
                      c.caption_id});
  }
  std::sort(scored.begin(), scored.end());
  std::vector<std::string> ids;
  for (std::size_t k = 0; k < std::min(n, scored.size()); ++k) ids.push_back(scored[k].second);
  return ids;
}

std::vector<std::string> ids_of(const MatchAssignment& a) {
  std::vector<std::string> ids;
  for (const auto& r : a.ranked) ids.push_back(r.caption_id);
  return ids;
}

// Symmetric softmax cross-entropy summed over the batch, in long double.
long double loss_oracle(const Eigen::MatrixXd& img, const Eigen::MatrixXd& txt, double scale) {
  const auto b = img.rows();
  std::vector<std::vector<long double>> logits(static_cast<std::size_t>(b), std::vector<long double>(b));
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index j = 0; j < b; ++j) {
      long double s = 0;
      for (Eigen::Index k = 0; k < img.cols(); ++k) s += static_cast<long double>(img(i, k)) * txt(j, k);
      logits[i][j] = scale * s;
    }
  }
  long double total = 0;
  for (Eigen::Index i = 0; i < b; ++i) {
    long double row = 0, col = 0;
    for (Eigen::Index j = 0; j < b; ++j) {
      row += std::exp(logits[i][j] - logits[i][i]);
      col += std::exp(logits[j][i] - logits[i][i]);
    }
    total += std::log(row) + std::log(col);
  }
  return total;
}

double relative_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  const double scale = std::max(analytic.norm(), numeric.norm());
  return scale == 0.0 ? 0.0 : (analytic - numeric).norm() / scale;
}

Eigen::MatrixXd renormalized(Eigen::MatrixXd m) {
  m.rowwise().normalize();
  return m;
}

// Rows with exactly `correct` top-1 hits out of n.
void planted_scores(std::size_t n, std::size_t correct, std::size_t classes, Eigen::MatrixXd& scores,
                    std::vector<int>& labels) {
  scores = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(classes));
  labels.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const int y = static_cast<int>(i % classes);
    labels[i] = y;
    // Spread the hits so they are not clustered at the front.
    const bool hit = (i * 7919) % n < correct;
    scores(r, y) = hit ? 1.0 : 0.5;
    if (!hit) scores(r, (y + 1) % static_cast<int>(classes)) = 1.0;
  }
}

// ---------------------------------------------------------------------------

Outcome matcher_oracle() {
  const auto t0 = Clock::now();
  std::size_t mismatches = 0, images = 0;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const auto m = random_match_instance(seed);
    const std::size_t n = 1 + seed % 8;
    const auto got = match_training_images(m.manifest, m.store, m.images, m.captions, n, 1 + seed % 4);
    for (std::size_t i = 0; i < got.size(); ++i) {
      ++images;
      if (got[i].image_id != m.manifest.records[i].image_id ||
          ids_of(got[i]) != brute_force_top_n(m, m.manifest.records[i], n)) {
        ++mismatches;
      }
    }
  }
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << "500 instances, " << images << " images, " << mismatches << " mismatches, " << fmt("%.2f", secs) << " s";
  return {mismatches == 0 && secs < 10.0, d.str()};
}

Outcome loss_oracle_check() {
  std::mt19937_64 rng(2);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto b = std::uniform_int_distribution<std::size_t>(1, 16)(rng);
    const auto d = std::uniform_int_distribution<std::size_t>(2, 32)(rng);
    const double scale = std::uniform_real_distribution<double>(0.5, 100.0)(rng);
    const auto img = testing::random_unit_rows(b, d, rng());
    const auto txt = testing::random_unit_rows(b, d, rng());
    LossOptions o;
    o.compute_gradients = false;
    const double got = contrastive_loss(img, txt, scale, o).value;
    worst = std::max(worst, static_cast<double>(std::fabs(got - loss_oracle(img, txt, scale))));
  }
  const double single = contrastive_loss(testing::random_unit_rows(1, 8, 5), testing::random_unit_rows(1, 8, 6), 30.0).value;
  const double identity = contrastive_loss(Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(2, 2), 1.0).value;
  const double identity_err = std::fabs(identity - 4.0 * std::log(1.0 + std::exp(-1.0)));
  std::ostringstream d;
  d << "max |loss - oracle| " << fmt("%.2e", worst) << ", B=1 loss " << single << ", identity error "
    << fmt("%.2e", identity_err);
  return {worst < 1e-6 && single == 0.0 && identity_err < 1e-6, d.str()};
}

Outcome gradient_check() {
  constexpr double h = 1e-4;
  std::mt19937_64 rng(3);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto img = testing::random_unit_rows(3, 4, rng());
    const auto txt = testing::random_unit_rows(3, 4, rng());
    const double scale = std::uniform_real_distribution<double>(1.0, 10.0)(rng);
    const auto analytic = contrastive_loss(img, txt, scale);
    LossOptions o;
    o.compute_gradients = false;
    o.norm_tolerance = 1e-2;
    auto loss = [&](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double s) {
      return contrastive_loss(a, b, s, o).value;
    };
    Eigen::MatrixXd gi(3, 4), gt(3, 4);
    for (Eigen::Index r = 0; r < 3; ++r) {
      for (Eigen::Index c = 0; c < 4; ++c) {
        Eigen::MatrixXd p = img, m = img;
        p(r, c) += h;
        m(r, c) -= h;
        gi(r, c) = (loss(p, txt, scale) - loss(m, txt, scale)) / (2 * h);
        p = txt;
        m = txt;
        p(r, c) += h;
        m(r, c) -= h;
        gt(r, c) = (loss(img, p, scale) - loss(img, m, scale)) / (2 * h);
      }
    }
    Eigen::MatrixXd gs(1, 1), as(1, 1);
    gs(0, 0) = (loss(img, txt, scale + h) - loss(img, txt, scale - h)) / (2 * h);
    as(0, 0) = analytic.grad_logit_scale;
    worst = std::max({worst, relative_error(analytic.grad_image, gi), relative_error(analytic.grad_text, gt),
                      relative_error(as, gs)});
  }
  return {worst < 1e-4, "max relative error " + fmt("%.2e", worst) + " over 50 instances"};
}

Outcome scale_invariance() {
  std::mt19937_64 rng(4);
  double norm_err = 0.0, cos_err = 0.0;
  bool rankings_equal = true;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 2 + trial % 63;
    const auto a = embedding(gaussian_vector(rng, d));
    const auto b = embedding(gaussian_vector(rng, d));
    const double k = std::exp(std::uniform_real_distribution<double>(-10.0, 10.0)(rng));
    auto scaled = a;
    for (auto& x : scaled.values) x *= k;
    norm_err = std::max(norm_err, std::fabs(l2_norm(l2_normalize(a).values) - 1.0));
    norm_err = std::max(norm_err, std::fabs(l2_norm(l2_normalize(scaled).values) - 1.0));
    cos_err = std::max(cos_err, std::fabs(cosine_similarity(a, b) - cosine_similarity(scaled, b)));
  }
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto m = random_match_instance(1000 + seed);
    const auto before = match_training_images(m.manifest, m.store, m.images, m.captions, 5);
    const double k = 0.001 + static_cast<double>(seed) * 3.7;
    for (auto& [id, v] : m.images) {
      for (auto& x : v.values) x *= k;
    }
    const auto after = match_training_images(m.manifest, m.store, m.images, m.captions, 5);
    for (std::size_t i = 0; i < before.size(); ++i) {
      rankings_equal &= ids_of(before[i]) == ids_of(after[i]);
      for (std::size_t r = 0; r < before[i].ranked.size(); ++r) {
        cos_err = std::max(cos_err, std::fabs(before[i].ranked[r].score - after[i].ranked[r].score));
      }
    }
  }
  auto enc = make_encoder("synthetic-32");
  const auto head = build_zeroshot_head(*enc, testing::toy_class_names(10));
  bool zs_equal = true;
  for (int trial = 0; trial < 100; ++trial) {
    const auto v = gaussian_vector(rng, 32);
    const Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(v.data(), 32);
    const double k = std::exp(std::uniform_real_distribution<double>(-8.0, 8.0)(rng));
    zs_equal &= topk_indices(predict(head, x), 10) == topk_indices(predict(head, x * k), 10);
  }
  std::ostringstream d;
  d << "norm error " << fmt("%.1e", norm_err) << ", score drift " << fmt("%.1e", cos_err) << ", match rankings "
    << (rankings_equal ? "equal" : "differ") << ", zero-shot rankings " << (zs_equal ? "equal" : "differ");
  return {norm_err <= 1e-6 && cos_err <= 1e-6 && rankings_equal && zs_equal, d.str()};
}

Outcome bootstrap_check() {
  constexpr std::size_t n = 272;
  Eigen::MatrixXd scores;
  std::vector<int> labels;
  planted_scores(n, 218, 5, scores, labels);
  const double oracle = std::sqrt(0.8 * 0.2 / static_cast<double>(n));
  const auto serial = bootstrap_accuracy(scores, labels, {1000, 17, 1}, 1);
  const auto again = bootstrap_accuracy(scores, labels, {1000, 17, 1}, 1);
  const auto parallel = bootstrap_accuracy(scores, labels, {1000, 17, 8}, 1);
  const double rel = std::fabs(serial.std - oracle) / oracle;
  const bool deterministic = serial.mean == again.mean && serial.std == again.std;
  const bool same = serial.mean == parallel.mean && serial.std == parallel.std;
  std::ostringstream d;
  d << "accuracy " << fmt("%.4f", topk_accuracy(scores, labels, 1)) << ", std " << fmt("%.5f", serial.std)
    << " vs oracle " << fmt("%.5f", oracle) << " (" << fmt("%.1f", 100 * rel) << "% off), repeat "
    << (deterministic ? "identical" : "differs") << ", 1 vs 8 threads " << (same ? "identical" : "differ");
  return {rel <= 0.2 && deterministic && same, d.str()};
}

Outcome kshot_and_prefix() {
  DatasetManifest m;
  m.name = "kshot";
  m.classes = testing::toy_class_names(6);
  for (std::size_t c = 0; c < m.classes.size(); ++c) {
    const std::size_t available = c == 5 ? 2 : 7 + c;
    for (std::size_t i = 0; i < available; ++i) {
      const auto id = m.classes[c] + "_" + std::to_string(i);
      m.records.push_back({id, "images/" + id, m.classes[c], Split::train});
    }
    m.records.push_back({m.classes[c] + "_test", "images/t", m.classes[c], Split::test});
  }
  bool exact = true, deterministic = true, errors = true, seeds_differ = false;
  for (std::size_t k : {1, 3, 5}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const KShotSpec spec{k, seed, true};
      const auto a = sample_kshot(m, spec);
      deterministic &= a == sample_kshot(m, spec);
      seeds_differ |= seed > 0 && !(a == sample_kshot(m, {k, 0, true}));
      std::map<std::string, std::size_t> per_class;
      for (const auto& r : a.in_split(Split::train)) ++per_class[r.label];
      for (std::size_t c = 0; c < m.classes.size(); ++c) {
        exact &= per_class[m.classes[c]] == (c == 5 ? std::min<std::size_t>(k, 2) : k);
      }
      exact &= a.count(Split::test) == m.count(Split::test);
      if (k > 2) {
        try {
          sample_kshot(m, {k, seed, false});
          errors = false;
        } catch (const Error& e) {
          errors &= e.code() == ErrorCode::precondition &&
                    std::string(e.what()).find(m.classes[5]) != std::string::npos;
        }
      }
    }
  }
  bool prefix = true;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto inst = random_match_instance(5000 + seed);
    const std::size_t n = 1 + seed % 10;
    const auto a = match_training_images(inst.manifest, inst.store, inst.images, inst.captions, n);
    const auto b = match_training_images(inst.manifest, inst.store, inst.images, inst.captions, n + 1);
    for (std::size_t i = 0; i < a.size(); ++i) {
      prefix &= std::equal(a[i].ranked.begin(), a[i].ranked.end(), b[i].ranked.begin());
      prefix &= b[i].ranked.size() >= a[i].ranked.size();
    }
  }
  std::ostringstream d;
  d << "exact k " << (exact ? "yes" : "no") << ", deterministic " << (deterministic ? "yes" : "no")
    << ", seeds vary " << (seeds_differ ? "yes" : "no") << ", under-populated error " << (errors ? "yes" : "no")
    << ", n/n+1 prefix on 100 instances " << (prefix ? "yes" : "no");
  return {exact && deterministic && seeds_differ && errors && prefix, d.str()};
}

Outcome end_to_end() {
  const auto t0 = Clock::now();
  set_warning_sink([](const std::string&) {});
  double gist = 0.0, lp = 0.0;
  std::ostringstream per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    testing::TempDir dir("acceptance-e2e");
    const json overrides = {
        {"backend",
         {{"dim", 32}, {"seed", seed}, {"image_signal", 2.0}, {"nuisance_dims", 4}, {"nuisance_scale", 8.0}}},
        {"train", {{"epochs", 30}, {"learning_rate", 1e-2}}},
        {"probe", {{"epochs", 200}}},
        {"eval", {{"baselines", {"linear_probe"}}}}};
    const auto t = testing::write_toy_experiment(dir.path(), 10, {20, 5, 20}, overrides, seed);
    const auto r = run_pipeline(load_pipeline_config(t.config_path));
    double g = -1.0, l = -1.0;
    for (const auto& row : r.report.rows) {
      if (row.setting != "full") continue;
      if (row.method == "GIST") g = row.top1_mean;
      if (row.method == "LP") l = row.top1_mean;
    }
    if (g < 0.0 || l < 0.0) throw Error(ErrorCode::internal, "report lacks a full-data GIST or LP row");
    gist += g / 3.0;
    lp += l / 3.0;
    per_seed << (seed ? ", " : "") << fmt("%.1f", g) << "/" << fmt("%.1f", l);
  }
  set_warning_sink(nullptr);
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << "GIST " << fmt("%.2f", gist) << " vs LP " << fmt("%.2f", lp) << " top-1 (" << fmt("%+.2f", gist - lp)
    << " pp; per seed " << per_seed.str() << "), " << fmt("%.1f", secs) << " s";
  return {gist - lp >= 5.0 && secs < 120.0, d.str()};
}

Outcome dedup_check() {
  constexpr double threshold = 0.95605;
  constexpr std::size_t d = 32;
  std::mt19937_64 rng(8);
  std::map<std::string, EmbeddingVector> emb;
  DatasetManifest m;
  m.name = "dedup";
  m.classes = {"a", "b"};
  // Orthonormal directions guarantee controlled similarities between groups.
  Eigen::MatrixXd basis = Eigen::MatrixXd::Random(d, d);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(basis);
  const Eigen::MatrixXd q = qr.householderQ();
  auto column = [&](Eigen::Index c) { return std::vector<double>(q.col(c).data(), q.col(c).data() + d); };
  auto blend = [&](Eigen::Index c1, Eigen::Index c2, double cos, double norm) {
    const double sin = std::sqrt(1.0 - cos * cos);
    std::vector<double> v(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = norm * (cos * q(static_cast<Eigen::Index>(i), c1) +
                                                       sin * q(static_cast<Eigen::Index>(i), c2));
    return v;
  };
  std::set<std::pair<std::string, std::string>> planted;
  const Split splits[] = {Split::train, Split::val, Split::test};
  auto add = [&](const std::string& id, std::vector<double> v, Split s) {
    emb[id] = embedding(std::move(v));
    m.records.push_back({id, "images/" + id, m.classes[emb.size() % 2], s});
  };
  for (Eigen::Index g = 0; g < 10; ++g) {
    const std::string a = "orig" + std::to_string(g), b = "copy" + std::to_string(g);
    const std::string near = "near" + std::to_string(g);
    add(a, column(g), splits[g % 3]);
    // Planted copy just above the threshold, a near miss just below it.
    add(b, blend(g, 10 + g, threshold + 0.002, 3.0), splits[(g + 1) % 3]);
    add(near, blend(g, 20 + g % 10, threshold - 0.002, 0.5), splits[(g + 2) % 3]);
    planted.insert({std::min(a, b), std::max(a, b)});
  }
  for (int i = 0; i < 60; ++i) add("rand" + std::to_string(i), gaussian_vector(rng, d), splits[i % 3]);

  const auto pairs = find_near_duplicates(emb, threshold);
  std::set<std::pair<std::string, std::string>> found;
  for (const auto& p : pairs) found.insert({p.id_a, p.id_b});
  // Random vectors in 32 dimensions sit far below the threshold; any extra
  // pair would be a genuine false positive.
  const bool exact = found == planted;

  const auto resolved = resolve_split_leakage(m, pairs);
  std::map<std::string, Split> split_of;
  for (const auto& r : resolved.records) split_of[r.image_id] = r.split;
  std::size_t spanning = 0;
  for (const auto& p : pairs) spanning += (split_of[p.id_a] == Split::test) != (split_of[p.id_b] == Split::test);
  const bool count_kept = resolved.records.size() == m.records.size();
  std::ostringstream d_out;
  d_out << "found " << found.size() << " of " << planted.size() << " planted pairs, "
        << (exact ? "no extras" : "mismatch") << ", test-spanning after resolution " << spanning << ", records "
        << m.records.size() << " -> " << resolved.records.size();
  return {exact && spanning == 0 && count_kept, d_out.str()};
}

Outcome format_check() {
  const auto a = format_cell(75.77, 2.67);
  const auto b = format_cell(87.64, 0.44);
  return {a == "75.77 (2.67)" && b == "87.64 (0.44)", "\"" + a + "\", \"" + b + "\""};
}

}  // namespace

int main() {
  report(1, "matcher equals brute-force top-n", matcher_oracle);
  report(2, "contrastive loss equals the softmax cross-entropy oracle", loss_oracle_check);
  report(3, "analytic gradients match central differences", gradient_check);
  report(4, "normalization and scale invariance", scale_invariance);
  report(5, "bootstrap std matches the binomial standard error", bootstrap_check);
  report(6, "k-shot sampling and match prefix property", kshot_and_prefix);
  report(7, "fine-tuned probe beats the frozen probe end to end", end_to_end);
  report(8, "near-duplicate recovery and leakage resolution", dedup_check);
  report(9, "report cell format", format_check);
  return failures;
}
