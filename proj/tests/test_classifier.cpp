#include <cmath>

#include "doctest.h"
#include "gist/classifier.hpp"
#include "gist/error.hpp"
#include "support.hpp"

using namespace gist;
using gist::testing::TempDir;

namespace {
struct Blobs {
  Eigen::MatrixXd x;
  std::vector<int> y;
};

Blobs blobs(int classes, int per_class, int dim, double spread, std::uint64_t seed) {
  GaussianStream g(seed);
  Eigen::MatrixXd centers(classes, dim);
  for (int c = 0; c < classes; ++c) {
    for (int k = 0; k < dim; ++k) centers(c, k) = 3.0 * g.next();
  }
  Blobs b{Eigen::MatrixXd(classes * per_class, dim), {}};
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      for (int k = 0; k < dim; ++k) b.x(c * per_class + i, k) = centers(c, k) + spread * g.next();
      b.y.push_back(c);
    }
  }
  return b;
}

double accuracy(const Eigen::MatrixXd& scores, const std::vector<int>& y) {
  int hits = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index arg;
    scores.row(i).maxCoeff(&arg);
    hits += arg == y[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hits) / static_cast<double>(scores.rows());
}
}  // namespace

TEST_CASE("linear probe separates well-spread blobs and its objective falls") {
  const auto train = blobs(4, 20, 5, 0.5, 1);
  ProbeConfig c;
  c.epochs = 60;
  const auto r = train_linear_probe(train.x, train.y, {"a", "b", "c", "d"}, c);
  CHECK(r.epochs_run == 60);
  CHECK(r.epoch_objective.back() < r.epoch_objective.front());
  CHECK(accuracy(predict_all(r.probe, train.x), train.y) > 0.95);
  const auto again = train_linear_probe(train.x, train.y, {"a", "b", "c", "d"}, c);
  CHECK(again.probe.weights == r.probe.weights);
}

TEST_CASE("linear probe preconditions") {
  const auto b = blobs(3, 2, 4, 0.5, 2);
  CHECK_THROWS_AS(train_linear_probe(b.x.topRows(2), std::vector<int>{0, 1}, {"a", "b", "c"}, {}), Error);
  const std::vector<int> missing{0, 0, 1, 1, 0, 1};
  try {
    train_linear_probe(b.x, missing, {"a", "b", "c"}, {});
    FAIL("expected precondition");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::precondition);
    CHECK(std::string(e.what()).find("'c'") != std::string::npos);
  }
  CHECK_THROWS_AS(train_linear_probe(b.x, std::vector<int>{0, 1}, {"a", "b", "c"}, {}), Error);
}

TEST_CASE("early stopping keeps the best validation probe") {
  const auto train = blobs(3, 10, 4, 1.0, 3);
  const auto val = blobs(3, 5, 4, 1.0, 3);
  ProbeConfig c;
  c.epochs = 200;
  c.early_stopping = true;
  c.patience = 5;
  const auto r = train_linear_probe(train.x, train.y, {"a", "b", "c"}, c, &val.x, val.y);
  CHECK(r.epochs_run < 200);
}

TEST_CASE("probe and zero-shot heads round-trip through files") {
  TempDir dir("probe-io");
  const auto b = blobs(2, 5, 3, 0.5, 4);
  ProbeConfig c;
  c.epochs = 5;
  auto probe = train_linear_probe(b.x, b.y, {"x", "y"}, c).probe;
  probe.trained_on = "run-1";
  save_probe(probe, dir / "probe.bin");
  const auto loaded = load_probe(dir / "probe.bin");
  CHECK(loaded.class_order == probe.class_order);
  CHECK(loaded.trained_on == "run-1");
  CHECK((loaded.weights - probe.weights).cwiseAbs().maxCoeff() < 1e-6);

  auto enc = make_encoder("synthetic-8");
  const auto head = build_zeroshot_head(*enc, {"sea_holly", "rose"});
  save_zeroshot_head(head, dir / "zs.bin");
  const auto zs = load_zeroshot_head(dir / "zs.bin");
  CHECK(zs.class_order == head.class_order);
  CHECK(zs.templates == head.templates);
  CHECK((zs.class_embeddings - head.class_embeddings).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("zero-shot head averages normalized template embeddings") {
  auto enc = make_encoder("synthetic-8");
  const std::vector<std::string> templates{"a photo of a {class}.", "art of the {class}."};
  const auto head = build_zeroshot_head(*enc, {"sea_holly"}, templates);
  const std::vector<std::string> texts{"a photo of a sea holly.", "art of the sea holly."};
  const auto v = enc->encode_texts(texts);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(8);
  for (const auto& e : v) {
    Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(e.values.data(), 8);
    mean += x / x.norm();
  }
  mean.normalize();
  CHECK((head.class_embeddings.row(0).transpose() - mean).norm() < 1e-12);

  std::vector<std::string> reversed(templates.rbegin(), templates.rend());
  CHECK(build_zeroshot_head(*enc, {"sea_holly"}, reversed).class_embeddings == head.class_embeddings);
  CHECK_THROWS_AS(build_zeroshot_head(*enc, {"x"}, {"no placeholder"}), Error);
}

TEST_CASE("zero-shot scores are invariant to embedding scale") {
  auto enc = make_encoder("synthetic-8");
  const auto head = build_zeroshot_head(*enc, {"a", "b", "c"});
  Eigen::VectorXd x(8);
  x << 1, -2, 0.5, 3, 0, 1, 1, -1;
  const auto s1 = predict(head, x);
  const auto s2 = predict(head, x * 37.0);
  CHECK((s1 - s2).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(topk_indices(s1, 3) == topk_indices(s2, 3));
  CHECK_THROWS_AS(predict(head, Eigen::VectorXd::Zero(8)), Error);
  CHECK_THROWS_AS(predict(head, Eigen::VectorXd::Ones(3)), Error);
}

TEST_CASE("topk indices break ties toward the lower class index") {
  Eigen::VectorXd s(5);
  s << 0.2, 0.9, 0.5, 0.9, 0.1;
  CHECK(topk_indices(s, 3) == std::vector<std::size_t>{1, 3, 2});
  CHECK(display_class_name("sea_holly") == "sea holly");
}
