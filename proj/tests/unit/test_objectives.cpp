#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "test_util.hpp"
#include "xprotonet/imaging.hpp"
#include "xprotonet/model.hpp"
#include "xprotonet/objectives.hpp"

using namespace xprotonet;
using xprotonet::test::random_matrix;
using xprotonet::test::random_vector;
using xprotonet::test::tiny_config;

namespace {

BatchLabels labels_of(std::vector<std::vector<std::uint8_t>> rows, int classes) {
  return BatchLabels::from_rows(rows, classes);
}

Mat<double> row(std::initializer_list<double> values) {
  Mat<double> m(1, static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double v : values) m(0, i++) = v;
  return m;
}

}  // namespace

TEST_CASE("BatchLabels counts") {
  const BatchLabels l = labels_of({{1, 0, 0}, {1, 1, 0}, {0, 0, 0}}, 3);
  CHECK(l.num_pos == std::vector<int>{2, 1, 0});
  CHECK(l.num_neg == std::vector<int>{1, 2, 3});
  for (int c = 0; c < 3; ++c) CHECK(l.num_pos[c] + l.num_neg[c] == l.batch_size);
  CHECK_THROWS_AS(labels_of({{1, 0}}, 3), ConfigError);
}

TEST_CASE("classification_loss examples") {
  Mat<double> p(2, 1);
  p << 0.5, 0.5;
  CHECK(std::abs(classification_loss(p, labels_of({{1}, {0}}, 1), 2.0) - 0.34657359) < 1e-6);

  Mat<double> single(1, 1);
  single << 0.9;
  CHECK(std::abs(classification_loss(single, labels_of({{1}}, 1), 2.0) - 0.00105361) < 1e-8);

  Mat<double> confident(3, 1);
  confident.setConstant(1.0 - kProbabilityEpsilon);
  CHECK(classification_loss(confident, labels_of({{1}, {1}, {1}}, 1), 2.0) <= 1e-5);

  // Zero-count sides contribute nothing: an all-negative class at p = 0.5.
  Mat<double> neg(2, 1);
  neg << 0.5, 0.5;
  CHECK(std::abs(classification_loss(neg, labels_of({{0}, {0}}, 1), 2.0) - 0.25 * std::log(2.0)) < 1e-12);

  CHECK_THROWS_AS(classification_loss(p, labels_of({{1, 0}, {0, 1}}, 2), 2.0), ConfigError);
}

TEST_CASE("classification_loss with gamma 0 is count-weighted cross-entropy") {
  std::mt19937_64 rng(1);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 50; ++trial) {
    const int b = 6, c = 3;
    const Mat<double> p = random_matrix<double>(b, c, rng, 0.01, 0.99);
    std::vector<std::vector<std::uint8_t>> rows(b, std::vector<std::uint8_t>(c));
    for (auto& r : rows)
      for (auto& v : r) v = coin(rng);
    const BatchLabels l = labels_of(rows, c);
    double expected = 0.0;
    for (int k = 0; k < c; ++k) {
      int pos = 0;
      for (int i = 0; i < b; ++i) pos += rows[i][k];
      const int neg = b - pos;
      for (int i = 0; i < b; ++i) {
        if (rows[i][k]) expected += -std::log(p(i, k)) / pos;
        else expected += -std::log(1.0 - p(i, k)) / neg;
      }
    }
    REQUIRE(std::abs(classification_loss(p, l, 0.0) - expected) < 1e-8);
    REQUIRE(classification_loss(p, l, 2.0) >= 0.0);
  }
}

TEST_CASE("classification_term agrees with classification_loss") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> z(-4.0, 4.0);
  for (int trial = 0; trial < 50; ++trial) {
    const double logit = z(rng);
    const double p = 1.0 / (1.0 + std::exp(-logit));
    Mat<double> pm(1, 1);
    pm << p;
    double d = 0.0;
    CHECK(std::abs(classification_term(logit, true, 1, 2.0, &d) - classification_loss(pm, labels_of({{1}}, 1), 2.0)) <
          1e-12);
    const double h = 1e-6;
    const double fd = (classification_term(logit + h, true, 1, 2.0, nullptr) -
                       classification_term(logit - h, true, 1, 2.0, nullptr)) /
                      (2 * h);
    CHECK(std::abs(d - fd) < 1e-6);
  }
  double d = 1.0;
  CHECK(classification_term(0.3, true, 0, 2.0, &d) == 0.0);
  CHECK(d == 0.0);
}

TEST_CASE("cluster_separation_losses examples") {
  const std::vector<Mat<double>> sims = {row({0.2, 0.9, -0.1})};
  ClusterSeparation pos = cluster_separation_losses(sims, labels_of({{1}}, 1));
  CHECK(pos.clst == doctest::Approx(-0.9).epsilon(1e-15));
  CHECK(pos.sep == 0.0);
  ClusterSeparation neg = cluster_separation_losses(sims, labels_of({{0}}, 1));
  CHECK(neg.clst == 0.0);
  CHECK(neg.sep == doctest::Approx(0.9).epsilon(1e-15));

  const std::vector<Mat<double>> batch = {row({0.5, 0.1}), row({-0.3, 0.7})};
  CHECK(cluster_separation_losses(batch, labels_of({{0}, {0}}, 1)).clst == 0.0);
}

TEST_CASE("clst strictly decreases as the positive max similarity grows") {
  double previous = 1.0;
  for (double s = -0.9; s <= 0.95; s += 0.1) {
    const std::vector<Mat<double>> sims = {row({-1.0, s}), row({0.3, 0.2})};
    const double clst = cluster_separation_losses(sims, labels_of({{1}, {0}}, 1)).clst;
    CHECK(clst < previous);
    previous = clst;
  }
}

TEST_CASE("transformation_loss examples") {
  std::mt19937_64 rng(3);
  const Mat<double> m = random_matrix<double>(4, 16, rng, 0.0, 1.0);
  CHECK(transformation_loss(m, m) == 0.0);

  Mat<double> a(1, 4), b(1, 4);
  a << 0.2, 0.5, 0.7, 0.1;
  b = a.array() + 0.1;
  CHECK(std::abs(transformation_loss(a, b) - 0.4) < 1e-7);

  Mat<double> a2(2, 4), b2(2, 4);
  a2 << a, a;
  b2 << b, b;
  CHECK(transformation_loss(a2, b2) == 2.0 * transformation_loss(a, b));
  CHECK(transformation_loss(a, b) >= 0.0);
  CHECK_THROWS_AS(transformation_loss(a, b2), ConfigError);
}

TEST_CASE("transformation loss vanishes under the identity warp" * doctest::test_suite("invariant")) {
  const ModelConfig cfg = tiny_config();
  Network<double> net(cfg);
  xprotonet::test::randomize_biases(net, 8);
  const WarpOperator image_id = WarpOperator::center_scale(cfg.input_height, cfg.input_width, 1.0);
  const WarpOperator map_id = WarpOperator::center_scale(cfg.grid_height(), cfg.grid_width(), 1.0);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const Mat<double> x = random_matrix<double>(cfg.input_channels, 64, rng);
    const Mat<double> of_warped = net.forward(image_id.apply(x)).occurrence_maps;
    const Mat<double> warped = map_id.apply(net.forward(x).occurrence_maps);
    REQUIRE(transformation_loss(of_warped, warped) == 0.0);
  }
}

TEST_CASE("occurrence_loss examples") {
  CHECK(occurrence_loss(Mat<double>::Zero(3, 4), 0.0) == 0.0);
  CHECK(occurrence_loss(Mat<double>::Ones(1, 4), 0.0) == 4.0);
  CHECK(occurrence_loss(Mat<double>::Ones(1, 4), 0.25) == 4.25);
  const GridMask full(4, 1);
  CHECK(occurrence_loss(Mat<double>::Ones(1, 4), 0.0, &full) == 0.0);
  const GridMask half = {1, 1, 0, 0};
  CHECK(occurrence_loss(Mat<double>::Ones(2, 4), 0.0, &half) == 4.0);

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial)
    CHECK(occurrence_loss(random_matrix<double>(3, 16, rng, 0.0, 1.0), 0.0) >= 0.0);
}

TEST_CASE("total_loss examples and decomposition") {
  LossConfig cfg;
  LossBreakdown parts;
  parts.cls = 1.0;
  parts.clst = 0.2;
  parts.sep = 0.3;
  parts.occur = 0.4;
  CHECK(std::abs(total_loss(parts, cfg).total - 1.45) < 1e-9);

  LossConfig zero;
  zero.lambda_clst = zero.lambda_sep = zero.lambda_occur = 0.0;
  zero.annotated_lambda_clst = zero.annotated_lambda_sep = 0.0;
  CHECK(total_loss(parts, zero).total == 1.0);
  CHECK(total_loss(LossBreakdown{}, cfg).total == 0.0);

  const LossBreakdown t = total_loss(parts, cfg);
  CHECK(std::abs(t.total - (t.cls + cfg.lambda_clst * t.clst + cfg.lambda_sep * t.sep + cfg.lambda_occur * t.occur)) <
        1e-6);
}

TEST_CASE("bbox_pooled_feature examples and loop oracle" * doctest::test_suite("oracle")) {
  std::mt19937_64 rng(5);
  const Mat<double> f = random_matrix<double>(8, 16, rng);
  const Vec<double> m = random_vector<double>(16, rng, 0.0, 1.0);
  CHECK(bbox_pooled_feature<double>(f, m, GridMask(16, 1)) == pool_feature<double>(f, m));

  GridMask one(16, 0);
  one[6] = 1;
  Vec<double> selector = m;
  selector(6) = 1.0;
  CHECK(bbox_pooled_feature<double>(f, selector, one) == Vec<double>(f.col(6)));
  CHECK_THROWS_AS(bbox_pooled_feature<double>(f, m, GridMask(16, 0)), ConfigError);

  std::bernoulli_distribution inside(0.4);
  for (int trial = 0; trial < 200; ++trial) {
    const Mat<double> ft = random_matrix<double>(8, 16, rng, -2.0, 2.0);
    const Vec<double> mt = random_vector<double>(16, rng, 0.0, 1.0);
    GridMask mask(16, 0);
    for (auto& v : mask) v = inside(rng);
    mask[trial % 16] = 1;
    Vec<double> expected = Vec<double>::Zero(8);
    for (int u = 0; u < 16; ++u) {
      if (!mask[u]) continue;
      for (int d = 0; d < 8; ++d) expected(d) += mt(u) * ft(d, u);
    }
    REQUIRE((bbox_pooled_feature<double>(ft, mt, mask) - expected).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("batch objective routes annotated and unannotated cluster terms") {
  const ModelConfig cfg = tiny_config();
  Network<double> net(cfg);
  xprotonet::test::randomize_biases(net, 6);
  std::mt19937_64 rng(7);
  std::vector<Mat<double>> images;
  for (int i = 0; i < 2; ++i) images.push_back(random_matrix<double>(2, 64, rng));
  const std::vector<std::vector<std::uint8_t>> labels = {{1, 0}, {1, 0}};

  GridMask box(16, 0);
  for (int u : {0, 1, 4, 5}) box[u] = 1;
  std::vector<TrainingExample<double>> batch(2);
  for (int i = 0; i < 2; ++i) {
    batch[i].image = &images[i];
    batch[i].labels = &labels[i];
  }
  batch[1].annotated = true;
  batch[1].box_masks = {box, std::nullopt};

  LossConfig loss;
  ObjectiveOptions options;
  options.weights = TermWeights::from(loss);
  CHECK(options.weights.clst == 0.5);
  CHECK(options.weights.clst_annotated == 1.5);
  const LossBreakdown got = batch_objective<double>(net, batch, loss, options);

  // Recompute: class 0 has two positives, class 1 two negatives.
  const ModelOutput<double> out0 = net.forward(images[0]);
  const ModelOutput<double> out1 = net.forward(images[1]);
  const double clst_plain = -out0.similarities.row(0).maxCoeff() / 2.0;
  double best_boxed = -2.0;
  for (int k = 0; k < 2; ++k) {
    const Vec<double> f = bbox_pooled_feature<double>(out1.features, out1.occurrence_maps.row(k).transpose(), box);
    best_boxed = std::max(best_boxed, cosine_similarity<double>(f, net.bank().vectors.row(k).transpose()));
  }
  const double clst_boxed = -best_boxed / 2.0;
  const double sep_plain = out0.similarities.row(1).maxCoeff() / 2.0;
  const double sep_boxed = out1.similarities.row(1).maxCoeff() / 2.0;
  CHECK(std::abs(got.clst - clst_plain) < 1e-12);
  CHECK(std::abs(got.clst_annotated - clst_boxed) < 1e-12);
  CHECK(std::abs(got.sep - sep_plain) < 1e-12);
  CHECK(std::abs(got.sep_annotated - sep_boxed) < 1e-12);

  // Outside-box L1 for the annotated sample's class-0 maps, full L1 elsewhere.
  double l1 = out0.occurrence_maps.sum() + out1.occurrence_maps.bottomRows(2).sum();
  for (int k = 0; k < 2; ++k)
    for (int u = 0; u < 16; ++u)
      if (!box[u]) l1 += out1.occurrence_maps(k, u);
  CHECK(std::abs(got.occur - l1 / 2.0) < 1e-12);

  const double expected = got.cls + 0.5 * clst_plain + 1.5 * clst_boxed + 0.5 * sep_plain + 1.5 * sep_boxed +
                          0.5 * got.occur;
  CHECK(std::abs(got.total - expected) < 1e-12);
  CHECK(std::abs(got.combine(loss) - got.total) < 1e-12);
}

TEST_CASE("batch objective without annotations matches the plain loss functions") {
  const ModelConfig cfg = tiny_config();
  Network<double> net(cfg);
  xprotonet::test::randomize_biases(net, 8);
  std::mt19937_64 rng(9);
  std::vector<Mat<double>> images;
  for (int i = 0; i < 4; ++i) images.push_back(random_matrix<double>(2, 64, rng));
  const std::vector<std::vector<std::uint8_t>> labels = {{1, 0}, {0, 1}, {1, 1}, {0, 0}};
  std::vector<TrainingExample<double>> batch(4);
  Mat<double> probs(4, 2);
  std::vector<Mat<double>> sims;
  double l1 = 0;
  for (int i = 0; i < 4; ++i) {
    batch[i].image = &images[i];
    batch[i].labels = &labels[i];
    const ModelOutput<double> out = net.forward(images[i]);
    probs.row(i) = out.probabilities.transpose();
    sims.push_back(out.similarities);
    l1 += out.occurrence_maps.sum();
  }
  LossConfig loss;
  ObjectiveOptions options;
  options.weights = TermWeights::from(loss);
  const LossBreakdown got = batch_objective<double>(net, batch, loss, options);
  const BatchLabels l = BatchLabels::from_rows(labels, 2);
  const ClusterSeparation cs = cluster_separation_losses(sims, l);
  CHECK(std::abs(got.cls - classification_loss(probs, l, loss.gamma)) < 1e-12);
  CHECK(std::abs(got.clst - cs.clst) < 1e-12);
  CHECK(std::abs(got.sep - cs.sep) < 1e-12);
  CHECK(got.clst_annotated == 0.0);
  CHECK(got.sep_annotated == 0.0);
  CHECK(std::abs(got.occur - l1 / 4.0) < 1e-12);
  CHECK(std::abs(got.total - total_loss(got, loss).total) < 1e-12);
}
