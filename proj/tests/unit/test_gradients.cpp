#include <doctest.h>

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "xprotonet/model.hpp"
#include "xprotonet/objectives.hpp"

using namespace xprotonet;

namespace {

constexpr double kStep = 1e-5;
constexpr double kTolerance = 1e-4;

ModelConfig tiny_config(Variant variant) {
  ModelConfig cfg;
  cfg.num_classes = 2;
  cfg.prototypes_per_class = 2;
  cfg.feature_dim = 8;
  cfg.input_channels = 2;
  cfg.input_height = 8;
  cfg.input_width = 8;
  cfg.backbone_channels = {3};  // stride 2: 4 x 4 grid
  cfg.variant = variant;
  cfg.patch_r = 2;
  cfg.seed = 11;
  return cfg;
}

struct Fixture {
  explicit Fixture(Variant variant)
      : net(tiny_config(variant)), transforms({0.75, 0.875}, 8, 8, 4, 4) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> head(0.3, 1.7);
    for (Eigen::Index i = 0; i < net.head_weights().size(); ++i) net.head_weights().data()[i] = head(rng);
    // Zero biases put hidden pre-activations exactly on the relu kink wherever
    // the backbone output vanishes, which breaks central differences.
    std::uniform_real_distribution<double> bias(-0.3, 0.3);
    for (const ParamView<double>& p : net.parameters())
      if (p.name.ends_with(".bias"))
        for (Eigen::Index i = 0; i < p.size(); ++i) p.value[i] = bias(rng);
    labels = {{1, 0}, {0, 1}, {1, 1}, {0, 0}, {1, 0}};
    for (int i = 0; i < 5; ++i) {
      Mat<double> img(2, 64);
      for (Eigen::Index j = 0; j < img.size(); ++j) img.data()[j] = gauss(rng);
      images.push_back(img);
    }
    for (int i = 0; i < 5; ++i) {
      TrainingExample<double> ex;
      ex.image = &images[i];
      ex.labels = &labels[i];
      ex.transform = transforms.get(i % 2);
      examples.push_back(ex);
    }
  }

  // Samples 0 and 2 carry boxes for class 0 (prior condition routing).
  void annotate() {
    GridMask box(16, 0);
    box[5] = box[6] = box[9] = box[10] = 1;
    GridMask wide(16, 0);
    for (int u = 0; u < 8; ++u) wide[u] = 1;
    for (int i : {0, 2}) {
      examples[i].annotated = true;
      examples[i].box_masks.assign(2, std::nullopt);
      examples[i].box_masks[0] = i == 0 ? box : wide;
    }
  }

  double loss(const TermWeights& weights) {
    ObjectiveOptions options;
    options.weights = weights;
    return batch_objective<double>(net, examples, LossConfig{}, options).total;
  }

  Network<double> net;
  ResizeTransformSet transforms;
  std::vector<std::vector<std::uint8_t>> labels;
  std::vector<Mat<double>> images;
  std::vector<TrainingExample<double>> examples;
};

struct GroupError {
  double diff = 0.0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Analytic gradient vs central differences, accumulated per parameter group.
std::map<ParamGroup, GroupError> compare(Fixture& fx, const TermWeights& weights) {
  fx.net.zero_grad();
  ObjectiveOptions options;
  options.weights = weights;
  options.backward = true;
  batch_objective<double>(fx.net, fx.examples, LossConfig{}, options);

  std::map<ParamGroup, GroupError> errors;
  for (const ParamView<double>& p : fx.net.parameters()) {
    std::vector<double> analytic(p.grad, p.grad + p.size());
    GroupError& e = errors[p.group];
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + kStep;
      const double up = fx.loss(weights);
      p.value[i] = saved - kStep;
      const double down = fx.loss(weights);
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * kStep);
      e.diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      e.analytic += analytic[i] * analytic[i];
      e.numeric += numeric * numeric;
    }
  }
  return errors;
}

void check_term(Fixture& fx, const TermWeights& weights, const std::string& term) {
  const auto errors = compare(fx, weights);
  double total_norm = 0.0;
  for (const auto& [group, e] : errors) {
    const double scale = std::max(std::sqrt(e.analytic), std::sqrt(e.numeric));
    total_norm += scale;
    const double rel = scale > 1e-9 ? std::sqrt(e.diff) / scale : std::sqrt(e.diff);
    INFO(term << " / " << to_string(group) << ": |g| = " << scale << ", relative error " << rel);
    CHECK(rel < kTolerance);
  }
  INFO(term << " has no gradient at all");
  CHECK(total_norm > 1e-6);
}

TermWeights only(double TermWeights::*field) {
  TermWeights w;
  w.cls = 0.0;
  w.*field = 1.0;
  return w;
}

}  // namespace

TEST_CASE("classification loss gradients match finite differences" * doctest::test_suite("gradient")) {
  Fixture fx(Variant::kXProtoNet);
  check_term(fx, only(&TermWeights::cls), "cls");
}

TEST_CASE("cluster and separation gradients match finite differences" * doctest::test_suite("gradient")) {
  Fixture fx(Variant::kXProtoNet);
  check_term(fx, only(&TermWeights::clst), "clst");
  check_term(fx, only(&TermWeights::sep), "sep");
}

TEST_CASE("box-restricted cluster and separation gradients match finite differences" * doctest::test_suite("gradient")) {
  Fixture fx(Variant::kXProtoNet);
  fx.annotate();
  check_term(fx, only(&TermWeights::clst_annotated), "clst_annotated");
  check_term(fx, only(&TermWeights::sep_annotated), "sep_annotated");
}

TEST_CASE("transformation loss gradients match finite differences" * doctest::test_suite("gradient")) {
  Fixture fx(Variant::kXProtoNet);
  check_term(fx, only(&TermWeights::trans), "trans");
}

TEST_CASE("occurrence loss gradients match finite differences" * doctest::test_suite("gradient")) {
  Fixture fx(Variant::kXProtoNet);
  TermWeights w = only(&TermWeights::occurrence_l1);
  w.trans = 1.0;
  check_term(fx, w, "occur");
  fx.annotate();
  check_term(fx, w, "occur (outside boxes)");
}

TEST_CASE("total objective gradients match finite differences" * doctest::test_suite("gradient")) {
  Fixture fx(Variant::kXProtoNet);
  check_term(fx, TermWeights::from(LossConfig{}), "total");
  fx.annotate();
  check_term(fx, TermWeights::from(LossConfig{}), "total (prior condition)");
}

TEST_CASE("baseline variants have correct gradients" * doctest::test_suite("gradient")) {
  for (Variant v : {Variant::kGap, Variant::kPatch}) {
    Fixture fx(v);
    CAPTURE(to_string(v));
    check_term(fx, TermWeights::from(LossConfig{}), "total");
  }
}
