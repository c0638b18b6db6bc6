#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "test_util.hpp"
#include "xprotonet/config.hpp"
#include "xprotonet/eval.hpp"
#include "xprotonet/explain.hpp"

using namespace xprotonet;
using xprotonet::test::random_matrix;
using xprotonet::test::tiny_config;

namespace {

double auc_pairs(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double won = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      ++pairs;
      if (s[i] > s[j]) won += 1.0;
      else if (s[i] == s[j]) won += 0.5;
    }
  }
  return won / pairs;
}

// A float network with random biases and head weights in [0.2, 1.5].
Network<float> small_net(std::uint64_t seed, Variant variant = Variant::kXProtoNet) {
  Network<double> net(tiny_config(variant));
  xprotonet::test::randomize_biases(net, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> w(0.2, 1.5);
  for (Eigen::Index i = 0; i < net.head_weights().size(); ++i) net.head_weights().data()[i] = w(rng);
  return net.cast<float>();
}

std::vector<PreparedSample> random_samples(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::uniform_real_distribution<double> pos(0.0, 5.0);
  std::vector<PreparedSample> out;
  for (int i = 0; i < n; ++i) {
    PreparedSample s;
    s.id = "s" + std::to_string(i);
    s.image = random_matrix<float>(2, 64, rng);
    s.labels = {static_cast<std::uint8_t>(coin(rng)), static_cast<std::uint8_t>(coin(rng))};
    if (i % 3 == 0) s.labels[0] = 1;
    if (i % 3 == 1) s.labels[1] = 1;
    for (int c = 0; c < 2; ++c)
      if (s.labels[c] && coin(rng)) s.boxes.push_back({c, {pos(rng), pos(rng), 3.0, 2.5}});
    s.annotated = !s.boxes.empty();
    out.push_back(std::move(s));
  }
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("auc examples") {
  CHECK(auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<std::uint8_t>{0, 0, 1, 1}) == 1.0);
  CHECK(auc(std::vector<double>{0.4, 0.4, 0.4, 0.4}, std::vector<std::uint8_t>{0, 1, 0, 1}) == 0.5);
  CHECK(auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<std::uint8_t>{0, 0, 1, 1}) == 0.75);
  CHECK_FALSE(auc(std::vector<double>{0.1, 0.2}, std::vector<std::uint8_t>{1, 1}).has_value());
  CHECK_FALSE(auc(std::vector<double>{0.1, 0.2}, std::vector<std::uint8_t>{0, 0}).has_value());
  CHECK_THROWS_AS(auc(std::vector<double>{0.1}, std::vector<std::uint8_t>{0, 1}), ConfigError);
}

TEST_CASE("auc matches the all-pairs oracle on random instances" * doctest::test_suite("oracle")) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> size(2, 50);
  std::uniform_int_distribution<int> level(0, 9);  // coarse scores force ties
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = size(rng);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = trial % 2 ? level(rng) / 10.0 : std::uniform_real_distribution<double>(0, 1)(rng);
      y[i] = coin(rng);
    }
    y[0] = 1;
    y[1] = 0;
    const auto a = auc(s, y);
    REQUIRE(a.has_value());
    REQUIRE(std::abs(*a - auc_pairs(s, y)) < 1e-12);
    REQUIRE(*a >= 0.0);
    REQUIRE(*a <= 1.0);
  }
}

TEST_CASE("evaluate_scores: constant and oracle outputs") {
  const std::vector<std::vector<std::uint8_t>> labels = {{1, 0, 0}, {0, 1, 0}, {1, 1, 0}, {0, 0, 0}};
  const Evaluation constant = evaluate_scores(Mat<double>::Constant(4, 3, 0.3), labels);
  CHECK(constant.per_class[0] == 0.5);
  CHECK(constant.per_class[1] == 0.5);
  CHECK_FALSE(constant.per_class[2].has_value());
  CHECK(constant.defined_classes == 2);
  CHECK(constant.mean_auc == 0.5);

  Mat<double> truth(4, 3);
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 3; ++c) truth(i, c) = labels[i][c];
  const Evaluation oracle = evaluate_scores(truth, labels);
  CHECK(oracle.mean_auc == 1.0);

  const Evaluation none = evaluate_scores(Mat<double>::Constant(1, 3, 0.3), {{1, 0, 0}});
  CHECK(std::isnan(none.mean_auc));
  CHECK(none.defined_classes == 0);
}

TEST_CASE("evaluate matches per-sample scoring and a constant model scores 0.5") {
  Network<float> net = small_net(2);
  const std::vector<PreparedSample> samples = random_samples(20, 3);
  const Evaluation ev = evaluate<float>(net, samples);
  Mat<double> probs(20, 2);
  std::vector<std::vector<std::uint8_t>> labels;
  for (int i = 0; i < 20; ++i) {
    probs.row(i) = net.forward(samples[i].image).probabilities.cast<double>().transpose();
    labels.push_back(samples[i].labels);
  }
  const Evaluation ref = evaluate_scores(probs, labels);
  for (int c = 0; c < 2; ++c) CHECK(std::abs(*ev.per_class[c] - *ref.per_class[c]) < 1e-12);

  net.head_weights().setZero();
  const Evaluation flat = evaluate<float>(net, samples);
  CHECK(flat.mean_auc == 0.5);
}

TEST_CASE("normalized maps peak at exactly one") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const Mat<double> grid = random_matrix<double>(16, 1, rng, 0.0, 0.2);
    const NormalizedMap m = normalize_occurrence({grid.data(), 16}, 4, 4, 32, 32);
    CHECK_FALSE(m.zero_map);
    CHECK(*std::max_element(m.values.begin(), m.values.end()) == 1.0);
    CHECK(*std::min_element(m.values.begin(), m.values.end()) >= 0.0);
  }
  const std::vector<double> zeros(16, 0.0);
  const NormalizedMap z = normalize_occurrence(zeros, 4, 4, 32, 32);
  CHECK(z.zero_map);
  CHECK(std::all_of(z.values.begin(), z.values.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("one-hot 2x2 map: contour encloses the thresholded upsampled footprint") {
  // Bilinear weight of source cell 0 at output pixel p of a 2 -> 16 resize
  // (half-pixel centers, edge clamped), written out by hand.
  auto weight = [](int p) {
    const double s = std::clamp((p + 0.5) / 8.0 - 0.5, 0.0, 1.0);
    return 1.0 - s;
  };
  const std::vector<double> one_hot = {1.0, 0.0, 0.0, 0.0};
  const NormalizedMap m = normalize_occurrence(one_hot, 2, 2, 16, 16);
  const std::vector<Polygon> contours = iso_contours(m.values, 16, 16, 0.3);
  REQUIRE_FALSE(contours.empty());
  int above = 0;
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      const double expected = weight(x) * weight(y);
      CHECK(std::abs(m.values[y * 16 + x] - expected) < 1e-6);
      const bool in = expected > 0.3;
      above += in;
      CHECK(inside_contours(contours, x + 0.5, y + 0.5) == in);
    }
  }
  // Rows 0-3 reach x = 9 (weight 0.3125); row 8 (0.4375) reaches x = 6,
  // where 0.6875 * 0.4375 = 0.30078.
  CHECK(above > 16);
  CHECK(inside_contours(contours, 9.5, 0.5));
  CHECK_FALSE(inside_contours(contours, 10.5, 0.5));
  CHECK(inside_contours(contours, 6.5, 8.5));
  CHECK_FALSE(inside_contours(contours, 7.5, 8.5));
}

TEST_CASE("contours enclose exactly the cells above the level on random fields") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const int h = 5 + trial % 7, w = 4 + trial % 5;
    const Mat<double> f = random_matrix<double>(h * w, 1, rng, 0.0, 1.0);
    const std::vector<double> field(f.data(), f.data() + f.size());
    const auto contours = iso_contours(field, h, w, 0.3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        REQUIRE(inside_contours(contours, x + 0.5, y + 0.5) == (field[y * w + x] > 0.3));
  }
  CHECK(iso_contours(std::vector<double>(12, 0.1), 3, 4, 0.3).empty());
}

TEST_CASE("local explanation contributions reproduce the probabilities") {
  Network<float> net = small_net(6);
  net.head_weights()(1, 0) = -0.5f;
  prune_prototypes<float>(net);
  const ExplainConfig config;
  for (const PreparedSample& s : random_samples(6, 7)) {
    const LocalExplanation ex = render_local(net, s, config);
    CHECK(ex.prototypes.size() == 3);
    for (int c = 0; c < 2; ++c) {
      double z = 0.0;
      for (const PrototypeContribution& pc : ex.prototypes) {
        if (pc.class_index != c) continue;
        CHECK(pc.contribution == doctest::Approx(pc.weight * pc.similarity));
        z += pc.contribution;
      }
      CHECK(std::abs(1.0 / (1.0 + std::exp(-z)) - ex.probabilities[c]) < 1e-6);
      const PrototypeContribution* top = top_contribution(ex, c);
      REQUIRE(top != nullptr);
      for (const PrototypeContribution& pc : ex.prototypes)
        if (pc.class_index == c) CHECK(top->contribution >= pc.contribution);
    }
  }
}

TEST_CASE("explanation documents are byte-identical across calls") {
  Network<float> net = small_net(8);
  const std::vector<PreparedSample> samples = random_samples(2, 9);
  const ExplainConfig config;
  xprotonet::test::TempDir a("explain_a"), b("explain_b");
  write_local_explanation(a.path(), render_local(net, samples[0], config), samples[0], net, config);
  write_local_explanation(b.path(), render_local(net, samples[0], config), samples[0], net, config);
  int files = 0;
  for (const auto& entry : std::filesystem::directory_iterator(a.path())) {
    ++files;
    CHECK(slurp(entry.path()) == slurp(b.path() / entry.path().filename()));
  }
  CHECK(files == 1 + 4);
  const auto doc = read_json(a.path() / "s0.json");
  CHECK(doc["schema"] == "xprotonet.local_explanation");
  CHECK(doc["version"] == kExplanationVersion);
}

TEST_CASE("global explanation records and nearest annotated image") {
  Network<float> net = small_net(10);
  const std::vector<PreparedSample> training = random_samples(12, 11);
  const std::vector<PreparedSample> annotated = random_samples(15, 12);
  const ExplainConfig config;
  CHECK_THROWS_WITH_AS(render_global(net, training, annotated, config), doctest::Contains("project"), ModelError);

  std::vector<ProjectionCandidate<float>> cands;
  for (const PreparedSample& s : training) cands.push_back({&s.id, &s.image, &s.labels, nullptr});
  project_prototypes<float>(net, cands);
  const std::vector<GlobalRecord> records = render_global(net, training, annotated, config);
  REQUIRE(records.size() == 4);
  for (const GlobalRecord& r : records) {
    const auto src = std::find_if(training.begin(), training.end(),
                                  [&](const PreparedSample& s) { return s.id == r.source_image_id; });
    REQUIRE(src != training.end());
    CHECK(src->labels[r.class_index] == 1);

    // Linear scan over annotated positives with a box of the class.
    double best = -2.0;
    std::string best_id;
    for (const PreparedSample& s : annotated) {
      bool has_box = false;
      for (const LabeledBox& b : s.boxes) has_box = has_box || b.class_index == r.class_index;
      if (!has_box || !s.labels[r.class_index]) continue;
      const double sim = net.forward(s.image).similarities(r.class_index, r.prototype);
      if (sim > best) {
        best = sim;
        best_id = s.id;
      }
    }
    REQUIRE(r.nearest.has_value());
    CHECK(r.nearest->image_id == best_id);
    CHECK(r.nearest->similarity == doctest::Approx(best));
    CHECK(r.nearest->box_overlap >= 0.0);
    CHECK(r.nearest->box_overlap <= 1.0);
  }
}

TEST_CASE("box_overlap_fraction") {
  NormalizedMap m;
  m.height = 4;
  m.width = 4;
  m.values.assign(16, 0.0);
  m.values[0] = 1.0;
  m.values[15] = 0.5;
  m.values[5] = 0.2;  // below the threshold
  CHECK(box_overlap_fraction(m, {{0, 0, 1, 1}}, 0.3) == doctest::Approx(1.0 / 1.5));
  CHECK(box_overlap_fraction(m, {{0, 0, 4, 4}}, 0.3) == 1.0);
  CHECK(box_overlap_fraction(m, {{1, 1, 1, 1}}, 0.3) == 0.0);
  m.values.assign(16, 0.0);
  CHECK(box_overlap_fraction(m, {{0, 0, 4, 4}}, 0.3) == 0.0);
}
