// Acceptance runner: one PASS/FAIL line per criterion, exit status 0 only if
// all seven pass. Criteria 1-3 run the tagged unit-test suites linked into
// this binary; criteria 4-7 train on the desk-scale synthetic benchmark.
#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "xprotonet/config.hpp"
#include "xprotonet/pipeline.hpp"

using namespace xprotonet;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool report(int criterion, bool pass, const std::string& detail) {
  std::printf("criterion %d: %s  %s\n", criterion, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  return pass;
}

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), format, a, b, c);
  return buf;
}

// Counts executed test cases so an empty filter cannot pass silently.
int g_cases_run = 0;

struct CaseCounter : doctest::IReporter {
  explicit CaseCounter(const doctest::ContextOptions&) {}
  void report_query(const doctest::QueryData&) override {}
  void test_run_start() override {}
  void test_run_end(const doctest::TestRunStats&) override {}
  void test_case_start(const doctest::TestCaseData&) override { ++g_cases_run; }
  void test_case_reenter(const doctest::TestCaseData&) override {}
  void test_case_end(const doctest::CurrentTestCaseStats&) override {}
  void test_case_exception(const doctest::TestCaseException&) override {}
  void subcase_start(const doctest::SubcaseSignature&) override {}
  void subcase_end() override {}
  void log_assert(const doctest::AssertData&) override {}
  void log_message(const doctest::MessageData&) override {}
  void test_case_skipped(const doctest::TestCaseData&) override {}
};
REGISTER_LISTENER("case_counter", 1, CaseCounter);

struct SuiteResult {
  bool pass = false;
  int cases = 0;
  double seconds = 0.0;
};

// Runs the unit-test cases tagged with `suite`.
SuiteResult run_suite(const char* suite) {
  doctest::Context context;
  context.addFilter("test-suite", suite);
  context.setOption("minimal", true);
  g_cases_run = 0;
  const auto t0 = Clock::now();
  const int failed = context.run();
  SuiteResult r;
  r.seconds = seconds_since(t0);
  r.cases = g_cases_run;
  r.pass = failed == 0 && r.cases > 0;
  return r;
}

struct RunResult {
  Evaluation eval;
  Localization localization;
  std::vector<std::string> metrics;
  int cycles = 0;
  int warmup_epochs = 0;
  bool provenance_in_boxes = true;
  int constrained_prototypes = 0;
  double seconds = 0.0;
};

RunResult train_run(RunConfig cfg, const Dataset& data, Variant variant, bool prior) {
  const auto t0 = Clock::now();
  cfg.model.variant = variant;
  cfg.train.prior_condition = prior;
  Network<float> net(resolved_model_config(cfg, data));
  Trainer trainer(net, data.train, data.val, cfg.train, cfg.loss, data.preprocess);
  trainer.run();
  RunResult r;
  for (const MetricsRecord& m : trainer.state().history) {
    r.metrics.push_back(metrics_line(m));
    if (m.stage == Stage::kWarmup) ++r.warmup_epochs;
    if (m.stage == Stage::kHead) r.cycles = std::max(r.cycles, m.cycle + 1);
  }
  r.eval = evaluate<float>(net, data.test);
  if (variant == Variant::kXProtoNet) r.localization = localization_rate(net, data.test);

  if (prior) {
    // Construction check: each constrained prototype's occurrence snapshot
    // has no weight outside the rasterized box of its source image.
    const ModelConfig& mc = net.config();
    for (int j = 0; j < mc.num_prototypes(); ++j) {
      const int c = j / mc.prototypes_per_class;
      const auto& prov = net.bank().provenance[j];
      if (!trainer.constrained_classes()[c]) continue;
      ++r.constrained_prototypes;
      if (!prov || !prov->box_restricted) {
        r.provenance_in_boxes = false;
        continue;
      }
      const PreparedSample* source = nullptr;
      for (const PreparedSample& s : data.train)
        if (s.id == prov->image_id) source = &s;
      if (!source) {
        r.provenance_in_boxes = false;
        continue;
      }
      const auto masks = box_masks(source->boxes, mc.num_classes, mc.input_height, mc.input_width,
                                   mc.grid_height(), mc.grid_width());
      if (!masks[c]) {
        r.provenance_in_boxes = false;
        continue;
      }
      for (int u = 0; u < mc.grid_cells(); ++u)
        if (!(*masks[c])[u] && prov->occurrence_map[u] != 0.0) r.provenance_in_boxes = false;
    }
  }
  r.seconds = seconds_since(t0);
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string config_path = argc > 1 ? argv[1] : XPROTONET_SOURCE_DIR "/configs/desk.json";
  bool all = true;

  const SuiteResult grad = run_suite("gradient");
  all &= report(1, grad.pass && grad.seconds < 60.0,
                std::to_string(grad.cases) + fmt(" gradient cases, relative error < 1e-4, %.2f s (< 60 s)", grad.seconds));
  const SuiteResult oracle = run_suite("oracle");
  all &= report(2, oracle.pass && oracle.cases == 5 && oracle.seconds < 60.0,
                std::to_string(oracle.cases) + fmt(" oracle cases of >= 100 instances, %.2f s (< 60 s)", oracle.seconds));
  const SuiteResult inv = run_suite("invariant");
  all &= report(3, inv.pass, std::to_string(inv.cases) + fmt(" codomain, invariant, freeze and checkpoint cases, %.2f s",
                                                             inv.seconds));

  const RunConfig cfg = load_run_config(config_path);
  const Dataset data = load_dataset(cfg);
  std::printf("desk benchmark: %zu train / %zu val / %zu test, seed %llu\n", data.train.size(), data.val.size(),
              data.test.size(), static_cast<unsigned long long>(cfg.seed));
  std::fflush(stdout);

  const RunResult x = train_run(cfg, data, Variant::kXProtoNet, false);
  const RunResult gap = train_run(cfg, data, Variant::kGap, false);
  const double budget = x.seconds + gap.seconds;
  const bool schedule = x.warmup_epochs == cfg.train.warmup_epochs && x.cycles >= 2 && gap.cycles >= 2;
  all &= report(4,
                schedule && x.eval.mean_auc >= 0.90 && x.eval.mean_auc >= gap.eval.mean_auc && budget < 1200.0,
                fmt("xprotonet mean AUC %.4f (>= 0.90), gap %.4f (xprotonet >= gap), ", x.eval.mean_auc,
                    gap.eval.mean_auc) +
                    std::to_string(x.cycles) + fmt(" cycles, %.0f s (< 1200 s)", budget));
  all &= report(5, x.localization.rate() >= 0.70,
                fmt("occurrence peak inside planted box for %.3f of %.0f positive test cases (>= 0.70)",
                    x.localization.rate(), x.localization.total));

  const RunResult prior = train_run(cfg, data, Variant::kXProtoNet, true);
  const double gap_auc = std::abs(prior.eval.mean_auc - x.eval.mean_auc);
  const bool inside = prior.provenance_in_boxes && prior.constrained_prototypes > 0;
  all &= report(6, inside && gap_auc <= 0.05,
                std::to_string(prior.constrained_prototypes) + " constrained prototypes, provenance " +
                    (inside ? "inside" : "NOT inside") + " source boxes" +
                    fmt(", prior mean AUC %.4f vs %.4f (|diff| %.4f <= 0.05)", prior.eval.mean_auc,
                        x.eval.mean_auc, gap_auc));

  const RunResult repeat = train_run(cfg, data, Variant::kXProtoNet, false);
  const bool identical = repeat.metrics == x.metrics && !x.metrics.empty();
  all &= report(7, identical,
                std::string("repeat run metrics log ") + (identical ? "identical" : "differs") + " (" +
                    std::to_string(x.metrics.size()) + " records)");

  std::printf("acceptance: %s\n", all ? "PASS" : "FAIL");
  return all ? 0 : 1;
}
