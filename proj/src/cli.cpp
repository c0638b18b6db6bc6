#include "xprotonet/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "xprotonet/checkpoint.hpp"
#include "xprotonet/config.hpp"
#include "xprotonet/eval.hpp"
#include "xprotonet/explain.hpp"
#include "xprotonet/pipeline.hpp"
#include "xprotonet/trainer.hpp"

namespace xprotonet {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr char kFailedMarker[] = "FAILED";

struct Options {
  std::string command;
  std::string config;
  std::string out;
  std::string checkpoint;
  std::string variant;
  std::optional<std::uint64_t> seed;
  std::optional<int> patch_r;
};

RunConfig resolve_config(const Options& opt) {
  RunConfig cfg = load_run_config(opt.config);
  if (opt.seed) cfg.seed = *opt.seed;
  if (!opt.variant.empty()) cfg.model.variant = variant_from_string(opt.variant);
  if (opt.patch_r) cfg.model.patch_r = *opt.patch_r;
  if (opt.command == "train-prior") cfg.train.prior_condition = true;
  cfg.propagate_seed();
  cfg.validate();
  return cfg;
}

json evaluation_json(const Evaluation& ev, const std::vector<std::string>& names, std::size_t count) {
  json per_class = json::object();
  for (std::size_t c = 0; c < names.size(); ++c)
    per_class[names[c]] = ev.per_class[c] ? json(*ev.per_class[c]) : json(nullptr);
  return {{"split", "test"},
          {"samples", count},
          {"per_class_auc", per_class},
          {"mean_auc", std::isnan(ev.mean_auc) ? json(nullptr) : json(ev.mean_auc)},
          {"defined_classes", ev.defined_classes}};
}

void write_metrics_log(const fs::path& path, const TrainState& state) {
  std::ofstream log(path);
  for (const MetricsRecord& r : state.history) log << metrics_line(r) << "\n";
  if (!log) throw IoError("cannot write " + path.string());
}

void print_progress(const MetricsRecord& r) {
  std::printf("cycle %d %-7s epoch %2d  loss %.4f  val mean AUC %.4f\n", r.cycle, to_string(r.stage).c_str(),
              r.epoch, r.loss.total, r.val_mean_auc);
  std::fflush(stdout);
}

// Trains one model into `dir` (checkpoint/ and metrics.jsonl, refreshed
// after every step) and returns its test evaluation.
Evaluation train_into(const fs::path& dir, const RunConfig& cfg, const Dataset& data, Network<float>& net,
                      const std::optional<CheckpointExtras>& resume) {
  fs::create_directories(dir);
  Trainer trainer(net, data.train, data.val, cfg.train, cfg.loss, data.preprocess);
  if (resume) {
    resume_trainer(trainer, *resume);
    save_checkpoint(dir / "checkpoint", net, checkpoint_extras(trainer, data, cfg));
    write_metrics_log(dir / "metrics.jsonl", trainer.state());
  }
  trainer.run([&](const Trainer& t) {
    save_checkpoint(dir / "checkpoint", net, checkpoint_extras(t, data, cfg));
    write_metrics_log(dir / "metrics.jsonl", t.state());
    print_progress(t.state().history.back());
  });
  const Evaluation ev = evaluate<float>(net, data.test);
  write_json(dir / "evaluation.json", evaluation_json(ev, data.class_names, data.test.size()));
  return ev;
}

CheckpointExtras carry_extras(const LoadedCheckpoint& ckpt, const RunConfig& cfg) {
  CheckpointExtras e = ckpt.extras;
  e.hyperparameters = to_json(cfg);
  return e;
}

void run_synth_data(const Options& opt, const RunConfig& cfg) {
  if (cfg.data.source != "synthetic") throw ConfigError("data.source: synth-data needs the synthetic source");
  const std::vector<Sample> samples = generate_synthetic(cfg.data.synthetic, cfg.data.synthetic_count);
  write_dataset(opt.out, samples, cfg.data.synthetic.class_names());
  SplitSpec spec = cfg.data.split;
  write_split_manifests(opt.out, samples, split(samples, spec));
  std::printf("wrote %zu samples to %s\n", samples.size(), opt.out.c_str());
}

void run_train(const Options& opt, const RunConfig& cfg) {
  std::optional<LoadedCheckpoint> resume;
  if (!opt.checkpoint.empty()) resume = load_checkpoint(opt.checkpoint);
  const Dataset data =
      load_dataset(cfg, resume ? std::optional(resume->extras.preprocess) : std::optional<PreprocessConfig>());
  if (resume) check_compatible(resume->net, data);
  write_split_manifests(opt.out, data.samples, data.splits);
  Network<float> net = resume ? std::move(resume->net) : Network<float>(resolved_model_config(cfg, data));
  const Evaluation ev = train_into(opt.out, cfg, data, net,
                                   resume ? std::optional(resume->extras) : std::optional<CheckpointExtras>());
  std::cout << auc_table(data.class_names, {{to_string(net.config().variant), ev}});
}

void run_evaluate(const Options& opt, const RunConfig& cfg) {
  const LoadedCheckpoint ckpt = load_checkpoint(opt.checkpoint);
  const Dataset data = load_dataset(cfg, ckpt.extras.preprocess);
  check_compatible(ckpt.net, data);
  const Evaluation ev = evaluate<float>(ckpt.net, data.test);
  write_json(fs::path(opt.out) / "evaluation.json", evaluation_json(ev, data.class_names, data.test.size()));
  std::cout << auc_table(data.class_names, {{to_string(ckpt.net.config().variant), ev}});
}

void run_project(const Options& opt, const RunConfig& cfg) {
  LoadedCheckpoint ckpt = load_checkpoint(opt.checkpoint);
  const Dataset data = load_dataset(cfg, ckpt.extras.preprocess);
  check_compatible(ckpt.net, data);
  Trainer trainer(ckpt.net, data.train, data.val, cfg.train, cfg.loss, data.preprocess);
  trainer.project();
  save_checkpoint(fs::path(opt.out) / "checkpoint", ckpt.net, carry_extras(ckpt, cfg));
  std::printf("projected %d prototypes onto %zu training images\n", ckpt.net.config().num_prototypes(),
              data.train.size());
}

void run_prune(const Options& opt, const RunConfig& cfg) {
  LoadedCheckpoint ckpt = load_checkpoint(opt.checkpoint);
  prune_prototypes<float>(ckpt.net);
  save_checkpoint(fs::path(opt.out) / "checkpoint", ckpt.net, carry_extras(ckpt, cfg));
  int active = 0;
  for (bool a : ckpt.net.bank().active) active += a;
  std::printf("%d of %d prototypes remain active\n", active, ckpt.net.config().num_prototypes());
}

void run_explain(const Options& opt, const RunConfig& cfg) {
  const LoadedCheckpoint ckpt = load_checkpoint(opt.checkpoint);
  const Dataset data = load_dataset(cfg, ckpt.extras.preprocess);
  check_compatible(ckpt.net, data);
  const fs::path out(opt.out);
  const std::size_t n = std::min<std::size_t>(data.test.size(), static_cast<std::size_t>(cfg.explain.max_images));
  for (std::size_t i = 0; i < n; ++i) {
    const LocalExplanation ex = render_local(ckpt.net, data.test[i], cfg.explain);
    write_local_explanation(out / "local", ex, data.test[i], ckpt.net, cfg.explain);
  }
  std::vector<PreparedSample> annotated;
  for (const PreparedSample& s : data.test)
    if (!s.boxes.empty()) annotated.push_back(s);
  const auto records = render_global(ckpt.net, data.train, annotated, cfg.explain);
  write_global_explanation(out / "global", records, data.train, ckpt.net, cfg.explain);
  std::printf("wrote %zu local and %zu global explanations under %s\n", n, records.size(), opt.out.c_str());
}

void run_compare(const Options& opt, const RunConfig& cfg) {
  const Dataset data = load_dataset(cfg);
  std::vector<std::pair<std::string, Evaluation>> rows;
  json summary = json::object();
  for (Variant v : {Variant::kXProtoNet, Variant::kPatch, Variant::kGap}) {
    RunConfig run = cfg;
    run.model.variant = v;
    run.train.prior_condition = false;
    std::string name = to_string(v);
    if (v == Variant::kPatch) name += "_r" + std::to_string(run.model.patch_r);
    std::printf("== %s\n", name.c_str());
    Network<float> net(resolved_model_config(run, data));
    const Evaluation ev = train_into(fs::path(opt.out) / name, run, data, net, std::nullopt);
    summary[name] = evaluation_json(ev, data.class_names, data.test.size());
    rows.emplace_back(name, ev);
  }
  const std::string table = auc_table(data.class_names, rows);
  std::ofstream md(fs::path(opt.out) / "comparison.md");
  md << table;
  write_json(fs::path(opt.out) / "comparison.json", summary);
  std::cout << table;
}

void mark_failed(const std::string& out, const std::string& message) {
  if (out.empty()) return;
  std::error_code ec;
  fs::create_directories(out, ec);
  std::ofstream marker(fs::path(out) / kFailedMarker);
  marker << message << "\n";
}

int dispatch(const Options& opt) {
  try {
    const RunConfig cfg = resolve_config(opt);
    fs::create_directories(opt.out);
    fs::remove(fs::path(opt.out) / kFailedMarker);
    write_json(fs::path(opt.out) / "config.resolved.json", to_json(cfg));
    if (opt.command == "synth-data") run_synth_data(opt, cfg);
    else if (opt.command == "train" || opt.command == "train-prior") run_train(opt, cfg);
    else if (opt.command == "evaluate") run_evaluate(opt, cfg);
    else if (opt.command == "project") run_project(opt, cfg);
    else if (opt.command == "prune") run_prune(opt, cfg);
    else if (opt.command == "explain") run_explain(opt, cfg);
    else run_compare(opt, cfg);
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    mark_failed(opt.out, std::string("configuration error: ") + e.what());
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    mark_failed(opt.out, std::string("error: ") + e.what());
    return kExitRuntimeError;
  }
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"Prototype-based interpretable multi-label image diagnosis (desk scale)"};
  app.require_subcommand(1);
  Options opt;
  struct Command {
    const char* name;
    const char* help;
    bool needs_checkpoint;
  };
  const Command commands[] = {
      {"synth-data", "Generate the synthetic planted-signal dataset in NIH layout", false},
      {"train", "Train a model (resume with --checkpoint)", false},
      {"train-prior", "Train with bounding-box prior conditioning", false},
      {"evaluate", "Per-class and mean AUC on the test split", true},
      {"project", "Project prototypes onto training images", true},
      {"prune", "Deactivate prototypes with negative head weights", true},
      {"explain", "Write local and global explanations with overlays", true},
      {"compare-baselines", "Train xprotonet, patch and gap under one seed and tabulate AUCs", false},
  };
  for (const Command& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", opt.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, "Output directory")->required();
    auto* ck = sub->add_option("--checkpoint", opt.checkpoint, "Checkpoint directory")->check(CLI::ExistingDirectory);
    if (c.needs_checkpoint) ck->required();
    sub->add_option("--seed", opt.seed, "Override the run seed");
    sub->add_option("--variant", opt.variant, "Override model.variant (xprotonet, patch, gap)");
    sub->add_option("--patch-r", opt.patch_r, "Override model.patch_r");
    sub->callback([&opt, sub] { opt.command = sub->get_name(); });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfigError;
  }
  return dispatch(opt);
}

}  // namespace xprotonet
