#include "xprotonet/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "xprotonet/explain.hpp"

namespace xprotonet {

namespace {

// Per-channel statistics of the training images after channel conversion
// and resizing.
Normalization training_statistics(const std::vector<Sample>& samples, const std::vector<std::size_t>& train,
                                  PreprocessConfig config) {
  config.normalization.mean.assign(config.channels, 0.0f);
  config.normalization.stddev.assign(config.channels, 1.0f);
  std::vector<double> sum(config.channels, 0.0), sq(config.channels, 0.0);
  double count = 0.0;
  for (std::size_t i : train) {
    const Sample& s = samples[i];
    const Mat<float> m = prepare_image(s.image.empty() ? load_sample_image(s) : s.image, config);
    for (int c = 0; c < config.channels; ++c) {
      sum[c] += m.row(c).cast<double>().sum();
      sq[c] += m.row(c).cast<double>().squaredNorm();
    }
    count += static_cast<double>(m.cols());
  }
  if (count == 0.0) throw ConfigError("data.normalization: dataset statistics need a non-empty training split");
  Normalization n;
  for (int c = 0; c < config.channels; ++c) {
    const double mean = sum[c] / count;
    n.mean.push_back(static_cast<float>(mean));
    n.stddev.push_back(static_cast<float>(std::sqrt(std::max(sq[c] / count - mean * mean, 1e-12))));
  }
  return n;
}

}  // namespace

Dataset load_dataset(const RunConfig& config, const std::optional<PreprocessConfig>& preprocess) {
  Dataset d;
  const DataConfig& dc = config.data;
  if (dc.source == "synthetic") {
    d.class_names = dc.synthetic.class_names();
    d.samples = generate_synthetic(dc.synthetic, dc.synthetic_count);
  } else {
    const std::filesystem::path dir(dc.dataset_dir);
    d.class_names = dc.class_names.empty() ? nih_class_names() : dc.class_names;
    const std::filesystem::path bbox = dir / "bbox.csv";
    d.samples = load_nih_index(dir / "labels.csv",
                               std::filesystem::exists(bbox) ? std::optional(bbox) : std::nullopt, dir / "images",
                               d.class_names);
  }
  SplitSpec spec = dc.split;
  if (!dc.test_ids_file.empty()) spec.test_ids = read_id_list(dc.test_ids_file);
  d.splits = split(d.samples, spec);

  if (preprocess) {
    d.preprocess = *preprocess;
  } else {
    d.preprocess = dc.preprocess;
    d.preprocess.channels = config.model.input_channels;
    d.preprocess.height = config.model.input_height;
    d.preprocess.width = config.model.input_width;
    d.preprocess.normalization = dc.normalization == "dataset"
                                     ? training_statistics(d.samples, d.splits.train, d.preprocess)
                                     : Normalization::imagenet();
  }
  d.train = prepare_samples(d.samples, d.splits.train, d.preprocess);
  d.val = prepare_samples(d.samples, d.splits.val, d.preprocess);
  d.test = prepare_samples(d.samples, d.splits.test, d.preprocess);
  return d;
}

ModelConfig resolved_model_config(const RunConfig& config, const Dataset& data) {
  ModelConfig m = config.model;
  if (m.class_names.empty()) m.class_names = data.class_names;
  return m;
}

void check_compatible(const Network<float>& net, const Dataset& data) {
  const ModelConfig& cfg = net.config();
  if (cfg.num_classes != static_cast<int>(data.class_names.size())) {
    throw ConfigError("checkpoint has " + std::to_string(cfg.num_classes) + " classes but the dataset has " +
                      std::to_string(data.class_names.size()));
  }
  if (!cfg.class_names.empty() && cfg.class_names != data.class_names) {
    throw ConfigError("checkpoint class names differ from the dataset class names");
  }
}

CheckpointExtras checkpoint_extras(const Trainer& trainer, const Dataset& data, const RunConfig& config) {
  CheckpointExtras e;
  e.preprocess = data.preprocess;
  e.state = trainer.state();
  e.optimizer_slots = trainer.optimizer().slots();
  e.hyperparameters = to_json(config);
  return e;
}

void resume_trainer(Trainer& trainer, const CheckpointExtras& extras) {
  if (!extras.state) throw IoError("checkpoint carries no training state to resume from");
  trainer.state() = *extras.state;
  trainer.optimizer().slots() = extras.optimizer_slots;
}

Localization localization_rate(const Network<float>& net, std::span<const PreparedSample> samples) {
  const ModelConfig& cfg = net.config();
  const ExplainConfig explain;
  Localization loc;
  for (const PreparedSample& s : samples) {
    const auto masks = box_masks(s.boxes, cfg.num_classes, cfg.input_height, cfg.input_width, cfg.grid_height(),
                                 cfg.grid_width());
    bool any = false;
    for (int c = 0; c < cfg.num_classes; ++c) any = any || (s.labels[c] && masks[c]);
    if (!any) continue;
    const LocalExplanation ex = render_local(net, s, explain);
    for (int c = 0; c < cfg.num_classes; ++c) {
      if (!s.labels[c] || !masks[c]) continue;
      const PrototypeContribution* top = top_contribution(ex, c);
      ++loc.total;
      if (top && (*masks[c])[top->peak_cell]) ++loc.hits;
    }
  }
  return loc;
}

std::string auc_table(const std::vector<std::string>& class_names,
                      const std::vector<std::pair<std::string, Evaluation>>& rows) {
  std::ostringstream out;
  out << "| model |";
  for (const std::string& name : class_names) out << " " << name << " |";
  out << " mean |\n|---|";
  for (std::size_t c = 0; c < class_names.size(); ++c) out << "---|";
  out << "---|\n";
  char buf[32];
  for (const auto& [name, ev] : rows) {
    out << "| " << name << " |";
    for (const auto& a : ev.per_class) {
      if (a) {
        std::snprintf(buf, sizeof(buf), " %.4f |", *a);
        out << buf;
      } else {
        out << " n/a |";
      }
    }
    std::snprintf(buf, sizeof(buf), " %.4f |", ev.mean_auc);
    out << buf << "\n";
  }
  return out.str();
}

}  // namespace xprotonet
