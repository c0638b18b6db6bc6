#include "xprotonet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

#include "xprotonet/eval.hpp"

namespace xprotonet {

using nlohmann::json;

std::string to_string(Stage s) {
  switch (s) {
    case Stage::kWarmup: return "warmup";
    case Stage::kJoint: return "joint";
    case Stage::kProject: return "project";
    case Stage::kHead: return "head";
    case Stage::kPrune: return "prune";
    case Stage::kDone: return "done";
  }
  return "unknown";
}

Stage stage_from_string(const std::string& s) {
  for (Stage st : {Stage::kWarmup, Stage::kJoint, Stage::kProject, Stage::kHead, Stage::kPrune, Stage::kDone})
    if (to_string(st) == s) return st;
  throw IoError("unknown training stage '" + s + "'");
}

void TrainConfig::validate() const {
  auto positive = [](int v, const char* key) {
    if (v < 1) throw ConfigError(std::string("train.") + key + ": must be >= 1");
  };
  positive(batch_size, "batch_size");
  positive(warmup_epochs, "warmup_epochs");
  positive(early_stop_patience, "early_stop_patience");
  positive(max_joint_epochs, "max_joint_epochs");
  positive(head_epochs, "head_epochs");
  positive(min_cycles, "min_cycles");
  positive(max_cycles, "max_cycles");
  if (min_cycles > max_cycles) throw ConfigError("train.min_cycles: must not exceed max_cycles");
  if (!(convergence_tolerance >= 0.0)) throw ConfigError("train.convergence_tolerance: must be >= 0");
  if (affine_ratios.empty()) throw ConfigError("train.affine_ratios: at least one ratio required");
  for (double r : affine_ratios)
    if (!(r > 0.0)) throw ConfigError("train.affine_ratios: ratios must be positive");
  optimizer.validate();
}

std::string metrics_line(const MetricsRecord& r) {
  json j;
  j["cycle"] = r.cycle;
  j["stage"] = to_string(r.stage);
  j["epoch"] = r.epoch;
  j["loss"] = {{"cls", r.loss.cls},
               {"clst", r.loss.clst},
               {"sep", r.loss.sep},
               {"clst_annotated", r.loss.clst_annotated},
               {"sep_annotated", r.loss.sep_annotated},
               {"occur", r.loss.occur},
               {"trans", r.loss.trans},
               {"total", r.loss.total}};
  j["val_mean_auc"] = r.val_mean_auc;
  return j.dump();
}

MetricsRecord parse_metrics_line(const std::string& line) {
  try {
    const json j = json::parse(line);
    MetricsRecord r;
    r.cycle = j.at("cycle").get<int>();
    r.stage = stage_from_string(j.at("stage").get<std::string>());
    r.epoch = j.at("epoch").get<int>();
    const json& l = j.at("loss");
    r.loss.cls = l.at("cls").get<double>();
    r.loss.clst = l.at("clst").get<double>();
    r.loss.sep = l.at("sep").get<double>();
    r.loss.clst_annotated = l.at("clst_annotated").get<double>();
    r.loss.sep_annotated = l.at("sep_annotated").get<double>();
    r.loss.occur = l.at("occur").get<double>();
    r.loss.trans = l.at("trans").get<double>();
    r.loss.total = l.at("total").get<double>();
    r.val_mean_auc = j.at("val_mean_auc").get<double>();
    return r;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed metrics record: ") + e.what());
  }
}

TrainableGroups trainable_for(Stage stage) {
  TrainableGroups g;
  switch (stage) {
    case Stage::kWarmup:
      g.backbone = false;
      g.head = false;
      break;
    case Stage::kJoint:
      g.head = false;
      break;
    case Stage::kHead:
      g.backbone = g.feature = g.occurrence = g.prototypes = false;
      break;
    default:
      g.backbone = g.feature = g.occurrence = g.prototypes = g.head = false;
      break;
  }
  return g;
}

namespace {

std::string class_name(const ModelConfig& cfg, int c) {
  return cfg.class_names.empty() ? std::to_string(c) : cfg.class_names[c];
}

}  // namespace

Trainer::Trainer(Network<float>& net, std::span<const PreparedSample> train, std::span<const PreparedSample> val,
                 TrainConfig config, LossConfig loss, PreprocessConfig preprocess)
    : net_(net),
      train_(train),
      val_(val),
      config_(std::move(config)),
      loss_(loss),
      preprocess_(std::move(preprocess)),
      optimizer_(config_.optimizer) {
  config_.validate();
  loss_.validate();
  const ModelConfig& cfg = net_.config();
  if (train_.empty()) throw ModelError("training split is empty");
  if (val_.empty()) throw ModelError("validation split is empty");
  if (preprocess_.height != cfg.input_height || preprocess_.width != cfg.input_width) {
    throw ConfigError("data.preprocess: input size differs from the model input size");
  }
  const int num_classes = cfg.num_classes;

  excluded_.assign(num_classes, false);
  for (int c = 0; c < num_classes; ++c) {
    const bool seen = std::any_of(train_.begin(), train_.end(), [c](const PreparedSample& s) { return s.labels[c]; });
    if (!seen) {
      excluded_[c] = true;
      warn("class " + class_name(cfg, c) + " is never positive in the training split; excluded from clst/sep");
    }
  }

  constrained_.assign(num_classes, false);
  if (config_.prior_condition) {
    if (cfg.variant != Variant::kXProtoNet) throw ConfigError("train.prior_condition: requires model.variant xprotonet");
    std::vector<bool> has_box(num_classes, false);
    for (const PreparedSample& s : train_) {
      if (!s.annotated) continue;
      for (const LabeledBox& b : s.boxes)
        if (s.labels[b.class_index]) has_box[b.class_index] = true;
    }
    if (config_.constrained_classes.empty()) {
      constrained_ = has_box;
    } else {
      for (const std::string& name : config_.constrained_classes) {
        int index = -1;
        for (int c = 0; c < num_classes; ++c)
          if (class_name(cfg, c) == name) index = c;
        if (index < 0) throw ConfigError("train.constrained_classes: unknown class '" + name + "'");
        if (!has_box[index]) throw ModelError("no box-annotated positive for constrained class " + name);
        constrained_[index] = true;
      }
    }
  }
  any_constrained_ = std::find(constrained_.begin(), constrained_.end(), true) != constrained_.end();

  if (cfg.variant == Variant::kXProtoNet && loss_.lambda_occur > 0.0) {
    transforms_ = std::make_unique<ResizeTransformSet>(config_.affine_ratios, cfg.input_height, cfg.input_width,
                                                       cfg.grid_height(), cfg.grid_width());
  }
}

Trainer::Batch Trainer::make_batch(std::span<const std::size_t> indices, int epoch_seed_index) const {
  const ModelConfig& cfg = net_.config();
  Batch batch;
  batch.images.reserve(indices.size());
  std::vector<std::vector<LabeledBox>> boxes;
  for (std::size_t idx : indices) {
    const PreparedSample& s = train_[idx];
    if (config_.augment) {
      const Augmentation aug =
          sample_augmentation(preprocess_, mix_seed(config_.seed, 0xA46, epoch_seed_index, idx));
      batch.images.push_back(augment_image(s.image, preprocess_, aug));
      boxes.push_back(any_constrained_ && s.annotated ? augment_boxes(s.boxes, preprocess_, aug)
                                                      : std::vector<LabeledBox>{});
    } else {
      batch.images.push_back(s.image);
      boxes.push_back(s.boxes);
    }
  }
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const PreparedSample& s = train_[indices[i]];
    TrainingExample<float> ex;
    ex.image = &batch.images[i];
    ex.labels = &s.labels;
    if (any_constrained_ && s.annotated) {
      ex.annotated = true;
      ex.box_masks = box_masks(boxes[i], cfg.num_classes, cfg.input_height, cfg.input_width, cfg.grid_height(),
                               cfg.grid_width());
      for (int c = 0; c < cfg.num_classes; ++c)
        if (!constrained_[c]) ex.box_masks[c].reset();
    }
    if (transforms_) {
      std::mt19937_64 rng(mix_seed(config_.seed, 0x7A5, epoch_seed_index, indices[i]));
      ex.transform = transforms_->sample(rng);
    }
    batch.examples.push_back(std::move(ex));
  }
  return batch;
}

LossBreakdown Trainer::train_epoch(const TrainableGroups& trainable, const TermWeights& weights) {
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(config_.seed, 0x5F1, state_.global_epoch));
  std::shuffle(order.begin(), order.end(), rng);

  ObjectiveOptions options;
  options.weights = weights;
  options.backward = true;
  options.trainable = trainable;
  options.excluded_classes = excluded_;

  LossBreakdown sum;
  int batches = 0;
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config_.batch_size));
    const Batch batch = make_batch(std::span<const std::size_t>(order.data() + start, end - start),
                                   state_.global_epoch);
    net_.zero_grad();
    sum += batch_objective<float>(net_, batch.examples, loss_, options);
    optimizer_.step(net_.parameters(), trainable);
    ++batches;
  }
  return sum.scaled(1.0 / std::max(batches, 1));
}

LossBreakdown Trainer::head_epoch() {
  const ModelConfig& cfg = net_.config();
  const int num_classes = cfg.num_classes;
  const int per_class = cfg.prototypes_per_class;
  if (head_cache_.size() != train_.size()) {
    head_cache_.clear();
    head_cache_.reserve(train_.size());
    for (const PreparedSample& s : train_) head_cache_.push_back(net_.forward(s.image).similarities);
  }
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(config_.seed, 0x4EAD, state_.global_epoch));
  std::shuffle(order.begin(), order.end(), rng);

  const TrainableGroups trainable = trainable_for(Stage::kHead);
  const auto& active = net_.bank().active;
  LossBreakdown sum;
  sum.per_class_cls.assign(num_classes, 0.0);
  int batches = 0;
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config_.batch_size));
    std::vector<std::vector<std::uint8_t>> rows;
    for (std::size_t i = start; i < end; ++i) rows.push_back(train_[order[i]].labels);
    const BatchLabels labels = BatchLabels::from_rows(rows, num_classes);
    net_.zero_grad();
    Mat<float>& grad = net_.head_grad();
    for (std::size_t i = start; i < end; ++i) {
      const Mat<float>& sims = head_cache_[order[i]];
      const int row = static_cast<int>(i - start);
      for (int c = 0; c < num_classes; ++c) {
        const bool pos = labels.positive(row, c);
        const int count = pos ? labels.num_pos[c] : labels.num_neg[c];
        double dz = 0.0;
        const double term =
            classification_term(static_cast<double>(net_.class_logit(sims, c)), pos, count, loss_.gamma, &dz);
        sum.cls += term;
        sum.per_class_cls[c] += term;
        for (int k = 0; k < per_class; ++k)
          if (active[c * per_class + k]) grad(c, k) += static_cast<float>(dz) * sims(c, k);
      }
    }
    optimizer_.step(net_.parameters(), trainable);
    ++batches;
  }
  sum.total = sum.cls;
  return sum.scaled(1.0 / std::max(batches, 1));
}

void Trainer::project() {
  const ModelConfig& cfg = net_.config();
  std::vector<std::vector<std::optional<GridMask>>> masks(train_.size());
  std::vector<ProjectionCandidate<float>> candidates;
  candidates.reserve(train_.size());
  for (std::size_t i = 0; i < train_.size(); ++i) {
    const PreparedSample& s = train_[i];
    masks[i].resize(cfg.num_classes);
    if (any_constrained_ && s.annotated) {
      masks[i] = box_masks(s.boxes, cfg.num_classes, cfg.input_height, cfg.input_width, cfg.grid_height(),
                           cfg.grid_width());
    }
    candidates.push_back({&s.id, &s.image, &s.labels, &masks[i]});
  }
  ProjectionOptions options;
  options.restrict_to_boxes = any_constrained_;
  options.box_classes = constrained_;
  project_prototypes<float>(net_, candidates, options);
  head_cache_.clear();
}

double Trainer::validation_auc() {
  if (metric_) return metric_();
  const double auc = evaluate<float>(net_, val_).mean_auc;
  if (std::isnan(auc)) throw ModelError("validation split has no class with both positive and negative samples");
  return auc;
}

void Trainer::record(const LossBreakdown& loss, double auc) {
  state_.best_val_auc = std::max(state_.best_val_auc, auc);
  MetricsRecord r;
  r.cycle = state_.cycle;
  r.stage = state_.stage;
  r.epoch = state_.epoch;
  r.loss = loss;
  r.val_mean_auc = auc;
  state_.history.push_back(std::move(r));
}

void Trainer::enter(Stage stage) {
  state_.stage = stage;
  state_.epoch = 0;
  state_.stage_best_auc = 0.0;
  state_.stage_evaluations = 0;
  state_.epochs_since_improvement = 0;
}

void Trainer::end_cycle() {
  const double gain = state_.best_val_auc - state_.cycle_start_best;
  ++state_.cycle;
  const bool converged = state_.cycle >= config_.min_cycles && gain < config_.convergence_tolerance;
  if (state_.cycle >= config_.max_cycles || converged) {
    enter(Stage::kPrune);
  } else {
    state_.cycle_start_best = state_.best_val_auc;
    enter(Stage::kJoint);
  }
}

void Trainer::step() {
  switch (state_.stage) {
    case Stage::kWarmup: {
      const LossBreakdown loss = train_epoch(trainable_for(Stage::kWarmup), TermWeights::from(loss_));
      record(loss, validation_auc());
      ++state_.epoch;
      ++state_.global_epoch;
      if (state_.epoch >= config_.warmup_epochs) {
        state_.cycle_start_best = state_.best_val_auc;
        enter(Stage::kJoint);
      }
      break;
    }
    case Stage::kJoint: {
      const LossBreakdown loss = train_epoch(trainable_for(Stage::kJoint), TermWeights::from(loss_));
      const double auc = validation_auc();
      record(loss, auc);
      ++state_.epoch;
      ++state_.global_epoch;
      if (state_.stage_evaluations == 0 || auc > state_.stage_best_auc) {
        state_.stage_best_auc = auc;
        state_.epochs_since_improvement = 0;
      } else {
        ++state_.epochs_since_improvement;
      }
      ++state_.stage_evaluations;
      if (state_.epochs_since_improvement >= config_.early_stop_patience ||
          state_.epoch >= config_.max_joint_epochs) {
        enter(Stage::kProject);
      }
      break;
    }
    case Stage::kProject: {
      project();
      record(LossBreakdown{}, validation_auc());
      enter(Stage::kHead);
      break;
    }
    case Stage::kHead: {
      const LossBreakdown loss = head_epoch();
      record(loss, validation_auc());
      ++state_.epoch;
      ++state_.global_epoch;
      if (state_.epoch >= config_.head_epochs) end_cycle();
      break;
    }
    case Stage::kPrune: {
      prune_prototypes<float>(net_);
      record(LossBreakdown{}, validation_auc());
      enter(Stage::kDone);
      break;
    }
    case Stage::kDone:
      break;
  }
}

void Trainer::run(const std::function<void(const Trainer&)>& after_step) {
  while (!done()) {
    step();
    if (after_step) after_step(*this);
  }
}

}  // namespace xprotonet
