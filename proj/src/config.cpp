#include "xprotonet/config.hpp"

#include <fstream>
#include <set>

namespace xprotonet {

using nlohmann::json;

namespace {

std::string join_path(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

template <typename T>
T convert(const json& v, const std::string& path);

template <>
bool convert<bool>(const json& v, const std::string& path) {
  if (!v.is_boolean()) throw ConfigError(path + ": expected true or false");
  return v.get<bool>();
}

template <>
int convert<int>(const json& v, const std::string& path) {
  if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer");
  return v.get<int>();
}

template <>
std::uint64_t convert<std::uint64_t>(const json& v, const std::string& path) {
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
    throw ConfigError(path + ": expected a non-negative integer");
  return v.get<std::uint64_t>();
}

template <>
double convert<double>(const json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError(path + ": expected a number");
  return v.get<double>();
}

template <>
std::string convert<std::string>(const json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError(path + ": expected a string");
  return v.get<std::string>();
}

template <typename T>
std::vector<T> convert_list(const json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError(path + ": expected a list");
  std::vector<T> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out.push_back(convert<T>(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

// Reads the keys of one JSON object and rejects whatever was not consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError((path_.empty() ? "config" : path_) + ": expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (const json* v = find(key)) out = convert<T>(*v, join_path(path_, key));
  }

  template <typename T>
  void get_list(const std::string& key, std::vector<T>& out) {
    if (const json* v = find(key)) out = convert_list<T>(*v, join_path(path_, key));
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const { return join_path(path_, key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + join_path(path_, it.key()) + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string to_string(SplitMode m) { return m == SplitMode::kHoldout ? "holdout" : "five_fold"; }

SplitMode split_mode_from_string(const std::string& s, const std::string& path) {
  if (s == "holdout") return SplitMode::kHoldout;
  if (s == "five_fold") return SplitMode::kFiveFold;
  throw ConfigError(path + ": unknown split mode '" + s + "' (expected holdout or five_fold)");
}

void read_model(Section& s, ModelConfig& m, bool allow_seed) {
  s.get("num_classes", m.num_classes);
  s.get("prototypes_per_class", m.prototypes_per_class);
  s.get("feature_dim", m.feature_dim);
  s.get("input_channels", m.input_channels);
  s.get("input_height", m.input_height);
  s.get("input_width", m.input_width);
  s.get("backbone_id", m.backbone_id);
  s.get_list("backbone_channels", m.backbone_channels);
  s.get("occurrence_hidden", m.occurrence_hidden);
  std::string variant = to_string(m.variant);
  s.get("variant", variant);
  m.variant = variant_from_string(variant);
  s.get("patch_r", m.patch_r);
  s.get_list("class_names", m.class_names);
  if (allow_seed) s.get("seed", m.seed);
  s.finish();
}

json model_json(const ModelConfig& m, bool with_seed) {
  json j = {
      {"num_classes", m.num_classes},
      {"prototypes_per_class", m.prototypes_per_class},
      {"feature_dim", m.feature_dim},
      {"input_channels", m.input_channels},
      {"input_height", m.input_height},
      {"input_width", m.input_width},
      {"backbone_id", m.backbone_id},
      {"backbone_channels", m.backbone_channels},
      {"occurrence_hidden", m.occurrence_hidden},
      {"variant", to_string(m.variant)},
      {"patch_r", m.patch_r},
      {"class_names", m.class_names},
  };
  if (with_seed) j["seed"] = m.seed;
  return j;
}

void read_loss(Section& s, LossConfig& l) {
  s.get("lambda_clst", l.lambda_clst);
  s.get("lambda_sep", l.lambda_sep);
  s.get("lambda_occur", l.lambda_occur);
  s.get("gamma", l.gamma);
  s.get("annotated_lambda_clst", l.annotated_lambda_clst);
  s.get("annotated_lambda_sep", l.annotated_lambda_sep);
  s.finish();
}

json loss_json(const LossConfig& l) {
  return {{"lambda_clst", l.lambda_clst},
          {"lambda_sep", l.lambda_sep},
          {"lambda_occur", l.lambda_occur},
          {"gamma", l.gamma},
          {"annotated_lambda_clst", l.annotated_lambda_clst},
          {"annotated_lambda_sep", l.annotated_lambda_sep}};
}

void read_optimizer(Section& s, OptimizerConfig& o) {
  s.get("kind", o.kind);
  s.get("lr_backbone", o.lr_backbone);
  s.get("lr_feature", o.lr_feature);
  s.get("lr_occurrence", o.lr_occurrence);
  s.get("lr_prototypes", o.lr_prototypes);
  s.get("lr_head", o.lr_head);
  s.get("beta1", o.beta1);
  s.get("beta2", o.beta2);
  s.get("epsilon", o.epsilon);
  s.get("weight_decay", o.weight_decay);
  s.finish();
}

json optimizer_json(const OptimizerConfig& o) {
  return {{"kind", o.kind},         {"lr_backbone", o.lr_backbone},     {"lr_feature", o.lr_feature},
          {"lr_occurrence", o.lr_occurrence}, {"lr_prototypes", o.lr_prototypes}, {"lr_head", o.lr_head},
          {"beta1", o.beta1},       {"beta2", o.beta2},                 {"epsilon", o.epsilon},
          {"weight_decay", o.weight_decay}};
}

void read_train(Section& s, TrainConfig& t) {
  s.get("batch_size", t.batch_size);
  s.get("warmup_epochs", t.warmup_epochs);
  s.get("early_stop_patience", t.early_stop_patience);
  s.get("max_joint_epochs", t.max_joint_epochs);
  s.get("head_epochs", t.head_epochs);
  s.get("min_cycles", t.min_cycles);
  s.get("max_cycles", t.max_cycles);
  s.get("convergence_tolerance", t.convergence_tolerance);
  if (const json* o = s.find("optimizer")) {
    Section os(*o, s.path("optimizer"));
    read_optimizer(os, t.optimizer);
  }
  s.get("prior_condition", t.prior_condition);
  s.get_list("constrained_classes", t.constrained_classes);
  s.get("augment", t.augment);
  s.get_list("affine_ratios", t.affine_ratios);
  s.finish();
}

json train_json(const TrainConfig& t) {
  return {{"batch_size", t.batch_size},
          {"warmup_epochs", t.warmup_epochs},
          {"early_stop_patience", t.early_stop_patience},
          {"max_joint_epochs", t.max_joint_epochs},
          {"head_epochs", t.head_epochs},
          {"min_cycles", t.min_cycles},
          {"max_cycles", t.max_cycles},
          {"convergence_tolerance", t.convergence_tolerance},
          {"optimizer", optimizer_json(t.optimizer)},
          {"prior_condition", t.prior_condition},
          {"constrained_classes", t.constrained_classes},
          {"augment", t.augment},
          {"affine_ratios", t.affine_ratios}};
}

void read_signature(Section& s, SignatureSpec& c) {
  s.get("name", c.name);
  std::string shape = to_string(c.shape);
  s.get("shape", shape);
  c.shape = shape_from_string(shape);
  s.get("size_min", c.size_min);
  s.get("size_max", c.size_max);
  s.get("intensity_min", c.intensity_min);
  s.get("intensity_max", c.intensity_max);
  s.get("prevalence", c.prevalence);
  s.finish();
}

void read_synthetic(Section& s, SyntheticSpec& spec) {
  s.get("image_size", spec.image_size);
  if (const json* cs = s.find("classes")) {
    if (!cs->is_array()) throw ConfigError(s.path("classes") + ": expected a list");
    spec.classes.clear();
    for (std::size_t i = 0; i < cs->size(); ++i) {
      SignatureSpec c;
      Section cls((*cs)[i], s.path("classes") + "[" + std::to_string(i) + "]");
      read_signature(cls, c);
      spec.classes.push_back(c);
    }
  }
  s.get("background", spec.background);
  s.get("noise", spec.noise);
  if (const json* co = s.find("co_occurrence")) {
    if (!co->is_array()) throw ConfigError(s.path("co_occurrence") + ": expected a list of rows");
    spec.co_occurrence.clear();
    for (std::size_t i = 0; i < co->size(); ++i)
      spec.co_occurrence.push_back(convert_list<double>((*co)[i], s.path("co_occurrence") + "[" + std::to_string(i) + "]"));
  }
  s.get("annotated_fraction", spec.annotated_fraction);
  s.get("images_per_patient", spec.images_per_patient);
  s.finish();
}

json synthetic_json(const SyntheticSpec& spec) {
  json classes = json::array();
  for (const SignatureSpec& c : spec.classes) {
    classes.push_back({{"name", c.name},
                       {"shape", to_string(c.shape)},
                       {"size_min", c.size_min},
                       {"size_max", c.size_max},
                       {"intensity_min", c.intensity_min},
                       {"intensity_max", c.intensity_max},
                       {"prevalence", c.prevalence}});
  }
  return {{"image_size", spec.image_size},
          {"classes", classes},
          {"background", spec.background},
          {"noise", spec.noise},
          {"co_occurrence", spec.co_occurrence},
          {"annotated_fraction", spec.annotated_fraction},
          {"images_per_patient", spec.images_per_patient}};
}

void read_split(Section& s, SplitSpec& sp) {
  s.get("train", sp.train);
  s.get("val", sp.val);
  s.get("test", sp.test);
  std::string mode = to_string(sp.mode);
  s.get("mode", mode);
  sp.mode = split_mode_from_string(mode, s.path("mode"));
  s.get("fold", sp.fold);
  s.finish();
}

json split_json(const SplitSpec& sp) {
  return {{"train", sp.train}, {"val", sp.val}, {"test", sp.test}, {"mode", to_string(sp.mode)}, {"fold", sp.fold}};
}

void read_augmentation(Section& s, PreprocessConfig& p) {
  s.get("max_rotation_degrees", p.max_rotation_degrees);
  s.get("scale_jitter", p.scale_jitter);
  s.finish();
}

void read_data(Section& s, DataConfig& d) {
  s.get("source", d.source);
  s.get("dataset_dir", d.dataset_dir);
  s.get_list("class_names", d.class_names);
  if (const json* v = s.find("synthetic")) {
    Section ss(*v, s.path("synthetic"));
    read_synthetic(ss, d.synthetic);
  }
  s.get("synthetic_count", d.synthetic_count);
  if (const json* v = s.find("split")) {
    Section ss(*v, s.path("split"));
    read_split(ss, d.split);
  }
  s.get("test_ids_file", d.test_ids_file);
  if (const json* v = s.find("augmentation")) {
    Section ss(*v, s.path("augmentation"));
    read_augmentation(ss, d.preprocess);
  }
  s.get("normalization", d.normalization);
  s.finish();
}

json data_json(const DataConfig& d) {
  return {{"source", d.source},
          {"dataset_dir", d.dataset_dir},
          {"class_names", d.class_names},
          {"synthetic", synthetic_json(d.synthetic)},
          {"synthetic_count", d.synthetic_count},
          {"split", split_json(d.split)},
          {"test_ids_file", d.test_ids_file},
          {"augmentation",
           {{"max_rotation_degrees", d.preprocess.max_rotation_degrees},
            {"scale_jitter", d.preprocess.scale_jitter}}},
          {"normalization", d.normalization}};
}

void read_explain(Section& s, ExplainConfig& e) {
  s.get("contour_threshold", e.contour_threshold);
  s.get("colormap", e.colormap);
  s.get("overlay_alpha", e.overlay_alpha);
  s.get("max_images", e.max_images);
  s.finish();
}

json explain_json(const ExplainConfig& e) {
  return {{"contour_threshold", e.contour_threshold},
          {"colormap", e.colormap},
          {"overlay_alpha", e.overlay_alpha},
          {"max_images", e.max_images}};
}

}  // namespace

void RunConfig::propagate_seed() {
  model.seed = seed;
  train.seed = seed;
  data.synthetic.seed = seed;
  data.split.seed = seed;
}

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  train.validate();
  explain.validate();
  if (data.source == "synthetic") {
    data.synthetic.validate();
    if (static_cast<int>(data.synthetic.classes.size()) != model.num_classes)
      throw ConfigError("model.num_classes: must equal the number of data.synthetic.classes (" +
                        std::to_string(data.synthetic.classes.size()) + ")");
    if (data.synthetic_count < 3) throw ConfigError("data.synthetic_count: must be >= 3");
  } else if (data.source == "directory") {
    if (data.dataset_dir.empty()) throw ConfigError("data.dataset_dir: required when data.source is directory");
    const std::filesystem::path dir(data.dataset_dir);
    if (!std::filesystem::is_directory(dir))
      throw ConfigError("data.dataset_dir: directory " + dir.string() + " does not exist");
    if (!std::filesystem::exists(dir / "labels.csv"))
      throw ConfigError("data.dataset_dir: " + (dir / "labels.csv").string() + " does not exist");
    const std::size_t vocab = data.class_names.empty() ? nih_class_names().size() : data.class_names.size();
    if (static_cast<int>(vocab) != model.num_classes)
      throw ConfigError("model.num_classes: must equal the label vocabulary size (" + std::to_string(vocab) + ")");
  } else {
    throw ConfigError("data.source: unknown source '" + data.source + "' (expected synthetic or directory)");
  }
  data.split.validate();
  if (!data.test_ids_file.empty()) {
    if (data.split.mode != SplitMode::kHoldout)
      throw ConfigError("data.test_ids_file: only valid with data.split.mode holdout");
    if (!std::filesystem::exists(data.test_ids_file))
      throw ConfigError("data.test_ids_file: " + data.test_ids_file + " does not exist");
  }
  if (data.normalization == "imagenet") {
    if (model.input_channels != 3)
      throw ConfigError("data.normalization: imagenet statistics need model.input_channels = 3");
  } else if (data.normalization != "dataset") {
    throw ConfigError("data.normalization: unknown value '" + data.normalization +
                      "' (expected imagenet or dataset)");
  }
  if (!(data.preprocess.max_rotation_degrees >= 0.0))
    throw ConfigError("data.augmentation.max_rotation_degrees: must be >= 0");
  if (!(data.preprocess.scale_jitter >= 0.0 && data.preprocess.scale_jitter < 1.0))
    throw ConfigError("data.augmentation.scale_jitter: must lie in [0, 1)");
  if (!model.class_names.empty() && static_cast<int>(model.class_names.size()) != model.num_classes)
    throw ConfigError("model.class_names: expected " + std::to_string(model.num_classes) + " names");
}

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  Section root(j, "");
  root.get("seed", c.seed);
  if (const json* v = root.find("model")) {
    Section s(*v, "model");
    read_model(s, c.model, false);
  }
  if (const json* v = root.find("loss")) {
    Section s(*v, "loss");
    read_loss(s, c.loss);
  }
  if (const json* v = root.find("train")) {
    Section s(*v, "train");
    read_train(s, c.train);
  }
  if (const json* v = root.find("data")) {
    Section s(*v, "data");
    read_data(s, c.data);
  }
  if (const json* v = root.find("explain")) {
    Section s(*v, "explain");
    read_explain(s, c.explain);
  }
  root.finish();
  c.propagate_seed();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"model", model_json(c.model, false)},
          {"loss", loss_json(c.loss)},
          {"train", train_json(c.train)},
          {"data", data_json(c.data)},
          {"explain", explain_json(c.explain)}};
}

json to_json(const ModelConfig& config) { return model_json(config, true); }

ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  Section s(j, "model");
  read_model(s, m, true);
  return m;
}

json to_json(const PreprocessConfig& p) {
  return {{"channels", p.channels},
          {"height", p.height},
          {"width", p.width},
          {"mean", p.normalization.mean},
          {"stddev", p.normalization.stddev},
          {"max_rotation_degrees", p.max_rotation_degrees},
          {"scale_jitter", p.scale_jitter}};
}

PreprocessConfig preprocess_config_from_json(const json& j) {
  PreprocessConfig p;
  Section s(j, "preprocess");
  s.get("channels", p.channels);
  s.get("height", p.height);
  s.get("width", p.width);
  std::vector<double> mean, stddev;
  s.get_list("mean", mean);
  s.get_list("stddev", stddev);
  p.normalization.mean.assign(mean.begin(), mean.end());
  p.normalization.stddev.assign(stddev.begin(), stddev.end());
  s.get("max_rotation_degrees", p.max_rotation_degrees);
  s.get("scale_jitter", p.scale_jitter);
  s.finish();
  return p;
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed for " + path.string());
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path.string() + " is not valid JSON: " + e.what());
  }
}

}  // namespace xprotonet
