#include "xprotonet/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "xprotonet/baselines.hpp"

namespace xprotonet {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kXProtoNet: return "xprotonet";
    case Variant::kPatch: return "patch";
    case Variant::kGap: return "gap";
  }
  return "unknown";
}

Variant variant_from_string(const std::string& s) {
  if (s == "xprotonet") return Variant::kXProtoNet;
  if (s == "patch") return Variant::kPatch;
  if (s == "gap") return Variant::kGap;
  throw ConfigError("model.variant: unknown variant '" + s + "' (expected xprotonet, patch or gap)");
}

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kBackbone: return "backbone";
    case ParamGroup::kFeature: return "feature";
    case ParamGroup::kOccurrence: return "occurrence";
    case ParamGroup::kPrototypes: return "prototypes";
    case ParamGroup::kHead: return "head";
  }
  return "unknown";
}

bool TrainableGroups::contains(ParamGroup g) const {
  switch (g) {
    case ParamGroup::kBackbone: return backbone;
    case ParamGroup::kFeature: return feature;
    case ParamGroup::kOccurrence: return occurrence;
    case ParamGroup::kPrototypes: return prototypes;
    case ParamGroup::kHead: return head;
  }
  return false;
}

int ModelConfig::backbone_stride() const {
  return 1 << static_cast<int>(backbone_channels.size());
}

int ModelConfig::prototype_dim() const {
  return variant == Variant::kPatch ? patch_r * patch_r * feature_dim : feature_dim;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("model." + key + ": " + why);
  };
  if (num_classes < 1) fail("num_classes", "must be >= 1");
  if (prototypes_per_class < 1) fail("prototypes_per_class", "must be >= 1");
  if (feature_dim < 1) fail("feature_dim", "must be >= 1");
  if (input_channels < 1) fail("input_channels", "must be >= 1");
  if (backbone_id != "small_cnn") {
    fail("backbone_id", "unsupported backbone '" + backbone_id + "' (available: small_cnn)");
  }
  if (backbone_channels.empty()) fail("backbone_channels", "must list at least one block");
  for (int ch : backbone_channels)
    if (ch < 1) fail("backbone_channels", "channel counts must be >= 1");
  if (occurrence_hidden < 0) fail("occurrence_hidden", "must be >= 0");
  const int stride = backbone_stride();
  if (input_height < stride || input_width < stride || input_height % stride != 0 ||
      input_width % stride != 0) {
    fail("input_size", "must be a positive multiple of the backbone stride " + std::to_string(stride));
  }
  if (variant == Variant::kPatch &&
      (patch_r < 1 || patch_r > grid_height() || patch_r > grid_width())) {
    fail("patch_r", "must satisfy 1 <= r <= min(H, W) of the feature grid");
  }
  if (!class_names.empty() && static_cast<int>(class_names.size()) != num_classes) {
    fail("class_names", "count does not match num_classes");
  }
}

// ---------------------------------------------------------------------------
// Primitives.

template <typename Dtype>
Vec<Dtype> pool_feature(const Mat<Dtype>& features, const Eigen::Ref<const Vec<Dtype>>& occurrence) {
  if (features.cols() != occurrence.size()) {
    throw ConfigError("pool_feature: feature map and occurrence map grids differ");
  }
  return features * occurrence;
}

template <typename Dtype>
Dtype cosine_similarity(const Eigen::Ref<const Vec<Dtype>>& f, const Eigen::Ref<const Vec<Dtype>>& p,
                        bool* zero_norm) {
  if (f.size() != p.size()) throw ConfigError("cosine_similarity: dimension mismatch");
  const Dtype p_norm = p.norm();
  if (!(p_norm > Dtype(0))) throw ModelError("cosine_similarity: prototype has zero norm");
  const Dtype f_norm = f.norm();
  if (!(f_norm > Dtype(0))) {
    if (zero_norm) *zero_norm = true;
    return Dtype(0);
  }
  if (zero_norm) *zero_norm = false;
  const Dtype s = f.dot(p) / (f_norm * p_norm);
  return std::clamp(s, Dtype(-1), Dtype(1));
}

double predict_class_score(std::span<const double> similarities, std::span<const double> weights,
                           const std::vector<bool>& active) {
  if (similarities.size() != weights.size() || similarities.size() != active.size()) {
    throw ConfigError("predict_class_score: length mismatch");
  }
  double z = 0.0;
  bool any = false;
  for (std::size_t k = 0; k < similarities.size(); ++k) {
    if (!active[k]) continue;
    z += weights[k] * similarities[k];
    any = true;
  }
  if (!any) throw ModelError("predict_class_score: class has no active prototype");
  return 1.0 / (1.0 + std::exp(-z));
}

// ---------------------------------------------------------------------------
// Network.

template <typename Dtype>
Network<Dtype>::Network(ModelConfig config, Uninitialized) : config_(std::move(config)) {
  config_.validate();
  build_layers();
}

template <typename Dtype>
Network<Dtype>::Network(ModelConfig config) : Network(std::move(config), Uninitialized{}) {
  std::mt19937_64 rng(mix_seed(config_.seed, 0x1417));
  for (auto& layer : backbone_) layer.initialize(rng);
  feature1_.initialize(rng);
  feature2_.initialize(rng);
  if (config_.variant == Variant::kXProtoNet) {
    occurrence1_.initialize(rng);
    occurrence2_.initialize(rng);
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < bank_.vectors.rows(); ++i) {
    do {
      for (Eigen::Index j = 0; j < bank_.vectors.cols(); ++j)
        bank_.vectors(i, j) = static_cast<Dtype>(normal(rng));
    } while (!(bank_.vectors.row(i).norm() > Dtype(0)));
  }
}

template <typename Dtype>
void Network<Dtype>::build_layers() {
  const auto& cfg = config_;
  backbone_.clear();
  int channels = cfg.input_channels;
  int h = cfg.input_height;
  int w = cfg.input_width;
  for (std::size_t i = 0; i < cfg.backbone_channels.size(); ++i) {
    ConvGeometry g{channels, cfg.backbone_channels[i], 3, 2, 1, h, w};
    backbone_.emplace_back("backbone." + std::to_string(i), g);
    channels = cfg.backbone_channels[i];
    h = g.out_height();
    w = g.out_width();
  }
  const int grid_h = cfg.grid_height();
  const int grid_w = cfg.grid_width();
  feature1_ = ConvLayer<Dtype>("feature.0", {channels, cfg.feature_dim, 1, 1, 0, grid_h, grid_w});
  feature2_ = ConvLayer<Dtype>("feature.1", {cfg.feature_dim, cfg.feature_dim, 1, 1, 0, grid_h, grid_w});
  if (cfg.variant == Variant::kXProtoNet) {
    const int hidden = cfg.occurrence_width();
    occurrence1_ = ConvLayer<Dtype>("occurrence.0", {channels, hidden, 1, 1, 0, grid_h, grid_w});
    occurrence2_ =
        ConvLayer<Dtype>("occurrence.1", {hidden, cfg.num_prototypes(), 1, 1, 0, grid_h, grid_w});
  }
  bank_.vectors = Mat<Dtype>::Zero(cfg.num_prototypes(), cfg.prototype_dim());
  bank_.active.assign(cfg.num_prototypes(), true);
  bank_.provenance.assign(cfg.num_prototypes(), std::nullopt);
  proto_grad_ = Mat<Dtype>::Zero(cfg.num_prototypes(), cfg.prototype_dim());
  head_ = Mat<Dtype>::Ones(cfg.num_classes, cfg.prototypes_per_class);
  head_grad_ = Mat<Dtype>::Zero(cfg.num_classes, cfg.prototypes_per_class);
}

template <typename Dtype>
Mat<Dtype> Network<Dtype>::backbone_features(const Mat<Dtype>& image, ForwardCache<Dtype>* cache) const {
  if (image.rows() != config_.input_channels ||
      image.cols() != static_cast<Eigen::Index>(config_.input_height) * config_.input_width) {
    throw ConfigError("image shape " + std::to_string(image.rows()) + "x" +
                      std::to_string(image.cols()) + " does not match the model input " +
                      std::to_string(config_.input_channels) + "x" +
                      std::to_string(config_.input_height * config_.input_width));
  }
  if (cache) {
    cache->backbone_cols.resize(backbone_.size());
    cache->backbone_pre.resize(backbone_.size());
  }
  Mat<Dtype> x = image;
  for (std::size_t i = 0; i < backbone_.size(); ++i) {
    Mat<Dtype> pre = backbone_[i].forward(x, cache ? &cache->backbone_cols[i] : nullptr);
    x = relu(pre);
    if (cache) cache->backbone_pre[i] = std::move(pre);
  }
  if (cache) cache->backbone_out = x;
  return x;
}

template <typename Dtype>
Mat<Dtype> Network<Dtype>::feature_forward(const Mat<Dtype>& backbone_out, ForwardCache<Dtype>* cache) const {
  Mat<Dtype> pre = feature1_.forward(backbone_out, nullptr);
  Mat<Dtype> f = feature2_.forward(relu(pre), nullptr);
  if (cache) cache->feature_hidden_pre = std::move(pre);
  return f;
}

template <typename Dtype>
Mat<Dtype> Network<Dtype>::extract_feature_map(const Mat<Dtype>& image) const {
  return feature_forward(backbone_features(image, nullptr), nullptr);
}

template <typename Dtype>
Mat<Dtype> Network<Dtype>::predict_occurrence_maps(const Mat<Dtype>& backbone_out,
                                                   ForwardCache<Dtype>* cache) const {
  if (config_.variant != Variant::kXProtoNet) {
    throw ConfigError("the " + to_string(config_.variant) + " variant has no occurrence module");
  }
  Mat<Dtype> pre = occurrence1_.forward(backbone_out, nullptr);
  Mat<Dtype> logits = occurrence2_.forward(relu(pre), nullptr);
  Mat<Dtype> maps = logits.unaryExpr([](Dtype z) { return sigmoid(z); });
  if (cache) {
    cache->occurrence_hidden_pre = std::move(pre);
    cache->occurrence_maps = maps;
  }
  return maps;
}

template <typename Dtype>
Mat<Dtype> Network<Dtype>::occurrence_forward(const Mat<Dtype>& image, ForwardCache<Dtype>* cache) const {
  return predict_occurrence_maps(backbone_features(image, cache), cache);
}

template <typename Dtype>
Dtype Network<Dtype>::class_logit(const Mat<Dtype>& similarities, int c) const {
  const int k_count = config_.prototypes_per_class;
  Dtype z = 0;
  for (int k = 0; k < k_count; ++k)
    if (bank_.active[c * k_count + k]) z += head_(c, k) * similarities(c, k);
  return z;
}

template <typename Dtype>
void Network<Dtype>::compute_similarities(ModelOutput<Dtype>& out) const {
  const int per_class = config_.prototypes_per_class;
  out.similarities = Mat<Dtype>::Zero(config_.num_classes, per_class);
  out.zero_norm.assign(config_.num_prototypes(), false);
  for (int i = 0; i < config_.num_prototypes(); ++i) {
    bool zero = false;
    out.similarities(i / per_class, i % per_class) = cosine_similarity<Dtype>(
        out.pooled_features.row(i).transpose(), bank_.vectors.row(i).transpose(), &zero);
    out.zero_norm[i] = zero;
  }
}

template <typename Dtype>
ModelOutput<Dtype> Network<Dtype>::forward(const Mat<Dtype>& image, ForwardCache<Dtype>* cache) const {
  const Mat<Dtype> bb = backbone_features(image, cache);
  ModelOutput<Dtype> out;
  out.features = feature_forward(bb, cache);
  const int cells = config_.grid_cells();
  const int n_proto = config_.num_prototypes();
  const int per_class = config_.prototypes_per_class;

  switch (config_.variant) {
    case Variant::kXProtoNet:
      out.occurrence_maps = predict_occurrence_maps(bb, cache);
      out.pooled_features.noalias() = out.occurrence_maps * out.features.transpose();
      compute_similarities(out);
      break;
    case Variant::kGap:
      out.occurrence_maps = Mat<Dtype>::Constant(n_proto, cells, Dtype(1) / Dtype(cells));
      out.pooled_features = gap_pooled_feature(out.features).transpose().replicate(n_proto, 1);
      compute_similarities(out);
      break;
    case Variant::kPatch: {
      const int r = config_.patch_r;
      const int gw = config_.grid_width();
      const int positions_x = gw - r + 1;
      out.occurrence_maps = Mat<Dtype>::Zero(n_proto, cells);
      out.pooled_features = Mat<Dtype>::Zero(n_proto, config_.prototype_dim());
      out.similarities = Mat<Dtype>::Zero(config_.num_classes, per_class);
      out.patch_positions.assign(n_proto, 0);
      out.zero_norm.assign(n_proto, false);
      for (int i = 0; i < n_proto; ++i) {
        const auto match = patch_similarity<Dtype>(out.features, config_.grid_height(), gw,
                                                   bank_.vectors.row(i).transpose(), r);
        const int y = match.position / positions_x;
        const int x = match.position % positions_x;
        out.patch_positions[i] = match.position;
        out.similarities(i / per_class, i % per_class) = match.similarity;
        const Vec<Dtype> patch = extract_patch(out.features, gw, r, y, x);
        out.zero_norm[i] = !(patch.norm() > Dtype(0));
        out.pooled_features.row(i) = patch.transpose();
        for (int dy = 0; dy < r; ++dy)
          for (int dx = 0; dx < r; ++dx) out.occurrence_maps(i, (y + dy) * gw + x + dx) = Dtype(1);
      }
      break;
    }
  }

  out.logits.resize(config_.num_classes);
  out.probabilities.resize(config_.num_classes);
  for (int c = 0; c < config_.num_classes; ++c) {
    out.logits(c) = class_logit(out.similarities, c);
    out.probabilities(c) = sigmoid(out.logits(c));
  }
  return out;
}

template <typename Dtype>
void Network<Dtype>::backward(const ForwardCache<Dtype>& cache, const ModelOutput<Dtype>& out,
                              const OutputGrad<Dtype>& grad, const TrainableGroups& trainable) {
  const int per_class = config_.prototypes_per_class;
  const int n_proto = config_.num_prototypes();
  const int cells = config_.grid_cells();

  Mat<Dtype> dsims = grad.similarities.size() > 0
                         ? grad.similarities
                         : Mat<Dtype>::Zero(config_.num_classes, per_class);
  if (grad.logits.size() > 0) {
    for (int c = 0; c < config_.num_classes; ++c) {
      const Dtype dz = grad.logits(c);
      if (dz == Dtype(0)) continue;
      for (int k = 0; k < per_class; ++k) {
        if (!bank_.active[c * per_class + k]) continue;
        dsims(c, k) += head_(c, k) * dz;
        if (trainable.head) head_grad_(c, k) += dz * out.similarities(c, k);
      }
    }
  }
  if (trainable.prototypes && grad.prototypes.size() > 0) proto_grad_ += grad.prototypes;

  const bool need_features = trainable.backbone || trainable.feature;
  const bool need_maps =
      config_.variant == Variant::kXProtoNet && (trainable.backbone || trainable.occurrence);

  // Cosine similarity backward onto pooled vectors and prototypes.
  Mat<Dtype> dpooled = Mat<Dtype>::Zero(n_proto, config_.prototype_dim());
  for (int i = 0; i < n_proto; ++i) {
    const Dtype ds = dsims(i / per_class, i % per_class);
    if (ds == Dtype(0) || out.zero_norm[i]) continue;
    const auto f = out.pooled_features.row(i);
    const auto p = bank_.vectors.row(i);
    const Dtype f_norm = f.norm();
    const Dtype p_norm = p.norm();
    const Dtype s = f.dot(p) / (f_norm * p_norm);
    dpooled.row(i) = ds * (p / (f_norm * p_norm) - s * f / (f_norm * f_norm));
    if (trainable.prototypes) proto_grad_.row(i) += ds * (f / (f_norm * p_norm) - s * p / (p_norm * p_norm));
  }

  Mat<Dtype> dfeatures = grad.features.size() > 0 ? grad.features
                                                  : Mat<Dtype>::Zero(config_.feature_dim, cells);
  Mat<Dtype> dmaps;
  if (need_maps) {
    dmaps = grad.occurrence_maps.size() > 0 ? grad.occurrence_maps : Mat<Dtype>::Zero(n_proto, cells);
  }
  switch (config_.variant) {
    case Variant::kXProtoNet:
      if (need_features) dfeatures.noalias() += dpooled.transpose() * out.occurrence_maps;
      if (need_maps) dmaps.noalias() += dpooled * out.features;
      break;
    case Variant::kGap:
      if (need_features) {
        const Vec<Dtype> col = dpooled.colwise().sum().transpose() / Dtype(cells);
        dfeatures.colwise() += col;
      }
      break;
    case Variant::kPatch:
      if (need_features) {
        const int r = config_.patch_r;
        const int gw = config_.grid_width();
        const int positions_x = gw - r + 1;
        for (int i = 0; i < n_proto; ++i) {
          const int pos = out.patch_positions[i];
          scatter_patch<Dtype>(dfeatures, gw, r, pos / positions_x, pos % positions_x,
                               dpooled.row(i).transpose());
        }
      }
      break;
  }

  Mat<Dtype> dbackbone;
  if (need_features) {
    Mat<Dtype> dh = feature2_.backward(relu(cache.feature_hidden_pre), dfeatures, true, trainable.feature);
    dh = relu_backward(cache.feature_hidden_pre, dh);
    Mat<Dtype> d = feature1_.backward(cache.backbone_out, dh, trainable.backbone, trainable.feature);
    if (trainable.backbone) dbackbone = std::move(d);
  }
  if (need_maps) {
    Mat<Dtype> dlogit = dmaps.cwiseProduct(
        cache.occurrence_maps.unaryExpr([](Dtype m) { return m * (Dtype(1) - m); }));
    Mat<Dtype> dh = occurrence2_.backward(relu(cache.occurrence_hidden_pre), dlogit, true, trainable.occurrence);
    dh = relu_backward(cache.occurrence_hidden_pre, dh);
    Mat<Dtype> d = occurrence1_.backward(cache.backbone_out, dh, trainable.backbone, trainable.occurrence);
    if (trainable.backbone) {
      if (dbackbone.size() == 0) dbackbone = std::move(d);
      else dbackbone += d;
    }
  }
  if (!trainable.backbone || dbackbone.size() == 0) return;
  for (int i = static_cast<int>(backbone_.size()) - 1; i >= 0; --i) {
    Mat<Dtype> dpre = relu_backward(cache.backbone_pre[i], dbackbone);
    dbackbone = backbone_[i].backward(cache.backbone_cols[i], dpre, i > 0);
  }
}

template <typename Dtype>
void Network<Dtype>::backward_occurrence(const ForwardCache<Dtype>& cache, const Mat<Dtype>& dmaps,
                                         const TrainableGroups& trainable) {
  if (config_.variant != Variant::kXProtoNet) return;
  if (!trainable.backbone && !trainable.occurrence) return;
  Mat<Dtype> dlogit = dmaps.cwiseProduct(
      cache.occurrence_maps.unaryExpr([](Dtype m) { return m * (Dtype(1) - m); }));
  Mat<Dtype> dh = occurrence2_.backward(relu(cache.occurrence_hidden_pre), dlogit, true, trainable.occurrence);
  dh = relu_backward(cache.occurrence_hidden_pre, dh);
  Mat<Dtype> dbackbone = occurrence1_.backward(cache.backbone_out, dh, trainable.backbone, trainable.occurrence);
  if (!trainable.backbone) return;
  for (int i = static_cast<int>(backbone_.size()) - 1; i >= 0; --i) {
    Mat<Dtype> dpre = relu_backward(cache.backbone_pre[i], dbackbone);
    dbackbone = backbone_[i].backward(cache.backbone_cols[i], dpre, i > 0);
  }
}

template <typename Dtype>
void Network<Dtype>::zero_grad() {
  for (auto& layer : backbone_) layer.zero_grad();
  feature1_.zero_grad();
  feature2_.zero_grad();
  if (config_.variant == Variant::kXProtoNet) {
    occurrence1_.zero_grad();
    occurrence2_.zero_grad();
  }
  proto_grad_.setZero();
  head_grad_.setZero();
}

template <typename Dtype>
std::vector<ParamView<Dtype>> Network<Dtype>::parameters() {
  std::vector<ParamView<Dtype>> params;
  auto add_layer = [&params](ConvLayer<Dtype>& layer, ParamGroup group) {
    params.push_back({layer.name + ".weight", group, layer.weight.data(), layer.weight_grad.data(),
                      layer.weight.rows(), layer.weight.cols()});
    params.push_back({layer.name + ".bias", group, layer.bias.data(), layer.bias_grad.data(),
                      layer.bias.size(), 1});
  };
  for (auto& layer : backbone_) add_layer(layer, ParamGroup::kBackbone);
  add_layer(feature1_, ParamGroup::kFeature);
  add_layer(feature2_, ParamGroup::kFeature);
  if (config_.variant == Variant::kXProtoNet) {
    add_layer(occurrence1_, ParamGroup::kOccurrence);
    add_layer(occurrence2_, ParamGroup::kOccurrence);
  }
  params.push_back({"prototypes", ParamGroup::kPrototypes, bank_.vectors.data(), proto_grad_.data(),
                    bank_.vectors.rows(), bank_.vectors.cols()});
  params.push_back({"head", ParamGroup::kHead, head_.data(), head_grad_.data(), head_.rows(), head_.cols()});
  return params;
}

template <typename Dtype>
template <typename Other>
Network<Other> Network<Dtype>::cast() const {
  Network<Other> out(config_, typename Network<Other>::Uninitialized{});
  for (std::size_t i = 0; i < backbone_.size(); ++i) out.backbone_[i] = backbone_[i].template cast<Other>();
  out.feature1_ = feature1_.template cast<Other>();
  out.feature2_ = feature2_.template cast<Other>();
  if (config_.variant == Variant::kXProtoNet) {
    out.occurrence1_ = occurrence1_.template cast<Other>();
    out.occurrence2_ = occurrence2_.template cast<Other>();
  }
  out.bank_.vectors = bank_.vectors.template cast<Other>();
  out.bank_.active = bank_.active;
  out.bank_.provenance = bank_.provenance;
  out.head_ = head_.template cast<Other>();
  return out;
}

// ---------------------------------------------------------------------------
// Projection and pruning.

template <typename Dtype>
std::optional<std::size_t> select_most_similar(const Eigen::Ref<const Vec<Dtype>>& prototype,
                                               std::span<const Vec<Dtype>> candidates,
                                               Dtype* best_similarity) {
  std::optional<std::size_t> best;
  Dtype best_s = -std::numeric_limits<Dtype>::infinity();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    bool zero = false;
    const Dtype s = cosine_similarity<Dtype>(candidates[i], prototype, &zero);
    if (zero) continue;
    if (!best || s > best_s) {
      best = i;
      best_s = s;
    }
  }
  if (best && best_similarity) *best_similarity = best_s;
  return best;
}

template <typename Dtype>
void project_prototypes(Network<Dtype>& net, std::span<const ProjectionCandidate<Dtype>> candidates,
                        const ProjectionOptions& options) {
  if (candidates.empty()) throw ModelError("project_prototypes: empty candidate set");
  const ModelConfig& cfg = net.config();
  if (options.restrict_to_boxes && cfg.variant != Variant::kXProtoNet) {
    throw ConfigError("box-restricted projection requires the xprotonet variant");
  }
  const int per_class = cfg.prototypes_per_class;
  const int n_proto = cfg.num_prototypes();
  auto& bank = net.bank();

  struct Best {
    bool found = false;
    Dtype similarity = -std::numeric_limits<Dtype>::infinity();
    std::size_t candidate = 0;
    Vec<Dtype> pooled;
    Vec<Dtype> map;
    int patch_position = -1;
  };
  auto restricted = [&options](int c) {
    return options.restrict_to_boxes && (options.box_classes.empty() || options.box_classes[c]);
  };
  std::vector<Best> best(n_proto);
  std::vector<bool> class_seen(cfg.num_classes, false);

  for (std::size_t idx = 0; idx < candidates.size(); ++idx) {
    const auto& cand = candidates[idx];
    const auto& labels = *cand.labels;
    bool relevant = false;
    for (int c = 0; c < cfg.num_classes; ++c) {
      if (!labels[c]) continue;
      if (restricted(c) && (!cand.box_masks || !(*cand.box_masks)[c].has_value())) continue;
      relevant = true;
    }
    if (!relevant) continue;
    const ModelOutput<Dtype> out = net.forward(*cand.image);
    for (int c = 0; c < cfg.num_classes; ++c) {
      if (!labels[c]) continue;
      const GridMask* mask = nullptr;
      if (restricted(c)) {
        if (!cand.box_masks || !(*cand.box_masks)[c].has_value()) continue;
        mask = &*(*cand.box_masks)[c];
      }
      class_seen[c] = true;
      for (int k = 0; k < per_class; ++k) {
        const int i = c * per_class + k;
        if (!bank.active[i]) continue;
        Vec<Dtype> map = out.occurrence_maps.row(i).transpose();
        if (mask) {
          for (Eigen::Index u = 0; u < map.size(); ++u)
            if (!(*mask)[u]) map(u) = Dtype(0);
        }
        Vec<Dtype> pooled = mask ? pool_feature<Dtype>(out.features, map)
                                 : Vec<Dtype>(out.pooled_features.row(i).transpose());
        bool zero = false;
        const Dtype s = cosine_similarity<Dtype>(pooled, bank.vectors.row(i).transpose(), &zero);
        if (zero) continue;
        if (!best[i].found || s > best[i].similarity) {
          best[i].found = true;
          best[i].similarity = s;
          best[i].candidate = idx;
          best[i].pooled = std::move(pooled);
          best[i].map = std::move(map);
          best[i].patch_position = out.patch_positions.empty() ? -1 : out.patch_positions[i];
        }
      }
    }
  }

  for (int c = 0; c < cfg.num_classes; ++c) {
    if (!class_seen[c]) {
      const std::string name = cfg.class_names.empty() ? std::to_string(c) : cfg.class_names[c];
      warn("projection: no positive candidate for class " + name + "; prototypes left unchanged");
    }
  }
  for (int i = 0; i < n_proto; ++i) {
    if (!best[i].found) continue;
    bank.vectors.row(i) = best[i].pooled.transpose();
    Provenance prov;
    prov.image_id = *candidates[best[i].candidate].id;
    prov.occurrence_map.assign(best[i].map.data(), best[i].map.data() + best[i].map.size());
    prov.pooled_feature.assign(best[i].pooled.data(), best[i].pooled.data() + best[i].pooled.size());
    prov.similarity_before = static_cast<double>(best[i].similarity);
    prov.patch_position = best[i].patch_position;
    prov.box_restricted = restricted(i / per_class);
    bank.provenance[i] = std::move(prov);
  }
}

template <typename Dtype>
void prune_prototypes(Network<Dtype>& net) {
  const ModelConfig& cfg = net.config();
  const int per_class = cfg.prototypes_per_class;
  auto& bank = net.bank();
  const auto& w = net.head_weights();
  for (int c = 0; c < cfg.num_classes; ++c) {
    bool survivor = false;
    for (int k = 0; k < per_class; ++k)
      if (bank.active[c * per_class + k] && w(c, k) >= Dtype(0)) survivor = true;
    if (!survivor) {
      const std::string name = cfg.class_names.empty() ? std::to_string(c) : cfg.class_names[c];
      throw ModelError("pruning would remove every prototype of class " + name);
    }
  }
  for (int c = 0; c < cfg.num_classes; ++c)
    for (int k = 0; k < per_class; ++k)
      if (w(c, k) < Dtype(0)) bank.active[c * per_class + k] = false;
}

#define XPN_INSTANTIATE(T)                                                                        \
  template Vec<T> pool_feature(const Mat<T>&, const Eigen::Ref<const Vec<T>>&);                   \
  template T cosine_similarity(const Eigen::Ref<const Vec<T>>&, const Eigen::Ref<const Vec<T>>&,  \
                               bool*);                                                            \
  template class Network<T>;                                                                      \
  template std::optional<std::size_t> select_most_similar(const Eigen::Ref<const Vec<T>>&,        \
                                                          std::span<const Vec<T>>, T*);           \
  template void project_prototypes(Network<T>&, std::span<const ProjectionCandidate<T>>,          \
                                   const ProjectionOptions&);                                     \
  template void prune_prototypes(Network<T>&);
XPN_INSTANTIATE(float)
XPN_INSTANTIATE(double)
#undef XPN_INSTANTIATE

template Network<double> Network<float>::cast<double>() const;
template Network<float> Network<double>::cast<float>() const;
template Network<float> Network<float>::cast<float>() const;
template Network<double> Network<double>::cast<double>() const;

}  // namespace xprotonet
