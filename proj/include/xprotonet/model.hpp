#ifndef XPROTONET_MODEL_HPP_
#define XPROTONET_MODEL_HPP_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xprotonet/common.hpp"
#include "xprotonet/layers.hpp"

namespace xprotonet {

/// How the feature vector compared with each prototype is obtained.
enum class Variant {
  kXProtoNet,  // occurrence-map weighted pooling
  kPatch,      // r x r feature patch, max over positions
  kGap,        // global average pooling
};

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct ModelConfig {
  int num_classes = 14;
  int prototypes_per_class = 3;
  int feature_dim = 128;
  int input_channels = 3;
  int input_height = 512;
  int input_width = 512;
  std::string backbone_id = "small_cnn";
  std::vector<int> backbone_channels = {16, 32, 64, 64};
  // Hidden width of the occurrence module; 0 means feature_dim.
  int occurrence_hidden = 0;
  Variant variant = Variant::kXProtoNet;
  int patch_r = 1;
  std::uint64_t seed = 0;
  std::vector<std::string> class_names;

  int backbone_stride() const;
  int grid_height() const { return input_height / backbone_stride(); }
  int grid_width() const { return input_width / backbone_stride(); }
  int grid_cells() const { return grid_height() * grid_width(); }
  int num_prototypes() const { return num_classes * prototypes_per_class; }
  /// Length of a prototype vector: D, or r*r*D for the patch variant.
  int prototype_dim() const;
  int occurrence_width() const {
    return occurrence_hidden > 0 ? occurrence_hidden : feature_dim;
  }

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// One binary H x W mask on the feature grid (1 = inside).
using GridMask = std::vector<std::uint8_t>;

/// Where a projected prototype came from.
struct Provenance {
  std::string image_id;
  std::vector<double> occurrence_map;  // H*W snapshot used for pooling
  std::vector<double> pooled_feature;  // equals the prototype after projection
  double similarity_before = 0.0;
  int patch_position = -1;             // patch variant only
  bool box_restricted = false;         // pooled with a bounding box mask
};

template <typename Dtype>
struct PrototypeBank {
  Mat<Dtype> vectors;  // (C*K) x prototype_dim, row c*K + k
  std::vector<bool> active;
  std::vector<std::optional<Provenance>> provenance;

  bool is_active(int c, int k, int per_class) const { return active[c * per_class + k]; }
};

template <typename Dtype>
struct ModelOutput {
  Vec<Dtype> logits;            // C
  Vec<Dtype> probabilities;     // C
  Mat<Dtype> similarities;      // C x K
  Mat<Dtype> pooled_features;   // (C*K) x prototype_dim
  Mat<Dtype> occurrence_maps;   // (C*K) x (H*W)
  Mat<Dtype> features;          // D x (H*W)
  std::vector<int> patch_positions;  // patch variant: argmax position per prototype
  std::vector<bool> zero_norm;       // pooled vector had zero norm
};

/// Intermediate activations kept for backward().
template <typename Dtype>
struct ForwardCache {
  std::vector<Mat<Dtype>> backbone_cols;
  std::vector<Mat<Dtype>> backbone_pre;
  Mat<Dtype> backbone_out;
  Mat<Dtype> feature_hidden_pre;
  Mat<Dtype> occurrence_hidden_pre;
  Mat<Dtype> occurrence_maps;
};

/// Upstream gradients of the loss with respect to model outputs.
/// Empty matrices are treated as zero.
template <typename Dtype>
struct OutputGrad {
  Vec<Dtype> logits;
  Mat<Dtype> similarities;
  Mat<Dtype> occurrence_maps;
  Mat<Dtype> features;
  Mat<Dtype> prototypes;
};

enum class ParamGroup { kBackbone, kFeature, kOccurrence, kPrototypes, kHead };

std::string to_string(ParamGroup g);

struct TrainableGroups {
  bool backbone = true;
  bool feature = true;
  bool occurrence = true;
  bool prototypes = true;
  bool head = true;

  bool contains(ParamGroup g) const;
};

/// Non-owning view over one parameter tensor (column-major storage).
template <typename Dtype>
struct ParamView {
  std::string name;
  ParamGroup group;
  Dtype* value;
  Dtype* grad;
  Eigen::Index rows;
  Eigen::Index cols;

  Eigen::Index size() const { return rows * cols; }
};

template <typename Dtype>
class Network {
 public:
  explicit Network(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  /// Full forward pass. Throws ConfigError on an input shape mismatch.
  ModelOutput<Dtype> forward(const Mat<Dtype>& image, ForwardCache<Dtype>* cache = nullptr) const;

  /// Backbone features only (input_channels x H0*W0 -> B x H*W).
  Mat<Dtype> backbone_features(const Mat<Dtype>& image, ForwardCache<Dtype>* cache = nullptr) const;

  /// Feature module output F, D x H*W.
  Mat<Dtype> extract_feature_map(const Mat<Dtype>& image) const;

  /// Occurrence module applied to backbone features: (C*K) x H*W in [0,1].
  Mat<Dtype> predict_occurrence_maps(const Mat<Dtype>& backbone_out,
                                     ForwardCache<Dtype>* cache = nullptr) const;

  /// Backbone + occurrence module only; used for the transformed branch.
  Mat<Dtype> occurrence_forward(const Mat<Dtype>& image, ForwardCache<Dtype>* cache) const;

  /// Accumulates parameter gradients for the groups in `trainable`.
  void backward(const ForwardCache<Dtype>& cache, const ModelOutput<Dtype>& out,
                const OutputGrad<Dtype>& grad, const TrainableGroups& trainable);

  /// Backward through occurrence module and backbone only.
  void backward_occurrence(const ForwardCache<Dtype>& cache, const Mat<Dtype>& dmaps,
                           const TrainableGroups& trainable);

  void zero_grad();
  std::vector<ParamView<Dtype>> parameters();

  PrototypeBank<Dtype>& bank() { return bank_; }
  const PrototypeBank<Dtype>& bank() const { return bank_; }
  Mat<Dtype>& head_weights() { return head_; }
  const Mat<Dtype>& head_weights() const { return head_; }
  Mat<Dtype>& head_grad() { return head_grad_; }
  Mat<Dtype>& prototype_grad() { return proto_grad_; }

  std::vector<ConvLayer<Dtype>>& backbone_layers() { return backbone_; }
  ConvLayer<Dtype>& feature_layer(int i) { return i == 0 ? feature1_ : feature2_; }
  ConvLayer<Dtype>& occurrence_layer(int i) { return i == 0 ? occurrence1_ : occurrence2_; }

  /// Logit of class c from similarities, masked by the active set.
  Dtype class_logit(const Mat<Dtype>& similarities, int c) const;

  template <typename Other>
  Network<Other> cast() const;

 private:
  template <typename>
  friend class Network;

  struct Uninitialized {};
  Network(ModelConfig config, Uninitialized);

  void build_layers();
  void compute_similarities(ModelOutput<Dtype>& out) const;
  Mat<Dtype> feature_forward(const Mat<Dtype>& backbone_out, ForwardCache<Dtype>* cache) const;

  ModelConfig config_;
  std::vector<ConvLayer<Dtype>> backbone_;
  ConvLayer<Dtype> feature1_;
  ConvLayer<Dtype> feature2_;
  ConvLayer<Dtype> occurrence1_;
  ConvLayer<Dtype> occurrence2_;
  PrototypeBank<Dtype> bank_;
  Mat<Dtype> proto_grad_;
  Mat<Dtype> head_;  // C x K, initialized to 1
  Mat<Dtype> head_grad_;
};

// ---------------------------------------------------------------------------
// Scoring primitives.

/// Occurrence-weighted pooling: sum_u M_u F_u. `features` is D x H*W and
/// `occurrence` has H*W entries.
template <typename Dtype>
Vec<Dtype> pool_feature(const Mat<Dtype>& features, const Eigen::Ref<const Vec<Dtype>>& occurrence);

/// Cosine similarity. A zero-norm `f` yields 0 and sets `*zero_norm`;
/// a zero-norm prototype throws ModelError.
template <typename Dtype>
Dtype cosine_similarity(const Eigen::Ref<const Vec<Dtype>>& f,
                        const Eigen::Ref<const Vec<Dtype>>& p, bool* zero_norm = nullptr);

/// sigmoid(sum over active k of w_k s_k). Throws ModelError if nothing is active.
double predict_class_score(std::span<const double> similarities, std::span<const double> weights,
                           const std::vector<bool>& active);

// ---------------------------------------------------------------------------
// Prototype surgery.

template <typename Dtype>
struct ProjectionCandidate {
  const std::string* id = nullptr;
  const Mat<Dtype>* image = nullptr;
  const std::vector<std::uint8_t>* labels = nullptr;
  // Per-class box masks on the feature grid; only consulted when projecting
  // with box restriction. Empty optional = no box for that class.
  const std::vector<std::optional<GridMask>>* box_masks = nullptr;
};

struct ProjectionOptions {
  // Restrict to box-annotated positives and pool inside their boxes.
  bool restrict_to_boxes = false;
  // Classes the restriction applies to; empty means every class.
  std::vector<bool> box_classes;
};

/// Index of the candidate with the highest cosine similarity to `prototype`;
/// zero-norm candidates are skipped, ties go to the lowest index.
template <typename Dtype>
std::optional<std::size_t> select_most_similar(const Eigen::Ref<const Vec<Dtype>>& prototype,
                                               std::span<const Vec<Dtype>> candidates,
                                               Dtype* best_similarity = nullptr);

/// Replaces every active prototype with the most similar pooled vector from
/// the positive samples of its class and records provenance.
template <typename Dtype>
void project_prototypes(Network<Dtype>& net, std::span<const ProjectionCandidate<Dtype>> candidates,
                        const ProjectionOptions& options = {});

/// Deactivates prototypes with strictly negative head weight.
template <typename Dtype>
void prune_prototypes(Network<Dtype>& net);

}  // namespace xprotonet

#endif  // XPROTONET_MODEL_HPP_
