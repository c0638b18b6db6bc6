#include "xprotonet/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace xprotonet {

void LossConfig::validate() const {
  auto check = [](double v, const char* key) {
    if (!std::isfinite(v) || v < 0.0) throw ConfigError(std::string("loss.") + key + ": must be finite and >= 0");
  };
  check(lambda_clst, "lambda_clst");
  check(lambda_sep, "lambda_sep");
  check(lambda_occur, "lambda_occur");
  check(gamma, "gamma");
  check(annotated_lambda_clst, "annotated_lambda_clst");
  check(annotated_lambda_sep, "annotated_lambda_sep");
}

double LossBreakdown::combine(const LossConfig& config) const {
  return cls + config.lambda_clst * clst + config.lambda_sep * sep +
         config.annotated_lambda_clst * clst_annotated + config.annotated_lambda_sep * sep_annotated +
         config.lambda_occur * occur;
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& other) {
  cls += other.cls;
  clst += other.clst;
  sep += other.sep;
  clst_annotated += other.clst_annotated;
  sep_annotated += other.sep_annotated;
  occur += other.occur;
  trans += other.trans;
  total += other.total;
  if (per_class_cls.size() < other.per_class_cls.size()) per_class_cls.resize(other.per_class_cls.size(), 0.0);
  for (std::size_t c = 0; c < other.per_class_cls.size(); ++c) per_class_cls[c] += other.per_class_cls[c];
  return *this;
}

LossBreakdown LossBreakdown::scaled(double factor) const {
  LossBreakdown out = *this;
  out.cls *= factor;
  out.clst *= factor;
  out.sep *= factor;
  out.clst_annotated *= factor;
  out.sep_annotated *= factor;
  out.occur *= factor;
  out.trans *= factor;
  out.total *= factor;
  for (double& v : out.per_class_cls) v *= factor;
  return out;
}

BatchLabels BatchLabels::from_rows(std::span<const std::vector<std::uint8_t>> rows, int num_classes) {
  BatchLabels out;
  out.batch_size = static_cast<int>(rows.size());
  out.num_classes = num_classes;
  out.y.reserve(rows.size() * num_classes);
  out.num_pos.assign(num_classes, 0);
  out.num_neg.assign(num_classes, 0);
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != num_classes) throw ConfigError("BatchLabels: label length mismatch");
    for (int c = 0; c < num_classes; ++c) {
      out.y.push_back(row[c] ? 1 : 0);
      ++(row[c] ? out.num_pos[c] : out.num_neg[c]);
    }
  }
  return out;
}

double classification_term(double logit, bool positive, int count, double gamma, double* dlogit) {
  if (dlogit) *dlogit = 0.0;
  if (count <= 0) return 0.0;
  const double a = 1.0 / count;
  const double raw = 1.0 / (1.0 + std::exp(-logit));
  const bool clamped = raw < kProbabilityEpsilon || raw > 1.0 - kProbabilityEpsilon;
  const double p = std::clamp(raw, kProbabilityEpsilon, 1.0 - kProbabilityEpsilon);
  double loss;
  double dp;
  if (positive) {
    const double q = 1.0 - p;
    loss = -a * std::pow(q, gamma) * std::log(p);
    dp = -a * (-gamma * std::pow(q, gamma - 1.0) * std::log(p) + std::pow(q, gamma) / p);
  } else {
    const double q = 1.0 - p;
    loss = -a * std::pow(p, gamma) * std::log(q);
    dp = -a * (gamma * std::pow(p, gamma - 1.0) * std::log(q) - std::pow(p, gamma) / q);
  }
  if (dlogit && !clamped) *dlogit = dp * raw * (1.0 - raw);
  return loss;
}

double classification_loss(const Mat<double>& probabilities, const BatchLabels& labels, double gamma,
                           std::vector<double>* per_class) {
  if (probabilities.rows() != labels.batch_size || probabilities.cols() != labels.num_classes) {
    throw ConfigError("classification_loss: probabilities shape does not match labels");
  }
  if (per_class) per_class->assign(labels.num_classes, 0.0);
  double total = 0.0;
  for (int c = 0; c < labels.num_classes; ++c) {
    for (int i = 0; i < labels.batch_size; ++i) {
      const bool pos = labels.positive(i, c);
      const int count = pos ? labels.num_pos[c] : labels.num_neg[c];
      if (count == 0) continue;
      const double p = std::clamp(probabilities(i, c), kProbabilityEpsilon, 1.0 - kProbabilityEpsilon);
      const double a = 1.0 / count;
      const double term = pos ? -a * std::pow(1.0 - p, gamma) * std::log(p)
                              : -a * std::pow(p, gamma) * std::log(1.0 - p);
      total += term;
      if (per_class) (*per_class)[c] += term;
    }
  }
  return total;
}

ClusterSeparation cluster_separation_losses(std::span<const Mat<double>> similarities,
                                            const BatchLabels& labels) {
  if (static_cast<int>(similarities.size()) != labels.batch_size) {
    throw ConfigError("cluster_separation_losses: batch size mismatch");
  }
  ClusterSeparation out;
  for (int i = 0; i < labels.batch_size; ++i) {
    const Mat<double>& s = similarities[i];
    if (s.rows() != labels.num_classes) throw ConfigError("cluster_separation_losses: class count mismatch");
    for (int c = 0; c < labels.num_classes; ++c) {
      const double best = s.row(c).maxCoeff();
      if (labels.positive(i, c)) {
        if (labels.num_pos[c] > 0) out.clst -= best / labels.num_pos[c];
      } else if (labels.num_neg[c] > 0) {
        out.sep += best / labels.num_neg[c];
      }
    }
  }
  return out;
}

double transformation_loss(const Mat<double>& maps_of_transformed_input, const Mat<double>& transformed_maps) {
  if (maps_of_transformed_input.rows() != transformed_maps.rows() ||
      maps_of_transformed_input.cols() != transformed_maps.cols()) {
    throw ConfigError("transformation_loss: shape mismatch");
  }
  return (maps_of_transformed_input - transformed_maps).cwiseAbs().sum();
}

double occurrence_loss(const Mat<double>& maps, double trans_term, const GridMask* box_mask) {
  double l1 = 0.0;
  if (!box_mask) {
    l1 = maps.cwiseAbs().sum();
  } else {
    if (static_cast<Eigen::Index>(box_mask->size()) != maps.cols()) {
      throw ConfigError("occurrence_loss: mask grid mismatch");
    }
    for (Eigen::Index u = 0; u < maps.cols(); ++u)
      if (!(*box_mask)[u]) l1 += maps.col(u).cwiseAbs().sum();
  }
  return trans_term + l1;
}

LossBreakdown total_loss(LossBreakdown components, const LossConfig& config) {
  components.total = components.combine(config);
  return components;
}

template <typename Dtype>
Vec<Dtype> bbox_pooled_feature(const Mat<Dtype>& features, const Eigen::Ref<const Vec<Dtype>>& occurrence,
                               const GridMask& box_mask) {
  if (features.cols() != occurrence.size() || static_cast<Eigen::Index>(box_mask.size()) != occurrence.size()) {
    throw ConfigError("bbox_pooled_feature: grid mismatch");
  }
  if (std::none_of(box_mask.begin(), box_mask.end(), [](std::uint8_t v) { return v != 0; })) {
    throw ConfigError("bbox_pooled_feature: empty box mask");
  }
  Vec<Dtype> masked = occurrence;
  for (Eigen::Index u = 0; u < masked.size(); ++u)
    if (!box_mask[u]) masked(u) = Dtype(0);
  return features * masked;
}

TermWeights TermWeights::from(const LossConfig& config) {
  TermWeights w;
  w.cls = 1.0;
  w.clst = config.lambda_clst;
  w.sep = config.lambda_sep;
  w.clst_annotated = config.annotated_lambda_clst;
  w.sep_annotated = config.annotated_lambda_sep;
  w.occurrence_l1 = config.lambda_occur;
  w.trans = config.lambda_occur;
  return w;
}

namespace {

// Gradient of cos(f, p) with respect to f and p; false when f has zero norm.
template <typename Dtype>
bool cosine_grad(const Vec<Dtype>& f, const Vec<Dtype>& p, Dtype* s, Vec<Dtype>* df, Vec<Dtype>* dp) {
  const Dtype fn = f.norm();
  const Dtype pn = p.norm();
  if (!(fn > Dtype(0))) {
    *s = Dtype(0);
    return false;
  }
  *s = f.dot(p) / (fn * pn);
  *df = p / (fn * pn) - (*s) * f / (fn * fn);
  *dp = f / (fn * pn) - (*s) * p / (pn * pn);
  return true;
}

}  // namespace

template <typename Dtype>
LossBreakdown batch_objective(Network<Dtype>& net, std::span<const TrainingExample<Dtype>> batch,
                              const LossConfig& config, const ObjectiveOptions& options) {
  const ModelConfig& cfg = net.config();
  const int num_classes = cfg.num_classes;
  const int per_class = cfg.prototypes_per_class;
  const int n_proto = cfg.num_prototypes();
  const int cells = cfg.grid_cells();
  const bool has_occurrence = cfg.variant == Variant::kXProtoNet;
  const TermWeights& w = options.weights;
  const double inv_batch = batch.empty() ? 0.0 : 1.0 / static_cast<double>(batch.size());

  std::vector<std::vector<std::uint8_t>> rows;
  rows.reserve(batch.size());
  for (const auto& ex : batch) rows.push_back(*ex.labels);
  const BatchLabels labels = BatchLabels::from_rows(rows, num_classes);

  LossBreakdown result;
  result.per_class_cls.assign(num_classes, 0.0);
  const auto& bank = net.bank();

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainingExample<Dtype>& ex = batch[i];
    ForwardCache<Dtype> cache;
    const ModelOutput<Dtype> out = net.forward(*ex.image, options.backward ? &cache : nullptr);

    OutputGrad<Dtype> grad;
    grad.logits = Vec<Dtype>::Zero(num_classes);
    grad.similarities = Mat<Dtype>::Zero(num_classes, per_class);
    bool features_grad = false;
    bool prototypes_grad = false;
    if (options.backward) {
      grad.features = Mat<Dtype>::Zero(cfg.feature_dim, cells);
      grad.prototypes = Mat<Dtype>::Zero(n_proto, cfg.prototype_dim());
      if (has_occurrence) grad.occurrence_maps = Mat<Dtype>::Zero(n_proto, cells);
    }

    // Classification (weighted balance loss).
    for (int c = 0; c < num_classes; ++c) {
      const bool pos = labels.positive(static_cast<int>(i), c);
      const int count = pos ? labels.num_pos[c] : labels.num_neg[c];
      double dz = 0.0;
      const double term = classification_term(static_cast<double>(out.logits(c)), pos, count, config.gamma, &dz);
      result.cls += term;
      result.per_class_cls[c] += term;
      grad.logits(c) = static_cast<Dtype>(w.cls * dz);
    }

    // Cluster / separation on the max similarity over active prototypes.
    for (int c = 0; c < num_classes; ++c) {
      if (!options.excluded_classes.empty() && options.excluded_classes[c]) continue;
      const bool pos = labels.positive(static_cast<int>(i), c);
      const int count = pos ? labels.num_pos[c] : labels.num_neg[c];
      if (count == 0) continue;
      const GridMask* mask =
          (ex.annotated && c < static_cast<int>(ex.box_masks.size()) && ex.box_masks[c]) ? &*ex.box_masks[c]
                                                                                          : nullptr;
      if (mask && !has_occurrence) throw ConfigError("box-conditioned training requires the xprotonet variant");

      int best_k = -1;
      double best_s = 0.0;
      Vec<Dtype> best_df, best_dp, best_masked;
      for (int k = 0; k < per_class; ++k) {
        const int idx = c * per_class + k;
        if (!bank.active[idx]) continue;
        double s;
        Vec<Dtype> df, dp, masked;
        if (mask) {
          masked = out.occurrence_maps.row(idx).transpose();
          for (int u = 0; u < cells; ++u)
            if (!(*mask)[u]) masked(u) = Dtype(0);
          const Vec<Dtype> f = out.features * masked;
          Dtype sd;
          if (!cosine_grad<Dtype>(f, bank.vectors.row(idx).transpose(), &sd, &df, &dp)) {
            df = Vec<Dtype>::Zero(f.size());
            dp = Vec<Dtype>::Zero(f.size());
          }
          s = static_cast<double>(sd);
        } else {
          s = static_cast<double>(out.similarities(c, k));
        }
        if (best_k < 0 || s > best_s) {
          best_k = k;
          best_s = s;
          best_df = std::move(df);
          best_dp = std::move(dp);
          best_masked = std::move(masked);
        }
      }
      if (best_k < 0) continue;
      double term;
      double weight;
      if (pos) {
        term = -best_s / count;
        if (ex.annotated) {
          result.clst_annotated += term;
          weight = w.clst_annotated;
        } else {
          result.clst += term;
          weight = w.clst;
        }
      } else {
        term = best_s / count;
        if (ex.annotated) {
          result.sep_annotated += term;
          weight = w.sep_annotated;
        } else {
          result.sep += term;
          weight = w.sep;
        }
      }
      const Dtype ds = static_cast<Dtype>(weight * (pos ? -1.0 : 1.0) / count);
      if (!options.backward || ds == Dtype(0)) continue;
      if (!mask) {
        grad.similarities(c, best_k) += ds;
      } else {
        const int idx = c * per_class + best_k;
        const Vec<Dtype> df = ds * best_df;
        grad.prototypes.row(idx) += (ds * best_dp).transpose();
        grad.features.noalias() += df * best_masked.transpose();
        Vec<Dtype> dm = out.features.transpose() * df;
        for (int u = 0; u < cells; ++u)
          if (!(*mask)[u]) dm(u) = Dtype(0);
        grad.occurrence_maps.row(idx) += dm.transpose();
        features_grad = true;
        prototypes_grad = true;
      }
    }

    // Occurrence: L1 (outside the box for annotated classes) plus transformation.
    if (has_occurrence) {
      double l1 = 0.0;
      for (int idx = 0; idx < n_proto; ++idx) {
        const int c = idx / per_class;
        const GridMask* mask =
            (ex.annotated && c < static_cast<int>(ex.box_masks.size()) && ex.box_masks[c]) ? &*ex.box_masks[c]
                                                                                            : nullptr;
        for (int u = 0; u < cells; ++u) {
          if (mask && (*mask)[u]) continue;
          l1 += static_cast<double>(out.occurrence_maps(idx, u));
          if (options.backward) grad.occurrence_maps(idx, u) += static_cast<Dtype>(w.occurrence_l1 * inv_batch);
        }
      }
      double trans = 0.0;
      if (ex.transform) {
        const auto& t = *ex.transform;
        const Mat<Dtype> shifted = t.image->apply(*ex.image);
        ForwardCache<Dtype> shifted_cache;
        const Mat<Dtype> maps_of_shifted =
            net.occurrence_forward(shifted, options.backward ? &shifted_cache : nullptr);
        const Mat<Dtype> shifted_maps = t.map->apply(out.occurrence_maps);
        const Mat<Dtype> diff = shifted_maps - maps_of_shifted;
        trans = static_cast<double>(diff.cwiseAbs().sum());
        if (options.backward && w.trans != 0.0) {
          const Mat<Dtype> sign = diff.unaryExpr([](Dtype v) {
            return v > Dtype(0) ? Dtype(1) : (v < Dtype(0) ? Dtype(-1) : Dtype(0));
          });
          const Dtype scale = static_cast<Dtype>(w.trans * inv_batch);
          grad.occurrence_maps += scale * t.map->apply_adjoint(sign);
          net.backward_occurrence(shifted_cache, -scale * sign, options.trainable);
        }
      }
      result.occur += (trans + l1) * inv_batch;
      result.trans += trans * inv_batch;
    }

    if (options.backward) {
      if (!features_grad) grad.features.resize(0, 0);
      if (!prototypes_grad) grad.prototypes.resize(0, 0);
      net.backward(cache, out, grad, options.trainable);
    }
  }

  result.total = w.cls * result.cls + w.clst * result.clst + w.sep * result.sep +
                 w.clst_annotated * result.clst_annotated + w.sep_annotated * result.sep_annotated;
  if (has_occurrence) {
    result.total += w.occurrence_l1 * (result.occur - result.trans) + w.trans * result.trans;
  }
  return result;
}

#define XPN_INSTANTIATE(T)                                                                             \
  template Vec<T> bbox_pooled_feature(const Mat<T>&, const Eigen::Ref<const Vec<T>>&, const GridMask&); \
  template LossBreakdown batch_objective(Network<T>&, std::span<const TrainingExample<T>>,              \
                                         const LossConfig&, const ObjectiveOptions&);
XPN_INSTANTIATE(float)
XPN_INSTANTIATE(double)
#undef XPN_INSTANTIATE

}  // namespace xprotonet
