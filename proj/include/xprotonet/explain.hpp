#ifndef XPROTONET_EXPLAIN_HPP_
#define XPROTONET_EXPLAIN_HPP_

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xprotonet/data.hpp"
#include "xprotonet/model.hpp"

namespace xprotonet {

inline constexpr int kExplanationVersion = 1;

struct ExplainConfig {
  double contour_threshold = 0.3;  // fraction of the map maximum
  std::string colormap = "jet";    // jet or gray
  double overlay_alpha = 0.5;
  int max_images = 8;              // local explanations written per run

  void validate() const;
};

/// A closed polygon in input-pixel coordinates (pixel (x, y) has its center
/// at (x + 0.5, y + 0.5)); the last vertex connects back to the first.
using Polygon = std::vector<std::array<double, 2>>;

/// Occurrence map of one prototype upsampled to the input size and divided
/// by its maximum. An all-zero map stays zero and sets `zero_map`.
struct NormalizedMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // row-major
  bool zero_map = false;
};

NormalizedMap normalize_occurrence(std::span<const double> grid_map, int grid_h, int grid_w, int height,
                                   int width);

/// Marching-squares iso-contours of a row-major field sampled at pixel
/// centers. Cells beyond the border count as below the level, so every
/// contour is closed and together they enclose exactly the samples > level.
/// Saddle cells are resolved with the cell-center average.
std::vector<Polygon> iso_contours(std::span<const double> field, int height, int width, double level);

/// Even-odd point-in-polygon test over a polygon set.
bool inside_contours(const std::vector<Polygon>& contours, double x, double y);

struct PrototypeContribution {
  int class_index = 0;
  int prototype = 0;
  double similarity = 0.0;
  double weight = 0.0;
  double contribution = 0.0;  // weight * similarity
  NormalizedMap map;
  std::vector<Polygon> contours;
  int peak_cell = 0;  // argmax of the grid occurrence map (row-major)
};

struct LocalExplanation {
  std::string image_id;
  std::vector<double> probabilities;
  std::vector<PrototypeContribution> prototypes;  // active prototypes only
};

/// Per-prototype evidence for one image. Pure function of model and image.
LocalExplanation render_local(const Network<float>& net, const PreparedSample& sample,
                              const ExplainConfig& config);

/// The active prototype with the largest contribution to class c.
const PrototypeContribution* top_contribution(const LocalExplanation& explanation, int c);

struct NearestAnnotated {
  std::string image_id;
  double similarity = 0.0;
  // Share of the thresholded occurrence mass that falls inside the box.
  double box_overlap = 0.0;
};

struct GlobalRecord {
  int class_index = 0;
  int prototype = 0;
  double weight = 0.0;
  std::string source_image_id;
  std::vector<double> occurrence_region;  // grid map from projection
  bool box_restricted = false;
  std::optional<NearestAnnotated> nearest;
};

/// One record per active prototype. `annotated` holds box-annotated samples;
/// the nearest one is searched among those carrying a box of the prototype's
/// class. Throws ModelError when a prototype has no projection provenance.
std::vector<GlobalRecord> render_global(const Network<float>& net, std::span<const PreparedSample> training,
                                        std::span<const PreparedSample> annotated, const ExplainConfig& config);

/// Fraction of thresholded map mass (normalized value > threshold) whose
/// pixel centers lie inside any of the boxes; 0 for an all-zero map.
double box_overlap_fraction(const NormalizedMap& map, const std::vector<Box>& boxes, double threshold);

/// Input image (min-max scaled to gray) with the colored map and contours.
Image render_overlay(const Mat<float>& image, int height, int width, const NormalizedMap& map,
                     const std::vector<Polygon>& contours, const ExplainConfig& config);

/// Writes <dir>/<id>.json and one overlay PNG per active prototype.
void write_local_explanation(const std::filesystem::path& dir, const LocalExplanation& explanation,
                             const PreparedSample& sample, const Network<float>& net,
                             const ExplainConfig& config);

/// Writes <dir>/prototype_c<c>_k<k>.json (and an overlay of the source image
/// when it is found in `training`) per record, plus global.json listing all.
void write_global_explanation(const std::filesystem::path& dir, const std::vector<GlobalRecord>& records,
                              std::span<const PreparedSample> training, const Network<float>& net,
                              const ExplainConfig& config);

}  // namespace xprotonet

#endif  // XPROTONET_EXPLAIN_HPP_
