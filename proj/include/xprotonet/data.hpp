#ifndef XPROTONET_DATA_HPP_
#define XPROTONET_DATA_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xprotonet/imaging.hpp"
#include "xprotonet/model.hpp"

namespace xprotonet {

/// Axis-aligned box in input-pixel units; (x, y) is the top-left corner.
struct Box {
  double x = 0;
  double y = 0;
  double w = 0;
  double h = 0;
};

struct LabeledBox {
  int class_index = 0;
  Box box;
};

struct Sample {
  std::string id;
  Image image;  // empty until loaded
  std::filesystem::path image_path;
  std::vector<std::uint8_t> labels;
  std::string patient_id;
  std::vector<LabeledBox> boxes;
  bool annotated = false;
};

/// The fourteen NIH ChestX-ray14 findings in their conventional order.
const std::vector<std::string>& nih_class_names();

/// Parses an NIH-style index: labels CSV with "Image Index", "Finding Labels"
/// (pipe-separated) and "Patient ID" columns, plus an optional box CSV with
/// image index, finding label, x, y, w, h. Images are not decoded.
std::vector<Sample> load_nih_index(const std::filesystem::path& labels_csv,
                                   const std::optional<std::filesystem::path>& bbox_csv,
                                   const std::filesystem::path& images_dir,
                                   const std::vector<std::string>& vocabulary = nih_class_names());

/// Decodes the sample's image from disk (IoError names the image id).
Image load_sample_image(const Sample& sample);

/// Writes a dataset in the NIH index layout (labels.csv, bbox.csv, images/).
void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples,
                   const std::vector<std::string>& vocabulary, int bit_depth = 16);

// ---------------------------------------------------------------------------
// Splitting.

enum class SplitMode { kHoldout, kFiveFold };

struct SplitSpec {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
  SplitMode mode = SplitMode::kHoldout;
  int fold = 0;  // five-fold mode: which fold is the test fold
  std::uint64_t seed = 0;
  // Holdout mode: explicit test ids (official-style list); empty = seeded.
  std::vector<std::string> test_ids;

  void validate() const;
};

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Patient-disjoint split. Throws ConfigError if one patient owns more data
/// than the largest split fraction allows.
Splits split(const std::vector<Sample>& samples, const SplitSpec& spec);

std::vector<std::string> read_id_list(const std::filesystem::path& path);
void write_split_manifests(const std::filesystem::path& dir, const std::vector<Sample>& samples,
                           const Splits& splits);

// ---------------------------------------------------------------------------
// Preprocessing.

struct Normalization {
  std::vector<float> mean;
  std::vector<float> stddev;

  static Normalization imagenet();
  /// Per-channel statistics over already resized images.
  static Normalization from_images(const std::vector<Image>& images);
};

struct PreprocessConfig {
  int channels = 3;
  int height = 512;
  int width = 512;
  Normalization normalization = Normalization::imagenet();
  double max_rotation_degrees = 10.0;
  double scale_jitter = 0.2;  // scale drawn from [1 - j, 1 + j]
};

struct Augmentation {
  double degrees = 0.0;
  double scale = 1.0;
};

Augmentation sample_augmentation(const PreprocessConfig& config, std::uint64_t seed);

/// Channel conversion, bilinear resize and normalization.
Mat<float> prepare_image(const Image& image, const PreprocessConfig& config);

/// Rotation and scaling about the center with zero padding (normalized space).
Mat<float> augment_image(const Mat<float>& prepared, const PreprocessConfig& config, const Augmentation& aug);

/// prepare_image followed, in train mode, by a seeded augmentation.
Mat<float> preprocess(const Image& image, const PreprocessConfig& config, bool train_mode, std::uint64_t seed,
                      Augmentation* applied = nullptr);

/// Maps boxes through an augmentation (bounding box of the moved corners,
/// clipped to the image); boxes that leave the image are dropped.
std::vector<LabeledBox> augment_boxes(const std::vector<LabeledBox>& boxes, const PreprocessConfig& config,
                                      const Augmentation& aug);

/// Rescales boxes from an image of src size to the model input size.
std::vector<LabeledBox> resize_boxes(const std::vector<LabeledBox>& boxes, int src_h, int src_w, int dst_h,
                                     int dst_w);

/// Grid cells whose pixel footprint overlaps the box by a positive area.
/// Throws ConfigError for a degenerate box or one outside the image.
GridMask rasterize_box(const Box& box, int input_h, int input_w, int grid_h, int grid_w);

/// A sample ready for the network: normalized, resized, boxes in input pixels.
struct PreparedSample {
  std::string id;
  Mat<float> image;
  std::vector<std::uint8_t> labels;
  std::vector<LabeledBox> boxes;
  bool annotated = false;
};

/// Loads (if needed) and prepares the selected samples without augmentation.
std::vector<PreparedSample> prepare_samples(const std::vector<Sample>& samples,
                                            const std::vector<std::size_t>& indices,
                                            const PreprocessConfig& config);

/// Per-class grid masks of a sample's boxes (union when a class has several).
std::vector<std::optional<GridMask>> box_masks(const std::vector<LabeledBox>& boxes, int num_classes,
                                               int input_h, int input_w, int grid_h, int grid_w);

// ---------------------------------------------------------------------------
// Synthetic planted-signal data.

enum class SignatureShape { kEllipse, kBlob, kStreak };

struct SignatureSpec {
  std::string name;
  SignatureShape shape = SignatureShape::kEllipse;
  double size_min = 10;  // semi-axis / radius / half-length in pixels
  double size_max = 16;
  double intensity_min = 0.2;
  double intensity_max = 0.3;
  double prevalence = 0.3;
};

struct SyntheticSpec {
  int image_size = 64;
  std::vector<SignatureSpec> classes = default_classes();
  double background = 0.3;
  double noise = 0.1;
  // co_occurrence[a][b]: chance that class b is added to a sample already
  // positive for a, applied in class order after the prevalence draws.
  // Empty means independent classes.
  std::vector<std::vector<double>> co_occurrence;
  double annotated_fraction = 0.5;
  int images_per_patient = 2;
  std::uint64_t seed = 0;

  static std::vector<SignatureSpec> default_classes();
  std::vector<std::string> class_names() const;
  void validate() const;
};

SignatureShape shape_from_string(const std::string& s);
std::string to_string(SignatureShape s);

/// Samples start_index .. start_index + n - 1; each is a pure function of
/// (seed, index).
std::vector<Sample> generate_synthetic(const SyntheticSpec& spec, int n, int start_index = 0);

}  // namespace xprotonet

#endif  // XPROTONET_DATA_HPP_
