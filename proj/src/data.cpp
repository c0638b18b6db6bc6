#include "xprotonet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include "xprotonet/image_io.hpp"

namespace xprotonet {

namespace fs = std::filesystem;

const std::vector<std::string>& nih_class_names() {
  static const std::vector<std::string> names = {
      "Atelectasis", "Cardiomegaly", "Effusion",  "Infiltration", "Mass",     "Nodule",   "Pneumonia",
      "Pneumothorax", "Consolidation", "Edema", "Emphysema",    "Fibrosis", "Pleural_Thickening", "Hernia"};
  return names;
}

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        field += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(trim(field));
      field.clear();
    } else {
      field += ch;
    }
  }
  fields.push_back(trim(field));
  return fields;
}

std::string normalize_label(std::string s) {
  for (char& ch : s) {
    if (ch == ' ') ch = '_';
    ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  }
  if (s == "infiltrate") s = "infiltration";
  return s;
}

int class_index(const std::vector<std::string>& vocabulary, const std::string& token) {
  const std::string key = normalize_label(token);
  for (std::size_t c = 0; c < vocabulary.size(); ++c)
    if (normalize_label(vocabulary[c]) == key) return static_cast<int>(c);
  return -1;
}

double parse_number(const std::string& s, const std::string& context) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError(context + ": not a number '" + s + "'");
  }
}

}  // namespace

std::vector<Sample> load_nih_index(const fs::path& labels_csv, const std::optional<fs::path>& bbox_csv,
                                   const fs::path& images_dir, const std::vector<std::string>& vocabulary) {
  std::ifstream in(labels_csv);
  if (!in) throw IoError("cannot open labels file " + labels_csv.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("labels file is empty: " + labels_csv.string());
  const auto header = parse_csv_line(line);
  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw IoError("labels file lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t id_col = column("Image Index");
  const std::size_t label_col = column("Finding Labels");
  const std::size_t patient_col = column("Patient ID");

  std::vector<Sample> samples;
  std::unordered_map<std::string, std::size_t> by_id;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = parse_csv_line(line);
    if (fields.size() <= std::max({id_col, label_col, patient_col})) {
      throw IoError(labels_csv.string() + ":" + std::to_string(line_no) + ": too few columns");
    }
    Sample s;
    s.id = fields[id_col];
    s.patient_id = fields[patient_col];
    s.image_path = images_dir / s.id;
    s.labels.assign(vocabulary.size(), 0);
    std::stringstream tokens(fields[label_col]);
    std::string token;
    while (std::getline(tokens, token, '|')) {
      token = trim(token);
      if (token.empty() || token == "No Finding") continue;
      const int c = class_index(vocabulary, token);
      if (c < 0) throw IoError("unknown finding label '" + token + "' for image " + s.id);
      s.labels[c] = 1;
    }
    if (by_id.count(s.id)) throw IoError("duplicate image index " + s.id);
    by_id[s.id] = samples.size();
    samples.push_back(std::move(s));
  }

  if (bbox_csv) {
    std::ifstream bin(*bbox_csv);
    if (!bin) throw IoError("cannot open bounding box file " + bbox_csv->string());
    std::set<std::size_t> annotated;
    std::set<std::size_t> boxed;
    line_no = 0;
    while (std::getline(bin, line)) {
      ++line_no;
      if (trim(line).empty()) continue;
      const auto fields = parse_csv_line(line);
      if (line_no == 1 && !fields.empty() && fields[0] == "Image Index") continue;
      const std::string where = bbox_csv->string() + ":" + std::to_string(line_no);
      if (fields.size() < 6) throw IoError(where + ": expected image, label, x, y, w, h");
      const auto it = by_id.find(fields[0]);
      if (it == by_id.end()) throw IoError(where + ": box references absent image " + fields[0]);
      const int c = class_index(vocabulary, fields[1]);
      if (c < 0) throw IoError(where + ": unknown finding label '" + fields[1] + "'");
      Sample& s = samples[it->second];
      if (!s.labels[c]) throw IoError(where + ": box for " + fields[1] + " but image " + s.id + " lacks that label");
      LabeledBox lb{c, {parse_number(fields[2], where), parse_number(fields[3], where), parse_number(fields[4], where),
                        parse_number(fields[5], where)}};
      s.boxes.push_back(lb);
      boxed.insert(it->second);
      const bool flagged = fields.size() < 7 || fields[6].empty() || fields[6] != "0";
      if (flagged) annotated.insert(it->second);
    }
    for (std::size_t i : annotated) samples[i].annotated = true;
  }
  return samples;
}

Image load_sample_image(const Sample& sample) {
  try {
    return read_png(sample.image_path);
  } catch (const IoError& e) {
    throw IoError("image " + sample.id + ": " + e.what());
  }
}

void write_dataset(const fs::path& dir, const std::vector<Sample>& samples, const std::vector<std::string>& vocabulary,
                   int bit_depth) {
  fs::create_directories(dir / "images");
  std::ofstream labels(dir / "labels.csv");
  std::ofstream boxes(dir / "bbox.csv");
  if (!labels || !boxes) throw IoError("cannot write dataset index under " + dir.string());
  labels << "Image Index,Finding Labels,Patient ID\n";
  boxes << "Image Index,Finding Label,x,y,w,h,Annotated\n";
  boxes << std::setprecision(17);
  for (const Sample& s : samples) {
    std::string findings;
    for (std::size_t c = 0; c < s.labels.size(); ++c) {
      if (!s.labels[c]) continue;
      if (!findings.empty()) findings += '|';
      findings += vocabulary.at(c);
    }
    if (findings.empty()) findings = "No Finding";
    labels << s.id << ',' << findings << ',' << s.patient_id << '\n';
    for (const LabeledBox& b : s.boxes) {
      boxes << s.id << ',' << vocabulary.at(b.class_index) << ',' << b.box.x << ',' << b.box.y << ',' << b.box.w
            << ',' << b.box.h << ',' << (s.annotated ? 1 : 0) << '\n';
    }
    write_png(dir / "images" / s.id, s.image, bit_depth);
  }
}

// ---------------------------------------------------------------------------

void SplitSpec::validate() const {
  if (train < 0 || val < 0 || test < 0 || std::abs(train + val + test - 1.0) > 1e-9) {
    throw ConfigError("data.split: fractions must be non-negative and sum to 1");
  }
  if (mode == SplitMode::kFiveFold) {
    const int folds = static_cast<int>(std::lround(1.0 / test));
    if (test <= 0 || std::abs(folds * test - 1.0) > 1e-9) {
      throw ConfigError("data.split: five-fold mode needs a test fraction of 1/folds");
    }
    if (fold < 0 || fold >= folds) throw ConfigError("data.split.fold: out of range");
  }
}

namespace {

struct PatientGroup {
  std::string patient;
  std::vector<std::size_t> members;
};

std::vector<PatientGroup> group_by_patient(const std::vector<Sample>& samples, const std::vector<std::size_t>& subset) {
  std::vector<PatientGroup> groups;
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i : subset) {
    const std::string& p = samples[i].patient_id;
    auto it = index.find(p);
    if (it == index.end()) {
      index[p] = groups.size();
      groups.push_back({p, {i}});
    } else {
      groups[it->second].members.push_back(i);
    }
  }
  return groups;
}

// Assigns each group (in order) to the bucket containing the midpoint of its
// cumulative sample range; `bounds` are cumulative fractions.
std::vector<int> assign_by_midpoint(const std::vector<PatientGroup>& groups, const std::vector<double>& bounds) {
  std::size_t total = 0;
  for (const auto& g : groups) total += g.members.size();
  std::vector<int> bucket(groups.size(), 0);
  double cum = 0.0;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const double mid = (cum + groups[i].members.size() / 2.0) / std::max<std::size_t>(total, 1);
    int b = 0;
    while (b + 1 < static_cast<int>(bounds.size()) && mid >= bounds[b]) ++b;
    bucket[i] = b;
    cum += groups[i].members.size();
  }
  return bucket;
}

void shuffle_groups(std::vector<PatientGroup>& groups, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0x5917));
  std::shuffle(groups.begin(), groups.end(), rng);
}

void check_patient_share(const std::vector<PatientGroup>& groups, std::size_t total, double max_fraction) {
  for (const auto& g : groups) {
    if (static_cast<double>(g.members.size()) > max_fraction * static_cast<double>(total)) {
      throw ConfigError("patient " + g.patient + " owns " + std::to_string(g.members.size()) + " of " +
                        std::to_string(total) + " samples, more than the largest split fraction");
    }
  }
}

void holdout_split(const std::vector<Sample>& samples, const std::vector<std::size_t>& subset, const SplitSpec& spec,
                   Splits& out) {
  auto groups = group_by_patient(samples, subset);
  check_patient_share(groups, subset.size(), std::max({spec.train, spec.val, spec.test}));
  shuffle_groups(groups, spec.seed);
  const auto bucket = assign_by_midpoint(groups, {spec.train, spec.train + spec.val, 1.0});
  for (std::size_t i = 0; i < groups.size(); ++i) {
    auto& dst = bucket[i] == 0 ? out.train : (bucket[i] == 1 ? out.val : out.test);
    dst.insert(dst.end(), groups[i].members.begin(), groups[i].members.end());
  }
}

}  // namespace

Splits split(const std::vector<Sample>& samples, const SplitSpec& spec) {
  spec.validate();
  Splits out;
  std::vector<std::size_t> all(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) all[i] = i;
  for (const auto& s : samples)
    if (s.patient_id.empty()) throw ConfigError("sample " + s.id + " has no patient id");

  if (spec.mode == SplitMode::kHoldout && !spec.test_ids.empty()) {
    const std::set<std::string> listed(spec.test_ids.begin(), spec.test_ids.end());
    std::map<std::string, std::pair<int, int>> per_patient;  // (in list, not in list)
    for (const auto& s : samples) {
      auto& counts = per_patient[s.patient_id];
      (listed.count(s.id) ? counts.first : counts.second)++;
    }
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& counts = per_patient[samples[i].patient_id];
      if (counts.first > 0 && counts.second > 0) {
        throw ConfigError("patient " + samples[i].patient_id + " straddles the listed test set");
      }
      (listed.count(samples[i].id) ? out.test : rest).push_back(i);
    }
    SplitSpec inner = spec;
    const double denom = spec.train + spec.val;
    inner.train = denom > 0 ? spec.train / denom : 1.0;
    inner.val = denom > 0 ? spec.val / denom : 0.0;
    inner.test = 0.0;
    holdout_split(samples, rest, inner, out);
  } else if (spec.mode == SplitMode::kHoldout) {
    holdout_split(samples, all, spec, out);
  } else {
    // Five-fold: annotated and unannotated patients are split separately so
    // each fold keeps the train/val/test ratios within both subsets.
    std::set<std::string> annotated_patients;
    for (const auto& s : samples)
      if (s.annotated) annotated_patients.insert(s.patient_id);
    std::vector<std::size_t> subsets[2];
    for (std::size_t i = 0; i < samples.size(); ++i)
      subsets[annotated_patients.count(samples[i].patient_id) ? 1 : 0].push_back(i);
    const int folds = static_cast<int>(std::lround(1.0 / spec.test));
    check_patient_share(group_by_patient(samples, all), samples.size(), std::max({spec.train, spec.val, spec.test}));
    for (int part = 0; part < 2; ++part) {
      auto groups = group_by_patient(samples, subsets[part]);
      shuffle_groups(groups, mix_seed(spec.seed, part));
      std::vector<double> bounds;
      for (int f = 1; f <= folds; ++f) bounds.push_back(static_cast<double>(f) / folds);
      const auto fold_of = assign_by_midpoint(groups, bounds);
      std::vector<PatientGroup> remaining;
      for (std::size_t i = 0; i < groups.size(); ++i) {
        if (fold_of[i] == spec.fold) {
          out.test.insert(out.test.end(), groups[i].members.begin(), groups[i].members.end());
        } else {
          remaining.push_back(groups[i]);
        }
      }
      const double val_share = spec.val / (spec.train + spec.val);
      const auto bucket = assign_by_midpoint(remaining, {val_share, 1.0});
      for (std::size_t i = 0; i < remaining.size(); ++i) {
        auto& dst = bucket[i] == 0 ? out.val : out.train;
        dst.insert(dst.end(), remaining[i].members.begin(), remaining[i].members.end());
      }
    }
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

std::vector<std::string> read_id_list(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open id list " + path.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

void write_split_manifests(const fs::path& dir, const std::vector<Sample>& samples, const Splits& splits) {
  fs::create_directories(dir);
  const std::pair<const char*, const std::vector<std::size_t>*> parts[] = {
      {"train.txt", &splits.train}, {"val.txt", &splits.val}, {"test.txt", &splits.test}};
  for (const auto& [name, indices] : parts) {
    std::ofstream out(dir / name);
    if (!out) throw IoError("cannot write split manifest " + (dir / name).string());
    for (std::size_t i : *indices) out << samples[i].id << '\n';
  }
}

// ---------------------------------------------------------------------------

Normalization Normalization::imagenet() {
  return {{0.485f, 0.456f, 0.406f}, {0.229f, 0.224f, 0.225f}};
}

Normalization Normalization::from_images(const std::vector<Image>& images) {
  if (images.empty()) throw ConfigError("normalization statistics need at least one image");
  const int channels = images.front().channels;
  std::vector<double> sum(channels, 0.0), sq(channels, 0.0);
  double count = 0.0;
  for (const Image& img : images) {
    if (img.channels != channels) throw ConfigError("normalization: mixed channel counts");
    const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
    for (int c = 0; c < channels; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = img.pixels[c * plane + p];
        sum[c] += v;
        sq[c] += v * v;
      }
    }
    count += static_cast<double>(plane);
  }
  Normalization n;
  for (int c = 0; c < channels; ++c) {
    const double mean = sum[c] / count;
    const double var = std::max(sq[c] / count - mean * mean, 1e-12);
    n.mean.push_back(static_cast<float>(mean));
    n.stddev.push_back(static_cast<float>(std::sqrt(var)));
  }
  return n;
}

Augmentation sample_augmentation(const PreprocessConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(-config.max_rotation_degrees, config.max_rotation_degrees);
  std::uniform_real_distribution<double> scale(1.0 - config.scale_jitter, 1.0 + config.scale_jitter);
  Augmentation aug;
  aug.degrees = angle(rng);
  aug.scale = scale(rng);
  return aug;
}

Mat<float> prepare_image(const Image& image, const PreprocessConfig& config) {
  if (image.empty()) throw IoError("cannot preprocess an empty image");
  Image converted;
  if (image.channels == config.channels) {
    converted = image;
  } else if (image.channels == 1) {
    converted = Image(config.channels, image.height, image.width);
    const std::size_t plane = image.pixels.size();
    for (int c = 0; c < config.channels; ++c)
      std::copy(image.pixels.begin(), image.pixels.end(), converted.pixels.begin() + c * plane);
  } else if (config.channels == 1) {
    converted = Image(1, image.height, image.width);
    const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
    for (std::size_t p = 0; p < plane; ++p) {
      float acc = 0.0f;
      for (int c = 0; c < image.channels; ++c) acc += image.pixels[c * plane + p];
      converted.pixels[p] = acc / static_cast<float>(image.channels);
    }
  } else {
    throw ConfigError("cannot convert a " + std::to_string(image.channels) + "-channel image to " +
                      std::to_string(config.channels) + " channels");
  }
  Mat<float> m = to_matrix(bilinear_resize(converted, config.height, config.width));
  const auto& norm = config.normalization;
  if (static_cast<int>(norm.mean.size()) != config.channels || static_cast<int>(norm.stddev.size()) != config.channels) {
    throw ConfigError("normalization statistics do not match the channel count");
  }
  for (int c = 0; c < config.channels; ++c) {
    m.row(c).array() -= norm.mean[c];
    m.row(c).array() /= norm.stddev[c];
  }
  return m;
}

Mat<float> augment_image(const Mat<float>& prepared, const PreprocessConfig& config, const Augmentation& aug) {
  return WarpOperator::rotate_scale(config.height, config.width, aug.degrees, aug.scale).apply(prepared);
}

Mat<float> preprocess(const Image& image, const PreprocessConfig& config, bool train_mode, std::uint64_t seed,
                      Augmentation* applied) {
  Mat<float> m = prepare_image(image, config);
  Augmentation aug;
  if (train_mode) {
    aug = sample_augmentation(config, seed);
    m = augment_image(m, config, aug);
  }
  if (applied) *applied = aug;
  return m;
}

std::vector<LabeledBox> augment_boxes(const std::vector<LabeledBox>& boxes, const PreprocessConfig& config,
                                      const Augmentation& aug) {
  const WarpOperator op = WarpOperator::rotate_scale(config.height, config.width, aug.degrees, aug.scale);
  std::vector<LabeledBox> out;
  for (const LabeledBox& lb : boxes) {
    const Box& b = lb.box;
    const double xs[4] = {b.x, b.x + b.w, b.x, b.x + b.w};
    const double ys[4] = {b.y, b.y, b.y + b.h, b.y + b.h};
    double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
    for (int i = 0; i < 4; ++i) {
      const auto p = op.map_point(xs[i], ys[i]);
      x0 = std::min(x0, p[0]);
      y0 = std::min(y0, p[1]);
      x1 = std::max(x1, p[0]);
      y1 = std::max(y1, p[1]);
    }
    x0 = std::clamp(x0, 0.0, static_cast<double>(config.width));
    x1 = std::clamp(x1, 0.0, static_cast<double>(config.width));
    y0 = std::clamp(y0, 0.0, static_cast<double>(config.height));
    y1 = std::clamp(y1, 0.0, static_cast<double>(config.height));
    if (x1 - x0 <= 0.0 || y1 - y0 <= 0.0) continue;
    out.push_back({lb.class_index, {x0, y0, x1 - x0, y1 - y0}});
  }
  return out;
}

std::vector<LabeledBox> resize_boxes(const std::vector<LabeledBox>& boxes, int src_h, int src_w, int dst_h,
                                     int dst_w) {
  const double sy = static_cast<double>(dst_h) / src_h;
  const double sx = static_cast<double>(dst_w) / src_w;
  std::vector<LabeledBox> out;
  out.reserve(boxes.size());
  for (const LabeledBox& lb : boxes) {
    Box b{lb.box.x * sx, lb.box.y * sy, lb.box.w * sx, lb.box.h * sy};
    // Clip to the image; NIH boxes occasionally overhang by a pixel.
    const double x0 = std::clamp(b.x, 0.0, static_cast<double>(dst_w));
    const double y0 = std::clamp(b.y, 0.0, static_cast<double>(dst_h));
    const double x1 = std::clamp(b.x + b.w, 0.0, static_cast<double>(dst_w));
    const double y1 = std::clamp(b.y + b.h, 0.0, static_cast<double>(dst_h));
    out.push_back({lb.class_index, {x0, y0, x1 - x0, y1 - y0}});
  }
  return out;
}

GridMask rasterize_box(const Box& box, int input_h, int input_w, int grid_h, int grid_w) {
  if (!(box.w > 0.0) || !(box.h > 0.0)) throw ConfigError("degenerate bounding box (non-positive width or height)");
  constexpr double kSlack = 1e-9;
  if (box.x < -kSlack || box.y < -kSlack || box.x + box.w > input_w + kSlack || box.y + box.h > input_h + kSlack) {
    throw ConfigError("bounding box lies outside the image");
  }
  const double cell_w = static_cast<double>(input_w) / grid_w;
  const double cell_h = static_cast<double>(input_h) / grid_h;
  GridMask mask(static_cast<std::size_t>(grid_h) * grid_w, 0);
  for (int gy = 0; gy < grid_h; ++gy) {
    const bool row_hit = box.y < (gy + 1) * cell_h && box.y + box.h > gy * cell_h;
    if (!row_hit) continue;
    for (int gx = 0; gx < grid_w; ++gx) {
      if (box.x < (gx + 1) * cell_w && box.x + box.w > gx * cell_w) mask[gy * grid_w + gx] = 1;
    }
  }
  return mask;
}

std::vector<PreparedSample> prepare_samples(const std::vector<Sample>& samples,
                                            const std::vector<std::size_t>& indices,
                                            const PreprocessConfig& config) {
  std::vector<PreparedSample> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    const Sample& s = samples.at(i);
    const Image image = s.image.empty() ? load_sample_image(s) : s.image;
    PreparedSample p;
    p.id = s.id;
    p.image = prepare_image(image, config);
    p.labels = s.labels;
    p.boxes = resize_boxes(s.boxes, image.height, image.width, config.height, config.width);
    p.annotated = s.annotated;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<std::optional<GridMask>> box_masks(const std::vector<LabeledBox>& boxes, int num_classes,
                                               int input_h, int input_w, int grid_h, int grid_w) {
  std::vector<std::optional<GridMask>> masks(num_classes);
  for (const LabeledBox& lb : boxes) {
    if (lb.class_index < 0 || lb.class_index >= num_classes) throw ConfigError("box class index out of range");
    const GridMask m = rasterize_box(lb.box, input_h, input_w, grid_h, grid_w);
    auto& slot = masks[lb.class_index];
    if (!slot) {
      slot = m;
    } else {
      for (std::size_t u = 0; u < m.size(); ++u) (*slot)[u] = (*slot)[u] | m[u];
    }
  }
  return masks;
}

// ---------------------------------------------------------------------------

std::vector<SignatureSpec> SyntheticSpec::default_classes() {
  return {
      {"ellipse", SignatureShape::kEllipse, 11.0, 16.0, 0.15, 0.25, 0.3},
      {"blob", SignatureShape::kBlob, 2.0, 3.5, 0.35, 0.5, 0.3},
      {"streak", SignatureShape::kStreak, 9.0, 14.0, 0.25, 0.35, 0.3},
  };
}

std::vector<std::string> SyntheticSpec::class_names() const {
  std::vector<std::string> names;
  for (const auto& c : classes) names.push_back(c.name);
  return names;
}

SignatureShape shape_from_string(const std::string& s) {
  if (s == "ellipse") return SignatureShape::kEllipse;
  if (s == "blob") return SignatureShape::kBlob;
  if (s == "streak") return SignatureShape::kStreak;
  throw ConfigError("unknown signature shape '" + s + "' (expected ellipse, blob or streak)");
}

std::string to_string(SignatureShape s) {
  switch (s) {
    case SignatureShape::kEllipse: return "ellipse";
    case SignatureShape::kBlob: return "blob";
    case SignatureShape::kStreak: return "streak";
  }
  return "unknown";
}

void SyntheticSpec::validate() const {
  if (image_size < 8) throw ConfigError("data.synthetic.image_size: must be >= 8");
  if (classes.empty()) throw ConfigError("data.synthetic.classes: at least one class required");
  if (!(noise >= 0.0)) throw ConfigError("data.synthetic.noise: must be >= 0");
  if (annotated_fraction < 0.0 || annotated_fraction > 1.0) {
    throw ConfigError("data.synthetic.annotated_fraction: must lie in [0, 1]");
  }
  if (images_per_patient < 1) throw ConfigError("data.synthetic.images_per_patient: must be >= 1");
  if (!co_occurrence.empty()) {
    if (co_occurrence.size() != classes.size())
      throw ConfigError("data.synthetic.co_occurrence: expected one row per class");
    for (const auto& row : co_occurrence) {
      if (row.size() != classes.size())
        throw ConfigError("data.synthetic.co_occurrence: expected one column per class");
      for (double v : row)
        if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("data.synthetic.co_occurrence: entries must lie in [0, 1]");
    }
  }
  for (const auto& c : classes) {
    const std::string key = "data.synthetic.classes[" + c.name + "]";
    if (!(c.size_min > 0.0) || c.size_max < c.size_min) throw ConfigError(key + ": invalid size range");
    if (2.0 * c.size_max + 4.0 > image_size) throw ConfigError(key + ": signature does not fit the image");
    if (c.intensity_max < c.intensity_min || !(c.intensity_min > 0.0)) throw ConfigError(key + ": invalid intensity range");
    if (c.prevalence < 0.0 || c.prevalence > 1.0) throw ConfigError(key + ": prevalence must lie in [0, 1]");
  }
}

namespace {

// Paints one signature onto `layer`; returns the tight box over painted pixels.
Box paint_signature(const SignatureSpec& sig, int size, std::mt19937_64& rng, std::vector<float>& layer) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const double intensity = uniform(sig.intensity_min, sig.intensity_max);
  const double extent = uniform(sig.size_min, sig.size_max);

  std::function<bool(double, double)> inside;
  double half_x = extent;
  double half_y = extent;
  double cx = 0;
  double cy = 0;
  switch (sig.shape) {
    case SignatureShape::kEllipse: {
      const double minor = extent * uniform(0.65, 0.9);
      half_y = minor;
      cx = uniform(half_x + 2, size - half_x - 2);
      cy = uniform(half_y + 2, size - half_y - 2);
      inside = [=](double px, double py) {
        const double dx = (px - cx) / half_x;
        const double dy = (py - cy) / half_y;
        return dx * dx + dy * dy <= 1.0;
      };
      break;
    }
    case SignatureShape::kBlob: {
      cx = uniform(extent + 2, size - extent - 2);
      cy = uniform(extent + 2, size - extent - 2);
      inside = [=](double px, double py) { return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= extent * extent; };
      break;
    }
    case SignatureShape::kStreak: {
      const double theta = uniform(0.0, std::numbers::pi);
      const double ux = std::cos(theta);
      const double uy = std::sin(theta);
      half_x = std::abs(ux) * extent + 1.0;
      half_y = std::abs(uy) * extent + 1.0;
      cx = uniform(half_x + 2, size - half_x - 2);
      cy = uniform(half_y + 2, size - half_y - 2);
      inside = [=](double px, double py) {
        const double dx = px - cx;
        const double dy = py - cy;
        const double t = std::clamp(dx * ux + dy * uy, -extent, extent);
        const double ex = dx - t * ux;
        const double ey = dy - t * uy;
        return ex * ex + ey * ey <= 1.0;
      };
      break;
    }
  }

  int x0 = size, y0 = size, x1 = -1, y1 = -1;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      if (!inside(x + 0.5, y + 0.5)) continue;
      layer[y * size + x] += static_cast<float>(intensity);
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  if (x1 < 0) {
    // Sub-pixel signature: claim the pixel under its center.
    const int px = std::clamp(static_cast<int>(cx), 0, size - 1);
    const int py = std::clamp(static_cast<int>(cy), 0, size - 1);
    layer[py * size + px] += static_cast<float>(intensity);
    x0 = x1 = px;
    y0 = y1 = py;
  }
  return {static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 - x0 + 1),
          static_cast<double>(y1 - y0 + 1)};
}

}  // namespace

std::vector<Sample> generate_synthetic(const SyntheticSpec& spec, int n, int start_index) {
  spec.validate();
  const int size = spec.image_size;
  const int num_classes = static_cast<int>(spec.classes.size());
  std::vector<Sample> samples;
  samples.reserve(n);
  for (int i = start_index; i < start_index + n; ++i) {
    std::mt19937_64 rng(mix_seed(spec.seed, static_cast<std::uint64_t>(i), 0x5e7));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    Sample s;
    char id[32];
    std::snprintf(id, sizeof(id), "s%07d.png", i);
    s.id = id;
    char patient[32];
    std::snprintf(patient, sizeof(patient), "p%07d", i / spec.images_per_patient);
    s.patient_id = patient;
    s.labels.assign(num_classes, 0);
    for (int c = 0; c < num_classes; ++c) s.labels[c] = unit(rng) < spec.classes[c].prevalence ? 1 : 0;
    if (!spec.co_occurrence.empty()) {
      for (int a = 0; a < num_classes; ++a) {
        if (!s.labels[a]) continue;
        for (int b = 0; b < num_classes; ++b)
          if (b != a && !s.labels[b] && unit(rng) < spec.co_occurrence[a][b]) s.labels[b] = 1;
      }
    }

    s.image = Image(1, size, size);
    for (float& v : s.image.pixels) v = static_cast<float>(spec.background + spec.noise * gauss(rng));
    std::vector<float> layer(static_cast<std::size_t>(size) * size, 0.0f);
    for (int c = 0; c < num_classes; ++c) {
      if (!s.labels[c]) continue;
      s.boxes.push_back({c, paint_signature(spec.classes[c], size, rng, layer)});
    }
    for (std::size_t p = 0; p < layer.size(); ++p) s.image.pixels[p] += layer[p];
    const bool pick = unit(rng) < spec.annotated_fraction;
    s.annotated = !s.boxes.empty() && pick;
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace xprotonet
