#include "xprotonet/explain.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include <json.hpp>

#include "xprotonet/config.hpp"
#include "xprotonet/image_io.hpp"

namespace xprotonet {

using nlohmann::json;
namespace fs = std::filesystem;

void ExplainConfig::validate() const {
  if (!(contour_threshold > 0.0 && contour_threshold < 1.0))
    throw ConfigError("explain.contour_threshold: must lie in (0, 1)");
  if (colormap != "jet" && colormap != "gray")
    throw ConfigError("explain.colormap: unknown colormap '" + colormap + "' (expected jet or gray)");
  if (!(overlay_alpha >= 0.0 && overlay_alpha <= 1.0)) throw ConfigError("explain.overlay_alpha: must lie in [0, 1]");
  if (max_images < 0) throw ConfigError("explain.max_images: must be >= 0");
}

NormalizedMap normalize_occurrence(std::span<const double> grid_map, int grid_h, int grid_w, int height,
                                   int width) {
  if (static_cast<int>(grid_map.size()) != grid_h * grid_w)
    throw ConfigError("normalize_occurrence: map size does not match the grid");
  Mat<float> src(1, grid_h * grid_w);
  for (int u = 0; u < grid_h * grid_w; ++u) src(0, u) = static_cast<float>(grid_map[u]);
  const Mat<float> up = bilinear_resize(src, grid_h, grid_w, height, width);
  NormalizedMap out;
  out.height = height;
  out.width = width;
  out.values.assign(up.data(), up.data() + up.size());
  const double peak = *std::max_element(out.values.begin(), out.values.end());
  if (!(peak > 0.0)) {
    std::fill(out.values.begin(), out.values.end(), 0.0);
    out.zero_map = true;
    return out;
  }
  for (double& v : out.values) v /= peak;
  return out;
}

namespace {

// Lattice of samples padded by one ring that is always below the level.
struct PaddedField {
  int rows, cols;
  std::span<const double> field;
  int width;

  bool inside(int i, int j, double level) const {
    if (i == 0 || j == 0 || i == rows - 1 || j == cols - 1) return false;
    return field[(i - 1) * width + (j - 1)] > level;
  }
  double value(int i, int j) const {
    if (i == 0 || j == 0 || i == rows - 1 || j == cols - 1) return -std::numeric_limits<double>::infinity();
    return field[(i - 1) * width + (j - 1)];
  }
};

// Edge identifier: horizontal edges join (i, j)-(i, j+1), vertical ones
// join (i, j)-(i+1, j).
struct EdgeKey {
  int vertical, i, j;
  auto operator<=>(const EdgeKey&) const = default;
};

std::array<double, 2> crossing(const PaddedField& f, const EdgeKey& e, double level) {
  const int i1 = e.vertical ? e.i + 1 : e.i;
  const int j1 = e.vertical ? e.j : e.j + 1;
  const double a = f.value(e.i, e.j);
  const double b = f.value(i1, j1);
  double t = 0.5;  // a padded sample puts the crossing on the image border
  if (std::isfinite(a) && std::isfinite(b)) {
    t = (level - a) / (b - a);
    t = std::clamp(t, 1e-6, 1.0 - 1e-6);
  }
  const double x0 = e.j - 0.5;  // lattice column j sits at pixel center (j - 1) + 0.5
  const double y0 = e.i - 0.5;
  return e.vertical ? std::array<double, 2>{x0, y0 + t} : std::array<double, 2>{x0 + t, y0};
}

}  // namespace

std::vector<Polygon> iso_contours(std::span<const double> field, int height, int width, double level) {
  if (static_cast<int>(field.size()) != height * width) throw ConfigError("iso_contours: field size mismatch");
  const PaddedField f{height + 2, width + 2, field, width};
  std::vector<std::array<EdgeKey, 2>> segments;
  for (int i = 0; i + 1 < f.rows; ++i) {
    for (int j = 0; j + 1 < f.cols; ++j) {
      const bool tl = f.inside(i, j, level), tr = f.inside(i, j + 1, level);
      const bool bl = f.inside(i + 1, j, level), br = f.inside(i + 1, j + 1, level);
      const EdgeKey top{0, i, j}, bottom{0, i + 1, j}, left{1, i, j}, right{1, i, j + 1};
      std::vector<EdgeKey> cut;
      if (tl != tr) cut.push_back(top);
      if (tr != br) cut.push_back(right);
      if (bl != br) cut.push_back(bottom);
      if (tl != bl) cut.push_back(left);
      if (cut.size() == 2) {
        segments.push_back({cut[0], cut[1]});
      } else if (cut.size() == 4) {
        const double center = 0.25 * (f.value(i, j) + f.value(i, j + 1) + f.value(i + 1, j) + f.value(i + 1, j + 1));
        // Joined diagonals cut off the two outside corners; separated ones
        // cut off the two inside corners.
        const bool cut_tl_br = (center > level) != tl;
        if (cut_tl_br) {
          segments.push_back({top, left});
          segments.push_back({right, bottom});
        } else {
          segments.push_back({top, right});
          segments.push_back({left, bottom});
        }
      }
    }
  }

  std::map<EdgeKey, std::vector<std::size_t>> incident;
  for (std::size_t s = 0; s < segments.size(); ++s)
    for (const EdgeKey& e : segments[s]) incident[e].push_back(s);

  std::vector<bool> used(segments.size(), false);
  std::vector<Polygon> polygons;
  for (std::size_t start = 0; start < segments.size(); ++start) {
    if (used[start]) continue;
    Polygon poly;
    std::size_t seg = start;
    EdgeKey at = segments[start][0];
    while (!used[seg]) {
      used[seg] = true;
      poly.push_back(crossing(f, at, level));
      at = segments[seg][0] == at ? segments[seg][1] : segments[seg][0];
      const auto& next = incident[at];
      seg = next[0] == seg ? next[1] : next[0];
    }
    polygons.push_back(std::move(poly));
  }
  return polygons;
}

bool inside_contours(const std::vector<Polygon>& contours, double x, double y) {
  bool inside = false;
  for (const Polygon& poly : contours) {
    for (std::size_t a = 0, b = poly.size() - 1; a < poly.size(); b = a++) {
      const auto& p = poly[a];
      const auto& q = poly[b];
      if ((p[1] > y) != (q[1] > y) && x < (q[0] - p[0]) * (y - p[1]) / (q[1] - p[1]) + p[0]) inside = !inside;
    }
  }
  return inside;
}

LocalExplanation render_local(const Network<float>& net, const PreparedSample& sample, const ExplainConfig& config) {
  const ModelConfig& cfg = net.config();
  const ModelOutput<float> out = net.forward(sample.image);
  LocalExplanation ex;
  ex.image_id = sample.id;
  ex.probabilities.assign(out.probabilities.data(), out.probabilities.data() + out.probabilities.size());
  const int per_class = cfg.prototypes_per_class;
  for (int c = 0; c < cfg.num_classes; ++c) {
    for (int k = 0; k < per_class; ++k) {
      const int i = c * per_class + k;
      if (!net.bank().active[i]) continue;
      PrototypeContribution pc;
      pc.class_index = c;
      pc.prototype = k;
      pc.similarity = out.similarities(c, k);
      pc.weight = net.head_weights()(c, k);
      pc.contribution = pc.weight * pc.similarity;
      std::vector<double> map(cfg.grid_cells());
      for (int u = 0; u < cfg.grid_cells(); ++u) map[u] = out.occurrence_maps(i, u);
      Eigen::Index peak = 0;
      out.occurrence_maps.row(i).maxCoeff(&peak);
      pc.peak_cell = static_cast<int>(peak);
      pc.map = normalize_occurrence(map, cfg.grid_height(), cfg.grid_width(), cfg.input_height, cfg.input_width);
      pc.contours = iso_contours(pc.map.values, pc.map.height, pc.map.width, config.contour_threshold);
      ex.prototypes.push_back(std::move(pc));
    }
  }
  return ex;
}

const PrototypeContribution* top_contribution(const LocalExplanation& explanation, int c) {
  const PrototypeContribution* best = nullptr;
  for (const PrototypeContribution& pc : explanation.prototypes)
    if (pc.class_index == c && (!best || pc.contribution > best->contribution)) best = &pc;
  return best;
}

double box_overlap_fraction(const NormalizedMap& map, const std::vector<Box>& boxes, double threshold) {
  double total = 0.0, inside = 0.0;
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      const double v = map.values[y * map.width + x];
      if (!(v > threshold)) continue;
      total += v;
      const double cx = x + 0.5, cy = y + 0.5;
      for (const Box& b : boxes) {
        if (cx >= b.x && cx < b.x + b.w && cy >= b.y && cy < b.y + b.h) {
          inside += v;
          break;
        }
      }
    }
  }
  return total > 0.0 ? inside / total : 0.0;
}

std::vector<GlobalRecord> render_global(const Network<float>& net, std::span<const PreparedSample> training,
                                        std::span<const PreparedSample> annotated, const ExplainConfig& config) {
  const ModelConfig& cfg = net.config();
  const int per_class = cfg.prototypes_per_class;
  const auto& bank = net.bank();
  for (int i = 0; i < cfg.num_prototypes(); ++i) {
    if (bank.active[i] && !bank.provenance[i]) {
      throw ModelError("prototype " + std::to_string(i / per_class) + "/" + std::to_string(i % per_class) +
                       " has no projection provenance; run the project command first");
    }
  }
  std::map<std::string, const PreparedSample*> by_id;
  for (const PreparedSample& s : training) by_id[s.id] = &s;

  std::vector<ModelOutput<float>> outputs;
  outputs.reserve(annotated.size());
  for (const PreparedSample& s : annotated) outputs.push_back(net.forward(s.image));

  std::vector<GlobalRecord> records;
  for (int i = 0; i < cfg.num_prototypes(); ++i) {
    if (!bank.active[i]) continue;
    const int c = i / per_class, k = i % per_class;
    const Provenance& prov = *bank.provenance[i];
    auto src = by_id.find(prov.image_id);
    if (src != by_id.end() && !src->second->labels[c]) {
      throw ModelError("prototype " + std::to_string(c) + "/" + std::to_string(k) + " was projected onto " +
                       prov.image_id + ", which is not a positive of its class");
    }
    GlobalRecord r;
    r.class_index = c;
    r.prototype = k;
    r.weight = net.head_weights()(c, k);
    r.source_image_id = prov.image_id;
    r.occurrence_region = prov.occurrence_map;
    r.box_restricted = prov.box_restricted;

    std::optional<std::size_t> best;
    for (std::size_t a = 0; a < annotated.size(); ++a) {
      const PreparedSample& s = annotated[a];
      const bool has_box = std::any_of(s.boxes.begin(), s.boxes.end(),
                                       [c](const LabeledBox& b) { return b.class_index == c; });
      if (!has_box || !s.labels[c]) continue;
      if (!best || outputs[a].similarities(c, k) > outputs[*best].similarities(c, k)) best = a;
    }
    if (best) {
      const PreparedSample& s = annotated[*best];
      std::vector<double> grid(cfg.grid_cells());
      for (int u = 0; u < cfg.grid_cells(); ++u) grid[u] = outputs[*best].occurrence_maps(i, u);
      const NormalizedMap map =
          normalize_occurrence(grid, cfg.grid_height(), cfg.grid_width(), cfg.input_height, cfg.input_width);
      std::vector<Box> boxes;
      for (const LabeledBox& b : s.boxes)
        if (b.class_index == c) boxes.push_back(b.box);
      r.nearest = NearestAnnotated{s.id, outputs[*best].similarities(c, k),
                                   box_overlap_fraction(map, boxes, config.contour_threshold)};
    }
    records.push_back(std::move(r));
  }
  return records;
}

namespace {

std::array<float, 3> colormap(const std::string& name, double v) {
  if (name == "gray") return {static_cast<float>(v), static_cast<float>(v), static_cast<float>(v)};
  auto ch = [v](double offset) { return static_cast<float>(std::clamp(1.5 - std::abs(4.0 * v - offset), 0.0, 1.0)); };
  return {ch(3.0), ch(2.0), ch(1.0)};
}

std::string file_stem(const std::string& id) {
  std::string stem = fs::path(id).stem().string();
  for (char& ch : stem)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_') ch = '_';
  return stem.empty() ? "image" : stem;
}

json polygons_json(const std::vector<Polygon>& contours) {
  json out = json::array();
  for (const Polygon& poly : contours) {
    json pts = json::array();
    for (const auto& p : poly) pts.push_back({p[0], p[1]});
    out.push_back(pts);
  }
  return out;
}

std::string class_label(const ModelConfig& cfg, int c) {
  return cfg.class_names.empty() ? std::to_string(c) : cfg.class_names[c];
}

}  // namespace

Image render_overlay(const Mat<float>& image, int height, int width, const NormalizedMap& map,
                     const std::vector<Polygon>& contours, const ExplainConfig& config) {
  if (image.cols() != static_cast<Eigen::Index>(height) * width || map.height != height || map.width != width)
    throw ConfigError("render_overlay: image and map sizes differ");
  const Eigen::RowVectorXf gray = image.colwise().mean();
  const float lo = gray.minCoeff(), hi = gray.maxCoeff();
  const float span = hi > lo ? hi - lo : 1.0f;
  Image out(3, height, width);
  const float alpha = static_cast<float>(config.overlay_alpha);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const int u = y * width + x;
      const float g = (gray(u) - lo) / span;
      const auto color = colormap(config.colormap, map.values[u]);
      for (int ch = 0; ch < 3; ++ch) out.at(ch, y, x) = (1.0f - alpha) * g + alpha * color[ch];
    }
  }
  for (const Polygon& poly : contours) {
    for (std::size_t a = 0, b = poly.size() - 1; a < poly.size(); b = a++) {
      const double len = std::hypot(poly[a][0] - poly[b][0], poly[a][1] - poly[b][1]);
      const int steps = std::max(1, static_cast<int>(std::ceil(len * 4.0)));
      for (int s = 0; s <= steps; ++s) {
        const double t = static_cast<double>(s) / steps;
        const int x = static_cast<int>(std::floor(poly[b][0] + t * (poly[a][0] - poly[b][0])));
        const int y = static_cast<int>(std::floor(poly[b][1] + t * (poly[a][1] - poly[b][1])));
        if (x < 0 || y < 0 || x >= width || y >= height) continue;
        for (int ch = 0; ch < 3; ++ch) out.at(ch, y, x) = 1.0f;
      }
    }
  }
  return out;
}

void write_local_explanation(const fs::path& dir, const LocalExplanation& explanation, const PreparedSample& sample,
                             const Network<float>& net, const ExplainConfig& config) {
  const ModelConfig& cfg = net.config();
  fs::create_directories(dir);
  const std::string stem = file_stem(explanation.image_id);
  json classes = json::array();
  for (int c = 0; c < cfg.num_classes; ++c) {
    json protos = json::array();
    for (const PrototypeContribution& pc : explanation.prototypes) {
      if (pc.class_index != c) continue;
      const std::string overlay = stem + "_c" + std::to_string(c) + "_k" + std::to_string(pc.prototype) + ".png";
      write_png(dir / overlay,
                render_overlay(sample.image, cfg.input_height, cfg.input_width, pc.map, pc.contours, config));
      protos.push_back({{"prototype", pc.prototype},
                        {"similarity", pc.similarity},
                        {"weight", pc.weight},
                        {"contribution", pc.contribution},
                        {"zero_map", pc.map.zero_map},
                        {"peak_cell", pc.peak_cell},
                        {"contours", polygons_json(pc.contours)},
                        {"overlay", overlay}});
    }
    classes.push_back({{"index", c},
                       {"name", class_label(cfg, c)},
                       {"probability", explanation.probabilities[c]},
                       {"prototypes", protos}});
  }
  const json doc = {{"schema", "xprotonet.local_explanation"},
                    {"version", kExplanationVersion},
                    {"image_id", explanation.image_id},
                    {"contour_threshold", config.contour_threshold},
                    {"classes", classes}};
  write_json(dir / (stem + ".json"), doc);
}

void write_global_explanation(const fs::path& dir, const std::vector<GlobalRecord>& records,
                              std::span<const PreparedSample> training, const Network<float>& net,
                              const ExplainConfig& config) {
  const ModelConfig& cfg = net.config();
  fs::create_directories(dir);
  std::map<std::string, const PreparedSample*> by_id;
  for (const PreparedSample& s : training) by_id[s.id] = &s;
  json all = json::array();
  for (const GlobalRecord& r : records) {
    const std::string stem = "prototype_c" + std::to_string(r.class_index) + "_k" + std::to_string(r.prototype);
    json doc = {{"schema", "xprotonet.global_explanation"},
                {"version", kExplanationVersion},
                {"class_index", r.class_index},
                {"class_name", class_label(cfg, r.class_index)},
                {"prototype", r.prototype},
                {"weight", r.weight},
                {"source_image_id", r.source_image_id},
                {"occurrence_region", r.occurrence_region},
                {"grid", {cfg.grid_height(), cfg.grid_width()}},
                {"box_restricted", r.box_restricted},
                {"nearest_annotated", nullptr},
                {"overlay", nullptr}};
    if (r.nearest) {
      doc["nearest_annotated"] = {{"image_id", r.nearest->image_id},
                                  {"similarity", r.nearest->similarity},
                                  {"box_overlap", r.nearest->box_overlap}};
    }
    auto src = by_id.find(r.source_image_id);
    if (src != by_id.end() && !r.occurrence_region.empty()) {
      const NormalizedMap map = normalize_occurrence(r.occurrence_region, cfg.grid_height(), cfg.grid_width(),
                                                     cfg.input_height, cfg.input_width);
      const auto contours = iso_contours(map.values, map.height, map.width, config.contour_threshold);
      write_png(dir / (stem + ".png"),
                render_overlay(src->second->image, cfg.input_height, cfg.input_width, map, contours, config));
      doc["overlay"] = stem + ".png";
    }
    write_json(dir / (stem + ".json"), doc);
    all.push_back(doc);
  }
  write_json(dir / "global.json", {{"schema", "xprotonet.global_explanation_set"},
                                   {"version", kExplanationVersion},
                                   {"prototypes", all}});
}

}  // namespace xprotonet
