#include "xprotonet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "xprotonet/config.hpp"

namespace xprotonet {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::string shape_string(const std::vector<std::uint64_t>& dims) {
  std::string s;
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "x" : "") + std::to_string(dims[i]);
  return s.empty() ? "scalar" : s;
}

std::string tensor_file(const std::string& name) { return name + ".bin"; }

// Copies a row-major tensor into a column-major parameter buffer.
void load_param(const ParamView<float>& p, const Tensor& t) {
  for (Eigen::Index r = 0; r < p.rows; ++r)
    for (Eigen::Index c = 0; c < p.cols; ++c) p.value[r + c * p.rows] = t.data[r * p.cols + c];
}

Tensor param_tensor(const ParamView<float>& p) {
  Tensor t;
  t.dims = {static_cast<std::uint64_t>(p.rows), static_cast<std::uint64_t>(p.cols)};
  t.data.resize(p.size());
  for (Eigen::Index r = 0; r < p.rows; ++r)
    for (Eigen::Index c = 0; c < p.cols; ++c) t.data[r * p.cols + c] = p.value[r + c * p.rows];
  return t;
}

Tensor vector_tensor(const Vec<float>& v) {
  Tensor t;
  t.dims = {static_cast<std::uint64_t>(v.size())};
  t.data.assign(v.data(), v.data() + v.size());
  return t;
}

json provenance_json(const std::optional<Provenance>& p) {
  if (!p) return nullptr;
  return {{"image_id", p->image_id},
          {"occurrence_map", p->occurrence_map},
          {"pooled_feature", p->pooled_feature},
          {"similarity_before", p->similarity_before},
          {"patch_position", p->patch_position},
          {"box_restricted", p->box_restricted}};
}

std::optional<Provenance> provenance_from_json(const json& j) {
  if (j.is_null()) return std::nullopt;
  Provenance p;
  p.image_id = j.at("image_id").get<std::string>();
  p.occurrence_map = j.at("occurrence_map").get<std::vector<double>>();
  p.pooled_feature = j.at("pooled_feature").get<std::vector<double>>();
  p.similarity_before = j.at("similarity_before").get<double>();
  p.patch_position = j.at("patch_position").get<int>();
  p.box_restricted = j.at("box_restricted").get<bool>();
  return p;
}

}  // namespace

void write_tensor(const fs::path& path, const Tensor& tensor) {
  std::uint64_t count = 1;
  for (std::uint64_t d : tensor.dims) count *= d;
  if (count != tensor.data.size()) throw IoError("tensor " + path.string() + ": data size does not match dims");
  std::string buf(kTensorMagic, 8);
  put_u64(buf, tensor.dims.size());
  for (std::uint64_t d : tensor.dims) put_u64(buf, d);
  for (float f : tensor.data) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
  std::ofstream out(path, std::ios::binary);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("cannot write tensor " + path.string());
}

Tensor read_tensor(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tensor " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  if (buf.size() < 16 || std::memcmp(buf.data(), kTensorMagic, 8) != 0)
    throw IoError("tensor " + path.string() + ": bad magic (corrupt header)");
  const std::uint64_t rank = get_u64(p + 8);
  if (rank > 8 || buf.size() < 16 + 8 * rank) throw IoError("tensor " + path.string() + ": corrupt header");
  Tensor t;
  std::uint64_t count = 1;
  for (std::uint64_t i = 0; i < rank; ++i) {
    t.dims.push_back(get_u64(p + 16 + 8 * i));
    count *= t.dims.back();
  }
  const std::size_t offset = 16 + 8 * rank;
  if (buf.size() != offset + 4 * count)
    throw IoError("tensor " + path.string() + ": payload size does not match header dims " + shape_string(t.dims));
  t.data.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 3; b >= 0; --b) bits = (bits << 8) | p[offset + 4 * i + b];
    t.data[i] = std::bit_cast<float>(bits);
  }
  return t;
}

Tensor to_tensor(const Mat<float>& m) {
  Tensor t;
  t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.data.resize(m.size());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.data[r * m.cols() + c] = m(r, c);
  return t;
}

Mat<float> to_matrix(const Tensor& t, const std::string& what) {
  if (t.dims.size() != 2) throw IoError(what + ": expected a rank-2 tensor, got " + shape_string(t.dims));
  Mat<float> m(t.dims[0], t.dims[1]);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.data[r * m.cols() + c];
  return m;
}

json to_json(const TrainState& s) {
  return {{"cycle", s.cycle},
          {"stage", to_string(s.stage)},
          {"epoch", s.epoch},
          {"global_epoch", s.global_epoch},
          {"best_val_auc", s.best_val_auc},
          {"stage_best_auc", s.stage_best_auc},
          {"stage_evaluations", s.stage_evaluations},
          {"epochs_since_improvement", s.epochs_since_improvement},
          {"cycle_start_best", s.cycle_start_best}};
}

TrainState train_state_from_json(const json& j) {
  try {
    TrainState s;
    s.cycle = j.at("cycle").get<int>();
    s.stage = stage_from_string(j.at("stage").get<std::string>());
    s.epoch = j.at("epoch").get<int>();
    s.global_epoch = j.at("global_epoch").get<int>();
    s.best_val_auc = j.at("best_val_auc").get<double>();
    s.stage_best_auc = j.at("stage_best_auc").get<double>();
    s.stage_evaluations = j.at("stage_evaluations").get<int>();
    s.epochs_since_improvement = j.at("epochs_since_improvement").get<int>();
    s.cycle_start_best = j.at("cycle_start_best").get<double>();
    return s;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed training state: ") + e.what());
  }
}

void save_checkpoint(const fs::path& dir, const Network<float>& net, const CheckpointExtras& extras) {
  fs::create_directories(dir);
  const ModelConfig& cfg = net.config();
  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["version"] = kCheckpointVersion;
  manifest["model"] = to_json(cfg);
  manifest["active"] = net.bank().active;
  manifest["preprocess"] = to_json(extras.preprocess);
  manifest["hyperparameters"] = extras.hyperparameters;

  json tensors = json::array();
  for (const ParamView<float>& p : const_cast<Network<float>&>(net).parameters()) {
    const Tensor t = param_tensor(p);
    write_tensor(dir / tensor_file(p.name), t);
    tensors.push_back({{"name", p.name}, {"file", tensor_file(p.name)}, {"dims", t.dims}});
  }
  manifest["tensors"] = tensors;

  json provenance = json::array();
  for (const auto& p : net.bank().provenance) provenance.push_back(provenance_json(p));
  write_json(dir / "provenance.json", provenance);

  json slots = json::array();
  for (const auto& [name, slot] : extras.optimizer_slots) {
    const std::string m_file = "adam." + name + ".m.bin";
    const std::string v_file = "adam." + name + ".v.bin";
    write_tensor(dir / m_file, vector_tensor(slot.m));
    write_tensor(dir / v_file, vector_tensor(slot.v));
    slots.push_back({{"name", name}, {"steps", slot.steps}, {"m", m_file}, {"v", v_file}});
  }
  manifest["optimizer_slots"] = slots;

  if (extras.state) {
    manifest["train_state"] = to_json(*extras.state);
    std::ofstream log(dir / "metrics.jsonl");
    for (const MetricsRecord& r : extras.state->history) log << metrics_line(r) << "\n";
    if (!log) throw IoError("cannot write " + (dir / "metrics.jsonl").string());
  } else {
    manifest["train_state"] = nullptr;
  }
  write_json(dir / "manifest.json", manifest);
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  if (!manifest.is_object() || manifest.value("format", "") != kCheckpointFormat)
    throw IoError(dir.string() + ": not an xprotonet checkpoint");
  const json& version = manifest.at("version");
  if (!version.is_number_integer() || version.get<int>() != kCheckpointVersion)
    throw IoError(dir.string() + ": unsupported checkpoint version " + version.dump() + " (this build reads " +
                  std::to_string(kCheckpointVersion) + ")");
  try {
    ModelConfig cfg = model_config_from_json(manifest.at("model"));
    cfg.validate();
    LoadedCheckpoint out{Network<float>(cfg), {}};
    Network<float>& net = out.net;

    std::map<std::string, json> entries;
    for (const json& e : manifest.at("tensors")) entries[e.at("name").get<std::string>()] = e;
    for (const ParamView<float>& p : net.parameters()) {
      auto it = entries.find(p.name);
      if (it == entries.end()) throw IoError("checkpoint lacks tensor " + p.name);
      const Tensor t = read_tensor(dir / it->second.at("file").get<std::string>());
      const std::vector<std::uint64_t> want = {static_cast<std::uint64_t>(p.rows),
                                               static_cast<std::uint64_t>(p.cols)};
      if (t.dims != want) {
        throw IoError("tensor " + p.name + " has shape " + shape_string(t.dims) + " but the manifest (" +
                      std::to_string(cfg.num_classes) + " classes, " + std::to_string(cfg.prototypes_per_class) +
                      " prototypes per class, D=" + std::to_string(cfg.feature_dim) + ") requires " +
                      shape_string(want));
      }
      load_param(p, t);
    }

    const auto active = manifest.at("active").get<std::vector<bool>>();
    if (static_cast<int>(active.size()) != cfg.num_prototypes())
      throw IoError("active mask has " + std::to_string(active.size()) + " entries but the manifest declares " +
                    std::to_string(cfg.num_prototypes()) + " prototypes");
    net.bank().active = active;

    const json provenance = read_json(dir / "provenance.json");
    if (!provenance.is_array() || static_cast<int>(provenance.size()) != cfg.num_prototypes())
      throw IoError("provenance.json does not list one entry per prototype");
    for (int i = 0; i < cfg.num_prototypes(); ++i) net.bank().provenance[i] = provenance_from_json(provenance[i]);

    CheckpointExtras& extras = out.extras;
    extras.preprocess = preprocess_config_from_json(manifest.at("preprocess"));
    extras.hyperparameters = manifest.value("hyperparameters", json::object());
    for (const json& s : manifest.at("optimizer_slots")) {
      Adam<float>::Slot slot;
      const Tensor m = read_tensor(dir / s.at("m").get<std::string>());
      const Tensor v = read_tensor(dir / s.at("v").get<std::string>());
      if (m.dims.size() != 1 || m.dims != v.dims) throw IoError("optimizer moments have inconsistent shapes");
      slot.m = Eigen::Map<const Vec<float>>(m.data.data(), m.data.size());
      slot.v = Eigen::Map<const Vec<float>>(v.data.data(), v.data.size());
      slot.steps = s.at("steps").get<std::int64_t>();
      extras.optimizer_slots[s.at("name").get<std::string>()] = std::move(slot);
    }
    if (!manifest.at("train_state").is_null()) {
      TrainState state = train_state_from_json(manifest.at("train_state"));
      std::ifstream log(dir / "metrics.jsonl");
      if (!log) throw IoError("checkpoint with training state lacks metrics.jsonl");
      for (std::string line; std::getline(log, line);)
        if (!line.empty()) state.history.push_back(parse_metrics_line(line));
      extras.state = std::move(state);
    }
    return out;
  } catch (const json::exception& e) {
    throw IoError(dir.string() + ": malformed manifest: " + e.what());
  } catch (const ConfigError& e) {
    throw IoError(dir.string() + ": invalid model configuration: " + e.what());
  }
}

}  // namespace xprotonet
