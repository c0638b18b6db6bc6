#ifndef XPROTONET_CHECKPOINT_HPP_
#define XPROTONET_CHECKPOINT_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "xprotonet/data.hpp"
#include "xprotonet/model.hpp"
#include "xprotonet/optimizer.hpp"
#include "xprotonet/trainer.hpp"

namespace xprotonet {

inline constexpr char kCheckpointFormat[] = "xprotonet-checkpoint";
inline constexpr int kCheckpointVersion = 1;
inline constexpr char kTensorMagic[] = "XPNTENS1";

/// A dense float tensor; `data` is row-major over `dims`.
struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<float> data;
};

/// File layout: 8-byte magic, rank and dims as little-endian u64, then the
/// values as little-endian f32.
void write_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor(const std::filesystem::path& path);

Tensor to_tensor(const Mat<float>& m);
Mat<float> to_matrix(const Tensor& t, const std::string& what);

/// Everything a checkpoint directory holds besides the network.
struct CheckpointExtras {
  PreprocessConfig preprocess;
  std::optional<TrainState> state;
  std::map<std::string, Adam<float>::Slot> optimizer_slots;
  nlohmann::json hyperparameters = nlohmann::json::object();
};

/// Writes manifest.json, one .bin per parameter, provenance.json, the Adam
/// moments (if any) and the metrics history as metrics.jsonl.
void save_checkpoint(const std::filesystem::path& dir, const Network<float>& net, const CheckpointExtras& extras);

struct LoadedCheckpoint {
  Network<float> net;
  CheckpointExtras extras;
};

/// Rejects unknown formats or versions, corrupt tensor headers and tensors
/// whose shapes disagree with the manifest.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

nlohmann::json to_json(const TrainState& state);
TrainState train_state_from_json(const nlohmann::json& j);

}  // namespace xprotonet

#endif  // XPROTONET_CHECKPOINT_HPP_
