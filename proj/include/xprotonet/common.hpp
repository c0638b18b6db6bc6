#ifndef XPROTONET_COMMON_HPP_
#define XPROTONET_COMMON_HPP_

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace xprotonet {

// Activations are stored channel-major: one row per channel, one column per
// spatial location u = y * width + x.
template <typename Dtype>
using Mat = Eigen::Matrix<Dtype, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Dtype>
using Vec = Eigen::Matrix<Dtype, Eigen::Dynamic, 1>;

/// Invalid configuration or shape contract violation.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure while reading or writing data, checkpoints or images.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Runtime failure in training or model surgery (e.g. pruning a class away).
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Derives an independent 64-bit stream seed from a base seed and up to
/// three indices (splitmix64 mixing).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a = 0,
                       std::uint64_t b = 0, std::uint64_t c = 0);

/// Warning sink; prints to stderr unless silenced.
void warn(const std::string& message);
void set_warnings_enabled(bool enabled);

}  // namespace xprotonet

#endif  // XPROTONET_COMMON_HPP_
