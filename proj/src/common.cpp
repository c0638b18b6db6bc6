#include "xprotonet/common.hpp"

#include <atomic>
#include <iostream>

namespace xprotonet {

namespace {

std::atomic<bool> g_warnings_enabled{true};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                       std::uint64_t c) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  h = splitmix64(h ^ c);
  return h;
}

void warn(const std::string& message) {
  if (g_warnings_enabled.load()) std::cerr << "warning: " << message << '\n';
}

void set_warnings_enabled(bool enabled) { g_warnings_enabled.store(enabled); }

}  // namespace xprotonet
