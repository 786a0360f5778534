#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sbridge/csbi.hpp"

namespace sbridge::io {

/// Raw little-endian float64 array.
void write_f64(const std::string& path, std::span<const double> values);
std::vector<double> read_f64(const std::string& path);

struct CheckpointMeta {
  long step = 0;
  std::uint64_t seed = 0;
};

/// Writes `<stem>.bin` (parameters, MlpParams::flatten order) and `<stem>.json` (layer widths,
/// embedding, K, L, input contract, step, seed).
void save_policy(const csbi::PolicyNet& net, const CheckpointMeta& meta, const std::string& stem);
csbi::PolicyNet load_policy(const std::string& stem, CheckpointMeta* meta = nullptr);

/// `<dir>/forward.*` and `<dir>/backward.*`. Optimizer moments are not stored.
void save_pair(const csbi::PolicyPair& pair, std::uint64_t seed, const std::string& dir);
csbi::PolicyPair load_pair(const std::string& dir);

}  // namespace sbridge::io
