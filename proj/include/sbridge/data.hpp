#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "sbridge/rng.hpp"

namespace sbridge::data {

/// K x L grid of 0/1 entries stored as doubles so masks compose with values by multiplication.
using Mask = Eigen::MatrixXd;

struct MaskSet {
  Mask obs;
  Mask cond;
  Mask target;

  /// Checks binary entries, matching shapes, cond * target == 0 and cond subset of obs; with
  /// `evaluation` also target subset of obs.
  void validate(bool evaluation = true) const;
};

struct TimeSeriesWindow {
  Eigen::MatrixXd values;  ///< K x L, zero outside masks.obs
  MaskSet masks;
};

enum class TargetKind { kConsecutiveBlock, kRandomRatio, kForecast };

struct TargetStrategy {
  TargetKind kind = TargetKind::kConsecutiveBlock;
  int length = 20;     ///< block length
  double ratio = 0.1;  ///< random_ratio probability
  int context = 40;    ///< forecast context length

  static TargetStrategy consecutive_block(int len) { return {TargetKind::kConsecutiveBlock, len, 0.0, 0}; }
  static TargetStrategy random_ratio(double r) { return {TargetKind::kRandomRatio, 0, r, 0}; }
  static TargetStrategy forecast(int context_len) { return {TargetKind::kForecast, 0, 0.0, context_len}; }
  std::string name() const;
  /// Parses "block:N", "ratio:R" or "forecast:N".
  static TargetStrategy parse(const std::string& text);
};

struct SignalConfig {
  int K = 8;
  int L = 50;
  double sigma = 0.1;
  int n_samples = 1000;
  double drop_ratio = 0.0;
  TargetStrategy strategy = TargetStrategy::consecutive_block(20);
  /// Leading records used for training; the rest are held out.
  int n_train = 800;

  void validate() const;
  /// Two features, twenty steps, blocks of eight.
  static SignalConfig desk();
};

/// signal_k(t) for k in 1..8.
double signal(int k, double t);

/// Uniform grid t_l = l / (L - 1).
Eigen::VectorXd time_grid(int L);

/// Sample i draws its phase shift, noise, drops and masks from its own stream, so a prefix of a
/// larger dataset equals the smaller dataset.
std::vector<TimeSeriesWindow> generate(const SignalConfig& cfg, std::uint64_t seed);

MaskSet make_masks(const Mask& obs, const TargetStrategy& strategy, Rng& rng);

struct Dataset {
  SignalConfig config;
  std::uint64_t seed = 0;
  std::vector<TimeSeriesWindow> windows;

  std::vector<TimeSeriesWindow> train() const;
  std::vector<TimeSeriesWindow> test() const;
};

Dataset make_dataset(const SignalConfig& cfg, std::uint64_t seed);

/// JSON lines: header {version, K, L, seed, config, n_records}, then one record per window.
void save_dataset(const Dataset& ds, const std::string& path);
void write_dataset(std::ostream& os, const Dataset& ds);
/// Throws ParseError with the 1-based line on malformed or truncated input.
Dataset load_dataset(const std::string& path);
Dataset read_dataset(std::istream& is);

/// Rows `feature,time,value,obs,cond,target`.
void write_window_csv(std::ostream& os, const TimeSeriesWindow& w);

}  // namespace sbridge::data
