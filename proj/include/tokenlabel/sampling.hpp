#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "tokenlabel/core.hpp"

namespace tokenlabel {

struct BatchItem {
  std::size_t sentence_index = 0;
  std::size_t token_position = 0;
  std::uint8_t activation = 0;
  bool operator==(const BatchItem&) const = default;
};

/// Four strata of (activation, prediction). A prediction m >= 0.5 counts as
/// "predicted active".
enum class Stratum : std::size_t {
  active_missed = 0,       // active, predicted inactive
  inactive_false_alarm,    // inactive, predicted active
  active_hit,              // active, predicted active
  inactive_rejected,       // inactive, predicted inactive
};

inline constexpr std::size_t kStrata = 4;
inline constexpr double kPredictedActiveThreshold = 0.5;

std::string_view stratum_name(Stratum s);
Stratum stratum_of(std::uint8_t activation, double prediction);

struct Batch {
  std::vector<BatchItem> items;
  /// Items drawn per stratum (stratified sampler only).
  std::array<std::size_t, kStrata> stratum_counts{};
  /// True when empty strata handed their quota to the others.
  bool redistributed = false;

  std::size_t size() const { return items.size(); }
  bool operator==(const Batch&) const = default;
};

enum class SamplerMode { balanced, stratified };

struct SamplerConfig {
  SamplerMode mode = SamplerMode::balanced;
  std::size_t batch_size = 10;
  std::uint64_t seed = 0;
  /// Allow an odd balanced batch: the extra slot goes to an inactive token
  /// on even-numbered batches and to an active one on odd-numbered batches,
  /// so each consecutive pair of batches is exactly balanced.
  bool balance_odd_batches = false;
};

/// Half inactive tokens, cycled without replacement in a fresh shuffle each
/// epoch, and half active tokens drawn with replacement.
class BalancedSampler {
 public:
  /// Throws Error if batch_size is below 2, or odd without
  /// balance_odd_batches.
  BalancedSampler(const Corpus& corpus, const SamplerConfig& config);

  Batch next();
  /// Batches needed to visit every inactive token once.
  std::size_t batches_per_epoch() const { return batches_per_epoch_; }

 private:
  void reshuffle();
  std::size_t inactive_slots(std::size_t batch_number) const;

  std::vector<BatchItem> active_;
  std::vector<BatchItem> inactive_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t batch_in_epoch_ = 0;
  std::size_t batches_per_epoch_ = 0;
  std::size_t batch_size_ = 0;
  std::size_t batches_emitted_ = 0;
  std::mt19937_64 rng_;
};

/// Draws batch_size/4 tokens (with replacement) from each stratum given the
/// current per-token predictions. Quota of empty strata is split evenly over
/// the non-empty ones, remainder to the lowest-numbered strata first.
class StratifiedSampler {
 public:
  /// Throws Error if batch_size is not a positive multiple of 4.
  StratifiedSampler(const Corpus& corpus, const SamplerConfig& config);

  /// `predictions` holds m for every corpus token, in flat order.
  Batch next(std::span<const double> predictions);
  std::size_t batches_per_epoch() const { return batches_per_epoch_; }

 private:
  std::vector<BatchItem> items_;
  std::size_t batch_size_;
  std::size_t batches_per_epoch_;
  std::mt19937_64 rng_;
};

}  // namespace tokenlabel
