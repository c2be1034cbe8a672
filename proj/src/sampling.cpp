#include "tokenlabel/sampling.hpp"

#include <algorithm>
#include <numeric>

#include "tokenlabel/error.hpp"

namespace tokenlabel {

namespace {

std::vector<BatchItem> corpus_items(const Corpus& corpus) {
  std::vector<BatchItem> items;
  items.reserve(corpus.token_count());
  for (const auto& rec : corpus.activations()) {
    items.push_back({rec.sentence_index, rec.token_position, rec.activation});
  }
  return items;
}

std::size_t epoch_batches(const Corpus& corpus, std::size_t half) {
  return (corpus.inactive_count() + half - 1) / half;
}

// Uniform index in [0, n) via rejection on the top bits, so the stream does
// not depend on the standard library's distribution code.
std::size_t draw_index(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return static_cast<std::size_t>(x % bound);
}

void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[draw_index(rng, i)]);
}

}  // namespace

std::string_view stratum_name(Stratum s) {
  switch (s) {
    case Stratum::active_missed: return "active_missed";
    case Stratum::inactive_false_alarm: return "inactive_false_alarm";
    case Stratum::active_hit: return "active_hit";
    case Stratum::inactive_rejected: return "inactive_rejected";
  }
  return "unknown";
}

Stratum stratum_of(std::uint8_t activation, double prediction) {
  const bool predicted = prediction >= kPredictedActiveThreshold;
  if (activation) return predicted ? Stratum::active_hit : Stratum::active_missed;
  return predicted ? Stratum::inactive_false_alarm : Stratum::inactive_rejected;
}

BalancedSampler::BalancedSampler(const Corpus& corpus, const SamplerConfig& config)
    : rng_(config.seed) {
  if (config.batch_size < 2 || (config.batch_size % 2 != 0 && !config.balance_odd_batches)) {
    throw Error("balanced sampling needs an even batch size >= 2, got " +
                std::to_string(config.batch_size));
  }
  for (const auto& item : corpus_items(corpus)) {
    (item.activation ? active_ : inactive_).push_back(item);
  }
  if (active_.empty() || inactive_.empty()) {
    throw Error("degenerate corpus: need both active and inactive tokens");
  }
  batch_size_ = config.batch_size;
  // Smallest number of batches whose inactive slots cover every inactive token.
  std::size_t covered = 0;
  while (covered < inactive_.size()) covered += inactive_slots(batches_per_epoch_++);
  order_.resize(inactive_.size());
  reshuffle();
}

void BalancedSampler::reshuffle() {
  std::iota(order_.begin(), order_.end(), 0);
  shuffle(order_, rng_);
  cursor_ = 0;
}

std::size_t BalancedSampler::inactive_slots(std::size_t batch_number) const {
  return batch_size_ / 2 + (batch_size_ % 2 != 0 && batch_number % 2 == 0 ? 1 : 0);
}

Batch BalancedSampler::next() {
  if (batch_in_epoch_ == batches_per_epoch_) {
    batch_in_epoch_ = 0;
    reshuffle();
  }
  const std::size_t inactive = inactive_slots(batches_emitted_++);
  Batch batch;
  batch.items.reserve(batch_size_);
  for (std::size_t k = 0; k < inactive; ++k) {
    // The last batch of an epoch tops up from the start of the same shuffle.
    batch.items.push_back(inactive_[order_[cursor_ % order_.size()]]);
    ++cursor_;
  }
  for (std::size_t k = inactive; k < batch_size_; ++k) {
    batch.items.push_back(active_[draw_index(rng_, active_.size())]);
  }
  ++batch_in_epoch_;
  return batch;
}

StratifiedSampler::StratifiedSampler(const Corpus& corpus, const SamplerConfig& config)
    : items_(corpus_items(corpus)), batch_size_(config.batch_size), rng_(config.seed) {
  if (batch_size_ == 0 || batch_size_ % 4 != 0) {
    throw Error("stratified sampling needs a batch size divisible by 4, got " +
                std::to_string(batch_size_));
  }
  batches_per_epoch_ = epoch_batches(corpus, batch_size_ / 2);
}

Batch StratifiedSampler::next(std::span<const double> predictions) {
  if (predictions.size() != items_.size()) {
    throw Error("stratified sampling needs one prediction per corpus token");
  }
  std::array<std::vector<std::size_t>, kStrata> strata;
  for (std::size_t t = 0; t < items_.size(); ++t) {
    strata[static_cast<std::size_t>(stratum_of(items_[t].activation, predictions[t]))]
        .push_back(t);
  }

  Batch batch;
  std::size_t non_empty = 0;
  for (const auto& s : strata) non_empty += s.empty() ? 0 : 1;
  const std::size_t quota = batch_size_ / kStrata;
  const std::size_t spare = quota * (kStrata - non_empty);
  std::size_t extra_each = spare / non_empty;
  std::size_t remainder = spare % non_empty;
  for (std::size_t s = 0; s < kStrata; ++s) {
    if (strata[s].empty()) continue;
    std::size_t count = quota + extra_each;
    if (remainder > 0) {
      ++count;
      --remainder;
    }
    batch.stratum_counts[s] = count;
  }
  batch.redistributed = non_empty < kStrata;

  batch.items.reserve(batch_size_);
  for (std::size_t s = 0; s < kStrata; ++s) {
    for (std::size_t k = 0; k < batch.stratum_counts[s]; ++k) {
      batch.items.push_back(items_[strata[s][draw_index(rng_, strata[s].size())]]);
    }
  }
  return batch;
}

}  // namespace tokenlabel
