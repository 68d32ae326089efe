#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "kfs/data.hpp"
#include "kfs/nets.hpp"

namespace kfs {

struct MeanCacheKey {
  std::uint64_t dataset_hash = 0;
  std::uint64_t cfg_digest = 0;  // architecture + normalization stats
  std::uint64_t seed = 0;
};

struct MeanEntry {
  Tensor<float> means;  // C x E
  std::vector<int> n_per_class;
};

// One file per key under a cache directory. Concurrent readers are fine;
// writes go through a temp file and an atomic rename.
class EmbeddingMeanCache {
 public:
  explicit EmbeddingMeanCache(std::filesystem::path dir);

  std::filesystem::path entry_path(const MeanCacheKey& key) const;
  std::optional<MeanEntry> load(const MeanCacheKey& key) const;
  void store(const MeanCacheKey& key, const MeanEntry& entry) const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

// Full-batch per-class embedding means over every real example, accumulated
// in double in a fixed order.
Tensor<float> compute_class_means(const Dataset& ds, const FeatureNet<float>& g,
                                  const ChannelStats<float>& stats, int threads = 1);

MeanCacheKey make_mean_key(const Dataset& ds, const FeatureNetConfig& cfg,
                           const ChannelStats<float>& stats, std::uint64_t seed);

// Cache hit returns the stored entry without touching the dataset; a miss
// (or a corrupt entry, with a warning) computes, stores, and returns.
MeanEntry compute_or_load_means(const Dataset& ds, const FeatureNetConfig& cfg,
                                const ChannelStats<float>& stats, std::uint64_t seed,
                                const EmbeddingMeanCache* cache, int threads = 1);

}  // namespace kfs
