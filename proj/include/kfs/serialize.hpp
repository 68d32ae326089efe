#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "kfs/factorization.hpp"
#include "kfs/nets.hpp"

namespace kfs {

// Condensed-set container: everything needed to synthesize and evaluate.
struct CondensedContainer {
  LatentCodebook<float> codebook;
  DecoderBank<float> bank;
  ChannelStats<float> stats;  // normalization the set was trained under
};

void save_kfs1(const std::filesystem::path& path, const CondensedContainer& c);
CondensedContainer load_kfs1(const std::filesystem::path& path);

// Adam state blob (first/second moments per buffer plus the step count).
struct AdamStateBlob {
  std::vector<Tensor<float>> m, v;
  std::int64_t step = 0;
};

void save_opt_state(const std::filesystem::path& path, const AdamStateBlob& blob);
AdamStateBlob load_opt_state(const std::filesystem::path& path);

// Checkpoint = KFS1 container + optimizer state blob, written as
// <prefix>.kfs1 and <prefix>.opt.
struct CondenseCheckpoint {
  CondensedContainer model;
  AdamStateBlob opt;
  int step = 0;
};

void save_checkpoint(const std::filesystem::path& prefix, const CondenseCheckpoint& ck);
CondenseCheckpoint load_checkpoint(const std::filesystem::path& prefix);

}  // namespace kfs
