#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "kfs/cache.hpp"
#include "kfs/data.hpp"
#include "kfs/matching.hpp"
#include "kfs/serialize.hpp"

namespace kfs {

// Adam with a per-buffer learning rate (decoders and codes train at
// different constant rates).
class Adam {
 public:
  struct Group {
    Tensor<float>* param = nullptr;
    float lr = 0;
  };

  explicit Adam(std::vector<Group> groups, float beta1 = 0.9f, float beta2 = 0.999f,
                float eps = 1e-8f);

  void step(const std::vector<const Tensor<float>*>& grads);
  std::int64_t steps_taken() const { return t_; }

  AdamStateBlob state() const;
  void restore(const AdamStateBlob& blob);

 private:
  std::vector<Group> groups_;
  std::vector<Tensor<float>> m_, v_;
  std::int64_t t_ = 0;
  float beta1_, beta2_, eps_;
};

// ---- decoder pretraining ----

struct PretrainConfig {
  int steps = 2000;
  int batch = 256;
  float lr = 0.01f;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  Decoder<float> decoder;
  Encoder<float> encoder;  // kept for latent-code initialization
  float initial_mse = 0;   // on a held-out probe batch, before training
  float final_mse = 0;     // same batch, after training
};

// Joint autoencoder training of a mirror encoder and one decoder on
// reconstruction MSE. steps == 0 returns the random initializations.
PretrainResult pretrain_decoder(const Dataset& train, const DecoderSpec& spec,
                                const PretrainConfig& cfg);

// ---- condensation ----

enum class GradMode { kFullBatch, kBiasedPair };

struct CondenseConfig {
  int images_per_class = 1;  // parameter budget this run is accounted against
  int codes_per_class = 16;
  int num_decoders = 8;
  DecoderKind decoder = DecoderKind::kLowR;
  int steps = 20000;
  float lr_decoders = 0.01f;
  float lr_codes = 0.1f;
  std::uint64_t base_seed = 0;
  int chunk_size = 0;  // (c,m,d) triples per backprop chunk; 0 = whole graph
  int feature_width = 64;
  int feature_depth = 3;
  GradMode grad_mode = GradMode::kFullBatch;  // kBiasedPair reproduces the subsampling pathology
  int pretrain_steps = 2000;
  int pretrain_batch = 256;
  float pretrain_lr = 0.01f;
  float code_init_sigma = 0.1f;  // Gaussian fallback when pretraining is off
  // Seeded per-decoder perturbation applied after the copy. With an exact
  // copy, identical decoders receive identical full-batch gradients and stay
  // identical forever; a tiny deterministic jitter lets the cross-pair
  // repulsion in the matching gradient pull them into distinct styles.
  float decoder_jitter = 1e-3f;
  int threads = 1;
  int checkpoint_every = 1000;
  std::filesystem::path checkpoint_prefix;  // empty = no checkpoints
};

struct LogRow {
  int step = 0;
  float loss = 0;
  double wall_ms = 0;
};

struct CondenseResult {
  CondensedContainer model;
  std::vector<LogRow> log;
};

CondenseResult condense(const Dataset& train, const ChannelStats<float>& stats,
                        const CondenseConfig& cfg, const EmbeddingMeanCache* cache,
                        const CondenseCheckpoint* resume = nullptr);

void write_log_csv(const std::filesystem::path& path, const std::vector<LogRow>& log);

// ---- evaluation ----

struct EvalConfig {
  int epochs = 200;
  int batch = 256;  // actual batch is min(N_total, batch)
  float lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  float decay_factor = 0.2f;
  std::vector<int> decay_epochs = {133, 166};
  int width = 64;
  int depth = 3;
  int runs = 5;
  std::uint64_t seed = 0;
};

struct EvalResult {
  double mean = 0;
  double stdev = 0;
  std::vector<double> per_run;
};

// Trains a fresh classifier per run on the given labeled images (already in
// [0,1]; standardized internally with `stats`) and reports top-1 accuracy on
// the test set. Reads nothing but its arguments.
EvalResult evaluate(const Tensor<float>& images, const std::vector<int>& labels, int num_classes,
                    const ChannelStats<float>& stats, const Dataset& test, const EvalConfig& cfg);

struct BudgetSweepRow {
  int steps = 0;
  double mean = 0;
  double stdev = 0;
  std::vector<double> per_run;
};

// Accuracy at several training-step budgets; each run trains once and is
// measured at every budget. Batch size is min(N_total, cfg.batch).
std::vector<BudgetSweepRow> evaluate_budget_sweep(const Tensor<float>& images,
                                                  const std::vector<int>& labels, int num_classes,
                                                  const ChannelStats<float>& stats, const Dataset& test,
                                                  const EvalConfig& cfg, std::vector<int> budget_steps);

// uniform per-class sample without replacement
SyntheticDataset<float> random_coreset(const Dataset& ds, int images_per_class, std::uint64_t seed);

// whole dataset as an evaluation set (the "full data" control)
SyntheticDataset<float> as_eval_set(const Dataset& ds);

}  // namespace kfs
