#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kfs/nets.hpp"
#include "kfs/tensor.hpp"

namespace kfs {

// Labeled image set. Images are C x H x W in [0, 1] before normalization.
// Reads through image()/gather() are counted so tests can audit which
// phases touch which data.
class Dataset {
 public:
  Dataset() = default;
  Dataset(Tensor<float> images, std::vector<int> labels, int num_classes);

  int size() const { return images_.rank() == 4 ? images_.dim(0) : 0; }
  int num_classes() const { return num_classes_; }
  int channels() const { return images_.dim(1); }
  int height() const { return images_.dim(2); }
  int width() const { return images_.dim(3); }
  std::int64_t image_numel() const {
    return static_cast<std::int64_t>(channels()) * height() * width();
  }

  int label(int i) const { return labels_[static_cast<std::size_t>(i)]; }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<int>& class_indices(int c) const {
    return by_class_[static_cast<std::size_t>(c)];
  }

  Tensor<float> image(int i) const;
  Tensor<float> gather(std::span<const int> indices) const;

  std::uint64_t content_hash() const { return content_hash_; }
  std::int64_t access_count() const { return access_count_; }
  void reset_access_count() const { access_count_ = 0; }

  ChannelStats<float> compute_stats() const;

  // raw buffer, for serialization only
  const Tensor<float>& raw_images() const { return images_; }

 private:
  Tensor<float> images_;
  std::vector<int> labels_;
  std::vector<std::vector<int>> by_class_;
  int num_classes_ = 0;
  std::uint64_t content_hash_ = 0;
  mutable std::int64_t access_count_ = 0;
};

// ---- loaders ----

enum class DatasetFormat { kIdx, kCifar10, kRawF32 };

struct DatasetSource {
  DatasetFormat format = DatasetFormat::kRawF32;
  std::vector<std::filesystem::path> paths;  // idx: {images, labels}; cifar: batch files; raw: one file
  std::optional<ChannelStats<float>> normalization;  // computed from the data when absent

  Dataset load() const;
  ChannelStats<float> stats_for(const Dataset& ds) const {
    return normalization ? *normalization : ds.compute_stats();
  }
};

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
Dataset load_cifar10(const std::vector<std::filesystem::path>& batches);
Dataset load_raw_f32(const std::filesystem::path& path);
void save_raw_f32(const std::filesystem::path& path, const Dataset& ds);

// Procedural two-class 16x16 digit task (rings vs strokes) with deliberate
// intra-class style variation; the desk-scale stand-in for the full
// benchmark datasets.
Dataset make_demo_digits(int n_per_class, std::uint64_t seed, int h = 16, int w = 16);

}  // namespace kfs
