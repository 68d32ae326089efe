#pragma once

#include <filesystem>
#include <vector>

#include "kfs/serialize.hpp"
#include "kfs/tensor.hpp"

namespace kfs {

// Binary PPM (P6). Grayscale images are replicated across the three
// channels; values are clamped to [0, 1] and quantized to 8 bits.
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);

// One grid per class: rows are decoders, columns are codes (a row shows one
// decoder applied to every latent code of the class). Returns the files
// written, in class order.
std::vector<std::filesystem::path> export_image_grids(const std::filesystem::path& out_dir,
                                                      const CondensedContainer& c, int pad = 1);

}  // namespace kfs
