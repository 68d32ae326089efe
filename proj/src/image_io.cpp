#include "kfs/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace kfs {

void write_ppm(const std::filesystem::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    throw Error("write_ppm: expected 1- or 3-channel CHW image, got " + shape_str(image.shape()));
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write image " + path.string());
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  const std::int64_t area = static_cast<std::int64_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const int src = c == 1 ? 0 : ch;
        const float v = image[static_cast<std::int64_t>(src) * area + y * w + x];
        row[static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(ch)] =
            static_cast<unsigned char>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
      }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw Error("failed writing image " + path.string());
}

std::vector<std::filesystem::path> export_image_grids(const std::filesystem::path& out_dir,
                                                      const CondensedContainer& c, int pad) {
  check_compatible(c.codebook, c.bank);
  std::filesystem::create_directories(out_dir);
  const DecoderSpec& spec = c.bank.spec();
  const int C = c.codebook.num_classes(), M = c.codebook.codes_per_class(), D = c.bank.size();
  const int th = spec.out_h, tw = spec.out_w;
  const int gh = D * th + (D - 1) * pad;
  const int gw = M * tw + (M - 1) * pad;
  std::vector<std::filesystem::path> written;
  for (int cls = 0; cls < C; ++cls) {
    Tensor<float> grid({spec.out_channels, gh, gw}, 0.25f);  // gray gutters
    for (int d = 0; d < D; ++d)
      for (int m = 0; m < M; ++m) {
        Tensor<float> tile = synthesize(c.codebook, c.bank, cls, m, d);
        const int oy = d * (th + pad), ox = m * (tw + pad);
        for (int ch = 0; ch < spec.out_channels; ++ch)
          for (int y = 0; y < th; ++y)
            for (int x = 0; x < tw; ++x)
              grid[(static_cast<std::int64_t>(ch) * gh + oy + y) * gw + ox + x] =
                  tile[(static_cast<std::int64_t>(ch) * th + y) * tw + x];
      }
    const std::filesystem::path p =
        out_dir / ("class_" + std::to_string(c.codebook.class_ids[static_cast<std::size_t>(cls)]) +
                   ".ppm");
    write_ppm(p, grid);
    written.push_back(p);
  }
  return written;
}

}  // namespace kfs
