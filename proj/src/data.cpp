#include "kfs/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace kfs {

namespace {

std::uint64_t hash_bytes(std::uint64_t h, const void* data, std::size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

template <typename T>
void read_le(std::istream& in, T* out, std::size_t count = 1) {
  in.read(reinterpret_cast<char*>(out), static_cast<std::streamsize>(sizeof(T) * count));
}

template <typename T>
void write_le(std::ostream& out, const T* data, std::size_t count = 1) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(sizeof(T) * count));
}

}  // namespace

Dataset::Dataset(Tensor<float> images, std::vector<int> labels, int num_classes)
    : images_(std::move(images)), labels_(std::move(labels)), num_classes_(num_classes) {
  if (images_.rank() != 4)
    throw Error("dataset: images must be N x C x H x W, got " + shape_str(images_.shape()));
  if (static_cast<int>(labels_.size()) != images_.dim(0))
    throw Error("dataset: " + std::to_string(labels_.size()) + " labels for " +
                std::to_string(images_.dim(0)) + " images");
  if (num_classes_ < 1) throw Error("dataset: need at least one class");
  by_class_.resize(static_cast<std::size_t>(num_classes_));
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    const int y = labels_[i];
    if (y < 0 || y >= num_classes_)
      throw Error("dataset: label " + std::to_string(y) + " out of range [0, " +
                  std::to_string(num_classes_) + ")");
    by_class_[static_cast<std::size_t>(y)].push_back(static_cast<int>(i));
  }
  std::uint64_t h = fnv1a64("dataset");
  h = hash_bytes(h, images_.data(), sizeof(float) * static_cast<std::size_t>(images_.size()));
  h = hash_bytes(h, labels_.data(), sizeof(int) * labels_.size());
  content_hash_ = h;
}

Tensor<float> Dataset::image(int i) const {
  ++access_count_;
  Tensor<float> out({channels(), height(), width()});
  out.vec() = images_.vec().segment(static_cast<std::int64_t>(i) * image_numel(), image_numel());
  return out;
}

Tensor<float> Dataset::gather(std::span<const int> indices) const {
  access_count_ += static_cast<std::int64_t>(indices.size());
  const std::int64_t numel = image_numel();
  Tensor<float> out({static_cast<int>(indices.size()), channels(), height(), width()});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const int i = indices[k];
    if (i < 0 || i >= size()) throw Error("dataset: index " + std::to_string(i) + " out of range");
    out.vec().segment(static_cast<std::int64_t>(k) * numel, numel) =
        images_.vec().segment(static_cast<std::int64_t>(i) * numel, numel);
  }
  return out;
}

ChannelStats<float> Dataset::compute_stats() const {
  const int c = channels();
  const std::int64_t area = static_cast<std::int64_t>(height()) * width();
  ChannelStats<float> st;
  st.mean.assign(static_cast<std::size_t>(c), 0.f);
  st.stdev.assign(static_cast<std::size_t>(c), 1.f);
  if (size() == 0) return st;
  // accumulate in double, per channel over every image
  for (int ch = 0; ch < c; ++ch) {
    double sum = 0, sq = 0;
    for (int i = 0; i < size(); ++i) {
      auto plane = images_.vec().segment((static_cast<std::int64_t>(i) * c + ch) * area, area);
      sum += plane.template cast<double>().sum();
      sq += plane.template cast<double>().squaredNorm();
    }
    const double n = static_cast<double>(size()) * static_cast<double>(area);
    const double mean = sum / n;
    const double var = std::max(sq / n - mean * mean, 0.0);
    st.mean[static_cast<std::size_t>(ch)] = static_cast<float>(mean);
    st.stdev[static_cast<std::size_t>(ch)] = static_cast<float>(std::max(std::sqrt(var), 1e-8));
  }
  return st;
}

Dataset DatasetSource::load() const {
  switch (format) {
    case DatasetFormat::kIdx:
      if (paths.size() != 2) throw Error("idx source needs {images, labels} paths");
      return load_idx(paths[0], paths[1]);
    case DatasetFormat::kCifar10:
      if (paths.empty()) throw Error("cifar10 source needs at least one batch file");
      return load_cifar10(paths);
    case DatasetFormat::kRawF32:
      if (paths.size() != 1) throw Error("raw-f32 source needs exactly one path");
      return load_raw_f32(paths[0]);
  }
  throw Error("unknown dataset format");
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  std::ifstream fi(images, std::ios::binary);
  if (!fi) throw Error("cannot open idx image file " + images.string());
  const std::uint32_t magic_i = read_be32(fi);
  if (magic_i != 0x00000803u)
    throw Error("bad idx image magic 0x" + std::to_string(magic_i) + " in " + images.string());
  const int n = static_cast<int>(read_be32(fi));
  const int rows = static_cast<int>(read_be32(fi));
  const int cols = static_cast<int>(read_be32(fi));
  std::vector<unsigned char> raw(static_cast<std::size_t>(n) * rows * cols);
  fi.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!fi) throw Error("truncated idx image file " + images.string());

  std::ifstream fl(labels, std::ios::binary);
  if (!fl) throw Error("cannot open idx label file " + labels.string());
  const std::uint32_t magic_l = read_be32(fl);
  if (magic_l != 0x00000801u) throw Error("bad idx label magic in " + labels.string());
  const int nl = static_cast<int>(read_be32(fl));
  if (nl != n) throw Error("idx: image count " + std::to_string(n) + " != label count " + std::to_string(nl));
  std::vector<unsigned char> lab(static_cast<std::size_t>(n));
  fl.read(reinterpret_cast<char*>(lab.data()), n);
  if (!fl) throw Error("truncated idx label file " + labels.string());

  Tensor<float> imgs({n, 1, rows, cols});
  for (std::size_t i = 0; i < raw.size(); ++i)
    imgs[static_cast<std::int64_t>(i)] = static_cast<float>(raw[i]) / 255.f;
  std::vector<int> ys(lab.begin(), lab.end());
  const int classes = ys.empty() ? 1 : *std::max_element(ys.begin(), ys.end()) + 1;
  return Dataset(std::move(imgs), std::move(ys), classes);
}

Dataset load_cifar10(const std::vector<std::filesystem::path>& batches) {
  constexpr int kRecord = 1 + 3 * 32 * 32;
  std::vector<unsigned char> all;
  for (const auto& p : batches) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw Error("cannot open cifar batch " + p.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() % kRecord != 0)
      throw Error("cifar batch " + p.string() + " size is not a multiple of " + std::to_string(kRecord));
    all.insert(all.end(), buf.begin(), buf.end());
  }
  const int n = static_cast<int>(all.size() / kRecord);
  Tensor<float> imgs({n, 3, 32, 32});
  std::vector<int> ys(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const unsigned char* rec = all.data() + static_cast<std::size_t>(i) * kRecord;
    ys[static_cast<std::size_t>(i)] = rec[0];
    for (std::int64_t j = 0; j < 3 * 32 * 32; ++j)
      imgs[static_cast<std::int64_t>(i) * 3 * 32 * 32 + j] = static_cast<float>(rec[1 + j]) / 255.f;
  }
  return Dataset(std::move(imgs), std::move(ys), 10);
}

// raw-f32 dump: "KFSR", u32 {N, C, H, W, num_classes}, f32 images, i32 labels
Dataset load_raw_f32(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open raw dataset " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "KFSR", 4) != 0) throw Error("bad raw dataset magic in " + path.string());
  std::uint32_t dims[5];
  read_le(f, dims, 5);
  const int n = static_cast<int>(dims[0]), c = static_cast<int>(dims[1]);
  const int h = static_cast<int>(dims[2]), w = static_cast<int>(dims[3]);
  Tensor<float> imgs({n, c, h, w});
  read_le(f, imgs.data(), static_cast<std::size_t>(imgs.size()));
  std::vector<std::int32_t> raw_ys(static_cast<std::size_t>(n));
  read_le(f, raw_ys.data(), raw_ys.size());
  if (!f) throw Error("truncated raw dataset " + path.string());
  std::vector<int> ys(raw_ys.begin(), raw_ys.end());
  return Dataset(std::move(imgs), std::move(ys), static_cast<int>(dims[4]));
}

void save_raw_f32(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write raw dataset " + path.string());
  f.write("KFSR", 4);
  const std::uint32_t dims[5] = {static_cast<std::uint32_t>(ds.size()),
                                 static_cast<std::uint32_t>(ds.channels()),
                                 static_cast<std::uint32_t>(ds.height()),
                                 static_cast<std::uint32_t>(ds.width()),
                                 static_cast<std::uint32_t>(ds.num_classes())};
  write_le(f, dims, 5);
  write_le(f, ds.raw_images().data(), static_cast<std::size_t>(ds.raw_images().size()));
  std::vector<std::int32_t> ys(ds.labels().begin(), ds.labels().end());
  write_le(f, ys.data(), ys.size());
  if (!f) throw Error("failed writing raw dataset " + path.string());
}

// ---- procedural demo digits ----

namespace {

float soft(float dist, float thick) {
  const float t = dist / thick;
  return std::max(0.f, 1.f - t * t);
}

// ring digit (a "0"): rotated ellipse outline
void draw_ring(std::vector<float>& px, int h, int w, float cx, float cy, float rx, float ry,
               float rot, float thick, float amp) {
  const float cr = std::cos(rot), sr = std::sin(rot);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float dx = static_cast<float>(x) - cx, dy = static_cast<float>(y) - cy;
      const float u = (cr * dx + sr * dy) / rx;
      const float v = (-sr * dx + cr * dy) / ry;
      const float rho = std::sqrt(u * u + v * v);
      const float sd = (rho - 1.f) * std::min(rx, ry);
      px[static_cast<std::size_t>(y) * w + x] += amp * soft(std::abs(sd), thick);
    }
}

// stroke digit (a "1"): slanted segment, optional serif and base bar
void draw_segment(std::vector<float>& px, int h, int w, float x0, float y0, float x1, float y1,
                  float thick, float amp) {
  const float vx = x1 - x0, vy = y1 - y0;
  const float len2 = vx * vx + vy * vy;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float dx = static_cast<float>(x) - x0, dy = static_cast<float>(y) - y0;
      float t = len2 > 0 ? (dx * vx + dy * vy) / len2 : 0.f;
      t = std::clamp(t, 0.f, 1.f);
      const float ex = dx - t * vx, ey = dy - t * vy;
      const float dist = std::sqrt(ex * ex + ey * ey);
      px[static_cast<std::size_t>(y) * w + x] += amp * soft(dist, thick);
    }
}

}  // namespace

Dataset make_demo_digits(int n_per_class, std::uint64_t seed, int h, int w) {
  if (n_per_class < 1) throw Error("make_demo_digits: need a positive count per class");
  const int n = 2 * n_per_class;
  Tensor<float> imgs({n, 1, h, w});
  std::vector<int> ys(static_cast<std::size_t>(n));
  CounterRng rng(seed, "demo-digits");
  std::uint64_t ctr = 0;
  auto u = [&](float lo, float hi) {
    return lo + (hi - lo) * static_cast<float>(rng.uniform(ctr++));
  };
  const float cx0 = static_cast<float>(w - 1) / 2.f, cy0 = static_cast<float>(h - 1) / 2.f;
  for (int i = 0; i < n; ++i) {
    const int cls = i % 2;
    ys[static_cast<std::size_t>(i)] = cls;
    std::vector<float> px(static_cast<std::size_t>(h) * w, 0.f);
    const float cx = cx0 + u(-2.5f, 2.5f), cy = cy0 + u(-2.0f, 2.0f);
    const float amp = u(0.65f, 1.0f), thick = u(0.9f, 1.9f);
    if (cls == 0) {
      draw_ring(px, h, w, cx, cy, u(3.0f, 5.0f), u(3.2f, 5.2f), u(-0.5f, 0.5f), thick, amp);
    } else {
      const float slant = u(-0.35f, 0.35f);
      const float len = u(4.5f, 6.5f);
      draw_segment(px, h, w, cx - slant * len, cy - len, cx + slant * len, cy + len, thick, amp);
      if (u(0.f, 1.f) < 0.4f)  // serif
        draw_segment(px, h, w, cx - slant * len, cy - len, cx - slant * len - 2.5f, cy - len + 2.0f,
                     thick * 0.8f, amp * 0.9f);
      if (u(0.f, 1.f) < 0.4f)  // base bar
        draw_segment(px, h, w, cx + slant * len - 2.5f, cy + len, cx + slant * len + 2.5f, cy + len,
                     thick * 0.8f, amp * 0.9f);
    }
    // background speckle and pixel noise
    const int blobs = static_cast<int>(u(0.f, 2.99f));
    for (int bidx = 0; bidx < blobs; ++bidx) {
      const float bx = u(1.f, static_cast<float>(w - 2)), by = u(1.f, static_cast<float>(h - 2));
      const float ba = u(0.10f, 0.30f), bt = u(0.7f, 1.3f);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const float dx = static_cast<float>(x) - bx, dy = static_cast<float>(y) - by;
          px[static_cast<std::size_t>(y) * w + x] += ba * soft(std::sqrt(dx * dx + dy * dy), bt);
        }
    }
    const float noise = u(0.02f, 0.06f);
    for (int p = 0; p < h * w; ++p) {
      float v = px[static_cast<std::size_t>(p)] +
                noise * static_cast<float>(rng.gaussian(ctr++));
      imgs[static_cast<std::int64_t>(i) * h * w + p] = std::clamp(v, 0.f, 1.f);
    }
  }
  return Dataset(std::move(imgs), std::move(ys), 2);
}

}  // namespace kfs
