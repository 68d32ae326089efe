#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "kfs/data.hpp"
#include "kfs/image_io.hpp"
#include "kfs/serialize.hpp"
#include "test_util.hpp"

using namespace kfs;
using namespace kfs::test;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("kfs_io_" + std::to_string(mix64(reinterpret_cast<std::uintptr_t>(this))));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

void put_be32(std::ostream& f, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

CondensedContainer tiny_container(int C, int M, int D, std::uint64_t seed) {
  DecoderSpec spec = decoder_spec_for(DecoderKind::kLowR, 1, 16, 16);
  CondensedContainer c;
  c.codebook = make_codebook<float>(C, M, spec);
  c.codebook.codes = Tensor<float>::gaussian(c.codebook.codes.shape(), CounterRng(seed, "cc"), 0.4f);
  c.bank = make_decoder_bank<float>(spec, D, seed + 1);
  c.stats = ChannelStats<float>::identity(1);
  c.stats.mean[0] = 0.21f;
  c.stats.stdev[0] = 0.34f;
  return c;
}

}  // namespace

TEST_CASE("demo digits generator") {
  Dataset a = make_demo_digits(20, 7);
  CHECK(a.size() == 40);
  CHECK(a.num_classes() == 2);
  CHECK(a.channels() == 1);
  CHECK(a.height() == 16);
  CHECK(a.class_indices(0).size() == 20);
  for (std::int64_t i = 0; i < a.raw_images().size(); ++i) {
    CHECK(a.raw_images()[i] >= 0.f);
    CHECK(a.raw_images()[i] <= 1.f);
  }
  Dataset b = make_demo_digits(20, 7);
  CHECK(a.content_hash() == b.content_hash());
  Dataset c = make_demo_digits(20, 8);
  CHECK(a.content_hash() != c.content_hash());
}

TEST_CASE("idx loader") {
  TempDir tmp;
  const auto img_path = tmp.path / "images.idx";
  const auto lab_path = tmp.path / "labels.idx";
  {
    std::ofstream f(img_path, std::ios::binary);
    put_be32(f, 0x803);
    put_be32(f, 3);  // 3 images
    put_be32(f, 2);
    put_be32(f, 2);
    const unsigned char px[12] = {0, 51, 102, 153, 204, 255, 10, 20, 30, 40, 50, 60};
    f.write(reinterpret_cast<const char*>(px), 12);
  }
  {
    std::ofstream f(lab_path, std::ios::binary);
    put_be32(f, 0x801);
    put_be32(f, 3);
    const unsigned char ys[3] = {1, 0, 2};
    f.write(reinterpret_cast<const char*>(ys), 3);
  }
  Dataset ds = load_idx(img_path, lab_path);
  CHECK(ds.size() == 3);
  CHECK(ds.num_classes() == 3);
  CHECK(ds.raw_images()[1] == doctest::Approx(51.f / 255.f));
  CHECK(ds.label(0) == 1);
  CHECK(ds.label(2) == 2);

  // bad magic is rejected
  {
    std::ofstream f(img_path, std::ios::binary);
    put_be32(f, 0x9999);
  }
  CHECK_THROWS_AS(load_idx(img_path, lab_path), Error);
}

TEST_CASE("cifar10 binary loader") {
  TempDir tmp;
  const auto p = tmp.path / "batch.bin";
  {
    std::ofstream f(p, std::ios::binary);
    for (int rec = 0; rec < 2; ++rec) {
      const unsigned char y = static_cast<unsigned char>(rec == 0 ? 3 : 7);
      f.write(reinterpret_cast<const char*>(&y), 1);
      std::vector<unsigned char> px(3072, static_cast<unsigned char>(rec * 100 + 10));
      f.write(reinterpret_cast<const char*>(px.data()), 3072);
    }
  }
  Dataset ds = load_cifar10({p});
  CHECK(ds.size() == 2);
  CHECK(ds.channels() == 3);
  CHECK(ds.height() == 32);
  CHECK(ds.label(0) == 3);
  CHECK(ds.label(1) == 7);
  CHECK(ds.raw_images()[0] == doctest::Approx(10.f / 255.f));

  // truncated record
  {
    std::ofstream f(p, std::ios::binary);
    f << "short";
  }
  CHECK_THROWS_AS(load_cifar10({p}), Error);
}

TEST_CASE("raw f32 dataset round trip") {
  TempDir tmp;
  Dataset ds = make_demo_digits(5, 3);
  const auto p = tmp.path / "ds.kfsr";
  save_raw_f32(p, ds);
  Dataset back = load_raw_f32(p);
  CHECK(back.size() == ds.size());
  CHECK(back.num_classes() == 2);
  CHECK(bit_equal(back.raw_images(), ds.raw_images()));
  CHECK(back.labels() == ds.labels());
  CHECK(back.content_hash() == ds.content_hash());

  DatasetSource src;
  src.format = DatasetFormat::kRawF32;
  src.paths = {p};
  Dataset via_source = src.load();
  CHECK(bit_equal(via_source.raw_images(), ds.raw_images()));
}

TEST_CASE("dataset stats and access audit") {
  Dataset ds = make_demo_digits(30, 11);
  ChannelStats<float> st = ds.compute_stats();
  REQUIRE(st.mean.size() == 1);
  CHECK(st.mean[0] > 0.f);
  CHECK(st.stdev[0] > 0.f);

  ds.reset_access_count();
  CHECK(ds.access_count() == 0);
  (void)ds.image(3);
  CHECK(ds.access_count() == 1);
  (void)ds.gather(std::vector<int>{0, 1, 2});
  CHECK(ds.access_count() == 4);
}

TEST_CASE("kfs1 container round trip is lossless") {
  TempDir tmp;
  CondensedContainer c = tiny_container(3, 4, 2, 50);
  c.codebook.class_ids = {2, 0, 1};
  const auto p = tmp.path / "model.kfs1";
  save_kfs1(p, c);
  CondensedContainer back = load_kfs1(p);
  CHECK(bit_equal(back.codebook.codes, c.codebook.codes));
  CHECK(back.codebook.class_ids == c.codebook.class_ids);
  CHECK(back.bank.size() == 2);
  CHECK(back.bank.spec().kind == DecoderKind::kLowR);
  for (int d = 0; d < 2; ++d)
    for (std::size_t l = 0; l < c.bank.decoders[0].w.size(); ++l) {
      CHECK(bit_equal(back.bank.decoders[d].w[l], c.bank.decoders[d].w[l]));
      CHECK(bit_equal(back.bank.decoders[d].b[l], c.bank.decoders[d].b[l]));
    }
  CHECK(back.stats.mean[0] == c.stats.mean[0]);
  CHECK(back.stats.stdev[0] == c.stats.stdev[0]);

  // synthesis from the reloaded container is bit-identical
  CHECK(bit_equal(synthesize_all(back.codebook, back.bank).images,
                  synthesize_all(c.codebook, c.bank).images));

  // corrupted magic is rejected
  {
    std::ofstream f(p, std::ios::binary);
    f << "XXXX";
  }
  CHECK_THROWS_AS(load_kfs1(p), Error);
}

TEST_CASE("optimizer state round trip") {
  TempDir tmp;
  AdamStateBlob blob;
  blob.step = 123;
  blob.m.push_back(randn<float>({3, 2}, 1));
  blob.v.push_back(randn<float>({3, 2}, 2));
  blob.m.push_back(randn<float>({5}, 3));
  blob.v.push_back(randn<float>({5}, 4));
  const auto p = tmp.path / "state.opt";
  save_opt_state(p, blob);
  AdamStateBlob back = load_opt_state(p);
  CHECK(back.step == 123);
  REQUIRE(back.m.size() == 2);
  CHECK(bit_equal(back.m[0], blob.m[0]));
  CHECK(bit_equal(back.v[1], blob.v[1]));
}

TEST_CASE("ppm export: one grid per class, decoders x codes layout") {
  TempDir tmp;
  CondensedContainer c = tiny_container(2, 4, 2, 60);
  std::vector<std::filesystem::path> files = export_image_grids(tmp.path / "grids", c, 1);
  REQUIRE(files.size() == 2);
  for (const auto& p : files) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(static_cast<bool>(f));
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    CHECK(magic == "P6");
    CHECK(w == 4 * 16 + 3);  // 4 code columns with 1px gutters
    CHECK(h == 2 * 16 + 1);  // 2 decoder rows
    CHECK(maxval == 255);
    f.get();
    std::vector<unsigned char> payload(static_cast<std::size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    CHECK(f.gcount() == static_cast<std::streamsize>(payload.size()));
  }

  // tile (d, m) equals the standalone synthesis, quantized
  std::ifstream f(files[0], std::ios::binary);
  std::string magic;
  int w, h, maxval;
  f >> magic >> w >> h >> maxval;
  f.get();
  std::vector<unsigned char> px(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  Tensor<float> tile = synthesize(c.codebook, c.bank, 0, 2, 1);  // class 0, code 2, decoder 1
  const int oy = 1 * (16 + 1), ox = 2 * (16 + 1);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const unsigned char want =
          static_cast<unsigned char>(std::lround(std::clamp(tile[y * 16 + x], 0.f, 1.f) * 255.f));
      CHECK(px[(static_cast<std::size_t>(oy + y) * w + ox + x) * 3] == want);
    }
}

TEST_CASE("write_ppm rejects unsupported shapes") {
  TempDir tmp;
  CHECK_THROWS_AS(write_ppm(tmp.path / "bad.ppm", Tensor<float>({2, 4, 4})), Error);
}
