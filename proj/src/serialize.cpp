#include "kfs/serialize.hpp"

#include <cstring>
#include <fstream>

namespace kfs {

namespace {

template <typename T>
void write_le(std::ostream& out, const T* data, std::size_t count = 1) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(sizeof(T) * count));
}

template <typename T>
void read_le(std::istream& in, T* out, std::size_t count = 1) {
  in.read(reinterpret_cast<char*>(out), static_cast<std::streamsize>(sizeof(T) * count));
}

void write_u32(std::ostream& out, std::uint32_t v) { write_le(out, &v); }

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  read_le(in, &v);
  return v;
}

}  // namespace

void save_kfs1(const std::filesystem::path& path, const CondensedContainer& c) {
  check_compatible(c.codebook, c.bank);
  const DecoderSpec& spec = c.bank.spec();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write container " + path.string());
  f.write("KFS1", 4);
  write_u32(f, 1);  // version
  write_u32(f, static_cast<std::uint32_t>(c.codebook.num_classes()));
  write_u32(f, static_cast<std::uint32_t>(c.codebook.codes_per_class()));
  write_u32(f, static_cast<std::uint32_t>(c.bank.size()));
  write_u32(f, static_cast<std::uint32_t>(spec.code_channels));
  write_u32(f, static_cast<std::uint32_t>(spec.code_h));
  write_u32(f, static_cast<std::uint32_t>(spec.code_w));
  const std::uint8_t kind = spec.kind == DecoderKind::kLowR ? 0 : 1;
  const std::uint8_t dtype = 0;  // f32
  const std::uint16_t reserved = 0;
  write_le(f, &kind);
  write_le(f, &dtype);
  write_le(f, &reserved);
  write_u32(f, static_cast<std::uint32_t>(spec.out_channels));
  write_u32(f, static_cast<std::uint32_t>(spec.out_h));
  write_u32(f, static_cast<std::uint32_t>(spec.out_w));
  if (static_cast<int>(c.stats.mean.size()) != spec.out_channels)
    throw Error("container: normalization stats do not match output channels");
  write_le(f, c.stats.mean.data(), c.stats.mean.size());
  write_le(f, c.stats.stdev.data(), c.stats.stdev.size());
  write_le(f, c.codebook.codes.data(), static_cast<std::size_t>(c.codebook.codes.size()));
  for (const Decoder<float>& dec : c.bank.decoders)
    for (std::size_t l = 0; l < dec.w.size(); ++l) {
      write_le(f, dec.w[l].data(), static_cast<std::size_t>(dec.w[l].size()));
      write_le(f, dec.b[l].data(), static_cast<std::size_t>(dec.b[l].size()));
    }
  std::vector<std::int32_t> ids(c.codebook.class_ids.begin(), c.codebook.class_ids.end());
  write_le(f, ids.data(), ids.size());
  if (!f) throw Error("failed writing container " + path.string());
}

CondensedContainer load_kfs1(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open container " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "KFS1", 4) != 0) throw Error("bad container magic in " + path.string());
  const std::uint32_t version = read_u32(f);
  if (version != 1) throw Error("unsupported container version " + std::to_string(version));
  const int C = static_cast<int>(read_u32(f));
  const int M = static_cast<int>(read_u32(f));
  const int D = static_cast<int>(read_u32(f));
  DecoderSpec spec;
  spec.code_channels = static_cast<int>(read_u32(f));
  spec.code_h = static_cast<int>(read_u32(f));
  spec.code_w = static_cast<int>(read_u32(f));
  std::uint8_t kind = 0, dtype = 0;
  std::uint16_t reserved = 0;
  read_le(f, &kind);
  read_le(f, &dtype);
  read_le(f, &reserved);
  if (dtype != 0) throw Error("unsupported container dtype " + std::to_string(dtype));
  spec.kind = kind == 0 ? DecoderKind::kLowR : DecoderKind::kHighR;
  spec.out_channels = static_cast<int>(read_u32(f));
  spec.out_h = static_cast<int>(read_u32(f));
  spec.out_w = static_cast<int>(read_u32(f));
  validate(spec);

  CondensedContainer c;
  c.stats.mean.resize(static_cast<std::size_t>(spec.out_channels));
  c.stats.stdev.resize(static_cast<std::size_t>(spec.out_channels));
  read_le(f, c.stats.mean.data(), c.stats.mean.size());
  read_le(f, c.stats.stdev.data(), c.stats.stdev.size());

  c.codebook.codes = Tensor<float>({C, M, spec.code_channels, spec.code_h, spec.code_w});
  read_le(f, c.codebook.codes.data(), static_cast<std::size_t>(c.codebook.codes.size()));

  for (int d = 0; d < D; ++d) {
    Decoder<float> dec;
    dec.spec = spec;
    for (auto [ci, co] : layer_channels(spec)) {
      Tensor<float> w({ci, co, 2, 2});
      Tensor<float> b({co});
      read_le(f, w.data(), static_cast<std::size_t>(w.size()));
      read_le(f, b.data(), static_cast<std::size_t>(b.size()));
      dec.w.push_back(std::move(w));
      dec.b.push_back(std::move(b));
    }
    c.bank.decoders.push_back(std::move(dec));
  }

  std::vector<std::int32_t> ids(static_cast<std::size_t>(C));
  read_le(f, ids.data(), ids.size());
  if (!f) throw Error("truncated container " + path.string());
  c.codebook.class_ids.assign(ids.begin(), ids.end());
  check_compatible(c.codebook, c.bank);
  return c;
}

namespace {

void write_tensor(std::ostream& f, const Tensor<float>& t) {
  write_u32(f, static_cast<std::uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) write_u32(f, static_cast<std::uint32_t>(t.dim(i)));
  write_le(f, t.data(), static_cast<std::size_t>(t.size()));
}

Tensor<float> read_tensor(std::istream& f) {
  const int rank = static_cast<int>(read_u32(f));
  Shape shape(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) shape[static_cast<std::size_t>(i)] = static_cast<int>(read_u32(f));
  Tensor<float> t(shape);
  read_le(f, t.data(), static_cast<std::size_t>(t.size()));
  return t;
}

}  // namespace

void save_opt_state(const std::filesystem::path& path, const AdamStateBlob& blob) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write optimizer state " + path.string());
  f.write("KFSO", 4);
  const std::uint64_t step = static_cast<std::uint64_t>(blob.step);
  write_le(f, &step);
  write_u32(f, static_cast<std::uint32_t>(blob.m.size()));
  for (std::size_t i = 0; i < blob.m.size(); ++i) {
    write_tensor(f, blob.m[i]);
    write_tensor(f, blob.v[i]);
  }
  if (!f) throw Error("failed writing optimizer state " + path.string());
}

AdamStateBlob load_opt_state(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open optimizer state " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "KFSO", 4) != 0)
    throw Error("bad optimizer state magic in " + path.string());
  AdamStateBlob blob;
  std::uint64_t step = 0;
  read_le(f, &step);
  blob.step = static_cast<std::int64_t>(step);
  const std::uint32_t count = read_u32(f);
  for (std::uint32_t i = 0; i < count; ++i) {
    blob.m.push_back(read_tensor(f));
    blob.v.push_back(read_tensor(f));
  }
  if (!f) throw Error("truncated optimizer state " + path.string());
  return blob;
}

void save_checkpoint(const std::filesystem::path& prefix, const CondenseCheckpoint& ck) {
  save_kfs1(prefix.string() + ".kfs1", ck.model);
  AdamStateBlob blob = ck.opt;
  blob.step = ck.step;
  save_opt_state(prefix.string() + ".opt", blob);
}

CondenseCheckpoint load_checkpoint(const std::filesystem::path& prefix) {
  CondenseCheckpoint ck;
  ck.model = load_kfs1(prefix.string() + ".kfs1");
  ck.opt = load_opt_state(prefix.string() + ".opt");
  ck.step = static_cast<int>(ck.opt.step);
  return ck;
}

}  // namespace kfs
