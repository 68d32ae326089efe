#include "kfs/cache.hpp"

#include <cstring>
#include <fstream>
#include <iostream>
#include <thread>

#include "kfs/matching.hpp"

namespace kfs {

namespace {

constexpr char kMagic[4] = {'K', 'F', 'S', 'M'};

template <typename T>
bool read_le(std::istream& in, T* out, std::size_t count = 1) {
  in.read(reinterpret_cast<char*>(out), static_cast<std::streamsize>(sizeof(T) * count));
  return static_cast<bool>(in);
}

template <typename T>
void write_le(std::ostream& out, const T* data, std::size_t count = 1) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(sizeof(T) * count));
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

EmbeddingMeanCache::EmbeddingMeanCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::filesystem::path EmbeddingMeanCache::entry_path(const MeanCacheKey& key) const {
  return dir_ / ("kfsm_" + hex(key.dataset_hash) + "_" + hex(key.cfg_digest) + "_" + hex(key.seed) +
                 ".bin");
}

std::optional<MeanEntry> EmbeddingMeanCache::load(const MeanCacheKey& key) const {
  const std::filesystem::path p = entry_path(key);
  std::ifstream f(p, std::ios::binary);
  if (!f) return std::nullopt;
  auto corrupt = [&p](const char* why) -> std::optional<MeanEntry> {
    std::cerr << "warning: corrupt mean-cache entry " << p.string() << " (" << why
              << "); recomputing\n";
    return std::nullopt;
  };
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) return corrupt("bad magic");
  std::uint64_t hdr[3];
  if (!read_le(f, hdr, 3)) return corrupt("short header");
  if (hdr[0] != key.dataset_hash || hdr[1] != key.cfg_digest || hdr[2] != key.seed)
    return corrupt("key mismatch");
  std::uint32_t c = 0, e = 0;
  if (!read_le(f, &c) || !read_le(f, &e) || c == 0 || e == 0) return corrupt("bad dims");
  MeanEntry entry;
  std::vector<std::uint32_t> n(c);
  if (!read_le(f, n.data(), c)) return corrupt("short class counts");
  entry.n_per_class.assign(n.begin(), n.end());
  entry.means = Tensor<float>({static_cast<int>(c), static_cast<int>(e)});
  if (!read_le(f, entry.means.data(), static_cast<std::size_t>(entry.means.size())))
    return corrupt("short payload");
  char extra;
  if (f.read(&extra, 1)) return corrupt("trailing bytes");
  return entry;
}

void EmbeddingMeanCache::store(const MeanCacheKey& key, const MeanEntry& entry) const {
  const std::filesystem::path p = entry_path(key);
  const std::filesystem::path tmp = p.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write cache entry " + tmp.string());
    f.write(kMagic, 4);
    const std::uint64_t hdr[3] = {key.dataset_hash, key.cfg_digest, key.seed};
    write_le(f, hdr, 3);
    const std::uint32_t c = static_cast<std::uint32_t>(entry.means.dim(0));
    const std::uint32_t e = static_cast<std::uint32_t>(entry.means.dim(1));
    write_le(f, &c);
    write_le(f, &e);
    std::vector<std::uint32_t> n(entry.n_per_class.begin(), entry.n_per_class.end());
    write_le(f, n.data(), n.size());
    write_le(f, entry.means.data(), static_cast<std::size_t>(entry.means.size()));
    if (!f) throw Error("failed writing cache entry " + tmp.string());
  }
  std::filesystem::rename(tmp, p);
}

Tensor<float> compute_class_means(const Dataset& ds, const FeatureNet<float>& g,
                                  const ChannelStats<float>& stats, int threads) {
  const int C = ds.num_classes();
  const int E = g.embed_dim();
  Tensor<float> means({C, E});

  auto run_class = [&](int c) {
    const std::vector<int>& idx = ds.class_indices(c);
    if (idx.empty()) throw Error("compute_class_means: class " + std::to_string(c) + " has no examples");
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(E);
    constexpr int kBatch = 128;
    for (std::size_t at = 0; at < idx.size(); at += kBatch) {
      const std::size_t len = std::min<std::size_t>(kBatch, idx.size() - at);
      Tensor<float> batch = ds.gather(std::span<const int>(idx.data() + at, len));
      Tensor<float> emb = g.embed_value(standardize(batch, stats));
      for (std::size_t i = 0; i < len; ++i)
        acc += emb.vec().segment(static_cast<std::int64_t>(i) * E, E).cast<double>();
    }
    means.vec().segment(static_cast<std::int64_t>(c) * E, E) =
        (acc / static_cast<double>(idx.size())).cast<float>();
  };

  threads = std::max(1, std::min(threads, C));
  if (threads <= 1) {
    for (int c = 0; c < C; ++c) run_class(c);
  } else {
    std::vector<std::thread> pool;
    for (int s = 0; s < threads; ++s)
      pool.emplace_back([&, s] {
        for (int c = s; c < C; c += threads) run_class(c);
      });
    for (std::thread& th : pool) th.join();
  }
  return means;
}

MeanCacheKey make_mean_key(const Dataset& ds, const FeatureNetConfig& cfg,
                           const ChannelStats<float>& stats, std::uint64_t seed) {
  return {ds.content_hash(), config_digest(cfg) ^ stats_digest(stats), seed};
}

MeanEntry compute_or_load_means(const Dataset& ds, const FeatureNetConfig& cfg,
                                const ChannelStats<float>& stats, std::uint64_t seed,
                                const EmbeddingMeanCache* cache, int threads) {
  const MeanCacheKey key = make_mean_key(ds, cfg, stats, seed);
  if (cache) {
    if (std::optional<MeanEntry> hit = cache->load(key)) return std::move(*hit);
  }
  FeatureNetConfig seeded = cfg;
  seeded.init_seed = seed;
  MeanEntry entry;
  entry.means = compute_class_means(ds, build_feature_net<float>(seeded), stats, threads);
  entry.n_per_class.resize(static_cast<std::size_t>(ds.num_classes()));
  for (int c = 0; c < ds.num_classes(); ++c)
    entry.n_per_class[static_cast<std::size_t>(c)] = static_cast<int>(ds.class_indices(c).size());
  if (cache) cache->store(key, entry);
  return entry;
}

}  // namespace kfs
