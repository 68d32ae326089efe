#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kfs/nets.hpp"
#include "kfs/ops.hpp"
#include "kfs/tensor.hpp"

namespace kfs {

// Per-class latent codes. codes is C x M x ch x h x w; row c synthesizes
// examples labeled class_ids[c].
template <typename S>
struct LatentCodebook {
  Tensor<S> codes;
  std::vector<int> class_ids;

  int num_classes() const { return codes.dim(0); }
  int codes_per_class() const { return codes.dim(1); }
  Shape code_shape() const { return {codes.dim(2), codes.dim(3), codes.dim(4)}; }
  std::int64_t code_numel() const {
    return static_cast<std::int64_t>(codes.dim(2)) * codes.dim(3) * codes.dim(4);
  }
};

template <typename S>
LatentCodebook<S> make_codebook(int num_classes, int codes_per_class, const DecoderSpec& spec,
                                std::vector<int> class_ids = {}) {
  LatentCodebook<S> cb;
  cb.codes = Tensor<S>({num_classes, codes_per_class, spec.code_channels, spec.code_h, spec.code_w});
  if (class_ids.empty()) {
    cb.class_ids.resize(static_cast<std::size_t>(num_classes));
    for (int c = 0; c < num_classes; ++c) cb.class_ids[static_cast<std::size_t>(c)] = c;
  } else {
    if (static_cast<int>(class_ids.size()) != num_classes)
      throw Error("codebook: class id count does not match class count");
    cb.class_ids = std::move(class_ids);
  }
  return cb;
}

// D decoders sharing one spec, independently parameterized.
template <typename S>
struct DecoderBank {
  std::vector<Decoder<S>> decoders;

  int size() const { return static_cast<int>(decoders.size()); }
  const DecoderSpec& spec() const {
    if (decoders.empty()) throw Error("decoder bank is empty");
    return decoders.front().spec;
  }
};

template <typename S>
DecoderBank<S> make_decoder_bank(const DecoderSpec& spec, int count, std::uint64_t init_seed) {
  if (count < 1) throw Error("decoder bank: need at least one decoder");
  DecoderBank<S> bank;
  for (int d = 0; d < count; ++d)
    bank.decoders.push_back(build_decoder<S>(spec, mix64(init_seed ^ static_cast<std::uint64_t>(d))));
  return bank;
}

template <typename S>
void check_compatible(const LatentCodebook<S>& cb, const DecoderBank<S>& bank) {
  const DecoderSpec& spec = bank.spec();
  if (cb.codes.rank() != 5) throw Error("codebook: codes must be C x M x ch x h x w");
  if (cb.codes.dim(2) != spec.code_channels || cb.codes.dim(3) != spec.code_h ||
      cb.codes.dim(4) != spec.code_w)
    throw Error("codebook code shape " + shape_str(cb.code_shape()) +
                " incompatible with decoder code shape " + std::to_string(spec.code_channels) + "x" +
                std::to_string(spec.code_h) + "x" + std::to_string(spec.code_w));
  if (static_cast<int>(cb.class_ids.size()) != cb.num_classes())
    throw Error("codebook: class id count does not match class count");
}

// ---- differentiable synthesis ----

template <typename S>
struct BoundModel {
  Var<S> codes;  // C x M x ch x h x w
  std::vector<BoundDecoder<S>> decoders;
};

template <typename S>
BoundModel<S> bind_model(Tape<S>& t, const LatentCodebook<S>& cb, const DecoderBank<S>& bank,
                         bool trainable) {
  check_compatible(cb, bank);
  BoundModel<S> bm;
  Tensor<S> codes = cb.codes;
  codes.requires_grad = trainable;
  bm.codes = t.leaf(std::move(codes));
  for (const Decoder<S>& dec : bank.decoders) bm.decoders.push_back(bind_decoder(t, dec, trainable));
  return bm;
}

// all M codes of class c through decoder d: M x out_c x H x W
template <typename S>
Var<S> synthesize_class(Tape<S>& t, const BoundModel<S>& bm, int c, int d) {
  return decode(t, bm.decoders[static_cast<std::size_t>(d)], slice0(bm.codes, c));
}

// single (c, m, d) image as a 1 x out_c x H x W batch
template <typename S>
Var<S> synthesize_one(Tape<S>& t, const BoundModel<S>& bm, int c, int m, int d) {
  const Tensor<S>& codes = bm.codes.value();
  Var<S> code = reshape(slice0(slice0(bm.codes, c), m), {1, codes.dim(2), codes.dim(3), codes.dim(4)});
  return decode(t, bm.decoders[static_cast<std::size_t>(d)], code);
}

// ---- value-only synthesis ----

template <typename S>
Tensor<S> synthesize(const LatentCodebook<S>& cb, const DecoderBank<S>& bank, int c, int m, int d) {
  check_compatible(cb, bank);
  if (c < 0 || c >= cb.num_classes())
    throw Error("synthesize: class index " + std::to_string(c) + " out of range");
  if (m < 0 || m >= cb.codes_per_class())
    throw Error("synthesize: code index " + std::to_string(m) + " out of range");
  if (d < 0 || d >= bank.size())
    throw Error("synthesize: decoder index " + std::to_string(d) + " out of range");
  const DecoderSpec& spec = bank.spec();
  const std::int64_t cn = cb.code_numel();
  Tensor<S> code({1, spec.code_channels, spec.code_h, spec.code_w});
  const std::int64_t off = (static_cast<std::int64_t>(c) * cb.codes_per_class() + m) * cn;
  code.vec() = cb.codes.vec().segment(off, cn);
  Tensor<S> img = decode_value(bank.decoders[static_cast<std::size_t>(d)], code);
  return img.reshaped({spec.out_channels, spec.out_h, spec.out_w});
}

template <typename S>
struct SyntheticDataset {
  Tensor<S> images;  // (C*M*D) x out_c x H x W, (c, m, d)-lexicographic
  std::vector<int> labels;
};

template <typename S>
SyntheticDataset<S> synthesize_all(const LatentCodebook<S>& cb, const DecoderBank<S>& bank) {
  check_compatible(cb, bank);
  const DecoderSpec& spec = bank.spec();
  const int C = cb.num_classes(), M = cb.codes_per_class(), D = bank.size();
  const std::int64_t img_numel = static_cast<std::int64_t>(spec.out_channels) * spec.out_h * spec.out_w;
  SyntheticDataset<S> out;
  out.images = Tensor<S>({C * M * D, spec.out_channels, spec.out_h, spec.out_w});
  out.labels.resize(static_cast<std::size_t>(C) * M * D);
  const std::int64_t cn = cb.code_numel();
  Tensor<S> class_codes({M, spec.code_channels, spec.code_h, spec.code_w});
  std::int64_t row = 0;
  for (int c = 0; c < C; ++c) {
    class_codes.vec() = cb.codes.vec().segment(static_cast<std::int64_t>(c) * M * cn, M * cn);
    // decode the class batch once per decoder, then interleave into (c,m,d) order
    std::vector<Tensor<S>> per_dec;
    per_dec.reserve(static_cast<std::size_t>(D));
    for (int d = 0; d < D; ++d)
      per_dec.push_back(decode_value(bank.decoders[static_cast<std::size_t>(d)], class_codes));
    for (int m = 0; m < M; ++m)
      for (int d = 0; d < D; ++d, ++row) {
        out.images.vec().segment(row * img_numel, img_numel) =
            per_dec[static_cast<std::size_t>(d)].vec().segment(static_cast<std::int64_t>(m) * img_numel,
                                                               img_numel);
        out.labels[static_cast<std::size_t>(row)] = cb.class_ids[static_cast<std::size_t>(c)];
      }
  }
  return out;
}

// ---- parameter budget accounting ----

struct BudgetReport {
  double per_class_code_params = 0;
  double per_class_decoder_share = 0;
  double total_per_class = 0;
  double budget = 0;  // images/class x image numel
  double overparam_pct = 0;
};

inline BudgetReport budget_report(int num_classes, int codes_per_class, std::int64_t code_numel,
                                  int num_decoders, const DecoderSpec& spec, int images_per_class,
                                  std::int64_t image_numel) {
  if (images_per_class < 1 || image_numel < 1)
    throw Error("budget_report: images/class and image size must be positive");
  BudgetReport r;
  r.per_class_code_params = static_cast<double>(codes_per_class) * static_cast<double>(code_numel);
  r.per_class_decoder_share =
      static_cast<double>(num_decoders) * param_count(spec) / static_cast<double>(num_classes);
  r.total_per_class = r.per_class_code_params + r.per_class_decoder_share;
  r.budget = static_cast<double>(images_per_class) * static_cast<double>(image_numel);
  r.overparam_pct = (r.total_per_class - r.budget) / r.budget * 100.0;
  return r;
}

template <typename S>
BudgetReport budget_report(const LatentCodebook<S>& cb, const DecoderBank<S>& bank,
                           int images_per_class, const Shape& image_shape) {
  check_compatible(cb, bank);
  return budget_report(cb.num_classes(), cb.codes_per_class(), cb.code_numel(), bank.size(),
                       bank.spec(), images_per_class, numel(image_shape));
}

// Reference settings for the published over-parameterization table, with the
// percentage each setting claims. Three rows disagree with the accounting
// formula; we report both numbers rather than reverse-engineering them.
struct BudgetReference {
  std::string setting;
  int num_classes;
  int images_per_class;
  Shape code_shape;
  int codes_per_class;
  DecoderKind kind;
  int num_decoders;
  Shape image_shape;
  double reference_pct;
};

inline std::vector<BudgetReference> budget_reference_settings() {
  return {
      {"svhn/ipc1", 10, 1, {12, 4, 4}, 13, DecoderKind::kLowR, 8, {3, 32, 32}, 0.47},
      {"svhn/ipc10", 10, 10, {12, 4, 4}, 160, DecoderKind::kLowR, 12, {3, 32, 32}, 2.88},
      {"svhn/ipc50", 10, 50, {12, 8, 8}, 200, DecoderKind::kHighR, 16, {3, 32, 32}, 0.88},
      {"cifar10/ipc1", 10, 1, {12, 4, 4}, 13, DecoderKind::kLowR, 8, {3, 32, 32}, 0.47},
      {"cifar10/ipc10", 10, 10, {12, 4, 4}, 160, DecoderKind::kLowR, 12, {3, 32, 32}, 2.88},
      {"cifar10/ipc50", 10, 50, {12, 8, 8}, 200, DecoderKind::kHighR, 16, {3, 32, 32}, 0.88},
      {"cifar100/ipc1", 100, 1, {12, 4, 4}, 16, DecoderKind::kLowR, 8, {3, 32, 32}, 1.92},
      {"cifar100/ipc10", 100, 10, {12, 4, 4}, 160, DecoderKind::kLowR, 12, {3, 32, 32}, 0.29},
      {"tinyimagenet/ipc1", 200, 1, {12, 8, 8}, 16, DecoderKind::kLowR, 8, {3, 64, 64}, 0.24},
      {"tinyimagenet/ipc10", 200, 10, {12, 16, 16}, 64, DecoderKind::kHighR, 16, {3, 64, 64}, 0.04},
  };
}

struct BudgetReferenceRow {
  std::string setting;
  double computed_pct;
  double reference_pct;
  bool consistent;  // |computed - reference| <= 0.01 percentage points
};

inline std::vector<BudgetReferenceRow> budget_reference_report() {
  std::vector<BudgetReferenceRow> rows;
  for (const BudgetReference& s : budget_reference_settings()) {
    DecoderSpec spec = decoder_spec_for(s.kind, s.image_shape[0], s.image_shape[1], s.image_shape[2]);
    BudgetReport r = budget_report(s.num_classes, s.codes_per_class, numel(s.code_shape),
                                   s.num_decoders, spec, s.images_per_class, numel(s.image_shape));
    rows.push_back({s.setting, r.overparam_pct, s.reference_pct,
                    std::abs(r.overparam_pct - s.reference_pct) <= 0.01});
  }
  return rows;
}

}  // namespace kfs
