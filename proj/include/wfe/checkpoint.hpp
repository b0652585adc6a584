#pragma once

// Binary checkpoint format, all integers and floats little-endian:
//
//   magic       4 bytes  "WFE1"
//   version     u32      = 1
//   model       u32 emb_dim, u32 hidden, u32 src_vocab, u32 tgt_vocab, u32 layers,
//               f64 dropout, u8 with_wfe, u8 wfe_bias
//   wfe loss    f64 epsilon, u32 b, f64 c1, f64 c2
//   count       u32
//   entries     u32 name_len, name bytes (UTF-8), u8 dtype (0 = f64, 1 = f32),
//               u32 rank, u32 dims[rank], row-major payload

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "wfe/errors.hpp"
#include "wfe/model.hpp"
#include "wfe/wfe.hpp"

namespace wfe {

inline constexpr char kCheckpointMagic[4] = {'W', 'F', 'E', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f64 = 0, f32 = 1 };

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::f64;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  ModelConfig model;
  WfeLossConfig loss;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    out_.append(c, n);
  }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::size_t offset() const { return pos_; }

  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
    }
  }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto v = data_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Checkpoint make_checkpoint(const Seq2Seq& model, const WfeLossConfig& loss,
                                  DType dtype = DType::f64) {
  Checkpoint ck;
  ck.model = model.config();
  ck.loss = loss;
  for (const auto& p : model.parameters()) {
    CheckpointEntry e{p.name, dtype, p.tensor.shape(), p.tensor.to_vector()};
    if (dtype == DType::f32)
      for (auto& v : e.values) v = static_cast<double>(static_cast<float>(v));
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.model.emb_dim));
  w.u32(static_cast<std::uint32_t>(ck.model.hidden));
  w.u32(static_cast<std::uint32_t>(ck.model.src_vocab));
  w.u32(static_cast<std::uint32_t>(ck.model.tgt_vocab));
  w.u32(static_cast<std::uint32_t>(ck.model.layers));
  w.f64(ck.model.dropout);
  w.u8(ck.model.with_wfe ? 1 : 0);
  w.u8(ck.model.wfe_bias ? 1 : 0);
  w.f64(ck.loss.epsilon);
  w.u32(static_cast<std::uint32_t>(ck.loss.b));
  w.f64(ck.loss.c1);
  w.f64(ck.loss.c2);
  w.u32(static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& e : ck.entries) {
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.u8(static_cast<std::uint8_t>(e.dtype));
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : e.values) {
      if (e.dtype == DType::f32) {
        w.f32(static_cast<float>(v));
      } else {
        w.f64(v);
      }
    }
  }
  return w.take();
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  const auto magic = r.bytes(4, "magic");
  if (magic != std::string_view(kCheckpointMagic, 4)) {
    throw FormatError("not a checkpoint: bad magic", 0);
  }
  const std::size_t version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  Checkpoint ck;
  ck.model.emb_dim = r.u32("model config");
  ck.model.hidden = r.u32("model config");
  ck.model.src_vocab = r.u32("model config");
  ck.model.tgt_vocab = r.u32("model config");
  ck.model.layers = r.u32("model config");
  ck.model.dropout = r.f64("model config");
  ck.model.with_wfe = r.u8("model config") != 0;
  ck.model.wfe_bias = r.u8("model config") != 0;
  ck.loss.epsilon = r.f64("loss config");
  ck.loss.b = static_cast<int>(r.u32("loss config"));
  ck.loss.c1 = r.f64("loss config");
  ck.loss.c2 = r.f64("loss config");
  const auto count = r.u32("entry count");
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const std::size_t entry_at = r.offset();
    const auto len = r.u32("entry name length");
    e.name = std::string(r.bytes(len, "entry name"));
    if (!names.insert(e.name).second) {
      throw FormatError("duplicate checkpoint entry " + e.name, entry_at);
    }
    const std::size_t dtype_at = r.offset();
    const auto dtype = r.u8("dtype");
    if (dtype > 1) throw FormatError("unknown dtype code " + std::to_string(dtype), dtype_at);
    e.dtype = static_cast<DType>(dtype);
    const auto rank = r.u32("rank");
    if (rank > 8) throw FormatError("implausible rank " + std::to_string(rank), r.offset() - 4);
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(r.u32("dims"));
    const std::size_t n = shape_numel(e.shape);
    r.need(n * (e.dtype == DType::f32 ? 4 : 8), "tensor payload");
    e.values.resize(n);
    for (auto& v : e.values) {
      v = e.dtype == DType::f32 ? static_cast<double>(r.f32("tensor payload")) : r.f64("tensor payload");
    }
    ck.entries.push_back(std::move(e));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last checkpoint entry", r.offset());
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

/// Copies checkpoint values into `model`. Fails on the first parameter whose
/// shape differs, or if any parameter is missing or left over.
inline void assign_parameters(Seq2Seq& model, const Checkpoint& ck) {
  const auto params = model.parameters();
  for (const auto& p : params) {
    const CheckpointEntry* e = ck.find(p.name);
    if (!e) throw StateError("checkpoint lacks parameter " + p.name);
    if (e->shape != p.tensor.shape()) {
      throw DimensionError("checkpoint tensor " + p.name + " has shape " + shape_str(e->shape) +
                           ", model expects " + shape_str(p.tensor.shape()));
    }
  }
  if (ck.entries.size() != params.size()) {
    for (const auto& e : ck.entries) {
      const bool known = std::any_of(params.begin(), params.end(),
                                     [&](const NamedTensor& p) { return p.name == e.name; });
      if (!known) throw StateError("checkpoint has unexpected parameter " + e.name);
    }
  }
  for (auto p : params) {
    const auto& values = ck.find(p.name)->values;
    std::copy(values.begin(), values.end(), p.tensor.mutable_data().begin());
  }
}

inline Seq2Seq model_from_checkpoint(const Checkpoint& ck) {
  Seq2Seq model = Seq2Seq::zeros(ck.model);
  assign_parameters(model, ck);
  return model;
}

}  // namespace wfe
