#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "neurocell/errors.hpp"
#include "neurocell/netgraph.hpp"

namespace neurocell {

// NCW1 weight file, all integers little-endian:
//
//   "NCW1" | u32 version | u8 element bytes (4 or 8) | u8 family
//   u32 node count | u32 freeze point
//   per node:   u32 index | u8 kind tag | u32 tensor count
//     per tensor: u32 rank | u32 extent[rank] | u64 payload bytes
//   payloads of every tensor, in node index order, IEEE-754 little-endian
//
// Batch-norm nodes carry four tensors: gamma, beta, running mean, running var.

inline constexpr char kWeightMagic[4] = {'N', 'C', 'W', '1'};
inline constexpr std::uint32_t kWeightFormatVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  template <typename T>
  void real(T v) {
    if constexpr (sizeof(T) == 4) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      u32(bits);
    } else {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      u64(bits);
    }
  }
  void raw(const char* data, std::size_t n) { bytes_.insert(bytes_.end(), data, data + n); }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  void need(std::size_t n, const std::string& what) const {
    if (pos_ + n > bytes_.size()) throw FormatError("weight file truncated while reading " + what);
  }
  std::uint8_t u8(const std::string& what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const std::string& what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  double real(std::size_t width, const std::string& what) {
    if (width == 4) {
      const std::uint32_t bits = u32(what);
      float f;
      std::memcpy(&f, &bits, 4);
      return f;
    }
    const std::uint64_t bits = u64(what);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
std::vector<std::vector<T>*> node_tensors(LayerNode<T>& n) {
  std::vector<std::vector<T>*> out;
  for (Tensor<T>& p : n.params) out.push_back(&p.values());
  if (n.kind == LayerKind::BatchNorm) {
    out.push_back(&n.bn.running_mean);
    out.push_back(&n.bn.running_var);
  }
  return out;
}

template <typename T>
std::vector<Shape> node_shapes(const LayerNode<T>& n) {
  std::vector<Shape> out;
  for (const Tensor<T>& p : n.params) out.push_back(p.shape());
  if (n.kind == LayerKind::BatchNorm) {
    out.push_back({n.bn.running_mean.size()});
    out.push_back({n.bn.running_var.size()});
  }
  return out;
}

}  // namespace detail

/// Serializes parameters, batch-norm statistics, and the freeze point.
template <typename T>
std::vector<std::uint8_t> encode_weights(const NetworkSpec<T>& spec) {
  detail::ByteWriter w;
  w.raw(kWeightMagic, 4);
  w.u32(kWeightFormatVersion);
  w.u8(static_cast<std::uint8_t>(sizeof(T)));
  w.u8(static_cast<std::uint8_t>(spec.family));
  w.u32(static_cast<std::uint32_t>(spec.nodes.size()));
  w.u32(static_cast<std::uint32_t>(spec.freeze_point));
  for (const LayerNode<T>& n : spec.nodes) {
    w.u32(static_cast<std::uint32_t>(n.index));
    w.u8(static_cast<std::uint8_t>(n.kind));
    const std::vector<Shape> shapes = detail::node_shapes(n);
    w.u32(static_cast<std::uint32_t>(shapes.size()));
    for (const Shape& s : shapes) {
      w.u32(static_cast<std::uint32_t>(s.size()));
      for (std::size_t e : s) w.u32(static_cast<std::uint32_t>(e));
      w.u64(static_cast<std::uint64_t>(shape_numel(s) * sizeof(T)));
    }
  }
  for (const LayerNode<T>& n : spec.nodes) {
    LayerNode<T>& mut = const_cast<LayerNode<T>&>(n);  // node_tensors only reads here
    for (const std::vector<T>* values : detail::node_tensors(mut)) {
      for (T v : *values) w.real(v);
    }
  }
  return w.bytes();
}

/// Parses an NCW1 image into a copy of `target`. The target's topology must
/// match node-for-node; any mismatch or truncation throws FormatError and
/// leaves nothing half-loaded.
template <typename T>
NetworkSpec<T> decode_weights(const NetworkSpec<T>& target, const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  r.need(4, "magic");
  for (int i = 0; i < 4; ++i) {
    if (r.u8("magic") != static_cast<std::uint8_t>(kWeightMagic[i])) {
      throw FormatError("not an NCW1 weight file (bad magic)");
    }
  }
  const std::uint32_t version = r.u32("version");
  if (version != kWeightFormatVersion) {
    throw FormatError("unsupported weight format version " + std::to_string(version));
  }
  const std::size_t width = r.u8("element width");
  if (width != 4 && width != 8) throw FormatError("unsupported element width " + std::to_string(width));
  const auto family = r.u8("family");
  if (family != static_cast<std::uint8_t>(target.family)) {
    throw FormatError(std::string("weight file holds a different network family than ") +
                      family_name(target.family));
  }
  const std::uint32_t count = r.u32("node count");
  if (count != target.nodes.size()) {
    throw FormatError("weight file has " + std::to_string(count) + " nodes, network has " +
                      std::to_string(target.nodes.size()));
  }
  const std::uint32_t freeze = r.u32("freeze point");

  std::vector<std::vector<std::uint64_t>> payload_sizes(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "node " + std::to_string(i);
    const std::uint32_t index = r.u32(where + " index");
    if (index != i) throw FormatError(where + ": index field reads " + std::to_string(index));
    const LayerNode<T>& n = target.nodes[i];
    const std::uint8_t kind = r.u8(where + " kind");
    if (kind != static_cast<std::uint8_t>(n.kind)) {
      throw FormatError(where + ": kind tag " + std::to_string(kind) + " but network has " +
                        layer_kind_name(n.kind));
    }
    const std::vector<Shape> expect = detail::node_shapes(n);
    const std::uint32_t n_tensors = r.u32(where + " tensor count");
    if (n_tensors != expect.size()) {
      throw FormatError(where + ": " + std::to_string(n_tensors) + " tensors but network expects " +
                        std::to_string(expect.size()));
    }
    for (std::uint32_t t = 0; t < n_tensors; ++t) {
      const std::uint32_t rank = r.u32(where + " rank");
      if (rank > 8) throw FormatError(where + ": implausible rank " + std::to_string(rank));
      Shape s(rank);
      for (std::uint32_t d = 0; d < rank; ++d) s[d] = r.u32(where + " extent");
      if (s != expect[t]) {
        throw FormatError(where + ": tensor " + std::to_string(t) + " has shape " + shape_str(s) +
                          ", network expects " + shape_str(expect[t]));
      }
      const std::uint64_t len = r.u64(where + " byte length");
      if (len != shape_numel(s) * width) {
        throw FormatError(where + ": byte length " + std::to_string(len) + " inconsistent with shape");
      }
      payload_sizes[i].push_back(len);
    }
  }

  NetworkSpec<T> out = target;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "node " + std::to_string(i) + " payload";
    std::vector<std::vector<T>*> dst = detail::node_tensors(out.nodes[i]);
    for (std::size_t t = 0; t < dst.size(); ++t) {
      r.need(payload_sizes[i][t], where);
      for (T& v : *dst[t]) v = static_cast<T>(r.real(width, where));
    }
  }
  if (!r.at_end()) throw FormatError("weight file has trailing bytes after the last payload");
  const std::vector<std::size_t> legal = out.legal_freeze_points();
  if (std::find(legal.begin(), legal.end(), freeze) == legal.end()) {
    throw FormatError("weight file freeze point " + std::to_string(freeze) + " is not legal");
  }
  set_freeze_point(out, freeze);
  return out;
}

template <typename T>
void save_weights(const NetworkSpec<T>& spec, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = encode_weights(spec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

template <typename T>
NetworkSpec<T> load_weights(const NetworkSpec<T>& target, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_weights(target, bytes);
}

}  // namespace neurocell
