#pragma once

#include <cstring>
#include <fstream>
#include <unordered_map>

#include "dsain/tensor.hpp"

namespace dsain {

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(os, b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(os, b, 8);
}

inline void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

inline void get_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw std::runtime_error(std::string("checkpoint: truncated while reading ") + what);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  get_bytes(is, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
  unsigned char b[8];
  get_bytes(is, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is, const char* what) {
  std::uint64_t bits = get_u64(is, what);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace detail

/// Every trainable array of the network, addressable by a stable string path.
/// Iteration follows insertion order, which fixes the checkpoint layout and
/// the optimizer's update order.
class ModelParams {
 public:
  static constexpr const char* kCheckpointMagic = "DSAINCKPT1";

  Tensor& add(const std::string& name, Tensor t) {
    require(index_.find(name) == index_.end(), "ModelParams: duplicate name " + name);
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), "ModelParams: unknown name " + name);
    return entries_[it->second].second;
  }

  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "ModelParams: unknown name " + name);
    return entries_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }

  std::int64_t total_elements() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

  double l2_norm() const {
    double s = 0.0;
    for (const auto& [name, t] : entries_)
      for (double v : t.data()) s += v * v;
    return std::sqrt(s);
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    detail::put_bytes(os, kCheckpointMagic, std::strlen(kCheckpointMagic));
    detail::put_u64(os, entries_.size());
    for (const auto& [name, t] : entries_) {
      detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
      detail::put_bytes(os, name.data(), name.size());
      detail::put_u32(os, static_cast<std::uint32_t>(t.ndim()));
      for (auto d : t.shape()) detail::put_u64(os, static_cast<std::uint64_t>(d));
      for (double v : t.data()) detail::put_f64(os, v);
    }
    if (!os) throw std::runtime_error("checkpoint: write failure on " + path);
  }

  static ModelParams load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[16] = {0};
    std::size_t magic_len = std::strlen(kCheckpointMagic);
    detail::get_bytes(is, magic, magic_len, "magic");
    if (std::string(magic, magic_len) != kCheckpointMagic)
      throw std::runtime_error("checkpoint: bad magic in " + path);
    std::uint64_t count = detail::get_u64(is, "record count");
    ModelParams params;
    for (std::uint64_t r = 0; r < count; ++r) {
      std::uint32_t name_len = detail::get_u32(is, "name length");
      std::string name(name_len, '\0');
      detail::get_bytes(is, name.data(), name_len, "name");
      std::uint32_t ndim = detail::get_u32(is, "rank");
      Shape shape(ndim);
      for (auto& d : shape) d = static_cast<std::int64_t>(detail::get_u64(is, "extent"));
      std::vector<double> data(static_cast<std::size_t>(numel(shape)));
      for (auto& v : data) v = detail::get_f64(is, "payload");
      params.add(name, Tensor(std::move(shape), std::move(data)));
    }
    return params;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace dsain
