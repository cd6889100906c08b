#pragma once

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "lengthlab/nnet/params.hpp"

namespace lengthlab::nnet {

// Layout (all integers and floats little-endian):
//   "LLABCKPT"                       8-byte magic
//   u32 version, u32 model kind
//   u32 #meta,    { u16 name_len, name, i64 value }*
//   u32 #tensors, { u16 name_len, name, u32 ndim, u64 dim*, f64 data* }*
inline constexpr char kCheckpointMagic[8] = {'L', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw CheckpointError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline void put_name(std::ostream& out, const std::string& s) {
  put<std::uint16_t>(out, static_cast<std::uint16_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_name(std::istream& in) {
  const auto n = get<std::uint16_t>(in);
  std::string s(n, '\0');
  if (n && !in.read(s.data(), n)) throw CheckpointError("checkpoint truncated");
  return s;
}

}  // namespace detail

template <class Model>
std::string serialize_checkpoint(const Model& model) {
  std::ostringstream out(std::ios::binary);
  out.write(kCheckpointMagic, 8);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(Model::kKind));
  const auto meta = model.meta();
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    detail::put_name(out, k);
    detail::put<std::int64_t>(out, v);
  }
  const auto& store = model.params();
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(store.slices().size()));
  for (std::size_t i = 0; i < store.slices().size(); ++i) {
    const auto& s = store.slice(i);
    detail::put_name(out, s.name);
    detail::put<std::uint32_t>(out, 2);
    detail::put<std::uint64_t>(out, s.rows);
    detail::put<std::uint64_t>(out, s.cols);
    const double* d = store.data(i);
    for (std::size_t j = 0; j < s.size(); ++j) detail::put<double>(out, d[j]);
  }
  return out.str();
}

template <class Model>
void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path);
  out << serialize_checkpoint(model);
  if (!out) throw CheckpointError("write failed for " + path);
}

template <class Model>
Model deserialize_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError("not a lengthlab checkpoint (bad magic)");
  const auto version = detail::get<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto kind = static_cast<ModelKind>(detail::get<std::uint32_t>(in));
  if (kind != Model::kKind)
    throw CheckpointError(std::string("checkpoint holds a ") + kind_name(kind) + " model, expected " +
                          kind_name(Model::kKind));
  Meta meta;
  const auto n_meta = detail::get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = detail::get_name(in);
    meta.emplace_back(std::move(k), detail::get<std::int64_t>(in));
  }
  Model model = Model::from_meta(meta);
  auto& store = model.params();
  const auto n_tensors = detail::get<std::uint32_t>(in);
  if (n_tensors != store.slices().size()) throw CheckpointError("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < n_tensors; ++i) {
    const auto& s = store.slice(i);
    const auto name = detail::get_name(in);
    if (name != s.name) throw CheckpointError("unexpected tensor '" + name + "', expected '" + s.name + "'");
    if (detail::get<std::uint32_t>(in) != 2) throw CheckpointError("tensor '" + name + "' is not 2-d");
    const auto rows = detail::get<std::uint64_t>(in);
    const auto cols = detail::get<std::uint64_t>(in);
    if (rows != s.rows || cols != s.cols) throw CheckpointError("tensor '" + name + "' has the wrong shape");
    double* d = store.data(i);
    for (std::size_t j = 0; j < s.size(); ++j) d[j] = detail::get<double>(in);
  }
  return model;
}

template <class Model>
Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  return deserialize_checkpoint<Model>(in);
}

}  // namespace lengthlab::nnet
