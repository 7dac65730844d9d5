#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "geomamba/nn.hpp"
#include "geomamba/png_io.hpp"

namespace geomamba::ckpt {

inline constexpr char kMagic[8] = {'G', 'E', 'O', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

struct Array {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

/// Named f64 arrays plus a JSON metadata block (run config text, progress counters, rng state).
///
/// Layout (little-endian): magic[8], u32 version, u64 meta length, meta bytes,
/// u64 array count, then per array: u32 name length, name, u32 rank, u64 dims[rank], f64 data.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Array> arrays;

  const Array* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

namespace detail {

template <class T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  std::string path;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw IoError("checkpoint '" + path + "' is truncated");
  }
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof v);
    pos += sizeof v;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline std::string serialize(const Checkpoint& c) {
  std::string out(kMagic, sizeof kMagic);
  detail::put(out, kVersion);
  const std::string meta = c.meta.dump();
  detail::put(out, static_cast<std::uint64_t>(meta.size()));
  out += meta;
  detail::put(out, static_cast<std::uint64_t>(c.arrays.size()));
  for (const auto& a : c.arrays) {
    if (a.data.size() != numel(a.shape)) throw std::invalid_argument("checkpoint array '" + a.name + "' has wrong length");
    detail::put(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    detail::put(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) detail::put(out, static_cast<std::uint64_t>(d));
    out.append(reinterpret_cast<const char*>(a.data.data()), a.data.size() * sizeof(double));
  }
  return out;
}

inline Checkpoint deserialize(const std::string& buf, const std::string& path = "<memory>") {
  detail::Reader r{buf, 0, path};
  if (r.bytes(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) throw IoError("'" + path + "' is not a checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion)
    throw IoError("checkpoint '" + path + "' has unsupported version " + std::to_string(version));
  Checkpoint c;
  try {
    c.meta = nlohmann::json::parse(r.bytes(r.get<std::uint64_t>()));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint '" + path + "' metadata: " + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    Array a;
    a.name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) a.shape.push_back(r.get<std::uint64_t>());
    const std::size_t n = numel(a.shape);
    r.need(n * sizeof(double));
    a.data.resize(n);
    std::memcpy(a.data.data(), buf.data() + r.pos, n * sizeof(double));
    r.pos += n * sizeof(double);
    c.arrays.push_back(std::move(a));
  }
  if (r.pos != buf.size()) throw IoError("checkpoint '" + path + "' has trailing bytes");
  return c;
}

/// FNV-1a over the serialized bytes, as 16 hex digits.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : bytes) h = (h ^ ch) * 1099511628211ull;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Writes the checkpoint and returns its hash.
inline std::string save(const std::string& path, const Checkpoint& c) {
  const std::string bytes = serialize(c);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint '" + path + "'");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move checkpoint into place at '" + path + "'");
  return fnv1a_hex(bytes);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline Checkpoint load(const std::string& path) { return deserialize(read_file(path), path); }

inline std::string file_hash(const std::string& path) { return fnv1a_hex(read_file(path)); }

/// Appends every parameter and buffer of the store, keyed by its stable name.
inline void add_params(Checkpoint& c, const nn::ParamStore& ps, const std::string& prefix = "") {
  for (const auto& e : ps.entries()) {
    const auto d = e.tensor.data();
    c.arrays.push_back({prefix + e.name, e.tensor.shape(), {d.begin(), d.end()}});
  }
}

/// Copies arrays into the store; every entry must be present with a matching shape.
inline void load_params(const Checkpoint& c, nn::ParamStore& ps, const std::string& prefix = "") {
  for (auto& e : ps.entries()) {
    const Array* a = c.find(prefix + e.name);
    if (!a) throw IoError("checkpoint lacks parameter '" + prefix + e.name + "'");
    if (a->shape != e.tensor.shape())
      throw IoError("checkpoint parameter '" + e.name + "' has shape " + shape_str(a->shape) + ", model expects " +
                    shape_str(e.tensor.shape()));
    auto dst = e.tensor.mutable_data();
    std::copy(a->data.begin(), a->data.end(), dst.begin());
  }
}

}  // namespace geomamba::ckpt
