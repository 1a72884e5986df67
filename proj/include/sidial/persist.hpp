#pragma once

// Binary parameter files and content hashes.
//
// params-<arm>.bin layout (little-endian):
//   "SIDP" | u32 version=1 | u32 count |
//   count x ( u32 name_len | name bytes | u32 rows | u32 cols | rows*cols f64, row-major )

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sidial/autodiff.hpp"
#include "sidial/error.hpp"

namespace sidial::persist {

using ad::Mat;

class Fnv1a64 {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  void update(const Mat& m) {
    const auto r = static_cast<std::uint64_t>(m.rows()), c = static_cast<std::uint64_t>(m.cols());
    update(&r, sizeof r);
    update(&c, sizeof c);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const double v = m(i, j);
        update(&v, sizeof v);
      }
  }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::uint64_t hash_parameters(const std::vector<ad::Parameter*>& params) {
  Fnv1a64 h;
  for (const auto* p : params) {
    h.update(p->name);
    h.update(p->value);
  }
  return h.digest();
}

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw Error("parse", "truncated parameter file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
inline void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int k = 0; k < 8; ++k) os.put(static_cast<char>((bits >> (8 * k)) & 0xFF));
}
inline double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw Error("parse", "truncated parameter file");
  std::uint64_t bits = 0;
  for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(b[k]) << (8 * k);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}
}  // namespace detail

using NamedTensors = std::map<std::string, Mat>;

inline void save_tensors(const std::string& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("io", "cannot write " + path);
  os.write("SIDP", 4);
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(os, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) detail::put_f64(os, m(i, j));
  }
}

inline NamedTensors load_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("io", "cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "SIDP") throw Error("parse", path + " is not a parameter file");
  if (detail::get_u32(is) != 1) throw Error("parse", path + ": unsupported parameter file version");
  const std::uint32_t count = detail::get_u32(is);
  NamedTensors out;
  for (std::uint32_t t = 0; t < count; ++t) {
    std::string name(detail::get_u32(is), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw Error("parse", "truncated name");
    const auto rows = detail::get_u32(is), cols = detail::get_u32(is);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = detail::get_f64(is);
    out.emplace(std::move(name), std::move(m));
  }
  return out;
}

inline NamedTensors collect(const std::vector<ad::Parameter*>& params) {
  NamedTensors t;
  for (const auto* p : params) t[p->name] = p->value;
  return t;
}

inline void assign(const NamedTensors& tensors, const std::vector<ad::Parameter*>& params) {
  for (auto* p : params) {
    auto it = tensors.find(p->name);
    if (it == tensors.end()) throw Error("parse", "parameter file lacks " + p->name);
    if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols())
      throw Error("parse", "shape mismatch for " + p->name);
    p->value = it->second;
  }
}

}  // namespace sidial::persist
