// SPDX-License-Identifier: Apache-2.0
//
// Policy checkpoints: a small binary container for a ParamVector (exact
// doubles, named tensor layout) plus a plain-text export for debugging.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "socfree/policy.hpp"

namespace socfree {

namespace detail {

inline constexpr char kCkptMagic[4] = {'S', 'F', 'P', 'C'};
inline constexpr std::uint32_t kCkptVersion = 1;

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ConfigError("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            const ParamVector& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("checkpoint: cannot open " + path);
  os.write(detail::kCkptMagic, 4);
  detail::write_pod(os, detail::kCkptVersion);
  detail::write_pod(os, static_cast<std::uint32_t>(params.entries().size()));
  for (const auto& e : params.entries()) {
    detail::write_pod(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::write_pod(os, static_cast<std::uint64_t>(e.offset));
    detail::write_pod(os, static_cast<std::uint32_t>(e.rows));
    detail::write_pod(os, static_cast<std::uint32_t>(e.cols));
  }
  detail::write_pod(os, static_cast<std::uint64_t>(params.size()));
  os.write(reinterpret_cast<const char*>(params.data()),
           static_cast<std::streamsize>(params.size() * sizeof(double)));
  if (!os) throw ConfigError("checkpoint: write failed for " + path);
}

// Loads into an already-constructed policy's parameters; the stored layout
// must match the policy's layout exactly (names, shapes, offsets).
inline void load_checkpoint(const std::string& path, ParamVector& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 4) != 0)
    throw ConfigError("checkpoint: bad magic in " + path);
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != detail::kCkptVersion)
    throw ConfigError("checkpoint: unsupported version in " + path);
  const auto n_tensors = detail::read_pod<std::uint32_t>(is);
  if (n_tensors != params.entries().size())
    throw ConfigError("checkpoint: tensor count mismatch (" + path + ")");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const auto name_len = detail::read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto offset = detail::read_pod<std::uint64_t>(is);
    const auto rows = detail::read_pod<std::uint32_t>(is);
    const auto cols = detail::read_pod<std::uint32_t>(is);
    const auto& e = params.entries()[i];
    if (name != e.name || offset != e.offset ||
        rows != static_cast<std::uint32_t>(e.rows) ||
        cols != static_cast<std::uint32_t>(e.cols))
      throw ConfigError("checkpoint: layout mismatch at tensor '" + name +
                        "' (expected '" + e.name + "')");
  }
  const auto total = detail::read_pod<std::uint64_t>(is);
  if (total != params.size())
    throw ConfigError("checkpoint: parameter count mismatch");
  is.read(reinterpret_cast<char*>(params.data()),
          static_cast<std::streamsize>(total * sizeof(double)));
  if (!is) throw ConfigError("checkpoint: truncated parameter data");
}

// Human-readable dump: one line per tensor header, then the values.
inline void export_checkpoint_text(const std::string& path,
                                   const ParamVector& params) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("checkpoint: cannot open " + path);
  os.precision(17);
  for (const auto& e : params.entries()) {
    os << e.name << ' ' << e.rows << ' ' << e.cols << '\n';
    const double* v = params.data() + e.offset;
    for (std::size_t i = 0; i < e.count(); ++i) {
      os << v[i] << (i + 1 == e.count() ? '\n' : ' ');
    }
  }
}

}  // namespace socfree
