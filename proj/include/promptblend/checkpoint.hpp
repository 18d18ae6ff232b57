#pragma once

// Binary tensor container.
//
//   "PBLD"  u32 version
//   repeated: u32 name_len (>0), name, u8 dtype (0 = f64), u32 rank, u32 dims[rank],
//             little-endian payload
//   u32 0   end-of-records marker
//   u32 text_len, UTF-8 text block (config, vocab, provenance)
//
// All integers are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "promptblend/error.hpp"
#include "promptblend/tensor.hpp"

namespace promptblend {

inline constexpr char kCheckpointMagic[4] = {'P', 'B', 'L', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::string text;

  const Tensor& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) {
        return t;
      }
    }
    throw ValidationError("checkpoint has no tensor named " + name);
  }
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) {
    b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  }
  out.write(b, 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) {
    b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  }
  out.write(b, 8);
}

inline void read_exact(std::istream& in, char* dst, std::size_t n, const char* what) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw ValidationError(std::string("truncated checkpoint while reading ") + what);
  }
}

inline std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  read_exact(in, reinterpret_cast<char*>(b), 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& in, const char* what) {
  unsigned char b[8];
  read_exact(in, reinterpret_cast<char*>(b), 8, what);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) {
    v = (v << 8) | b[i];
  }
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kCheckpointMagic, 4);
  detail::put_u32(out, ckpt.version);
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.empty()) {
      throw ValidationError("checkpoint tensor names must be non-empty");
    }
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    out.put(0);  // dtype f64
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) {
      detail::put_u32(out, static_cast<std::uint32_t>(d));
    }
    for (double v : t.data()) {
      detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  detail::put_u32(out, 0);
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.text.size()));
  out.write(ckpt.text.data(), static_cast<std::streamsize>(ckpt.text.size()));
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[4];
  detail::read_exact(in, magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw ValidationError("not a PBLD checkpoint (bad magic)");
  }
  Checkpoint ckpt;
  ckpt.version = detail::get_u32(in, "version");
  if (ckpt.version != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version " + std::to_string(ckpt.version));
  }
  while (true) {
    const std::uint32_t name_len = detail::get_u32(in, "record header");
    if (name_len == 0) {
      break;
    }
    std::string name(name_len, '\0');
    detail::read_exact(in, name.data(), name_len, "tensor name");
    char dtype = 0;
    detail::read_exact(in, &dtype, 1, "dtype");
    if (dtype != 0) {
      throw ValidationError("tensor " + name + ": unsupported dtype code " +
                            std::to_string(static_cast<int>(dtype)));
    }
    const std::uint32_t rank = detail::get_u32(in, "rank");
    if (rank == 0 || rank > 8) {
      throw ValidationError("tensor " + name + ": implausible rank " + std::to_string(rank));
    }
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(detail::get_u32(in, "dims"));
    }
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) {
      v = std::bit_cast<double>(detail::get_u64(in, "payload"));
    }
    ckpt.tensors.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  const std::uint32_t text_len = detail::get_u32(in, "text length");
  ckpt.text.assign(text_len, '\0');
  detail::read_exact(in, ckpt.text.data(), text_len, "text block");
  return ckpt;
}

inline std::string checkpoint_bytes(const Checkpoint& ckpt) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, ckpt);
  return os.str();
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write checkpoint " + path);
  }
  write_checkpoint(out, ckpt);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ValidationError("cannot open checkpoint " + path);
  }
  return read_checkpoint(in);
}

/// FNV-1a over raw bytes; used for parameter and corpus fingerprints.
class Fnv1a {
 public:
  void update(const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ = (hash_ ^ p[i]) * 0x100000001B3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  void update(std::span<const double> values) {
    for (double v : values) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      update(&bits, sizeof bits);
    }
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xCBF29CE484222325ULL;
};

}  // namespace promptblend
