#include "prat/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace prat::io {
namespace {

void fail_at(std::istream& is, const std::string& what) {
  const auto off = is.tellg();
  throw FormatError(what + " at byte offset " +
                    (off < 0 ? std::string("<unknown>") : std::to_string(off)));
}

}  // namespace

void write_bytes(std::ostream& os, const void* data, size_t n) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!os) throw IoError("write failed");
}

void write_u8(std::ostream& os, uint8_t v) { write_bytes(os, &v, 1); }
void write_u16(std::ostream& os, uint16_t v) { write_bytes(os, &v, 2); }
void write_u32(std::ostream& os, uint32_t v) { write_bytes(os, &v, 4); }
void write_u64(std::ostream& os, uint64_t v) { write_bytes(os, &v, 8); }
void write_f32(std::ostream& os, float v) { write_bytes(os, &v, 4); }

void read_bytes(std::istream& is, void* data, size_t n) {
  is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n) fail_at(is, "truncated file");
}

uint8_t read_u8(std::istream& is) {
  uint8_t v;
  read_bytes(is, &v, 1);
  return v;
}
uint16_t read_u16(std::istream& is) {
  uint16_t v;
  read_bytes(is, &v, 2);
  return v;
}
uint32_t read_u32(std::istream& is) {
  uint32_t v;
  read_bytes(is, &v, 4);
  return v;
}
uint64_t read_u64(std::istream& is) {
  uint64_t v;
  read_bytes(is, &v, 8);
  return v;
}
float read_f32(std::istream& is) {
  float v;
  read_bytes(is, &v, 4);
  return v;
}

namespace {

constexpr uint16_t kCheckpointVersion = 1;

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  write_bytes(os, s.data(), s.size());
}

std::string read_string(std::istream& is) {
  const uint32_t n = read_u32(is);
  if (n > (1u << 20)) fail_at(is, "unreasonable string length");
  std::string s(n, '\0');
  if (n) read_bytes(is, s.data(), n);
  return s;
}

void check_magic(std::istream& is, const char magic[4], const std::filesystem::path& path) {
  char got[4];
  read_bytes(is, got, 4);
  if (std::memcmp(got, magic, 4) != 0) {
    throw FormatError("bad magic in " + path.string() + ": expected '" +
                      std::string(magic, 4) + "', got '" + std::string(got, 4) +
                      "' at byte offset 0");
  }
  const uint16_t version = read_u16(is);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported version " + std::to_string(version) + " in " +
                      path.string());
  }
}

Metadata read_meta_block(std::istream& is) {
  Metadata meta;
  const uint32_t entries = read_u32(is);
  for (uint32_t i = 0; i < entries; ++i) {
    std::string k = read_string(is);
    std::string v = read_string(is);
    meta[std::move(k)] = std::move(v);
  }
  return meta;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const char magic[4],
                      const Metadata& meta, const nn::ParamStore& params) {
  std::ostringstream os(std::ios::binary);
  write_bytes(os, magic, 4);
  write_u16(os, kCheckpointVersion);
  write_u32(os, static_cast<uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    write_string(os, k);
    write_string(os, v);
  }
  write_u32(os, static_cast<uint32_t>(params.count()));
  for (size_t i = 0; i < params.count(); ++i) {
    const Tensor& t = params.param(i);
    write_string(os, params.name(i));
    write_u32(os, static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) write_u32(os, static_cast<uint32_t>(d));
    write_bytes(os, t.ptr(), sizeof(float) * static_cast<size_t>(t.size()));
  }
  atomic_write(path, os.str());
}

Metadata read_checkpoint(const std::filesystem::path& path, const char magic[4],
                         nn::ParamStore& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  check_magic(is, magic, path);
  Metadata meta = read_meta_block(is);
  const uint32_t count = read_u32(is);
  if (count != params.count()) {
    throw FormatError("checkpoint " + path.string() + " holds " + std::to_string(count) +
                      " tensors, model expects " + std::to_string(params.count()));
  }
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = read_string(is);
    const uint32_t ndim = read_u32(is);
    Shape shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int>(read_u32(is));
    Tensor* dst = params.find(name);
    if (dst == nullptr) {
      throw FormatError("checkpoint tensor '" + name + "' unknown to this model");
    }
    if (dst->shape() != shape) {
      throw FormatError("checkpoint tensor '" + name + "' shape " + shape_str(shape) +
                        " mismatches model " + shape_str(dst->shape()));
    }
    read_bytes(is, dst->mutable_ptr(), sizeof(float) * static_cast<size_t>(dst->size()));
  }
  return meta;
}

Metadata read_checkpoint_meta(const std::filesystem::path& path, const char magic[4]) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  check_magic(is, magic, path);
  return read_meta_block(is);
}

uint64_t fnv1a(const void* data, size_t n, uint64_t seed) {
  const auto* p = static_cast<const uint8_t*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

uint64_t fnv1a_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  uint64_t h = 14695981039346656037ULL;
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof(buf));
    h = fnv1a(buf, static_cast<size_t>(is.gcount()), h);
  }
  return h;
}

std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

void atomic_write(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace prat::io
