#include "ucast/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ucast {

namespace {

constexpr char kMagic[4] = {'U', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;

void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  write_bytes(os, b, 4);
}

void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  write_bytes(os, b, 8);
}

void write_f64(std::ostream& os, double v) {
  uint64_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

void read_bytes(std::istream& is, void* p, size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("archive: truncated file");
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  read_bytes(is, b, 4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  read_bytes(is, b, 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& is) {
  uint64_t bits = read_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void Archive::put_tensor(const std::string& name, const Tensor& t) {
  Entry e;
  e.kind = 0;
  e.t = t;
  entries_[name] = std::move(e);
}

void Archive::put_blob(const std::string& name, const std::string& bytes) {
  Entry e;
  e.kind = 1;
  e.b = bytes;
  entries_[name] = std::move(e);
}

void Archive::put_i64(const std::string& name, int64_t v) {
  Entry e;
  e.kind = 2;
  e.i = v;
  entries_[name] = std::move(e);
}

bool Archive::has(const std::string& name) const { return entries_.count(name) != 0; }

const Tensor& Archive::tensor(const std::string& name) const {
  const Entry& e = entries_.at(name);
  if (e.kind != 0) throw std::runtime_error("archive entry is not a tensor: " + name);
  return e.t;
}

const std::string& Archive::blob(const std::string& name) const {
  const Entry& e = entries_.at(name);
  if (e.kind != 1) throw std::runtime_error("archive entry is not a blob: " + name);
  return e.b;
}

int64_t Archive::i64(const std::string& name) const {
  const Entry& e = entries_.at(name);
  if (e.kind != 2) throw std::runtime_error("archive entry is not an integer: " + name);
  return e.i;
}

std::vector<std::string> Archive::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, v] : entries_) {
    (void)v;
    out.push_back(k);
  }
  return out;
}

void Archive::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("archive: cannot open for write: " + path);
  write_bytes(os, kMagic, 4);
  write_u32(os, kVersion);
  write_u64(os, entries_.size());
  for (const auto& [name, e] : entries_) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    write_bytes(os, name.data(), name.size());
    write_u32(os, static_cast<uint32_t>(e.kind));
    switch (e.kind) {
      case 0: {
        write_u32(os, static_cast<uint32_t>(e.t.ndim()));
        for (int64_t d = 0; d < e.t.ndim(); ++d) write_u64(os, static_cast<uint64_t>(e.t.dim(d)));
        for (int64_t i = 0; i < e.t.numel(); ++i) write_f64(os, e.t[i]);
        break;
      }
      case 1: {
        write_u64(os, e.b.size());
        write_bytes(os, e.b.data(), e.b.size());
        break;
      }
      case 2: {
        write_u64(os, static_cast<uint64_t>(e.i));
        break;
      }
      default:
        throw std::logic_error("archive: bad entry kind");
    }
  }
  if (!os) throw std::runtime_error("archive: write failed: " + path);
}

Archive Archive::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("archive: cannot open: " + path);
  char magic[4];
  read_bytes(is, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("archive: bad magic in " + path);
  }
  const uint32_t version = read_u32(is);
  if (version != kVersion) {
    throw std::runtime_error("archive: unsupported version " + std::to_string(version));
  }
  const uint64_t count = read_u64(is);
  Archive a;
  for (uint64_t k = 0; k < count; ++k) {
    const uint32_t nlen = read_u32(is);
    std::string name(nlen, '\0');
    read_bytes(is, name.data(), nlen);
    const uint32_t kind = read_u32(is);
    switch (kind) {
      case 0: {
        const uint32_t nd = read_u32(is);
        Shape shape(nd);
        for (uint32_t d = 0; d < nd; ++d) shape[d] = static_cast<int64_t>(read_u64(is));
        Tensor t(shape);
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = read_f64(is);
        a.put_tensor(name, t);
        break;
      }
      case 1: {
        const uint64_t blen = read_u64(is);
        std::string b(blen, '\0');
        read_bytes(is, b.data(), blen);
        a.put_blob(name, b);
        break;
      }
      case 2: {
        a.put_i64(name, static_cast<int64_t>(read_u64(is)));
        break;
      }
      default:
        throw std::runtime_error("archive: unknown entry kind " + std::to_string(kind));
    }
  }
  return a;
}

}  // namespace ucast
