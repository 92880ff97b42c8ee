#include "vloop/serialize.hpp"

#include <cstdio>
#include <cstring>

namespace vloop {

namespace {

// Host is assumed little-endian for the fast paths below; verified once.
bool host_little_endian() {
  const std::uint32_t probe = 1;
  unsigned char b[4];
  std::memcpy(b, &probe, 4);
  return b[0] == 1;
}

const bool kLittle = host_little_endian();

template <typename T>
void store_le(unsigned char* dst, T v) {
  std::memcpy(dst, &v, sizeof(T));
  if (!kLittle) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) {
      std::swap(dst[i], dst[sizeof(T) - 1 - i]);
    }
  }
}

template <typename T>
T load_le(const unsigned char* src) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, src, sizeof(T));
  if (!kLittle) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) {
      std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    }
  }
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace

BinaryWriter::BinaryWriter(const std::string& path)
    : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
  if (!out_) throw FormatError("cannot open for writing: " + path, 0);
}

void BinaryWriter::bytes(const void* data, std::size_t n) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out_) throw FormatError("write failed: " + path_, offset_);
  offset_ += n;
}

void BinaryWriter::magic(const char tag[4]) { bytes(tag, 4); }

void BinaryWriter::u16(std::uint16_t v) {
  unsigned char b[2];
  store_le(b, v);
  bytes(b, 2);
}

void BinaryWriter::u32(std::uint32_t v) {
  unsigned char b[4];
  store_le(b, v);
  bytes(b, 4);
}

void BinaryWriter::u64(std::uint64_t v) {
  unsigned char b[8];
  store_le(b, v);
  bytes(b, 8);
}

void BinaryWriter::f32(float v) {
  unsigned char b[4];
  store_le(b, v);
  bytes(b, 4);
}

void BinaryWriter::f64(double v) {
  unsigned char b[8];
  store_le(b, v);
  bytes(b, 8);
}

void BinaryWriter::text(const std::string& s) {
  u64(s.size());
  if (!s.empty()) bytes(s.data(), s.size());
}

void BinaryWriter::f32_array(const std::vector<double>& values) {
  std::vector<unsigned char> buf(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    store_le(buf.data() + i * 4, static_cast<float>(values[i]));
  }
  if (!buf.empty()) bytes(buf.data(), buf.size());
}

void BinaryWriter::close() {
  out_.close();
  if (!out_) throw FormatError("close failed: " + path_, offset_);
}

BinaryReader::BinaryReader(const std::string& path)
    : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw FormatError("cannot open: " + path, 0);
}

void BinaryReader::read_raw(void* dst, std::size_t n) {
  in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) {
    throw FormatError("truncated file: " + path_, offset_);
  }
  offset_ += n;
}

void BinaryReader::magic(const char tag[4]) {
  char got[4];
  read_raw(got, 4);
  if (std::memcmp(got, tag, 4) != 0) {
    throw FormatError("bad magic in " + path_ + ": expected '" +
                          std::string(tag, 4) + "', found '" +
                          std::string(got, 4) + "'",
                      offset_ - 4);
  }
}

std::uint16_t BinaryReader::u16() {
  unsigned char b[2];
  read_raw(b, 2);
  return load_le<std::uint16_t>(b);
}

std::uint32_t BinaryReader::u32() {
  unsigned char b[4];
  read_raw(b, 4);
  return load_le<std::uint32_t>(b);
}

std::uint64_t BinaryReader::u64() {
  unsigned char b[8];
  read_raw(b, 8);
  return load_le<std::uint64_t>(b);
}

float BinaryReader::f32() {
  unsigned char b[4];
  read_raw(b, 4);
  return load_le<float>(b);
}

double BinaryReader::f64() {
  unsigned char b[8];
  read_raw(b, 8);
  return load_le<double>(b);
}

std::string BinaryReader::text() {
  const std::uint64_t n = u64();
  if (n > (1ull << 30)) fail("unreasonable text length");
  std::string s(n, '\0');
  if (n) read_raw(s.data(), n);
  return s;
}

void BinaryReader::f32_into(std::vector<double>& out, std::size_t count) {
  std::vector<unsigned char> buf(count * 4);
  if (count) read_raw(buf.data(), buf.size());
  out.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = static_cast<double>(load_le<float>(buf.data() + i * 4));
  }
}

void BinaryReader::fail(const std::string& msg) const {
  throw FormatError(msg + " in " + path_, offset_);
}

void AtomicFile::commit() {
  writer_.close();
  if (std::rename(tmp_.c_str(), path_.c_str()) != 0) {
    throw FormatError("rename failed: " + tmp_ + " -> " + path_, 0);
  }
}

}  // namespace vloop
