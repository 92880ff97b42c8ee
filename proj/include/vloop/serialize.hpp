#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "vloop/errors.hpp"

namespace vloop {

// Little-endian binary writer/reader with byte-offset tracking so format
// errors can point at the failing position.

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path);

  void magic(const char tag[4]);
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void bytes(const void* data, std::size_t n);
  void text(const std::string& s);  // u64 length + raw bytes

  void f32_array(const std::vector<double>& values);  // narrowed per element

  std::size_t offset() const { return offset_; }
  void close();

 private:
  std::ofstream out_;
  std::string path_;
  std::size_t offset_ = 0;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path);

  void magic(const char tag[4]);
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string text();

  void f32_into(std::vector<double>& out, std::size_t count);

  std::size_t offset() const { return offset_; }
  [[noreturn]] void fail(const std::string& msg) const;

 private:
  void read_raw(void* dst, std::size_t n);

  std::ifstream in_;
  std::string path_;
  std::size_t offset_ = 0;
};

// Atomic file replacement: write to path + ".tmp", then rename.
class AtomicFile {
 public:
  explicit AtomicFile(std::string path)
      : path_(std::move(path)), tmp_(path_ + ".tmp"), writer_(tmp_) {}

  BinaryWriter& writer() { return writer_; }
  void commit();

 private:
  std::string path_;
  std::string tmp_;
  BinaryWriter writer_;
};

}  // namespace vloop
