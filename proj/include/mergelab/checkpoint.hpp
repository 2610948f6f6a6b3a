#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mergelab/params.hpp"

namespace mergelab {

// Binary container: magic "MLB1", u32 version, manifest of
// (name, dtype, shape, byte offset), raw little-endian arrays, trailing
// CRC32 over everything before it. Round-trips are bit-exact and a CRC
// mismatch always fails the load.
class Checkpoint {
 public:
  static constexpr uint32_t kVersion = 1;

  struct F64Array {
    std::vector<int> shape;
    std::vector<double> data;
  };
  struct I32Array {
    std::vector<int> shape;
    std::vector<int32_t> data;
  };

  void put_f64(const std::string& name, std::vector<int> shape, std::vector<double> data);
  void put_i32(const std::string& name, std::vector<int> shape, std::vector<int32_t> data);
  bool has(const std::string& name) const;
  const F64Array& f64(const std::string& name) const;
  const I32Array& i32(const std::string& name) const;
  std::vector<std::string> names() const;  // insertion order

  // ParamSet embedding: one f64 array per tensor under prefix + name.
  void put_params(const std::string& prefix, const ParamSet& params);
  ParamSet params(const std::string& prefix) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

 private:
  struct Entry {
    std::string name;
    uint8_t dtype = 0;  // 1 = f64, 2 = i32
    F64Array f64;
    I32Array i32;
  };
  const Entry& find(const std::string& name) const;
  std::vector<Entry> entries_;
};

uint32_t crc32(const void* data, std::size_t n, uint32_t crc = 0);

}  // namespace mergelab
