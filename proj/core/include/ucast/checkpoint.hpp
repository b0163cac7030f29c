#pragma once

// Named-entry binary archive used for checkpoints and external extractor
// weights. Entries are f64 tensors, raw byte blobs (RNG state text, config
// hash), or 64-bit integers. Layout is explicit little-endian so files are
// portable and byte-stable across runs.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ucast/tensor.hpp"

namespace ucast {

class Archive {
 public:
  void put_tensor(const std::string& name, const Tensor& t);
  void put_blob(const std::string& name, const std::string& bytes);
  void put_i64(const std::string& name, int64_t v);

  bool has(const std::string& name) const;
  // Accessors throw std::out_of_range on a missing name and
  // std::runtime_error on a kind mismatch.
  const Tensor& tensor(const std::string& name) const;
  const std::string& blob(const std::string& name) const;
  int64_t i64(const std::string& name) const;

  std::vector<std::string> names() const;
  size_t size() const { return entries_.size(); }

  void save(const std::string& path) const;
  static Archive load(const std::string& path);

 private:
  struct Entry {
    int kind = 0;  // 0 tensor, 1 blob, 2 i64
    Tensor t;
    std::string b;
    int64_t i = 0;
  };
  std::map<std::string, Entry> entries_;  // ordered -> deterministic files
};

}  // namespace ucast
