#pragma once

#include <string>
#include <utility>
#include <vector>

#include "actflow/tensor.hpp"

namespace actflow {

// Named-tensor archive with a key-value header. Binary layout (little endian):
//   magic "AFCK", version u32
//   header_len u64, header bytes ("key=value\n" lines)
//   n_tensors u64
//   per tensor: name_len u64, name bytes, rank u64, dims u64...,
//               float64 data bytes, fnv1a-64 checksum of the data bytes
// Round-trips are bit-exact; checksum or layout damage is reported with the
// offending tensor name.
struct Archive {
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<std::pair<std::string, Tensor>> tensors;

  void set(const std::string& key, const std::string& value);
  const std::string& at(const std::string& key) const;  // throws naming the key
  bool has(const std::string& key) const;

  const Tensor& tensor(const std::string& name) const;  // throws naming the tensor
  bool has_tensor(const std::string& name) const;

  void write(const std::string& path) const;
  static Archive read(const std::string& path);
};

}  // namespace actflow
