#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "sdl/tensor.hpp"

namespace sdl {

// Single-file checkpoint: 8-byte magic, little-endian u64 manifest length,
// JSON manifest {entries: [{name, shape, offset}], meta: {...}}, then one
// little-endian float64 blob. Offsets count doubles. Round-trips bit-exactly.
class Checkpoint {
 public:
  void put(const std::string& name, Tensor t);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }

  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

 private:
  std::vector<std::string> order_;
  std::vector<Tensor> tensors_;
  nlohmann::json meta_ = nlohmann::json::object();
};

}  // namespace sdl
