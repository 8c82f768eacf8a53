#pragma once

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "star/tensor.hpp"

// Single-file checkpoint container:
//   "STARCKP1" | u64 manifest length | manifest JSON | payload | SHA-256.
// The manifest holds a free-form "meta" object (model config, training
// state) and a tensor directory name -> {shape, dtype, offset}. JSON keys
// are emitted sorted and the payload order follows the tensor list, so
// saving identical state twice produces identical bytes.

namespace star {

struct Checkpoint {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& require(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const nlohmann::json& meta,
                     const std::vector<std::pair<std::string, Tensor<float>>>& tensors);

Checkpoint load_checkpoint(const std::string& path);

// SHA-256 of a byte range, hex-encoded; exposed for run manifests.
std::string sha256_hex(const void* data, std::size_t len);

}  // namespace star
