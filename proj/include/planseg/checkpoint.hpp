#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "planseg/nn/network.hpp"
#include "planseg/optim.hpp"
#include "planseg/topology.hpp"

namespace planseg {

// Binary checkpoint container:
//   "PSCK" | u32 version | u32 section count | sections...
//   section: u8 kind | u32 name length | name | payload
//     text payload:   u64 byte length | UTF-8 bytes
//     tensor payload: u32 rank | i64 dims[rank] | f32 values (product of dims)
// All integers and floats are little-endian.
inline constexpr char kCheckpointMagic[4] = {'P', 'S', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::vector<std::int64_t> shape;
  std::vector<float> values;

  bool operator==(const StoredTensor&) const = default;
};

struct Checkpoint {
  TopologyDescriptor descriptor;
  std::uint64_t seed = 0;
  int epoch = 0;
  // Free-form training metadata (rng state, learning-rate scale, history, ...).
  nlohmann::json meta = nlohmann::json::object();
  // Resolved configuration and normalization statistics the model was trained with.
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json normalization = nlohmann::json::array();
  // "param/<name>" and "momentum/<name>".
  std::map<std::string, StoredTensor> tensors;
};

void write_checkpoint(const std::filesystem::path& file, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& file);

// Copies network parameters (and optimizer buffers if given) into the tensor map.
void store_state(Checkpoint& ckpt, nn::UNet<float>& net, const SgdNesterov<float>* optimizer);
// Restores parameters, and momentum buffers if `optimizer` is given. Throws IoError on any mismatch.
void load_state(const Checkpoint& ckpt, nn::UNet<float>& net, SgdNesterov<float>* optimizer);

// Builds the network described by the checkpoint and loads its parameters.
nn::UNet<float> network_from_checkpoint(const Checkpoint& ckpt);

}  // namespace planseg
