#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "planseg/types.hpp"

namespace planseg {

struct ResolvedConfiguration;

struct TopologyDescriptor {
  int num_stages = 0;
  std::vector<int> features_per_stage;
  std::vector<Triple> strides_per_stage;
  std::vector<Triple> kernel_sizes;
  EncoderType encoder_type = EncoderType::Plain;
  // Plain encoder: convolutions per stage. Residual encoder: residual blocks per stage.
  std::vector<int> blocks_per_stage_encoder;
  // One entry per decoder level, i.e. num_stages - 1 entries; level 0 is full resolution.
  std::vector<int> convs_per_stage_decoder;
  bool deep_supervision = true;
  int num_input_channels = 2;
  int num_classes = kNumClasses;

  bool operator==(const TopologyDescriptor&) const = default;
};

struct FootprintEstimate {
  std::int64_t activation_voxels = 0;
  std::int64_t parameter_count = 0;
  std::int64_t training_bytes = 0;
};

inline constexpr int kPlannerFeaturesBase = 32;
inline constexpr int kPlannerFeaturesCap = 320;
inline constexpr int kMaxDownsamplings = 5;

std::vector<int> feature_schedule(int base, int cap, int num_stages);
std::vector<int> default_encoder_blocks(EncoderType type, int num_stages);
std::vector<int> default_decoder_convs(int num_stages);

// Downsampling schedule only: per-stage strides for a patch. Throws PlanningError.
std::vector<Triple> plan_strides(const Triple& patch_size);

TopologyDescriptor plan_topology(const Triple& patch_size, const Spacing& spacing, EncoderType encoder_type,
                                 int num_input_channels, int num_classes);

// Descriptor for an already resolved configuration (honours user-edited strides, kernels, features).
TopologyDescriptor describe(const ResolvedConfiguration& config, int num_classes = kNumClasses);

// Structural checks; if `patch_size` is given also checks divisibility. Throws PlanningError.
void validate_descriptor(const TopologyDescriptor& topo);
void validate_descriptor(const TopologyDescriptor& topo, const Triple& patch_size);

// Product of strides of stages 0..stage inclusive.
Triple cumulative_stride(const TopologyDescriptor& topo, int stage);

// Receptive field of one bottleneck unit, accumulated over every encoder convolution.
Triple compute_receptive_field(const TopologyDescriptor& topo);

std::int64_t parameter_count(const TopologyDescriptor& topo);
std::int64_t activation_voxels(const TopologyDescriptor& topo, const Triple& patch_size);
FootprintEstimate estimate_footprint(const TopologyDescriptor& topo, const Triple& patch_size, int batch_size);
int max_batch_size(const TopologyDescriptor& topo, const Triple& patch_size, std::int64_t budget_bytes);

nlohmann::json to_json(const TopologyDescriptor& topo);
TopologyDescriptor topology_from_json(const nlohmann::json& j);

}  // namespace planseg
