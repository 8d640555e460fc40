#include "planseg/topology.hpp"

#include <algorithm>
#include <limits>
#include <string>

#include "planseg/errors.hpp"
#include "planseg/plans.hpp"

namespace planseg {

std::string_view to_string(EncoderType type) {
  return type == EncoderType::Residual ? "residual" : "plain";
}

EncoderType encoder_type_from_string(std::string_view text) {
  if (text == "plain") return EncoderType::Plain;
  if (text == "residual") return EncoderType::Residual;
  throw ParameterError("unknown encoder type '" + std::string(text) + "' (expected plain or residual)");
}

std::vector<int> feature_schedule(int base, int cap, int num_stages) {
  std::vector<int> features;
  features.reserve(num_stages);
  std::int64_t f = base;
  for (int s = 0; s < num_stages; ++s) {
    features.push_back(static_cast<int>(std::min<std::int64_t>(f, cap)));
    f = std::min<std::int64_t>(f * 2, std::int64_t{1} << 30);
  }
  return features;
}

std::vector<int> default_encoder_blocks(EncoderType type, int num_stages) {
  if (type == EncoderType::Plain) return std::vector<int>(num_stages, 2);
  static constexpr int kSchedule[] = {1, 3, 4, 6};
  std::vector<int> blocks;
  for (int s = 0; s < num_stages; ++s) blocks.push_back(s < 4 ? kSchedule[s] : 6);
  return blocks;
}

std::vector<int> default_decoder_convs(int num_stages) {
  return std::vector<int>(std::max(num_stages - 1, 0), 2);
}

std::vector<Triple> plan_strides(const Triple& patch_size) {
  Triple downsamplings{};
  for (int a = 0; a < 3; ++a) {
    const int p = patch_size[a];
    if (p < 8) {
      throw PlanningError("patch axis " + std::to_string(a) + " is " + std::to_string(p) +
                          " voxels; at least 8 are required");
    }
    int d = 0;
    while (d < kMaxDownsamplings && (4LL << (d + 1)) <= p) ++d;
    if (p % (1 << d) != 0) {
      throw PlanningError("patch axis " + std::to_string(a) + " (" + std::to_string(p) +
                          ") is not divisible by its cumulative stride " + std::to_string(1 << d));
    }
    downsamplings[a] = d;
  }
  const int num_stages = *std::max_element(downsamplings.begin(), downsamplings.end()) + 1;
  std::vector<Triple> strides(num_stages, Triple{1, 1, 1});
  for (int s = 1; s < num_stages; ++s)
    for (int a = 0; a < 3; ++a) strides[s][a] = s <= downsamplings[a] ? 2 : 1;
  return strides;
}

TopologyDescriptor plan_topology(const Triple& patch_size, const Spacing& spacing, EncoderType encoder_type,
                                 int num_input_channels, int num_classes) {
  for (double s : spacing)
    if (!(s > 0)) throw PlanningError("spacing must be positive");
  TopologyDescriptor topo;
  topo.strides_per_stage = plan_strides(patch_size);
  topo.num_stages = static_cast<int>(topo.strides_per_stage.size());
  topo.kernel_sizes.assign(topo.num_stages, Triple{3, 3, 3});
  topo.features_per_stage = feature_schedule(kPlannerFeaturesBase, kPlannerFeaturesCap, topo.num_stages);
  topo.encoder_type = encoder_type;
  topo.blocks_per_stage_encoder = default_encoder_blocks(encoder_type, topo.num_stages);
  topo.convs_per_stage_decoder = default_decoder_convs(topo.num_stages);
  topo.deep_supervision = true;
  topo.num_input_channels = num_input_channels;
  topo.num_classes = num_classes;
  validate_descriptor(topo, patch_size);
  return topo;
}

TopologyDescriptor describe(const ResolvedConfiguration& config, int num_classes) {
  TopologyDescriptor topo;
  topo.num_stages = config.num_stages();
  topo.features_per_stage = feature_schedule(config.features_base, config.features_cap, topo.num_stages);
  topo.strides_per_stage = config.strides_per_stage;
  topo.kernel_sizes = config.kernel_sizes;
  topo.encoder_type = config.encoder_type;
  topo.blocks_per_stage_encoder = config.blocks_per_stage_encoder;
  topo.convs_per_stage_decoder = config.convs_per_stage_decoder;
  topo.deep_supervision = config.deep_supervision;
  topo.num_input_channels = config.num_input_channels();
  topo.num_classes = num_classes;
  validate_descriptor(topo, config.patch_size);
  return topo;
}

void validate_descriptor(const TopologyDescriptor& topo) {
  const auto n = static_cast<std::size_t>(topo.num_stages);
  if (topo.num_stages < 2) throw PlanningError("a topology needs at least 2 stages");
  if (topo.features_per_stage.size() != n || topo.strides_per_stage.size() != n ||
      topo.kernel_sizes.size() != n || topo.blocks_per_stage_encoder.size() != n) {
    throw PlanningError("per-stage lists must all have num_stages (" + std::to_string(n) + ") entries");
  }
  if (topo.convs_per_stage_decoder.size() != n - 1)
    throw PlanningError("convs_per_stage_decoder must have num_stages - 1 entries");
  if (topo.strides_per_stage[0] != Triple{1, 1, 1}) throw PlanningError("stage 0 stride must be (1,1,1)");
  for (std::size_t s = 0; s < n; ++s) {
    if (topo.features_per_stage[s] < 1) throw PlanningError("feature counts must be positive");
    if (topo.blocks_per_stage_encoder[s] < 1) throw PlanningError("encoder blocks per stage must be positive");
    for (int a = 0; a < 3; ++a) {
      if (topo.strides_per_stage[s][a] < 1) throw PlanningError("strides must be positive");
      const int k = topo.kernel_sizes[s][a];
      if (k < 1 || k % 2 == 0) throw PlanningError("kernel sizes must be positive and odd");
    }
  }
  for (int c : topo.convs_per_stage_decoder)
    if (c < 1) throw PlanningError("decoder convolutions per stage must be positive");
  if (topo.num_input_channels < 1 || topo.num_classes < 1)
    throw PlanningError("input channels and classes must be positive");
}

void validate_descriptor(const TopologyDescriptor& topo, const Triple& patch_size) {
  validate_descriptor(topo);
  const Triple total = cumulative_stride(topo, topo.num_stages - 1);
  for (int a = 0; a < 3; ++a) {
    if (patch_size[a] < 1 || patch_size[a] % total[a] != 0) {
      throw PlanningError("patch axis " + std::to_string(a) + " (" + std::to_string(patch_size[a]) +
                          ") is not divisible by the cumulative stride " + std::to_string(total[a]));
    }
  }
}

Triple cumulative_stride(const TopologyDescriptor& topo, int stage) {
  Triple c{1, 1, 1};
  for (int s = 0; s <= stage; ++s)
    for (int a = 0; a < 3; ++a) c[a] *= topo.strides_per_stage[s][a];
  return c;
}

Triple compute_receptive_field(const TopologyDescriptor& topo) {
  Triple rf{1, 1, 1};
  Triple jump{1, 1, 1};
  auto conv = [&](const Triple& kernel, const Triple& stride) {
    for (int a = 0; a < 3; ++a) {
      rf[a] += (kernel[a] - 1) * jump[a];
      jump[a] *= stride[a];
    }
  };
  constexpr Triple kUnit{1, 1, 1};
  if (topo.encoder_type == EncoderType::Plain) {
    for (int s = 0; s < topo.num_stages; ++s)
      for (int j = 0; j < topo.blocks_per_stage_encoder[s]; ++j)
        conv(topo.kernel_sizes[s], j == 0 ? topo.strides_per_stage[s] : kUnit);
  } else {
    conv(topo.kernel_sizes[0], kUnit);  // stem
    for (int s = 0; s < topo.num_stages; ++s) {
      for (int b = 0; b < topo.blocks_per_stage_encoder[s]; ++b) {
        conv(topo.kernel_sizes[s], b == 0 ? topo.strides_per_stage[s] : kUnit);
        conv(topo.kernel_sizes[s], kUnit);
      }
    }
  }
  return rf;
}

namespace {

std::int64_t conv_params(std::int64_t in, std::int64_t out, const Triple& kernel) {
  return out * in * voxel_count(kernel) + out;
}

std::int64_t norm_params(std::int64_t channels) { return 2 * channels; }

}  // namespace

std::int64_t parameter_count(const TopologyDescriptor& topo) {
  const auto& f = topo.features_per_stage;
  constexpr Triple kUnit{1, 1, 1};
  std::int64_t total = 0;

  if (topo.encoder_type == EncoderType::Plain) {
    for (int s = 0; s < topo.num_stages; ++s) {
      for (int j = 0; j < topo.blocks_per_stage_encoder[s]; ++j) {
        const int in = j > 0 ? f[s] : (s == 0 ? topo.num_input_channels : f[s - 1]);
        total += conv_params(in, f[s], topo.kernel_sizes[s]) + norm_params(f[s]);
      }
    }
  } else {
    total += conv_params(topo.num_input_channels, f[0], topo.kernel_sizes[0]) + norm_params(f[0]);
    for (int s = 0; s < topo.num_stages; ++s) {
      for (int b = 0; b < topo.blocks_per_stage_encoder[s]; ++b) {
        const int in = b > 0 ? f[s] : (s == 0 ? f[0] : f[s - 1]);
        const bool strided = b == 0 && topo.strides_per_stage[s] != kUnit;
        total += norm_params(in) + conv_params(in, f[s], topo.kernel_sizes[s]);
        total += norm_params(f[s]) + conv_params(f[s], f[s], topo.kernel_sizes[s]);
        if (in != f[s] || strided) total += conv_params(in, f[s], kUnit);
      }
    }
  }

  for (int s = 0; s + 1 < topo.num_stages; ++s) {
    total += static_cast<std::int64_t>(f[s + 1]) * f[s] * voxel_count(topo.strides_per_stage[s + 1]) + f[s];
    for (int j = 0; j < topo.convs_per_stage_decoder[s]; ++j) {
      const int in = j == 0 ? 2 * f[s] : f[s];
      total += conv_params(in, f[s], topo.kernel_sizes[s]) + norm_params(f[s]);
    }
  }

  total += conv_params(f[0], topo.num_classes, kUnit);
  if (topo.deep_supervision)
    for (int r = 1; r < topo.num_stages; ++r) total += conv_params(f[r], topo.num_classes, kUnit);
  return total;
}

std::int64_t activation_voxels(const TopologyDescriptor& topo, const Triple& patch_size) {
  std::int64_t total = 0;
  for (int s = 0; s < topo.num_stages; ++s) {
    const Triple c = cumulative_stride(topo, s);
    const std::int64_t voxels = static_cast<std::int64_t>(patch_size[0] / c[0]) * (patch_size[1] / c[1]) *
                                (patch_size[2] / c[2]);
    const int copies = s + 1 < topo.num_stages ? 2 : 1;  // encoder stage + decoder level
    total += copies * topo.features_per_stage[s] * voxels;
  }
  return total;
}

FootprintEstimate estimate_footprint(const TopologyDescriptor& topo, const Triple& patch_size, int batch_size) {
  validate_descriptor(topo, patch_size);
  if (batch_size < 1) throw ParameterError("batch size must be positive");
  FootprintEstimate e;
  e.activation_voxels = activation_voxels(topo, patch_size);
  e.parameter_count = parameter_count(topo);
  // 4-byte floats: activations, their gradients and workspace; parameters, gradients and two optimizer slots.
  e.training_bytes = 4 * static_cast<std::int64_t>(batch_size) * e.activation_voxels * 3 + 4 * e.parameter_count * 4;
  return e;
}

int max_batch_size(const TopologyDescriptor& topo, const Triple& patch_size, std::int64_t budget_bytes) {
  const FootprintEstimate one = estimate_footprint(topo, patch_size, 1);
  if (budget_bytes < one.training_bytes) {
    throw ParameterError("budget of " + std::to_string(budget_bytes) + " bytes is below the batch-1 footprint of " +
                         std::to_string(one.training_bytes) + " bytes");
  }
  const std::int64_t fixed = 16 * one.parameter_count;
  const std::int64_t per_sample = 12 * one.activation_voxels;
  const std::int64_t b = (budget_bytes - fixed) / per_sample;
  return static_cast<int>(std::min<std::int64_t>(b, std::numeric_limits<int>::max()));
}

nlohmann::json to_json(const TopologyDescriptor& topo) {
  return {{"num_stages", topo.num_stages},
          {"features_per_stage", topo.features_per_stage},
          {"strides_per_stage", topo.strides_per_stage},
          {"kernel_sizes", topo.kernel_sizes},
          {"encoder_type", std::string(to_string(topo.encoder_type))},
          {"blocks_per_stage_encoder", topo.blocks_per_stage_encoder},
          {"convs_per_stage_decoder", topo.convs_per_stage_decoder},
          {"deep_supervision", topo.deep_supervision},
          {"num_input_channels", topo.num_input_channels},
          {"num_classes", topo.num_classes}};
}

TopologyDescriptor topology_from_json(const nlohmann::json& j) {
  TopologyDescriptor topo;
  try {
    topo.num_stages = j.at("num_stages").get<int>();
    topo.features_per_stage = j.at("features_per_stage").get<std::vector<int>>();
    topo.strides_per_stage = j.at("strides_per_stage").get<std::vector<Triple>>();
    topo.kernel_sizes = j.at("kernel_sizes").get<std::vector<Triple>>();
    topo.encoder_type = encoder_type_from_string(j.at("encoder_type").get<std::string>());
    topo.blocks_per_stage_encoder = j.at("blocks_per_stage_encoder").get<std::vector<int>>();
    topo.convs_per_stage_decoder = j.at("convs_per_stage_decoder").get<std::vector<int>>();
    topo.deep_supervision = j.at("deep_supervision").get<bool>();
    topo.num_input_channels = j.at("num_input_channels").get<int>();
    topo.num_classes = j.at("num_classes").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed topology descriptor: ") + e.what());
  }
  validate_descriptor(topo);
  return topo;
}

}  // namespace planseg
