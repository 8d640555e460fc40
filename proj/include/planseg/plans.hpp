#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "planseg/types.hpp"

namespace planseg {

using Json = nlohmann::json;

// One entry of the `configurations` object: an optional parent plus the keys it sets.
struct RawConfiguration {
  std::optional<std::string> inherits_from;
  Json overrides = Json::object();

  bool operator==(const RawConfiguration&) const = default;
};

struct PlanFile {
  std::string plans_name;
  std::map<std::string, RawConfiguration> configurations;

  bool operator==(const PlanFile&) const = default;
};

// A configuration after inheritance, defaulting and validation. Everything the
// trainer and the inference engine need is read from here and nowhere else.
struct ResolvedConfiguration {
  int batch_size = 2;
  Triple patch_size{};
  Spacing spacing{};
  std::vector<std::string> normalization_schemes;
  EncoderType encoder_type = EncoderType::Plain;
  int features_base = 32;
  int features_cap = 320;
  std::vector<int> blocks_per_stage_encoder;
  std::vector<int> convs_per_stage_decoder;
  std::vector<Triple> kernel_sizes;
  std::vector<Triple> strides_per_stage;
  bool deep_supervision = true;
  double oversample_foreground_fraction = 1.0 / 3.0;
  int num_epochs = 25;
  double initial_learning_rate = 0.01;
  double inference_step_fraction = 0.5;
  std::vector<int> mirror_axes;
  int iterations_per_epoch = 50;

  int num_stages() const { return static_cast<int>(strides_per_stage.size()); }
  int num_input_channels() const { return static_cast<int>(normalization_schemes.size()); }

  bool operator==(const ResolvedConfiguration&) const = default;
};

struct FieldDiff {
  std::string field;
  Json a;
  Json b;

  bool operator==(const FieldDiff&) const = default;
};

// Keys a configuration object may contain, besides `inherits_from`.
const std::vector<std::string>& configuration_keys();

PlanFile parse_plans(std::string_view text);
std::string serialize_plans(const PlanFile& plan);

// Names from `name` up to its root, root first. Throws LookupError / CycleError.
std::vector<std::string> inheritance_chain(const PlanFile& plan, const std::string& name);

// Recursive object merge; arrays and scalars in `patch` replace those in `base`.
Json merge_overrides(const Json& base, const Json& patch);

ResolvedConfiguration resolve_configuration(const PlanFile& plan, const std::string& name);

// Fills planner-derivable keys, applies defaults and validates. `raw` is the merged override object.
ResolvedConfiguration resolve_from_json(const Json& raw);

void validate(const ResolvedConfiguration& config);

Json to_json(const ResolvedConfiguration& config);

std::vector<FieldDiff> diff_configurations(const ResolvedConfiguration& a, const ResolvedConfiguration& b);

}  // namespace planseg
