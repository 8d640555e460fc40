#include "planseg/plans.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "planseg/errors.hpp"
#include "planseg/topology.hpp"

namespace planseg {

namespace {

constexpr const char* kInheritsFrom = "inherits_from";

std::pair<int, int> line_column(std::string_view text, std::size_t byte) {
  int line = 1;
  int column = 1;
  const std::size_t end = std::min(byte > 0 ? byte - 1 : 0, text.size());
  for (std::size_t i = 0; i < end; ++i) {
    if (text[i] == '\n') {
      ++line;
      column = 1;
    } else {
      ++column;
    }
  }
  return {line, column};
}

// Tracks keys per open object so duplicate keys are reported instead of silently collapsed.
struct DuplicateKeyDetector {
  struct Frame {
    std::set<std::string> keys;
    std::string last_key;
    bool is_configurations = false;
  };
  std::vector<Frame> stack;
  std::optional<std::string> error;

  bool operator()(int /*depth*/, Json::parse_event_t event, Json& parsed) {
    switch (event) {
      case Json::parse_event_t::object_start: {
        Frame frame;
        frame.is_configurations = stack.size() == 1 && stack.back().last_key == "configurations";
        stack.push_back(std::move(frame));
        break;
      }
      case Json::parse_event_t::object_end:
        if (!stack.empty()) stack.pop_back();
        break;
      case Json::parse_event_t::key: {
        auto key = parsed.get<std::string>();
        Frame& top = stack.back();
        if (!top.keys.insert(key).second && !error) {
          error = top.is_configurations ? "duplicate configuration name '" + key + "'"
                                        : "duplicate key '" + key + "'";
        }
        top.last_key = std::move(key);
        break;
      }
      default:
        break;
    }
    return true;
  }
};

bool is_configuration_key(const std::string& key) {
  const auto& keys = configuration_keys();
  return std::find(keys.begin(), keys.end(), key) != keys.end();
}

// ---- typed extraction -------------------------------------------------------

[[noreturn]] void bad_type(const std::string& field, const char* expected) {
  throw ValidationError(field, std::string("expected ") + expected);
}

int get_int(const Json& j, const std::string& field) {
  if (!j.is_number_integer()) bad_type(field, "an integer");
  return j.get<int>();
}

double get_real(const Json& j, const std::string& field) {
  if (!j.is_number()) bad_type(field, "a number");
  return j.get<double>();
}

bool get_bool(const Json& j, const std::string& field) {
  if (!j.is_boolean()) bad_type(field, "a boolean");
  return j.get<bool>();
}

std::vector<int> get_int_list(const Json& j, const std::string& field) {
  if (!j.is_array()) bad_type(field, "an array of integers");
  std::vector<int> out;
  for (const auto& v : j) out.push_back(get_int(v, field));
  return out;
}

Triple get_triple(const Json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 3) bad_type(field, "an array of 3 integers");
  return {get_int(j[0], field), get_int(j[1], field), get_int(j[2], field)};
}

std::vector<Triple> get_triple_list(const Json& j, const std::string& field) {
  if (!j.is_array()) bad_type(field, "an array of 3-integer arrays");
  std::vector<Triple> out;
  for (const auto& v : j) out.push_back(get_triple(v, field));
  return out;
}

std::string describe_triple(const Triple& t) {
  return "[" + std::to_string(t[0]) + "," + std::to_string(t[1]) + "," + std::to_string(t[2]) + "]";
}

}  // namespace

const std::vector<std::string>& configuration_keys() {
  static const std::vector<std::string> keys = {
      "batch_size",
      "blocks_per_stage_encoder",
      "convs_per_stage_decoder",
      "deep_supervision",
      "encoder_type",
      "features_base",
      "features_cap",
      "inference_step_fraction",
      "initial_learning_rate",
      "iterations_per_epoch",
      "kernel_sizes",
      "mirror_axes",
      "normalization_schemes",
      "num_epochs",
      "oversample_foreground_fraction",
      "patch_size",
      "spacing",
      "strides_per_stage",
  };
  return keys;
}

PlanFile parse_plans(std::string_view text) {
  DuplicateKeyDetector detector;
  Json doc;
  try {
    doc = Json::parse(text.begin(), text.end(), std::ref(detector));
  } catch (const Json::parse_error& e) {
    const auto [line, column] = line_column(text, e.byte);
    throw ParseError("malformed plans JSON", line, column);
  }
  if (detector.error) throw SchemaError(*detector.error);
  if (!doc.is_object()) throw SchemaError("plans document must be a JSON object");

  for (const auto& [key, value] : doc.items()) {
    if (key != "plans_name" && key != "configurations") throw SchemaError("unknown top-level key '" + key + "'");
  }
  if (!doc.contains("plans_name") || !doc["plans_name"].is_string())
    throw SchemaError("'plans_name' must be present and a string");
  if (!doc.contains("configurations") || !doc["configurations"].is_object())
    throw SchemaError("'configurations' must be present and an object");

  PlanFile plan;
  plan.plans_name = doc["plans_name"].get<std::string>();
  for (const auto& [name, body] : doc["configurations"].items()) {
    if (name.empty()) throw SchemaError("configuration names must be non-empty");
    if (!body.is_object()) throw SchemaError("configuration '" + name + "' must be an object");
    RawConfiguration raw;
    for (const auto& [key, value] : body.items()) {
      if (key == kInheritsFrom) {
        if (!value.is_string()) throw SchemaError("configuration '" + name + "': inherits_from must be a string");
        raw.inherits_from = value.get<std::string>();
      } else if (!is_configuration_key(key)) {
        throw SchemaError("configuration '" + name + "': unknown key '" + key + "'");
      } else {
        raw.overrides[key] = value;
      }
    }
    plan.configurations.emplace(name, std::move(raw));
  }

  for (const auto& [name, raw] : plan.configurations) {
    if (raw.inherits_from && !plan.configurations.contains(*raw.inherits_from)) {
      throw SchemaError("configuration '" + name + "' inherits from unknown configuration '" +
                        *raw.inherits_from + "'");
    }
  }
  for (const auto& [name, raw] : plan.configurations) inheritance_chain(plan, name);
  return plan;
}

std::string serialize_plans(const PlanFile& plan) {
  Json doc;
  doc["plans_name"] = plan.plans_name;
  doc["configurations"] = Json::object();
  for (const auto& [name, raw] : plan.configurations) {
    Json body = raw.overrides.is_object() ? raw.overrides : Json::object();
    if (raw.inherits_from) body[kInheritsFrom] = *raw.inherits_from;
    doc["configurations"][name] = std::move(body);
  }
  return doc.dump(2) + "\n";
}

std::vector<std::string> inheritance_chain(const PlanFile& plan, const std::string& name) {
  std::vector<std::string> chain;
  std::set<std::string> seen;
  std::string current = name;
  while (true) {
    auto it = plan.configurations.find(current);
    if (it == plan.configurations.end()) {
      if (chain.empty()) throw LookupError("no configuration named '" + name + "'");
      throw LookupError("configuration '" + chain.back() + "' inherits from unknown configuration '" + current + "'");
    }
    if (!seen.insert(current).second) {
      std::string listing;
      for (const auto& c : chain) listing += c + " -> ";
      throw CycleError("inheritance cycle: " + listing + current);
    }
    chain.push_back(current);
    if (!it->second.inherits_from) break;
    current = *it->second.inherits_from;
  }
  std::reverse(chain.begin(), chain.end());
  return chain;
}

Json merge_overrides(const Json& base, const Json& patch) {
  if (!base.is_object() || !patch.is_object()) return patch;
  Json out = base;
  for (const auto& [key, value] : patch.items()) {
    if (out.contains(key) && out[key].is_object() && value.is_object()) {
      out[key] = merge_overrides(out[key], value);
    } else {
      out[key] = value;
    }
  }
  return out;
}

ResolvedConfiguration resolve_configuration(const PlanFile& plan, const std::string& name) {
  Json merged = Json::object();
  for (const auto& link : inheritance_chain(plan, name))
    merged = merge_overrides(merged, plan.configurations.at(link).overrides);
  return resolve_from_json(merged);
}

ResolvedConfiguration resolve_from_json(const Json& raw) {
  if (!raw.is_object()) throw ValidationError("<configuration>", "expected an object");
  for (const auto& [key, value] : raw.items()) {
    if (!is_configuration_key(key)) throw ValidationError(key, "unknown key");
  }
  auto has = [&](const char* key) { return raw.contains(key); };

  ResolvedConfiguration c;
  if (!has("patch_size")) throw ValidationError("patch_size", "required field is missing");
  if (!has("spacing")) throw ValidationError("spacing", "required field is missing");
  c.patch_size = get_triple(raw["patch_size"], "patch_size");
  {
    const Json& sp = raw["spacing"];
    if (!sp.is_array() || sp.size() != 3) bad_type("spacing", "an array of 3 numbers");
    for (int a = 0; a < 3; ++a) c.spacing[a] = get_real(sp[a], "spacing");
  }

  if (has("batch_size")) c.batch_size = get_int(raw["batch_size"], "batch_size");
  if (has("normalization_schemes")) {
    const Json& ns = raw["normalization_schemes"];
    if (!ns.is_array()) bad_type("normalization_schemes", "an array of strings");
    for (const auto& v : ns) {
      if (!v.is_string()) bad_type("normalization_schemes", "an array of strings");
      c.normalization_schemes.push_back(v.get<std::string>());
    }
  } else {
    c.normalization_schemes = {"CT", "CT"};
  }
  if (has("encoder_type")) {
    if (!raw["encoder_type"].is_string()) bad_type("encoder_type", "\"plain\" or \"residual\"");
    try {
      c.encoder_type = encoder_type_from_string(raw["encoder_type"].get<std::string>());
    } catch (const ParameterError&) {
      bad_type("encoder_type", "\"plain\" or \"residual\"");
    }
  }
  if (has("deep_supervision")) c.deep_supervision = get_bool(raw["deep_supervision"], "deep_supervision");
  if (has("oversample_foreground_fraction"))
    c.oversample_foreground_fraction = get_real(raw["oversample_foreground_fraction"], "oversample_foreground_fraction");
  if (has("num_epochs")) c.num_epochs = get_int(raw["num_epochs"], "num_epochs");
  if (has("initial_learning_rate"))
    c.initial_learning_rate = get_real(raw["initial_learning_rate"], "initial_learning_rate");
  if (has("inference_step_fraction"))
    c.inference_step_fraction = get_real(raw["inference_step_fraction"], "inference_step_fraction");
  c.mirror_axes = has("mirror_axes") ? get_int_list(raw["mirror_axes"], "mirror_axes") : std::vector<int>{0, 1, 2};
  if (has("iterations_per_epoch"))
    c.iterations_per_epoch = get_int(raw["iterations_per_epoch"], "iterations_per_epoch");

  // Planner-derivable topology keys.
  c.features_base = has("features_base") ? get_int(raw["features_base"], "features_base") : kPlannerFeaturesBase;
  c.features_cap = has("features_cap") ? get_int(raw["features_cap"], "features_cap") : kPlannerFeaturesCap;
  if (has("strides_per_stage")) {
    c.strides_per_stage = get_triple_list(raw["strides_per_stage"], "strides_per_stage");
  } else {
    try {
      c.strides_per_stage = plan_strides(c.patch_size);
    } catch (const PlanningError& e) {
      throw ValidationError("patch_size", e.what());
    }
  }
  const int stages = c.num_stages();
  c.kernel_sizes = has("kernel_sizes") ? get_triple_list(raw["kernel_sizes"], "kernel_sizes")
                                       : std::vector<Triple>(stages, Triple{3, 3, 3});
  c.blocks_per_stage_encoder = has("blocks_per_stage_encoder")
                                   ? get_int_list(raw["blocks_per_stage_encoder"], "blocks_per_stage_encoder")
                                   : default_encoder_blocks(c.encoder_type, stages);
  c.convs_per_stage_decoder = has("convs_per_stage_decoder")
                                  ? get_int_list(raw["convs_per_stage_decoder"], "convs_per_stage_decoder")
                                  : default_decoder_convs(stages);

  validate(c);
  return c;
}

void validate(const ResolvedConfiguration& c) {
  auto require = [](bool ok, const char* field, const std::string& invariant) {
    if (!ok) throw ValidationError(field, invariant);
  };
  require(c.batch_size >= 1, "batch_size", "must be a positive integer");
  for (int p : c.patch_size) require(p >= 1, "patch_size", "must be 3 positive integers");
  for (double s : c.spacing) require(std::isfinite(s) && s > 0, "spacing", "must be 3 positive reals");
  require(!c.normalization_schemes.empty(), "normalization_schemes", "needs one scheme per input channel");
  for (const auto& scheme : c.normalization_schemes)
    require(scheme == "CT", "normalization_schemes", "unsupported scheme '" + scheme + "' (supported: CT)");
  require(c.features_base >= 1, "features_base", "must be a positive integer");
  require(c.features_cap >= 1, "features_cap", "must be a positive integer");

  const auto stages = c.strides_per_stage.size();
  require(stages >= 2, "strides_per_stage", "at least 2 stages are required");
  require(c.kernel_sizes.size() == stages, "kernel_sizes",
          "len(kernel_sizes) must equal len(strides_per_stage) (" + std::to_string(stages) + ")");
  require(c.strides_per_stage[0] == Triple{1, 1, 1}, "strides_per_stage", "strides_per_stage[0] must be [1,1,1]");
  for (const auto& s : c.strides_per_stage)
    for (int v : s) require(v >= 1, "strides_per_stage", "strides must be positive");
  for (const auto& k : c.kernel_sizes)
    for (int v : k) require(v >= 1 && v % 2 == 1, "kernel_sizes", "kernel sizes must be positive odd integers");
  require(c.blocks_per_stage_encoder.size() == stages, "blocks_per_stage_encoder", "needs one entry per stage");
  for (int b : c.blocks_per_stage_encoder) require(b >= 1, "blocks_per_stage_encoder", "entries must be positive");
  require(c.convs_per_stage_decoder.size() == stages - 1, "convs_per_stage_decoder",
          "needs num_stages - 1 entries (one per decoder level)");
  for (int b : c.convs_per_stage_decoder) require(b >= 1, "convs_per_stage_decoder", "entries must be positive");

  Triple total{1, 1, 1};
  for (const auto& s : c.strides_per_stage)
    for (int a = 0; a < 3; ++a) total[a] *= s[a];
  for (int a = 0; a < 3; ++a) {
    require(c.patch_size[a] % total[a] == 0, "patch_size",
            "patch_size " + describe_triple(c.patch_size) + " is not divisible by the product of all strides " +
                describe_triple(total));
  }

  require(c.oversample_foreground_fraction >= 0 && c.oversample_foreground_fraction <= 1,
          "oversample_foreground_fraction", "must lie in [0, 1]");
  require(c.num_epochs >= 1, "num_epochs", "must be a positive integer");
  require(std::isfinite(c.initial_learning_rate) && c.initial_learning_rate > 0, "initial_learning_rate",
          "must be a positive real");
  require(c.inference_step_fraction > 0 && c.inference_step_fraction <= 1, "inference_step_fraction",
          "must lie in (0, 1]");
  std::set<int> axes;
  for (int a : c.mirror_axes) {
    require(a >= 0 && a <= 2, "mirror_axes", "axes must be 0, 1 or 2");
    require(axes.insert(a).second, "mirror_axes", "axes must not repeat");
  }
  require(c.iterations_per_epoch >= 1, "iterations_per_epoch", "must be a positive integer");
}

Json to_json(const ResolvedConfiguration& c) {
  Json j;
  j["batch_size"] = c.batch_size;
  j["patch_size"] = c.patch_size;
  j["spacing"] = c.spacing;
  j["normalization_schemes"] = c.normalization_schemes;
  j["encoder_type"] = std::string(to_string(c.encoder_type));
  j["features_base"] = c.features_base;
  j["features_cap"] = c.features_cap;
  j["blocks_per_stage_encoder"] = c.blocks_per_stage_encoder;
  j["convs_per_stage_decoder"] = c.convs_per_stage_decoder;
  j["kernel_sizes"] = c.kernel_sizes;
  j["strides_per_stage"] = c.strides_per_stage;
  j["deep_supervision"] = c.deep_supervision;
  j["oversample_foreground_fraction"] = c.oversample_foreground_fraction;
  j["num_epochs"] = c.num_epochs;
  j["initial_learning_rate"] = c.initial_learning_rate;
  j["inference_step_fraction"] = c.inference_step_fraction;
  j["mirror_axes"] = c.mirror_axes;
  j["iterations_per_epoch"] = c.iterations_per_epoch;
  return j;
}

std::vector<FieldDiff> diff_configurations(const ResolvedConfiguration& a, const ResolvedConfiguration& b) {
  const Json ja = to_json(a);
  const Json jb = to_json(b);
  std::vector<FieldDiff> diffs;
  for (const auto& [key, value] : ja.items()) {
    if (value != jb[key]) diffs.push_back({key, value, jb[key]});
  }
  return diffs;
}

}  // namespace planseg
