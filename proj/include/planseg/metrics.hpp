#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "planseg/types.hpp"

namespace planseg {

// 2|P and G| / (|P| + |G|); nullopt when both masks are empty. Throws ShapeError on size mismatch.
std::optional<double> dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

// 26-connected component labels (0 = background, components numbered from 1 in scan order).
std::vector<std::int32_t> label_components(std::span<const std::uint8_t> mask, const Triple& shape,
                                           int* num_components = nullptr);

struct FpFnVolumes {
  double fp_ml = 0.0;
  double fn_ml = 0.0;
};

// Volume of predicted components with no ground-truth overlap (fp) and of ground-truth components
// with no predicted overlap (fn). Voxel volume is the spacing product in mm^3, reported in ml.
FpFnVolumes fp_fn_volumes(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, const Triple& shape,
                          const Spacing& spacing);

struct CaseMetrics {
  std::string case_id;
  std::optional<double> dice;
  double fp_volume_ml = 0.0;
  double fn_volume_ml = 0.0;
  bool gt_empty = false;
  bool pred_empty = false;

  bool operator==(const CaseMetrics&) const = default;
};

CaseMetrics evaluate_case(const std::string& case_id, std::span<const std::uint8_t> pred,
                          std::span<const std::uint8_t> gt, const Triple& shape, const Spacing& spacing);

inline constexpr const char* kConventionNote =
    "mean_dice_challenge averages all cases and scores an empty prediction of an empty ground truth as 0; "
    "mean_dice_nnunet excludes such cases and is null when no case remains";

struct EvalReport {
  std::vector<CaseMetrics> cases;
  double mean_dice_challenge = 0.0;
  std::optional<double> mean_dice_nnunet;
  double mean_fp_volume = 0.0;
  double mean_fn_volume = 0.0;
  std::string convention_note = kConventionNote;
};

// Throws ParameterError on an empty list.
EvalReport aggregate(std::span<const CaseMetrics> cases);

nlohmann::json to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);
std::string to_csv(const EvalReport& report);

void write_report(const std::filesystem::path& dir, const EvalReport& report);

}  // namespace planseg
