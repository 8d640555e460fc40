#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "planseg/types.hpp"

namespace planseg {

// Multi-channel volume in x-fastest order, with an optional binary lesion mask.
struct Volume {
  std::string case_id;
  std::string patient_id;
  Triple shape{};
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<std::vector<float>> channels;
  std::optional<std::vector<std::uint8_t>> segmentation;

  std::int64_t voxels() const { return voxel_count(shape); }
  int num_channels() const { return static_cast<int>(channels.size()); }
  bool has_foreground() const;
  std::vector<std::int64_t> foreground_indices() const;

  bool operator==(const Volume&) const = default;
};

// Throws ShapeError when channels or segmentation disagree with `shape`.
void check_volume(const Volume& v);

struct SyntheticDatasetSpec {
  int num_patients = 8;
  // Every patient receives one case; the remainder goes to randomly drawn patients.
  int total_cases = 10;
  Triple shape{64, 64, 64};
  Spacing spacing{2.0, 2.0, 2.0};
  int min_lesions = 1;
  int max_lesions = 3;
  double empty_probability = 0.1;
  std::uint64_t seed = 0;
};

inline const std::vector<std::string> kChannelNames = {"CT", "PET"};

std::vector<Volume> generate_synthetic_dataset(const SyntheticDatasetSpec& spec);

struct ChannelStats {
  double clip_lower = 0.0;
  double clip_upper = 0.0;
  double mean = 0.0;
  double std = 1.0;

  bool operator==(const ChannelStats&) const = default;
};

struct NormalizationStats {
  std::vector<ChannelStats> channels;

  bool operator==(const NormalizationStats&) const = default;
};

inline constexpr double kStdEpsilon = 1e-8;
inline constexpr double kClipLowerPercentile = 0.5;
inline constexpr double kClipUpperPercentile = 99.5;

// Linear-interpolation percentile of an ascending-sorted sample, q in [0, 100].
double percentile_sorted(std::span<const double> sorted, double q);

// Stats of one pooled sample: clip bounds at the 0.5/99.5 percentiles, mean and std inside the bounds.
ChannelStats channel_stats(std::vector<double> values);

// Per-channel stats over foreground voxels. Throws StatsError when the volumes hold no foreground.
NormalizationStats compute_normalization_stats(std::span<const Volume> training);
// Same computation over every voxel; the fallback for lesion-free training splits.
NormalizationStats compute_whole_volume_stats(std::span<const Volume> training);

Volume normalize(Volume v, const NormalizationStats& stats);

nlohmann::json to_json(const NormalizationStats& stats);
NormalizationStats stats_from_json(const nlohmann::json& j);

struct FoldAssignment {
  int num_folds = 0;
  std::map<std::string, int> fold_of_case;

  std::vector<std::string> cases_in_fold(int fold) const;
  bool operator==(const FoldAssignment&) const = default;
};

// Patients are sorted, shuffled under `seed` and dealt round-robin to folds. Throws AssignmentError.
FoldAssignment assign_folds(std::span<const Volume> volumes, int num_folds, std::uint64_t seed);

struct PatchSample {
  Triple corner{};               // in padded coordinates
  std::vector<float> image;      // channel-major, x fastest
  std::vector<std::uint8_t> label;
};

// Symmetric zero padding that brings each axis up to at least `patch`.
Triple padded_shape(const Triple& shape, const Triple& patch);
Triple padding_before(const Triple& shape, const Triple& patch);

// `foreground` may hold precomputed foreground_indices() to avoid rescanning the mask.
PatchSample sample_patch(const Volume& v, const Triple& patch, bool force_foreground, std::mt19937_64& rng,
                         const std::vector<std::int64_t>* foreground = nullptr);

// Copies the patch at `corner` (padded coordinates); outside voxels are zero.
PatchSample extract_patch(const Volume& v, const Triple& patch, const Triple& corner);

// MVOL directory format.
void write_volume(const std::filesystem::path& dir, const Volume& v);
Volume read_volume(const std::filesystem::path& dir);
void write_dataset(const std::filesystem::path& root, std::span<const Volume> volumes);
std::vector<Volume> read_dataset(const std::filesystem::path& root);

// Raw little-endian helpers shared with prediction output.
void write_f32le(const std::filesystem::path& file, std::span<const float> values);
std::vector<float> read_f32le(const std::filesystem::path& file, std::int64_t count);
void write_u8(const std::filesystem::path& file, std::span<const std::uint8_t> values);
std::vector<std::uint8_t> read_u8(const std::filesystem::path& file, std::int64_t count);

}  // namespace planseg
