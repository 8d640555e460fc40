#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "planseg/dataset.hpp"
#include "planseg/nn/network.hpp"

namespace planseg {

struct TilingPlan {
  Triple image_shape{};  // padded to at least the patch on every axis
  Triple patch_size{};
  double step_fraction = 0.5;
  std::array<std::vector<int>, 3> axis_positions;
  std::vector<Triple> positions;  // Cartesian product, lexicographic in (axis 0, axis 1, axis 2)
};

// Corners along one axis; `image` must already be at least `patch`.
std::vector<int> axis_positions(int image, int patch, double step_fraction);

// Pads `image_shape` up to `patch_size` first. Throws ParameterError for a fraction outside (0, 1].
TilingPlan compute_tiling(const Triple& image_shape, const Triple& patch_size, double step_fraction);

// Separable Gaussian, sigma = patch / 8, max 1, no zeros. Laid out x fastest.
std::vector<float> gaussian_importance_map(const Triple& patch_size);

// Per-class probabilities, class-major, x fastest within a class.
struct ProbabilityMap {
  int num_classes = 0;
  Triple shape{};
  std::vector<float> data;

  std::int64_t voxels() const { return voxel_count(shape); }
  float* channel(int c) { return data.data() + c * voxels(); }
  const float* channel(int c) const { return data.data() + c * voxels(); }
  bool operator==(const ProbabilityMap&) const = default;
};

// Maps a (1, channels, patch) input to (1, classes, patch) logits.
using PatchPredictor = std::function<Tensor<float>(const Tensor<float>&)>;

struct InferenceOptions {
  Triple patch_size{};
  double step_fraction = 0.5;
  std::vector<int> mirror_axes;
  int num_classes = kNumClasses;
  // Tiles evaluated concurrently; results are merged in tile order, so output does not depend on this.
  int workers = 1;
};

struct InferenceStats {
  std::int64_t tiles = 0;
  std::int64_t forward_passes = 0;
};

ProbabilityMap predict_volume(const PatchPredictor& predictor, const Volume& volume, const InferenceOptions& options,
                              InferenceStats* stats = nullptr);
ProbabilityMap predict_volume(const nn::UNet<float>& net, const Volume& volume, const InferenceOptions& options,
                              InferenceStats* stats = nullptr);

// Voxelwise mean. Throws ShapeError on mismatched maps, ParameterError on an empty list.
ProbabilityMap ensemble(std::span<const ProbabilityMap> maps);

// Voxelwise argmax, ties to the lower class index.
std::vector<std::uint8_t> segment(const ProbabilityMap& map);

// Prediction directory for one case: header.json, probabilities.raw (f32le, class-major), segmentation.raw (u8).
void write_case_prediction(const std::filesystem::path& dir, const Volume& source, const ProbabilityMap& map,
                           const std::vector<std::uint8_t>& labels);
// Reads a case prediction back as a volume whose segmentation is the predicted label map (no channels).
Volume read_case_prediction(const std::filesystem::path& dir);
ProbabilityMap read_case_probabilities(const std::filesystem::path& dir);

}  // namespace planseg
