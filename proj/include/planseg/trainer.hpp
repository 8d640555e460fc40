#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "planseg/checkpoint.hpp"
#include "planseg/dataset.hpp"
#include "planseg/inference.hpp"
#include "planseg/metrics.hpp"
#include "planseg/nn/network.hpp"
#include "planseg/plans.hpp"

namespace planseg {

inline constexpr double kGradientClipNorm = 12.0;
inline constexpr int kNumFolds = 5;

struct EpochRecord {
  int epoch = 0;  // 0-based
  double train_loss = 0.0;
  std::optional<double> val_dice;
  double learning_rate = 0.0;
  bool diverged = false;

  bool operator==(const EpochRecord&) const = default;
};

nlohmann::json to_json(const EpochRecord& r);

struct TrainingState {
  int epoch = 0;  // completed epochs
  nn::UNet<float> network;
  std::vector<std::vector<float>> momentum;
  std::mt19937_64 rng;
  double lr_scale = 1.0;  // halved after every divergence
  double best_validation_dice = -1.0;
  std::vector<EpochRecord> history;
  NormalizationStats normalization;
  ResolvedConfiguration config;
  std::uint64_t seed = 0;
};

struct TrainOptions {
  // Checkpoints (checkpoint_final.ckpt, checkpoint_best.ckpt) and log.jsonl; empty disables file output.
  std::filesystem::path output_dir;
  // Stop after this many completed epochs, leaving a resumable checkpoint_final.ckpt. Negative: run all.
  int stop_after_epochs = -1;
  // Continue from this checkpoint instead of starting fresh.
  std::optional<std::filesystem::path> resume_from;
  double gradient_clip_norm = kGradientClipNorm;
  int max_validation_patches = 8;
  std::function<void(const EpochRecord&)> on_epoch;
  // Recorded in checkpoint metadata so predictions can name the configuration they came from.
  std::string configuration_name;
};

// Per-channel count check against the configuration. Throws ConfigurationError.
void check_dataset(const ResolvedConfiguration& config, std::span<const Volume> volumes);

// Training-split stats, falling back to whole-volume stats when the split holds no foreground.
NormalizationStats fold_normalization(std::span<const Volume> training);

// Trains the model of one fold. `volumes` are raw (unnormalized); the fold's training split supplies the
// normalization statistics.
TrainingState train_fold(const ResolvedConfiguration& config, std::span<const Volume> volumes,
                         const FoldAssignment& folds, int fold, std::uint64_t seed, const TrainOptions& options = {});

Checkpoint make_checkpoint(TrainingState& state, const std::string& configuration_name = {});

struct CVOptions {
  std::filesystem::path output_dir;  // per-fold subdirectories; empty disables file output
  int inference_workers = 1;
  TrainOptions train;  // output_dir and resume_from are set per fold
  std::function<void(int fold, const EpochRecord&)> on_epoch;
};

struct CVResult {
  std::vector<std::optional<double>> fold_dice;  // nnU-Net convention, per fold
  EvalReport pooled;                              // every validation case, each predicted once
  std::map<std::string, int> fold_of_case;
  std::vector<std::vector<EpochRecord>> histories;
};

CVResult run_cross_validation(const ResolvedConfiguration& config, std::span<const Volume> volumes, std::uint64_t seed,
                              const CVOptions& options = {});

// Inference options implied by a configuration.
InferenceOptions inference_options(const ResolvedConfiguration& config, int workers = 1);

}  // namespace planseg
