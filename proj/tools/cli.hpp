#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "planseg/dataset.hpp"
#include "planseg/plans.hpp"

namespace planseg::cli {

// Exit codes. Plan and configuration problems are 2 so scripts can tell them apart from runtime failures.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitInvalidPlan = 2;

struct ExperimentGrid {
  std::vector<std::string> configurations;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output_dir;
};

// One (configuration, seed) cross-validation run of the scaling study.
struct ScalingCell {
  std::string configuration;
  EncoderType encoder = EncoderType::Plain;
  int batch_size = 0;
  Triple patch_size{};
  std::uint64_t seed = 0;
  std::optional<double> dice_nnunet;
  double dice_challenge = 0.0;
  double seconds = 0.0;
  std::string error;  // empty on success

  bool ok() const { return error.empty(); }
};

// Runs every cell in grid order. A failing cell is recorded and the rest still run.
// Throws ParameterError on an empty grid and LookupError for names the plans file lacks.
std::vector<ScalingCell> run_scaling_experiment(const PlanFile& plans, const ExperimentGrid& grid,
                                                std::span<const Volume> volumes, int workers, std::ostream* progress);

std::string scaling_csv(std::span<const ScalingCell> cells);
std::vector<ScalingCell> scaling_cells_from_csv(const std::string& text);
// Batch size on the x axis, one series per (encoder, patch size).
Json scaling_plot_data(std::span<const ScalingCell> cells);

// Worker count from PLANSEG_NUM_WORKERS, 1 when unset or invalid.
int default_workers();

// Full command line, argv[0] included.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace planseg::cli
