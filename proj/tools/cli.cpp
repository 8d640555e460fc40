#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "planseg/checkpoint.hpp"
#include "planseg/errors.hpp"
#include "planseg/inference.hpp"
#include "planseg/metrics.hpp"
#include "planseg/trainer.hpp"

namespace planseg::cli {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

std::string read_text(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot open " + file.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + file.string());
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string patch_string(const Triple& p) {
  return std::to_string(p[0]) + "x" + std::to_string(p[1]) + "x" + std::to_string(p[2]);
}

Triple patch_from_string(const std::string& s) {
  Triple p{};
  char x1 = 0, x2 = 0;
  std::istringstream in(s);
  if (!(in >> p[0] >> x1 >> p[1] >> x2 >> p[2]) || x1 != 'x' || x2 != 'x')
    throw ParameterError("malformed patch size '" + s + "'");
  return p;
}

// Exact decimal text for doubles, so CSV values read back bit for bit.
std::string number(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// "none" or an empty string mean no mirroring.
std::vector<int> parse_axes(const std::string& text) {
  std::vector<int> axes;
  if (text.empty() || text == "none") return axes;
  for (const auto& part : split(text, ',')) {
    if (part != "0" && part != "1" && part != "2") throw ParameterError("mirror axes must be drawn from {0, 1, 2}");
    const int a = part[0] - '0';
    if (std::find(axes.begin(), axes.end(), a) != axes.end()) throw ParameterError("repeated mirror axis");
    axes.push_back(a);
  }
  return axes;
}

bool is_plan_error(const std::exception& e) {
  return dynamic_cast<const ParseError*>(&e) || dynamic_cast<const SchemaError*>(&e) ||
         dynamic_cast<const LookupError*>(&e) || dynamic_cast<const CycleError*>(&e) ||
         dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const PlanningError*>(&e) ||
         dynamic_cast<const ConfigurationError*>(&e);
}

struct Globals {
  std::string plans;
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  int workers = 1;
};

PlanFile load_plans(const Globals& g) {
  if (g.plans.empty()) throw ConfigurationError("--plans is required");
  return parse_plans(read_text(g.plans));
}

ResolvedConfiguration load_configuration(const Globals& g) {
  if (g.config.empty()) throw ConfigurationError("--config is required");
  return resolve_configuration(load_plans(g), g.config);
}

fs::path require_out(const Globals& g) {
  if (g.out.empty()) throw ParameterError("--out is required");
  return g.out;
}

// Keys the planner derives when a configuration leaves them out.
const std::vector<std::string>& derived_keys() {
  static const std::vector<std::string> keys{"kernel_sizes", "strides_per_stage", "blocks_per_stage_encoder",
                                             "convs_per_stage_decoder"};
  return keys;
}

struct PlanArgs {
  bool derive = false;
  std::string diff;
  std::string write;
};

int cmd_plan(const Globals& g, const PlanArgs& a, std::ostream& out) {
  PlanFile plans = load_plans(g);
  if (g.config.empty()) throw ConfigurationError("--config is required");
  const auto resolved = resolve_configuration(plans, g.config);
  if (!a.diff.empty()) {
    const auto other = resolve_configuration(plans, a.diff);
    for (const auto& d : diff_configurations(resolved, other))
      out << d.field << ": " << d.a.dump() << " -> " << d.b.dump() << "\n";
    return kExitOk;
  }
  if (!a.derive) {
    out << to_json(resolved).dump(2) << "\n";
    return kExitOk;
  }
  // Make the planner's choices explicit in the configuration's own overrides.
  const Json full = to_json(resolved);
  auto& raw = plans.configurations.at(g.config);
  for (const auto& key : derived_keys())
    if (!raw.overrides.contains(key)) raw.overrides[key] = full.at(key);
  // The derived plan must resolve to the same configuration.
  if (!(resolve_configuration(plans, g.config) == resolved))
    throw ValidationError(g.config, "derived keys change the resolved configuration");
  const std::string text = serialize_plans(plans);
  if (!a.write.empty()) write_text(a.write, text + "\n");
  out << text << "\n";
  return kExitOk;
}

struct GenerateArgs {
  int patients = 8;
  int cases = 10;
  std::vector<int> shape{64, 64, 64};
};

int cmd_generate(const Globals& g, const GenerateArgs& a, std::ostream& out) {
  SyntheticDatasetSpec spec;
  spec.num_patients = a.patients;
  spec.total_cases = a.cases;
  spec.shape = {a.shape[0], a.shape[1], a.shape[2]};
  spec.seed = g.seed;
  const auto volumes = generate_synthetic_dataset(spec);
  write_dataset(require_out(g), volumes);
  out << "wrote " << volumes.size() << " cases to " << g.out << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string data;
  int fold = -1;
  bool all_folds = false;
  bool resume = false;
};

int cmd_train(const Globals& g, const TrainArgs& a, std::ostream& out) {
  const auto config = load_configuration(g);
  if (a.all_folds == (a.fold >= 0)) throw ParameterError("give exactly one of --fold and --all-folds");
  const auto volumes = read_dataset(a.data);
  const auto folds = assign_folds(volumes, kNumFolds, g.seed);
  const fs::path root = require_out(g);
  Json fold_json = Json::object();
  for (const auto& [id, f] : folds.fold_of_case) fold_json[id] = f;
  write_text(root / "folds.json", fold_json.dump(2) + "\n");

  std::vector<int> which;
  if (a.all_folds) {
    for (int f = 0; f < kNumFolds; ++f) which.push_back(f);
  } else {
    which.push_back(a.fold);
  }
  for (int fold : which) {
    TrainOptions opt;
    opt.output_dir = root / ("fold_" + std::to_string(fold));
    opt.configuration_name = g.config;
    if (a.resume && fs::exists(opt.output_dir / "checkpoint_final.ckpt"))
      opt.resume_from = opt.output_dir / "checkpoint_final.ckpt";
    opt.on_epoch = [&out, fold](const EpochRecord& r) {
      out << "fold " << fold << " " << to_json(r).dump() << "\n" << std::flush;
    };
    const auto t0 = Clock::now();
    const auto state = train_fold(config, volumes, folds, fold, g.seed, opt);
    out << "fold " << fold << " done: " << state.epoch << " epochs in " << seconds_since(t0) << " s\n";
  }
  return kExitOk;
}

struct PredictArgs {
  std::string data;
  std::vector<std::string> checkpoints;
  std::optional<double> step_fraction;
  std::optional<std::string> mirror_axes;
};

int cmd_predict(const Globals& g, const PredictArgs& a, std::ostream& out) {
  if (a.checkpoints.empty()) throw ParameterError("--checkpoints lists no files");
  std::optional<ResolvedConfiguration> override_config;
  if (!g.config.empty()) override_config = load_configuration(g);

  struct Model {
    nn::UNet<float> net;
    NormalizationStats stats;
    InferenceOptions options;
  };
  std::vector<Model> models;
  std::set<std::string> names;
  for (const auto& path : a.checkpoints) {
    const Checkpoint ckpt = read_checkpoint(path);
    const auto config = override_config ? *override_config : resolve_from_json(ckpt.config);
    InferenceOptions o = inference_options(config, g.workers);
    o.patch_size = resolve_from_json(ckpt.config).patch_size;
    if (a.step_fraction) o.step_fraction = *a.step_fraction;
    if (a.mirror_axes) o.mirror_axes = parse_axes(*a.mirror_axes);
    names.insert(ckpt.meta.value("configuration_name", std::string()));
    models.push_back({network_from_checkpoint(ckpt), stats_from_json(ckpt.normalization), o});
  }
  // Reported settings are the first model's; flags apply to every model alike.
  const InferenceOptions& shown = models.front().options;
  std::string config_name = g.config;
  if (config_name.empty()) {
    names.erase("");
    for (const auto& n : names) config_name += (config_name.empty() ? "" : ",") + n;
  }

  const auto volumes = read_dataset(a.data);
  const fs::path root = require_out(g);
  Json cases = Json::array();
  for (const auto& v : volumes) {
    const auto t0 = Clock::now();
    std::vector<ProbabilityMap> maps;
    for (const auto& m : models) maps.push_back(predict_volume(m.net, normalize(v, m.stats), m.options));
    const ProbabilityMap mean = ensemble(maps);
    const auto labels = segment(mean);
    const double seconds = seconds_since(t0);
    write_case_prediction(root / v.case_id, v, mean, labels);
    cases.push_back({{"case_id", v.case_id}, {"seconds", seconds}});
    out << v.case_id << " " << seconds << " s\n" << std::flush;
  }
  Json record = {{"configuration", config_name},
                 {"checkpoints", a.checkpoints},
                 {"step_fraction", shown.step_fraction},
                 {"mirror_axes", shown.mirror_axes},
                 {"workers", g.workers},
                 {"cases", cases}};
  write_text(root / "prediction.json", record.dump(2) + "\n");
  return kExitOk;
}

struct EvaluateArgs {
  std::string pred_dir;
  std::string gt_dir;
};

int cmd_evaluate(const Globals& g, const EvaluateArgs& a, std::ostream& out) {
  const auto truth = read_dataset(a.gt_dir);
  std::vector<CaseMetrics> cases;
  for (const auto& v : truth) {
    if (!v.segmentation) throw IoError("case " + v.case_id + " has no ground-truth segmentation");
    const Volume pred = read_case_prediction(fs::path(a.pred_dir) / v.case_id);
    if (pred.shape != v.shape) throw ShapeError("prediction for " + v.case_id + " has a different shape");
    cases.push_back(evaluate_case(v.case_id, *pred.segmentation, *v.segmentation, v.shape, v.spacing));
  }
  const EvalReport report = aggregate(cases);
  write_report(require_out(g), report);
  const Json j = to_json(report);
  out << "cases " << report.cases.size() << " mean_dice_challenge " << j.at("mean_dice_challenge").dump()
      << " mean_dice_nnunet " << j.at("mean_dice_nnunet").dump() << " mean_fp_volume_ml "
      << j.at("mean_fp_volume_ml").dump() << " mean_fn_volume_ml " << j.at("mean_fn_volume_ml").dump() << "\n";
  return kExitOk;
}

struct ScalingArgs {
  std::vector<std::string> configs;
  std::vector<std::uint64_t> seeds;
  std::string data;
  int patients = 40;
  int cases = 48;
  std::vector<int> shape{64, 64, 64};
  std::uint64_t data_seed = 0;
};

int cmd_experiment_scaling(const Globals& g, const ScalingArgs& a, std::ostream& out) {
  const PlanFile plans = load_plans(g);
  ExperimentGrid grid{a.configs, a.seeds, require_out(g)};
  std::vector<Volume> volumes;
  if (!a.data.empty()) {
    volumes = read_dataset(a.data);
  } else {
    SyntheticDatasetSpec spec;
    spec.num_patients = a.patients;
    spec.total_cases = a.cases;
    spec.shape = {a.shape[0], a.shape[1], a.shape[2]};
    spec.seed = a.data_seed;
    volumes = generate_synthetic_dataset(spec);
  }
  const auto cells = run_scaling_experiment(plans, grid, volumes, g.workers, &out);
  write_text(grid.output_dir / "scaling.csv", scaling_csv(cells));
  write_text(grid.output_dir / "scaling_plot.json", scaling_plot_data(cells).dump(2) + "\n");
  const auto failed = std::count_if(cells.begin(), cells.end(), [](const ScalingCell& c) { return !c.ok(); });
  out << cells.size() - failed << " of " << cells.size() << " cells completed\n";
  return failed == 0 ? kExitOk : kExitFailure;
}

}  // namespace

int default_workers() {
  const char* env = std::getenv("PLANSEG_NUM_WORKERS");
  if (!env) return 1;
  try {
    const int n = std::stoi(env);
    return n >= 1 ? n : 1;
  } catch (const std::exception&) {
    return 1;
  }
}

std::vector<ScalingCell> run_scaling_experiment(const PlanFile& plans, const ExperimentGrid& grid,
                                                std::span<const Volume> volumes, int workers, std::ostream* progress) {
  if (grid.configurations.empty() || grid.seeds.empty())
    throw ParameterError("the experiment grid needs at least one configuration and one seed");
  // Resolve everything up front so a typo fails before hours of training.
  std::vector<ResolvedConfiguration> configs;
  for (const auto& name : grid.configurations) configs.push_back(resolve_configuration(plans, name));

  std::vector<ScalingCell> cells;
  for (std::size_t c = 0; c < configs.size(); ++c) {
    for (std::uint64_t seed : grid.seeds) {
      ScalingCell cell;
      cell.configuration = grid.configurations[c];
      cell.encoder = configs[c].encoder_type;
      cell.batch_size = configs[c].batch_size;
      cell.patch_size = configs[c].patch_size;
      cell.seed = seed;
      const auto t0 = Clock::now();
      try {
        CVOptions opt;
        opt.inference_workers = workers;
        if (!grid.output_dir.empty())
          opt.output_dir = grid.output_dir / "runs" / (cell.configuration + "_seed" + std::to_string(seed));
        opt.train.configuration_name = cell.configuration;
        const CVResult r = run_cross_validation(configs[c], volumes, seed, opt);
        cell.dice_nnunet = r.pooled.mean_dice_nnunet;
        cell.dice_challenge = r.pooled.mean_dice_challenge;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      cell.seconds = seconds_since(t0);
      if (progress) {
        *progress << cell.configuration << " seed " << seed << ": ";
        if (cell.ok())
          *progress << "dice_nnunet " << (cell.dice_nnunet ? number(*cell.dice_nnunet) : "null") << " dice_challenge "
                    << number(cell.dice_challenge);
        else
          *progress << "failed: " << cell.error;
        *progress << " (" << cell.seconds << " s)\n" << std::flush;
      }
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

std::string scaling_csv(std::span<const ScalingCell> cells) {
  std::string s = "config,encoder,batch_size,patch_size,seed,dice_nnunet,dice_challenge,seconds,error\n";
  for (const auto& c : cells) {
    std::string error = c.error;
    // Keep one record per line and no stray separators.
    std::replace(error.begin(), error.end(), ',', ';');
    std::replace(error.begin(), error.end(), '\n', ' ');
    s += c.configuration + "," + std::string(to_string(c.encoder)) + "," + std::to_string(c.batch_size) + "," +
         patch_string(c.patch_size) + "," + std::to_string(c.seed) + "," +
         (c.ok() && c.dice_nnunet ? number(*c.dice_nnunet) : "") + "," + (c.ok() ? number(c.dice_challenge) : "") +
         "," + number(c.seconds) + "," + error + "\n";
  }
  return s;
}

std::vector<ScalingCell> scaling_cells_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("config,encoder,", 0) != 0) throw IoError("not a scaling CSV");
  std::vector<ScalingCell> cells;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 9) throw IoError("malformed scaling CSV row: " + line);
    ScalingCell c;
    c.configuration = f[0];
    c.encoder = encoder_type_from_string(f[1]);
    c.batch_size = std::stoi(f[2]);
    c.patch_size = patch_from_string(f[3]);
    c.seed = std::stoull(f[4]);
    if (!f[5].empty()) c.dice_nnunet = std::stod(f[5]);
    c.error = f[8];
    if (c.ok()) c.dice_challenge = std::stod(f[6]);
    c.seconds = std::stod(f[7]);
    cells.push_back(std::move(c));
  }
  return cells;
}

Json scaling_plot_data(std::span<const ScalingCell> cells) {
  // Series keyed by encoder and patch; points by batch size, with per-seed values and their mean.
  std::map<std::pair<std::string, std::string>, std::map<int, std::vector<const ScalingCell*>>> series;
  for (const auto& c : cells)
    if (c.ok()) series[{std::string(to_string(c.encoder)), patch_string(c.patch_size)}][c.batch_size].push_back(&c);
  Json out = {{"x", "batch_size"}, {"y", "pooled_dice_nnunet"}, {"series", Json::array()}};
  for (const auto& [key, points] : series) {
    Json s = {{"encoder", key.first}, {"patch_size", key.second}, {"points", Json::array()}};
    for (const auto& [batch, runs] : points) {
      Json seeds = Json::array();
      double sum = 0.0;
      int n = 0;
      for (const auto* c : runs) {
        seeds.push_back({{"seed", c->seed},
                         {"configuration", c->configuration},
                         {"dice_nnunet", c->dice_nnunet ? Json(*c->dice_nnunet) : Json(nullptr)},
                         {"dice_challenge", c->dice_challenge}});
        if (c->dice_nnunet) {
          sum += *c->dice_nnunet;
          ++n;
        }
      }
      s["points"].push_back({{"batch_size", batch},
                             {"mean_dice_nnunet", n > 0 ? Json(sum / n) : Json(nullptr)},
                             {"runs", seeds}});
    }
    out["series"].push_back(s);
  }
  return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"planseg: plans-driven 3D lesion segmentation"};
  app.require_subcommand(1);
  Globals g;
  g.workers = default_workers();
  app.add_option("--plans", g.plans, "Plans file");
  app.add_option("--config", g.config, "Configuration name in the plans file");
  app.add_option("--seed", g.seed, "Seed for data generation, fold assignment and training");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--workers", g.workers, "Concurrent inference tiles (default PLANSEG_NUM_WORKERS or 1)")
      ->check(CLI::PositiveNumber);

  PlanArgs plan_args;
  auto* plan = app.add_subcommand("plan", "Resolve and validate a configuration");
  plan->fallthrough();
  plan->add_flag("--derive", plan_args.derive, "Write planner-derived topology keys into the configuration");
  plan->add_option("--diff", plan_args.diff, "Print the field differences to this configuration");
  plan->add_option("--write", plan_args.write, "With --derive, save the updated plans file here");

  GenerateArgs gen_args;
  auto* gen = app.add_subcommand("generate", "Write a synthetic two-channel dataset");
  gen->fallthrough();
  gen->add_option("--patients", gen_args.patients)->check(CLI::PositiveNumber);
  gen->add_option("--cases", gen_args.cases)->check(CLI::PositiveNumber);
  gen->add_option("--shape", gen_args.shape)->expected(3);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train one fold or all five");
  train->fallthrough();
  train->add_option("--data", train_args.data, "Dataset directory")->required();
  train->add_option("--fold", train_args.fold)->check(CLI::Range(0, kNumFolds - 1));
  train->add_flag("--all-folds", train_args.all_folds);
  train->add_flag("--resume", train_args.resume, "Continue from each fold's checkpoint_final.ckpt when present");

  PredictArgs predict_args;
  std::string axes_text;
  auto setup_predict = [&](CLI::App* cmd) {
    cmd->fallthrough();
    cmd->add_option("--data", predict_args.data, "Dataset directory")->required();
    cmd->add_option("--checkpoints", predict_args.checkpoints, "Checkpoint files, comma separated")
        ->delimiter(',')
        ->required();
    cmd->add_option("--step-fraction", predict_args.step_fraction);
    cmd->add_option("--mirror-axes", axes_text, "Comma separated axes, or none");
  };
  auto* predict = app.add_subcommand("predict", "Sliding-window inference, averaged over the listed checkpoints");
  setup_predict(predict);
  auto* ensemble_cmd = app.add_subcommand("ensemble", "Same as predict");
  setup_predict(ensemble_cmd);

  EvaluateArgs eval_args;
  auto* evaluate = app.add_subcommand("evaluate", "Score predictions against ground truth");
  evaluate->fallthrough();
  evaluate->add_option("--pred-dir", eval_args.pred_dir)->required();
  evaluate->add_option("--gt-dir", eval_args.gt_dir)->required();

  ScalingArgs scaling_args;
  auto* experiment = app.add_subcommand("experiment", "Experiments over several configurations");
  experiment->fallthrough();
  experiment->require_subcommand(1);
  auto* scaling = experiment->add_subcommand("scaling", "Cross-validate every configuration under every seed");
  scaling->fallthrough();
  scaling->add_option("--configs", scaling_args.configs, "Configuration names, comma separated")->delimiter(',');
  scaling->add_option("--seeds", scaling_args.seeds, "Seeds, comma separated")->delimiter(',');
  scaling->add_option("--data", scaling_args.data, "Dataset directory; synthetic data when absent");
  scaling->add_option("--patients", scaling_args.patients)->check(CLI::PositiveNumber);
  scaling->add_option("--cases", scaling_args.cases)->check(CLI::PositiveNumber);
  scaling->add_option("--shape", scaling_args.shape)->expected(3);
  scaling->add_option("--data-seed", scaling_args.data_seed);

  std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (plan->parsed()) return cmd_plan(g, plan_args, out);
    if (gen->parsed()) return cmd_generate(g, gen_args, out);
    if (train->parsed()) return cmd_train(g, train_args, out);
    if (predict->parsed() || ensemble_cmd->parsed()) {
      if (predict->count("--mirror-axes") + ensemble_cmd->count("--mirror-axes") > 0)
        predict_args.mirror_axes = axes_text;
      return cmd_predict(g, predict_args, out);
    }
    if (evaluate->parsed()) return cmd_evaluate(g, eval_args, out);
    if (scaling->parsed()) return cmd_experiment_scaling(g, scaling_args, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return is_plan_error(e) ? kExitInvalidPlan : kExitFailure;
  }
  return kExitFailure;
}

}  // namespace planseg::cli
