#include "planseg/trainer.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "planseg/errors.hpp"
#include "planseg/loss.hpp"
#include "planseg/optim.hpp"

namespace planseg {

namespace fs = std::filesystem;
using nlohmann::json;

json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"train_loss", std::isfinite(r.train_loss) ? json(r.train_loss) : json(nullptr)},
          {"val_dice", r.val_dice ? json(*r.val_dice) : json(nullptr)},
          {"lr", r.learning_rate},
          {"divergence", r.diverged}};
}

namespace {

EpochRecord epoch_from_json(const json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.train_loss = j.at("train_loss").is_null() ? NAN : j.at("train_loss").get<double>();
  if (!j.at("val_dice").is_null()) r.val_dice = j.at("val_dice").get<double>();
  r.learning_rate = j.at("lr").get<double>();
  r.diverged = j.at("divergence").get<bool>();
  return r;
}

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

std::mt19937_64 rng_from_string(const std::string& text) {
  std::istringstream in(text);
  std::mt19937_64 rng;
  in >> rng;
  if (!in) throw IoError("corrupt random-generator state in checkpoint");
  return rng;
}

std::mt19937_64 derived_rng(std::uint64_t seed, int fold, int stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fold), static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

struct Batch {
  Tensor<float> image;
  std::vector<std::uint8_t> label;
};

// Mirrors along random axes and scales every channel by a factor in [0.9, 1.1].
void augment(std::vector<float>& image, std::vector<std::uint8_t>& label, int channels, const Triple& patch,
             std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  unsigned mask = 0;
  for (int a = 0; a < 3; ++a)
    if (coin(rng)) mask |= 1u << a;
  flip_blocks(std::span<float>(image), patch, mask);
  flip_blocks(std::span<std::uint8_t>(label), patch, mask);
  std::uniform_real_distribution<float> jitter(0.9f, 1.1f);
  const std::int64_t vox = voxel_count(patch);
  for (int c = 0; c < channels; ++c) {
    const float f = jitter(rng);
    for (std::int64_t i = 0; i < vox; ++i) image[c * vox + i] *= f;
  }
}

class BatchSampler {
 public:
  BatchSampler(const std::vector<Volume>& train, const ResolvedConfiguration& config)
      : train_(train), config_(config) {
    for (const auto& v : train_) foreground_.push_back(v.foreground_indices());
  }

  Batch next(std::mt19937_64& rng) const {
    const int b = config_.batch_size;
    const int channels = config_.num_input_channels();
    const Triple patch = config_.patch_size;
    const std::int64_t vox = voxel_count(patch);
    const int forced = static_cast<int>(std::lround(b * config_.oversample_foreground_fraction));
    Batch batch{Tensor<float>(b, channels, patch), std::vector<std::uint8_t>(static_cast<std::size_t>(b * vox))};
    std::uniform_int_distribution<std::size_t> pick(0, train_.size() - 1);
    for (int i = 0; i < b; ++i) {
      const std::size_t k = pick(rng);
      PatchSample s = sample_patch(train_[k], patch, i < forced, rng, &foreground_[k]);
      augment(s.image, s.label, channels, patch, rng);
      std::copy(s.image.begin(), s.image.end(), batch.image.sample(i));
      std::copy(s.label.begin(), s.label.end(), batch.label.begin() + i * vox);
    }
    return batch;
  }

 private:
  const std::vector<Volume>& train_;
  const ResolvedConfiguration& config_;
  std::vector<std::vector<std::int64_t>> foreground_;
};

// Fixed foreground-centred patches from the validation split, scored by pooled hard Dice.
class Validator {
 public:
  Validator(const std::vector<Volume>& val, const ResolvedConfiguration& config, int max_patches, std::mt19937_64 rng) {
    if (val.empty()) return;
    const int count = std::min<int>(max_patches, std::max<int>(static_cast<int>(val.size()), 1));
    for (int i = 0; i < count; ++i) {
      const Volume& v = val[i % val.size()];
      PatchSample s = sample_patch(v, config.patch_size, true, rng);
      Tensor<float> t(1, v.num_channels(), config.patch_size);
      t.data = std::move(s.image);
      inputs_.push_back(std::move(t));
      labels_.push_back(std::move(s.label));
    }
  }

  std::optional<double> score(const nn::UNet<float>& net) const {
    std::vector<std::uint8_t> pred_all, gt_all;
    for (std::size_t i = 0; i < inputs_.size(); ++i) {
      const Tensor<float> logits = net.predict(inputs_[i]);
      const std::int64_t vox = logits.spatial();
      for (std::int64_t v = 0; v < vox; ++v) {
        int best = 0;
        for (int c = 1; c < logits.c; ++c)
          if (logits.channel(0, c)[v] > logits.channel(0, best)[v]) best = c;
        pred_all.push_back(best == 1);
      }
      gt_all.insert(gt_all.end(), labels_[i].begin(), labels_[i].end());
    }
    if (pred_all.empty()) return std::nullopt;
    return dice(pred_all, gt_all);
  }

 private:
  std::vector<Tensor<float>> inputs_;
  std::vector<std::vector<std::uint8_t>> labels_;
};

struct Snapshot {
  std::vector<std::vector<float>> params;
  std::vector<std::vector<float>> momentum;
};

Snapshot take_snapshot(nn::UNet<float>& net, const SgdNesterov<float>& opt) {
  Snapshot s;
  for (auto* p : net.parameters()) s.params.push_back(p->value);
  s.momentum = opt.buffers();
  return s;
}

void restore_snapshot(const Snapshot& s, nn::UNet<float>& net, SgdNesterov<float>& opt) {
  auto params = net.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = s.params[k];
  opt.buffers() = s.momentum;
}

void split_fold(std::span<const Volume> volumes, const FoldAssignment& folds, int fold, std::vector<Volume>& train,
                std::vector<Volume>& val) {
  for (const auto& v : volumes) {
    auto it = folds.fold_of_case.find(v.case_id);
    if (it == folds.fold_of_case.end()) throw ConfigurationError("case " + v.case_id + " has no fold");
    (it->second == fold ? val : train).push_back(v);
  }
}

}  // namespace

void check_dataset(const ResolvedConfiguration& config, std::span<const Volume> volumes) {
  for (const auto& v : volumes) {
    if (v.num_channels() != config.num_input_channels())
      throw ConfigurationError("case " + v.case_id + " has " + std::to_string(v.num_channels()) +
                               " channels but the configuration lists " +
                               std::to_string(config.num_input_channels()) + " normalization schemes");
    if (!v.segmentation) throw ConfigurationError("case " + v.case_id + " has no segmentation");
  }
}

NormalizationStats fold_normalization(std::span<const Volume> training) {
  try {
    return compute_normalization_stats(training);
  } catch (const StatsError&) {
    return compute_whole_volume_stats(training);
  }
}

Checkpoint make_checkpoint(TrainingState& state, const std::string& configuration_name) {
  Checkpoint ckpt;
  ckpt.descriptor = state.network.descriptor();
  ckpt.seed = state.seed;
  ckpt.epoch = state.epoch;
  json history = json::array();
  for (const auto& r : state.history) history.push_back(to_json(r));
  ckpt.meta = {{"rng_state", rng_to_string(state.rng)},
               {"lr_scale", state.lr_scale},
               {"best_validation_dice", state.best_validation_dice},
               {"history", history}};
  if (!configuration_name.empty()) ckpt.meta["configuration_name"] = configuration_name;
  ckpt.config = to_json(state.config);
  ckpt.normalization = to_json(state.normalization);
  auto params = state.network.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = *params[k];
    ckpt.tensors["param/" + p.name] = {p.shape, p.value};
    ckpt.tensors["momentum/" + p.name] = {p.shape, state.momentum[k]};
  }
  return ckpt;
}

TrainingState train_fold(const ResolvedConfiguration& config, std::span<const Volume> volumes,
                         const FoldAssignment& folds, int fold, std::uint64_t seed, const TrainOptions& options) {
  if (fold < 0 || fold >= folds.num_folds) throw ParameterError("fold index out of range");
  check_dataset(config, volumes);
  std::vector<Volume> train, val;
  split_fold(volumes, folds, fold, train, val);
  if (train.empty()) throw ConfigurationError("fold " + std::to_string(fold) + " has no training cases");

  TrainingState state;
  state.config = config;
  state.seed = seed;
  state.normalization = fold_normalization(train);
  for (auto& v : train) v = normalize(std::move(v), state.normalization);
  for (auto& v : val) v = normalize(std::move(v), state.normalization);

  const TopologyDescriptor topo = describe(config);
  // Each fold is an independent run, so its initial weights come from its own stream.
  state.network = nn::UNet<float>(topo, derived_rng(seed, fold, 2)());
  state.rng = derived_rng(seed, fold, 0);
  for (auto* p : state.network.parameters()) state.momentum.emplace_back(p->value.size(), 0.0f);

  if (options.resume_from) {
    const Checkpoint ckpt = read_checkpoint(*options.resume_from);
    if (!(ckpt.descriptor == topo)) throw ConfigurationError("checkpoint topology does not match the configuration");
    state.epoch = ckpt.epoch;
    state.seed = ckpt.seed;
    state.rng = rng_from_string(ckpt.meta.at("rng_state").get<std::string>());
    state.lr_scale = ckpt.meta.at("lr_scale").get<double>();
    state.best_validation_dice = ckpt.meta.at("best_validation_dice").get<double>();
    for (const auto& r : ckpt.meta.at("history")) state.history.push_back(epoch_from_json(r));
    SgdNesterov<float> tmp(state.network.parameters());
    load_state(ckpt, state.network, &tmp);
    state.momentum = tmp.buffers();
  }

  const BatchSampler sampler(train, config);
  const Validator validator(val, config, options.max_validation_patches, derived_rng(seed, fold, 1));
  const auto weights = deep_supervision_weights(state.network.num_outputs());

  SgdNesterov<float> optimizer(state.network.parameters());
  optimizer.buffers() = state.momentum;
  const auto params = state.network.parameters();

  const bool write_files = !options.output_dir.empty();
  std::ofstream log;
  if (write_files) {
    fs::create_directories(options.output_dir);
    log.open(options.output_dir / "log.jsonl", options.resume_from ? std::ios::app : std::ios::trunc);
  }

  const int last_epoch =
      options.stop_after_epochs >= 0 ? std::min(config.num_epochs, options.stop_after_epochs) : config.num_epochs;
  while (state.epoch < last_epoch) {
    const int e = state.epoch;
    Snapshot snapshot = take_snapshot(state.network, optimizer);
    EpochRecord record;
    record.epoch = e;
    double loss_sum = 0.0;
    int loss_count = 0;
    for (int it = 0; it < config.iterations_per_epoch; ++it) {
      const double lr = config.initial_learning_rate * state.lr_scale * poly_learning_rate(1.0, e, config.num_epochs);
      Batch batch = sampler.next(state.rng);
      state.network.zero_grad();
      const auto outputs = state.network.forward(batch.image);
      auto loss = training_loss(outputs, batch.label, weights);
      if (!loss.finite) {
        record.diverged = true;
        restore_snapshot(snapshot, state.network, optimizer);
        state.lr_scale *= 0.5;
        continue;
      }
      state.network.backward(loss.grads);
      clip_gradient_norm(params, options.gradient_clip_norm);
      optimizer.step(lr);
      loss_sum += loss.value;
      ++loss_count;
    }
    record.learning_rate = config.initial_learning_rate * state.lr_scale * poly_learning_rate(1.0, e, config.num_epochs);
    record.train_loss = loss_count > 0 ? loss_sum / loss_count : NAN;
    record.val_dice = validator.score(state.network);
    state.momentum = optimizer.buffers();
    state.history.push_back(record);
    state.epoch = e + 1;

    if (write_files) {
      log << to_json(record).dump() << "\n" << std::flush;
      const double score = record.val_dice.value_or(0.0);
      if (score > state.best_validation_dice) {
        state.best_validation_dice = score;
        write_checkpoint(options.output_dir / "checkpoint_best.ckpt",
                         make_checkpoint(state, options.configuration_name));
      }
    } else {
      state.best_validation_dice = std::max(state.best_validation_dice, record.val_dice.value_or(0.0));
    }
    if (options.on_epoch) options.on_epoch(record);
  }
  if (write_files)
    write_checkpoint(options.output_dir / "checkpoint_final.ckpt", make_checkpoint(state, options.configuration_name));
  return state;
}

InferenceOptions inference_options(const ResolvedConfiguration& config, int workers) {
  InferenceOptions o;
  o.patch_size = config.patch_size;
  o.step_fraction = config.inference_step_fraction;
  o.mirror_axes = config.mirror_axes;
  o.workers = workers;
  return o;
}

CVResult run_cross_validation(const ResolvedConfiguration& config, std::span<const Volume> volumes, std::uint64_t seed,
                              const CVOptions& options) {
  check_dataset(config, volumes);
  const FoldAssignment folds = assign_folds(volumes, kNumFolds, seed);
  CVResult result;
  result.fold_of_case = folds.fold_of_case;
  std::vector<CaseMetrics> pooled;
  for (int fold = 0; fold < kNumFolds; ++fold) {
    TrainOptions topts = options.train;
    topts.resume_from.reset();
    if (!options.output_dir.empty()) topts.output_dir = options.output_dir / ("fold_" + std::to_string(fold));
    if (options.on_epoch) topts.on_epoch = [&, fold](const EpochRecord& r) { options.on_epoch(fold, r); };
    TrainingState state = train_fold(config, volumes, folds, fold, seed, topts);
    result.histories.push_back(state.history);

    std::vector<CaseMetrics> fold_cases;
    const InferenceOptions iopts = inference_options(config, options.inference_workers);
    for (const auto& v : volumes) {
      if (folds.fold_of_case.at(v.case_id) != fold) continue;
      const Volume normalized = normalize(v, state.normalization);
      const auto labels = segment(predict_volume(state.network, normalized, iopts));
      fold_cases.push_back(evaluate_case(v.case_id, labels, *v.segmentation, v.shape, v.spacing));
    }
    result.fold_dice.push_back(fold_cases.empty() ? std::nullopt : aggregate(fold_cases).mean_dice_nnunet);
    pooled.insert(pooled.end(), fold_cases.begin(), fold_cases.end());
  }
  result.pooled = aggregate(pooled);
  return result;
}

}  // namespace planseg
