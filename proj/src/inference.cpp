#include "planseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <thread>

#include "planseg/errors.hpp"
#include "planseg/loss.hpp"

namespace planseg {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<int> axis_positions(int image, int patch, double step_fraction) {
  if (patch <= 0 || image < patch) throw ParameterError("patch must be positive and no larger than the image");
  if (image == patch) return {0};
  const double target = patch * step_fraction;
  const int n = static_cast<int>(std::ceil((image - patch) / target)) + 1;
  const double spacing = static_cast<double>(image - patch) / (n - 1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[i] = static_cast<int>(std::lround(i * spacing));
  return out;
}

TilingPlan compute_tiling(const Triple& image_shape, const Triple& patch_size, double step_fraction) {
  if (!(step_fraction > 0.0 && step_fraction <= 1.0)) throw ParameterError("step_fraction must lie in (0, 1]");
  TilingPlan plan;
  plan.image_shape = padded_shape(image_shape, patch_size);
  plan.patch_size = patch_size;
  plan.step_fraction = step_fraction;
  for (int a = 0; a < 3; ++a) plan.axis_positions[a] = axis_positions(plan.image_shape[a], patch_size[a], step_fraction);
  for (int x : plan.axis_positions[0])
    for (int y : plan.axis_positions[1])
      for (int z : plan.axis_positions[2]) plan.positions.push_back({x, y, z});
  return plan;
}

std::vector<float> gaussian_importance_map(const Triple& patch_size) {
  std::array<std::vector<double>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const double center = (patch_size[a] - 1) / 2.0;
    const double sigma = patch_size[a] / 8.0;
    axis[a].resize(static_cast<std::size_t>(patch_size[a]));
    for (int i = 0; i < patch_size[a]; ++i) {
      const double d = (i - center) / sigma;
      axis[a][i] = std::exp(-0.5 * d * d);
    }
  }
  const double peak = *std::max_element(axis[0].begin(), axis[0].end()) *
                      *std::max_element(axis[1].begin(), axis[1].end()) *
                      *std::max_element(axis[2].begin(), axis[2].end());
  std::vector<float> w(static_cast<std::size_t>(voxel_count(patch_size)));
  float smallest = std::numeric_limits<float>::max();
  for (int z = 0; z < patch_size[2]; ++z)
    for (int y = 0; y < patch_size[1]; ++y)
      for (int x = 0; x < patch_size[0]; ++x) {
        const auto v = static_cast<float>(axis[0][x] * axis[1][y] * axis[2][z] / peak);
        w[linear_index(patch_size, x, y, z)] = v;
        if (v > 0.0f) smallest = std::min(smallest, v);
      }
  for (auto& v : w) v = std::max(v, smallest);
  return w;
}

namespace {

// Softmax probabilities of one tile, averaged over every mirror subset.
Tensor<float> tile_probabilities(const PatchPredictor& predictor, const Tensor<float>& input,
                                 const std::vector<unsigned>& masks, int num_classes, std::int64_t tile_index,
                                 const Triple& corner) {
  Tensor<float> mean(1, num_classes, input.ext);
  for (unsigned mask : masks) {
    Tensor<float> logits = predictor(flipped(input, mask));
    if (logits.n != 1 || logits.c != num_classes || logits.ext != input.ext)
      throw InferenceError("predictor returned an unexpected shape");
    for (float v : logits.data)
      if (!std::isfinite(v))
        throw InferenceError("non-finite network output in tile " + std::to_string(tile_index) + " at corner (" +
                             std::to_string(corner[0]) + ", " + std::to_string(corner[1]) + ", " +
                             std::to_string(corner[2]) + ")");
    const Tensor<float> p = flipped(softmax_channels(logits), mask);
    for (std::size_t i = 0; i < p.data.size(); ++i) mean.data[i] += p.data[i];
  }
  const float inv = 1.0f / static_cast<float>(masks.size());
  for (auto& v : mean.data) v *= inv;
  return mean;
}

}  // namespace

ProbabilityMap predict_volume(const PatchPredictor& predictor, const Volume& volume, const InferenceOptions& options,
                              InferenceStats* stats) {
  check_volume(volume);
  for (int a : options.mirror_axes)
    if (a < 0 || a > 2) throw ParameterError("mirror axes must be drawn from {0, 1, 2}");
  const Triple patch = options.patch_size;
  const TilingPlan plan = compute_tiling(volume.shape, patch, options.step_fraction);
  const Triple padded = plan.image_shape;
  const Triple before = padding_before(volume.shape, patch);
  const std::vector<float> weight = gaussian_importance_map(patch);
  const int k = options.num_classes;

  // Every subset of the mirror axes, the identity first.
  const unsigned full = axis_mask_of(options.mirror_axes);
  std::vector<unsigned> masks;
  for (unsigned m = 0; m <= full; ++m)
    if ((m & ~full) == 0) masks.push_back(m);

  const std::int64_t pv = voxel_count(padded);
  std::vector<double> acc(static_cast<std::size_t>(k * pv), 0.0);
  std::vector<double> wsum(static_cast<std::size_t>(pv), 0.0);

  auto accumulate = [&](const Tensor<float>& probs, const Triple& corner) {
    for (int z = 0; z < patch[2]; ++z)
      for (int y = 0; y < patch[1]; ++y) {
        const std::int64_t dst = linear_index(padded, corner[0], corner[1] + y, corner[2] + z);
        const std::int64_t src = linear_index(patch, 0, y, z);
        for (int x = 0; x < patch[0]; ++x) wsum[dst + x] += weight[src + x];
        for (int c = 0; c < k; ++c) {
          const float* pc = probs.channel(0, c) + src;
          double* ac = acc.data() + c * pv + dst;
          for (int x = 0; x < patch[0]; ++x) ac[x] += static_cast<double>(weight[src + x]) * pc[x];
        }
      }
  };

  auto load_tile = [&](const Triple& corner) {
    PatchSample s = extract_patch(volume, patch, corner);
    Tensor<float> t(1, volume.num_channels(), patch);
    t.data = std::move(s.image);
    return t;
  };

  const int workers = std::max(1, options.workers);
  const std::int64_t tiles = static_cast<std::int64_t>(plan.positions.size());
  for (std::int64_t t0 = 0; t0 < tiles; t0 += workers) {
    const std::int64_t t1 = std::min(tiles, t0 + workers);
    std::vector<Tensor<float>> results(static_cast<std::size_t>(t1 - t0));
    if (workers == 1) {
      results[0] = tile_probabilities(predictor, load_tile(plan.positions[t0]), masks, k, t0, plan.positions[t0]);
    } else {
      std::vector<std::exception_ptr> errors(results.size());
      std::vector<std::thread> pool;
      for (std::int64_t t = t0; t < t1; ++t) {
        pool.emplace_back([&, t] {
          try {
            results[t - t0] = tile_probabilities(predictor, load_tile(plan.positions[t]), masks, k, t, plan.positions[t]);
          } catch (...) {
            errors[t - t0] = std::current_exception();
          }
        });
      }
      for (auto& th : pool) th.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }
    for (std::int64_t t = t0; t < t1; ++t) accumulate(results[t - t0], plan.positions[t]);
  }
  if (stats) {
    stats->tiles += tiles;
    stats->forward_passes += tiles * static_cast<std::int64_t>(masks.size());
  }

  ProbabilityMap out;
  out.num_classes = k;
  out.shape = volume.shape;
  out.data.resize(static_cast<std::size_t>(k * volume.voxels()));
  for (int c = 0; c < k; ++c)
    for (int z = 0; z < volume.shape[2]; ++z)
      for (int y = 0; y < volume.shape[1]; ++y)
        for (int x = 0; x < volume.shape[0]; ++x) {
          const std::int64_t p = linear_index(padded, x + before[0], y + before[1], z + before[2]);
          out.channel(c)[linear_index(volume.shape, x, y, z)] = static_cast<float>(acc[c * pv + p] / wsum[p]);
        }
  return out;
}

ProbabilityMap predict_volume(const nn::UNet<float>& net, const Volume& volume, const InferenceOptions& options,
                              InferenceStats* stats) {
  if (net.descriptor().num_input_channels != volume.num_channels())
    throw ConfigurationError("network and volume disagree on channel count");
  InferenceOptions opts = options;
  opts.num_classes = net.descriptor().num_classes;
  return predict_volume([&net](const Tensor<float>& x) { return net.predict(x); }, volume, opts, stats);
}

ProbabilityMap ensemble(std::span<const ProbabilityMap> maps) {
  if (maps.empty()) throw ParameterError("ensemble needs at least one map");
  const auto& first = maps.front();
  for (const auto& m : maps)
    if (m.num_classes != first.num_classes || m.shape != first.shape || m.data.size() != first.data.size())
      throw ShapeError("ensemble members disagree in shape");
  if (maps.size() == 1) return first;
  ProbabilityMap out = first;
  std::vector<double> sum(first.data.begin(), first.data.end());
  for (std::size_t m = 1; m < maps.size(); ++m)
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += maps[m].data[i];
  const double n = static_cast<double>(maps.size());
  for (std::size_t i = 0; i < sum.size(); ++i) out.data[i] = static_cast<float>(sum[i] / n);
  return out;
}

std::vector<std::uint8_t> segment(const ProbabilityMap& map) {
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(map.voxels()), 0);
  for (std::int64_t v = 0; v < map.voxels(); ++v) {
    int best = 0;
    for (int c = 1; c < map.num_classes; ++c)
      if (map.channel(c)[v] > map.channel(best)[v]) best = c;
    labels[v] = static_cast<std::uint8_t>(best);
  }
  return labels;
}

void write_case_prediction(const fs::path& dir, const Volume& source, const ProbabilityMap& map,
                           const std::vector<std::uint8_t>& labels) {
  fs::create_directories(dir);
  const json header = {{"case_id", source.case_id},       {"patient_id", source.patient_id},
                       {"shape", source.shape},           {"spacing", source.spacing},
                       {"num_classes", map.num_classes},  {"dtype", "f32le"}};
  std::ofstream(dir / "header.json") << header.dump(2) << "\n";
  write_f32le(dir / "probabilities.raw", map.data);
  write_u8(dir / "segmentation.raw", labels);
}

namespace {

json read_header(const fs::path& dir) {
  std::ifstream in(dir / "header.json");
  if (!in) throw IoError("cannot open " + (dir / "header.json").string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError((dir / "header.json").string() + ": " + e.what());
  }
}

}  // namespace

Volume read_case_prediction(const fs::path& dir) {
  const json h = read_header(dir);
  Volume v;
  v.case_id = h.at("case_id").get<std::string>();
  v.patient_id = h.value("patient_id", std::string());
  v.shape = h.at("shape").get<Triple>();
  v.spacing = h.at("spacing").get<Spacing>();
  v.segmentation = read_u8(dir / "segmentation.raw", v.voxels());
  return v;
}

ProbabilityMap read_case_probabilities(const fs::path& dir) {
  const json h = read_header(dir);
  ProbabilityMap m;
  m.shape = h.at("shape").get<Triple>();
  m.num_classes = h.at("num_classes").get<int>();
  m.data = read_f32le(dir / "probabilities.raw", m.num_classes * voxel_count(m.shape));
  return m;
}

}  // namespace planseg
