#pragma once

// Breadth-first flood fill and direct FP/FN volume counting, for checking the metrics module.

#include <deque>
#include <random>
#include <string>
#include <vector>

#include "planseg/metrics.hpp"
#include "planseg/tensor.hpp"
#include "support/plan_oracles.hpp"

namespace oracles {

using planseg::Triple;

// Components by flood fill, numbered from 1 in order of their first voxel in memory order.
inline std::vector<int> flood_fill(const std::vector<std::uint8_t>& mask, const Triple& shape, int* count) {
  std::vector<int> label(mask.size(), 0);
  int next = 0;
  for (std::size_t seed = 0; seed < mask.size(); ++seed) {
    if (!mask[seed] || label[seed]) continue;
    label[seed] = ++next;
    std::deque<std::size_t> queue{seed};
    while (!queue.empty()) {
      const auto at = static_cast<std::int64_t>(queue.front());
      queue.pop_front();
      const int x = static_cast<int>(at % shape[0]);
      const int y = static_cast<int>(at / shape[0] % shape[1]);
      const int z = static_cast<int>(at / (static_cast<std::int64_t>(shape[0]) * shape[1]));
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = x + dx, ny = y + dy, nz = z + dz;
            if (nx < 0 || ny < 0 || nz < 0 || nx >= shape[0] || ny >= shape[1] || nz >= shape[2]) continue;
            const auto n = static_cast<std::size_t>(planseg::linear_index(shape, nx, ny, nz));
            if (mask[n] && !label[n]) {
              label[n] = next;
              queue.push_back(n);
            }
          }
    }
  }
  if (count) *count = next;
  return label;
}

// Voxels of `a` in flood-fill components that never touch `b`.
inline std::int64_t unmatched_voxels(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b,
                                     const Triple& shape) {
  int n = 0;
  const auto label = flood_fill(a, shape, &n);
  std::int64_t total = 0;
  for (int c = 1; c <= n; ++c) {
    bool touches = false;
    std::int64_t size = 0;
    for (std::size_t i = 0; i < label.size(); ++i)
      if (label[i] == c) {
        ++size;
        touches |= b[i] != 0;
      }
    if (!touches) total += size;
  }
  return total;
}

inline std::vector<std::uint8_t> random_mask(const Triple& shape, double density, std::mt19937_64& rng) {
  std::bernoulli_distribution b(density);
  std::vector<std::uint8_t> m(static_cast<std::size_t>(planseg::voxel_count(shape)));
  for (auto& v : m) v = b(rng);
  return m;
}

// Random masks up to 16 per axis: component labelling, FP/FN volumes and Dice against the oracles.
inline PropertyOutcome check_random_masks(int count, std::uint64_t seed) {
  PropertyOutcome out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> edge(1, 16);
  std::uniform_real_distribution<double> density(0.02, 0.5);
  std::uniform_real_distribution<double> mm(0.5, 3.0);
  for (int t = 0; t < count; ++t) {
    ++out.trials;
    const Triple shape{edge(rng), edge(rng), edge(rng)};
    const auto pred = random_mask(shape, density(rng), rng);
    const auto gt = random_mask(shape, density(rng), rng);
    const planseg::Spacing spacing{mm(rng), mm(rng), mm(rng)};
    const std::string where = "trial " + std::to_string(t);

    int n_lib = 0, n_oracle = 0;
    const auto lib = planseg::label_components(pred, shape, &n_lib);
    const auto oracle = flood_fill(pred, shape, &n_oracle);
    if (n_lib != n_oracle || !std::equal(lib.begin(), lib.end(), oracle.begin()))
      out.fail("component labels differ in " + where);

    const auto v = planseg::fp_fn_volumes(pred, gt, shape, spacing);
    const double voxel_ml = spacing[0] * spacing[1] * spacing[2] / 1000.0;
    if (v.fp_ml != static_cast<double>(unmatched_voxels(pred, gt, shape)) * voxel_ml)
      out.fail("fp volume differs in " + where);
    if (v.fn_ml != static_cast<double>(unmatched_voxels(gt, pred, shape)) * voxel_ml)
      out.fail("fn volume differs in " + where);
    const auto swapped = planseg::fp_fn_volumes(gt, pred, shape, spacing);
    if (swapped.fp_ml != v.fn_ml || swapped.fn_ml != v.fp_ml) out.fail("role symmetry broken in " + where);

    std::int64_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      p += pred[i];
      g += gt[i];
      both += pred[i] && gt[i];
    }
    const auto d = planseg::dice(pred, gt);
    if (p + g == 0) {
      if (d) out.fail("dice defined for two empty masks in " + where);
    } else if (!d || *d != 2.0 * static_cast<double>(both) / static_cast<double>(p + g) ||
               planseg::dice(gt, pred) != d) {
      out.fail("dice differs in " + where);
    }
  }
  return out;
}

}  // namespace oracles
