#pragma once

#include <cstdint>
#include <vector>

#include "planseg/tensor.hpp"

namespace planseg {

inline constexpr double kDiceSmooth = 1e-5;

// w_r proportional to 2^-r, normalised to sum to one.
std::vector<double> deep_supervision_weights(int num_outputs);

// Downsamples a batch of label maps (n samples of `ext`) to `target` by max pooling, so a coarse voxel
// is foreground when any voxel it covers is. The extents must divide.
std::vector<std::uint8_t> downsample_labels(const std::vector<std::uint8_t>& labels, int n, const Triple& ext,
                                            const Triple& target);

template <class T>
struct LossResult {
  double value = 0.0;
  double dice_term = 0.0;  // weighted soft-Dice part
  double ce_term = 0.0;    // weighted cross-entropy part
  bool finite = true;      // false when logits or the loss are non-finite (divergence)
  std::vector<Tensor<T>> grads;
};

// Per resolution: batch-pooled soft Dice over foreground classes plus mean cross-entropy; the total is
// the weighted sum over resolutions. `labels` holds n label maps at the resolution of logits[0].
template <class T>
LossResult<T> training_loss(const std::vector<Tensor<T>>& logits, const std::vector<std::uint8_t>& labels,
                            const std::vector<double>& weights, bool with_grad = true);

// Softmax over channels, per sample and voxel.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& logits);

extern template LossResult<float> training_loss(const std::vector<Tensor<float>>&, const std::vector<std::uint8_t>&,
                                                const std::vector<double>&, bool);
extern template LossResult<double> training_loss(const std::vector<Tensor<double>>&,
                                                 const std::vector<std::uint8_t>&, const std::vector<double>&, bool);
extern template Tensor<float> softmax_channels(const Tensor<float>&);
extern template Tensor<double> softmax_channels(const Tensor<double>&);

}  // namespace planseg
