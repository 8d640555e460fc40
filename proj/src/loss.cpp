#include "planseg/loss.hpp"

#include <algorithm>
#include <cmath>

#include "planseg/errors.hpp"

namespace planseg {

std::vector<double> deep_supervision_weights(int num_outputs) {
  if (num_outputs < 1) throw ParameterError("need at least one supervised output");
  std::vector<double> w(static_cast<std::size_t>(num_outputs));
  double total = 0.0;
  for (int r = 0; r < num_outputs; ++r) total += w[r] = std::ldexp(1.0, -r);
  for (auto& v : w) v /= total;
  return w;
}

std::vector<std::uint8_t> downsample_labels(const std::vector<std::uint8_t>& labels, int n, const Triple& ext,
                                            const Triple& target) {
  Triple factor{};
  for (int a = 0; a < 3; ++a) {
    if (target[a] <= 0 || ext[a] % target[a] != 0) throw ShapeError("label extent does not divide evenly");
    factor[a] = ext[a] / target[a];
  }
  if (factor == Triple{1, 1, 1}) return labels;
  const std::int64_t src_block = voxel_count(ext);
  const std::int64_t dst_block = voxel_count(target);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n * dst_block), 0);
  for (int i = 0; i < n; ++i) {
    const std::uint8_t* src = labels.data() + i * src_block;
    std::uint8_t* dst = out.data() + i * dst_block;
    for (int z = 0; z < ext[2]; ++z)
      for (int y = 0; y < ext[1]; ++y)
        for (int x = 0; x < ext[0]; ++x) {
          const std::uint8_t v = src[linear_index(ext, x, y, z)];
          auto& d = dst[linear_index(target, x / factor[0], y / factor[1], z / factor[2])];
          d = std::max(d, v);
        }
  }
  return out;
}

template <class T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  Tensor<T> p(logits.n, logits.c, logits.ext);
  const std::int64_t vox = logits.spatial();
  for (int i = 0; i < logits.n; ++i) {
    for (std::int64_t v = 0; v < vox; ++v) {
      double mx = -INFINITY;
      for (int c = 0; c < logits.c; ++c) mx = std::max(mx, static_cast<double>(logits.channel(i, c)[v]));
      double sum = 0.0;
      for (int c = 0; c < logits.c; ++c) sum += std::exp(static_cast<double>(logits.channel(i, c)[v]) - mx);
      for (int c = 0; c < logits.c; ++c)
        p.channel(i, c)[v] = static_cast<T>(std::exp(static_cast<double>(logits.channel(i, c)[v]) - mx) / sum);
    }
  }
  return p;
}

namespace {

struct ResolutionLoss {
  double dice = 0.0;
  double ce = 0.0;
};

template <class T>
ResolutionLoss resolution_loss(const Tensor<T>& logits, const std::vector<std::uint8_t>& labels, double weight,
                               Tensor<T>* grad) {
  const int n = logits.n;
  const int k = logits.c;
  const std::int64_t vox = logits.spatial();
  const double count = static_cast<double>(n) * static_cast<double>(vox);

  // Probabilities in double, laid out like the logits.
  std::vector<double> prob(logits.data.size());
  for (int i = 0; i < n; ++i) {
    for (std::int64_t v = 0; v < vox; ++v) {
      double mx = -INFINITY;
      for (int c = 0; c < k; ++c) mx = std::max(mx, static_cast<double>(logits.channel(i, c)[v]));
      double sum = 0.0;
      for (int c = 0; c < k; ++c) {
        const std::int64_t at = (static_cast<std::int64_t>(i) * k + c) * vox + v;
        sum += prob[at] = std::exp(static_cast<double>(logits.data[at]) - mx);
      }
      for (int c = 0; c < k; ++c) prob[(static_cast<std::int64_t>(i) * k + c) * vox + v] /= sum;
    }
  }

  ResolutionLoss out;
  // Cross-entropy, averaged over every voxel of the batch.
  for (int i = 0; i < n; ++i)
    for (std::int64_t v = 0; v < vox; ++v) {
      const int y = labels[i * vox + v];
      out.ce -= std::log(std::max(prob[(static_cast<std::int64_t>(i) * k + y) * vox + v], 1e-300));
    }
  out.ce /= count;

  // Batch-pooled soft Dice, averaged over foreground classes.
  const int fg = k - 1;
  std::vector<double> tp(k, 0.0), sp(k, 0.0), sy(k, 0.0);
  for (int i = 0; i < n; ++i)
    for (int c = 1; c < k; ++c)
      for (std::int64_t v = 0; v < vox; ++v) {
        const double p = prob[(static_cast<std::int64_t>(i) * k + c) * vox + v];
        const double y = labels[i * vox + v] == c ? 1.0 : 0.0;
        tp[c] += p * y;
        sp[c] += p;
        sy[c] += y;
      }
  for (int c = 1; c < k; ++c) out.dice += 1.0 - (2.0 * tp[c] + kDiceSmooth) / (sp[c] + sy[c] + kDiceSmooth);
  out.dice /= fg;

  if (grad) {
    *grad = Tensor<T>(n, k, logits.ext);
    std::vector<double> g(k);
    for (int i = 0; i < n; ++i)
      for (std::int64_t v = 0; v < vox; ++v) {
        const int y = labels[i * vox + v];
        // d(dice)/d(p_c), then the softmax Jacobian.
        double gp = 0.0;
        g[0] = 0.0;
        for (int c = 1; c < k; ++c) {
          const double s = sp[c] + sy[c] + kDiceSmooth;
          const double yc = y == c ? 1.0 : 0.0;
          g[c] = -(2.0 * yc * s - (2.0 * tp[c] + kDiceSmooth)) / (s * s) / fg;
        }
        for (int c = 0; c < k; ++c) gp += g[c] * prob[(static_cast<std::int64_t>(i) * k + c) * vox + v];
        for (int c = 0; c < k; ++c) {
          const std::int64_t at = (static_cast<std::int64_t>(i) * k + c) * vox + v;
          const double p = prob[at];
          const double d_dice = p * (g[c] - gp);
          const double d_ce = (p - (y == c ? 1.0 : 0.0)) / count;
          grad->data[at] = static_cast<T>(weight * (d_dice + d_ce));
        }
      }
  }
  return out;
}

}  // namespace

template <class T>
LossResult<T> training_loss(const std::vector<Tensor<T>>& logits, const std::vector<std::uint8_t>& labels,
                            const std::vector<double>& weights, bool with_grad) {
  if (logits.empty()) throw ShapeError("no logits");
  if (weights.size() != logits.size()) throw ShapeError("one weight per output required");
  const Tensor<T>& full = logits.front();
  if (static_cast<std::int64_t>(labels.size()) != full.n * full.spatial())
    throw ShapeError("labels do not match the primary output");

  LossResult<T> result;
  for (const auto& l : logits)
    for (T v : l.data)
      if (!std::isfinite(static_cast<double>(v))) {
        result.finite = false;
        result.value = NAN;
        return result;
      }

  if (with_grad) result.grads.resize(logits.size());
  for (std::size_t r = 0; r < logits.size(); ++r) {
    const auto& out = logits[r];
    if (out.n != full.n || out.c != full.c) throw ShapeError("outputs disagree on batch or class count");
    const auto lab = downsample_labels(labels, full.n, full.ext, out.ext);
    const auto part = resolution_loss(out, lab, weights[r], with_grad ? &result.grads[r] : nullptr);
    result.dice_term += weights[r] * part.dice;
    result.ce_term += weights[r] * part.ce;
  }
  result.value = result.dice_term + result.ce_term;
  result.finite = std::isfinite(result.value);
  return result;
}

template LossResult<float> training_loss(const std::vector<Tensor<float>>&, const std::vector<std::uint8_t>&,
                                         const std::vector<double>&, bool);
template LossResult<double> training_loss(const std::vector<Tensor<double>>&, const std::vector<std::uint8_t>&,
                                          const std::vector<double>&, bool);
template Tensor<float> softmax_channels(const Tensor<float>&);
template Tensor<double> softmax_channels(const Tensor<double>&);

}  // namespace planseg
