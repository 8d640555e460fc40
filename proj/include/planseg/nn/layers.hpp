#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "planseg/tensor.hpp"

namespace planseg::nn {

template <class T>
struct Parameter {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<T> value;
  std::vector<T> grad;

  Parameter() = default;
  Parameter(std::string n, std::vector<std::int64_t> s) : name(std::move(n)), shape(std::move(s)) {
    std::int64_t count = 1;
    for (auto d : shape) count *= d;
    value.assign(static_cast<std::size_t>(count), T{});
    grad.assign(static_cast<std::size_t>(count), T{});
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
};

template <class T>
using ParameterList = std::vector<Parameter<T>*>;

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kNormEpsilon = 1e-5;

// He-normal initialisation for leaky rectifiers.
template <class T>
void he_normal(Parameter<T>& p, std::int64_t fan_in, std::mt19937_64& rng) {
  const double stddev = std::sqrt(2.0 / ((1.0 + kLeakySlope * kLeakySlope) * static_cast<double>(fan_in)));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : p.value) v = static_cast<T>(dist(rng));
}

inline int conv_output_extent(int in, int stride) { return (in - 1) / stride + 1; }

// 3D convolution, zero padding k/2 (odd kernels), arbitrary stride.
// Direct loops over a zero-padded copy of each input sample; the innermost loop runs along x.
template <class T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(const std::string& name, int in_channels, int out_channels, const Triple& kernel, const Triple& stride)
      : weight(name + ".weight", {out_channels, in_channels, kernel[2], kernel[1], kernel[0]}),
        bias(name + ".bias", {out_channels}),
        in_(in_channels),
        out_(out_channels),
        kernel_(kernel),
        stride_(stride) {}

  Parameter<T> weight;
  Parameter<T> bias;

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

  void initialize(std::mt19937_64& rng) {
    he_normal(weight, static_cast<std::int64_t>(in_) * voxel_count(kernel_), rng);
    std::fill(bias.value.begin(), bias.value.end(), T{});
  }

  void collect(ParameterList<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Triple output_extent(const Triple& in) const {
    return {conv_output_extent(in[0], stride_[0]), conv_output_extent(in[1], stride_[1]),
            conv_output_extent(in[2], stride_[2])};
  }

  Tensor<T> apply(const Tensor<T>& x) const {
    if (x.c != in_) throw ShapeError(weight.name + ": expected " + std::to_string(in_) + " channels");
    const Geometry g = geometry(x.ext);
    Tensor<T> y(x.n, out_, g.oext);
    std::vector<T> xpad;
    std::vector<T> ypad;
    for (int i = 0; i < x.n; ++i) {
      pad(x.sample(i), g, xpad);
      if (unit_stride()) {
        forward_flat(g, xpad.data(), ypad);
        for (int co = 0; co < out_; ++co) crop_flat(g, ypad.data() + co * g.flat, y.channel(i, co));
      } else {
        forward_rows(g, xpad.data(), y.sample(i));
      }
    }
    return y;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    return apply(x);
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T>& x = input_;
    const Geometry g = geometry(x.ext);
    Tensor<T> dx(x.n, x.c, x.ext);
    std::vector<T> xpad;
    std::vector<T> dxpad;
    std::vector<T> dypad;
    for (int i = 0; i < x.n; ++i) {
      pad(x.sample(i), g, xpad);
      dxpad.assign(xpad.size(), T{});
      for (int co = 0; co < out_; ++co) {
        const T* gout = dy.channel(i, co);
        T bsum{};
        for (std::int64_t v = 0; v < g.out_voxels; ++v) bsum += gout[v];
        bias.grad[co] += bsum;
      }
      if (unit_stride()) {
        const std::int64_t margin = g.taps.back();
        const std::int64_t stride = margin + g.pad_voxels;
        dypad.assign(static_cast<std::size_t>(stride * out_), T{});
        for (int co = 0; co < out_; ++co) scatter_flat(g, dy.channel(i, co), dypad.data() + co * stride + margin);
        backward_flat(g, xpad.data(), dypad.data(), stride, dxpad.data());
      } else {
        backward_rows(g, xpad.data(), dy.sample(i), dxpad.data());
      }
      unpad(dxpad, g, dx.sample(i));
    }
    input_ = Tensor<T>();
    return dx;
  }

 private:
  static constexpr std::int64_t kTile = 1024;

  struct Geometry {
    Triple iext;
    Triple oext;
    Triple pext;  // padded input extent
    std::int64_t out_voxels;
    std::int64_t pad_voxels;
    // Unit stride only: outputs live in the padded layout at their window corner, so kernel tap d
    // is the constant offset taps[d]; `flat` corner positions cover every valid output.
    std::int64_t flat;
    std::vector<std::int64_t> taps;
  };

  bool unit_stride() const { return stride_ == Triple{1, 1, 1}; }

  Geometry geometry(const Triple& iext) const {
    Geometry g;
    g.iext = iext;
    g.oext = output_extent(iext);
    for (int a = 0; a < 3; ++a) g.pext[a] = iext[a] + 2 * (kernel_[a] / 2);
    g.out_voxels = voxel_count(g.oext);
    g.pad_voxels = voxel_count(g.pext);
    g.flat = linear_index(g.pext, g.oext[0] - 1, g.oext[1] - 1, g.oext[2] - 1) + 1;
    for (int d2 = 0; d2 < kernel_[2]; ++d2)
      for (int d1 = 0; d1 < kernel_[1]; ++d1)
        for (int d0 = 0; d0 < kernel_[0]; ++d0) g.taps.push_back(linear_index(g.pext, d0, d1, d2));
    return g;
  }

  // out[p] += sum_d w[d] * src[p + taps[d]], nine taps per pass so each output is loaded once per pass.
  static void correlate(T* out, const T* src, const T* w, const std::int64_t* taps, std::int64_t num_taps,
                        std::int64_t len) {
    std::int64_t d = 0;
    for (; d + 9 <= num_taps; d += 9) {
      const T w0 = w[d], w1 = w[d + 1], w2 = w[d + 2], w3 = w[d + 3], w4 = w[d + 4], w5 = w[d + 5], w6 = w[d + 6],
              w7 = w[d + 7], w8 = w[d + 8];
      const T *s0 = src + taps[d], *s1 = src + taps[d + 1], *s2 = src + taps[d + 2], *s3 = src + taps[d + 3],
              *s4 = src + taps[d + 4], *s5 = src + taps[d + 5], *s6 = src + taps[d + 6], *s7 = src + taps[d + 7],
              *s8 = src + taps[d + 8];
#pragma omp simd
      for (std::int64_t p = 0; p < len; ++p) {
        out[p] += w0 * s0[p] + w1 * s1[p] + w2 * s2[p] + w3 * s3[p] + w4 * s4[p] + w5 * s5[p] + w6 * s6[p] +
                  w7 * s7[p] + w8 * s8[p];
      }
    }
    for (; d < num_taps; ++d) {
      const T wv = w[d];
      const T* sd = src + taps[d];
#pragma omp simd
      for (std::int64_t p = 0; p < len; ++p) out[p] += wv * sd[p];
    }
  }

  // gw[d] += sum_p go[p] * src[p + taps[d]]
  static void accumulate_weight_grad(T* gw, const T* go, const T* src, const std::int64_t* taps, std::int64_t num_taps,
                                     std::int64_t len) {
    std::int64_t d = 0;
    for (; d + 3 <= num_taps; d += 3) {
      const T *s0 = src + taps[d], *s1 = src + taps[d + 1], *s2 = src + taps[d + 2];
      T a0{}, a1{}, a2{};
#pragma omp simd reduction(+ : a0, a1, a2)
      for (std::int64_t p = 0; p < len; ++p) {
        a0 += go[p] * s0[p];
        a1 += go[p] * s1[p];
        a2 += go[p] * s2[p];
      }
      gw[d] += a0;
      gw[d + 1] += a1;
      gw[d + 2] += a2;
    }
    for (; d < num_taps; ++d) {
      const T* sd = src + taps[d];
      T acc{};
#pragma omp simd reduction(+ : acc)
      for (std::int64_t p = 0; p < len; ++p) acc += go[p] * sd[p];
      gw[d] += acc;
    }
  }

  void forward_flat(const Geometry& g, const T* xpad, std::vector<T>& ypad) const {
    const std::int64_t taps = static_cast<std::int64_t>(g.taps.size());
    ypad.resize(static_cast<std::size_t>(g.flat * out_));
    for (int co = 0; co < out_; ++co) std::fill_n(ypad.data() + co * g.flat, g.flat, bias.value[co]);
    for (std::int64_t t0 = 0; t0 < g.flat; t0 += kTile) {
      const std::int64_t len = std::min(kTile, g.flat - t0);
      for (int co = 0; co < out_; ++co) {
        T* out = ypad.data() + co * g.flat + t0;
        const T* w = weight.value.data() + static_cast<std::int64_t>(co) * in_ * taps;
        for (int ci = 0; ci < in_; ++ci)
          correlate(out, xpad + ci * g.pad_voxels + t0, w + ci * taps, g.taps.data(), taps, len);
      }
    }
  }

  // dypad holds each output channel in the corner layout behind a zero margin of g.taps.back()
  // elements, so the input gradient is a correlation with negated tap offsets.
  void backward_flat(const Geometry& g, const T* xpad, const T* dypad, std::int64_t dy_stride, T* dxpad) {
    const std::int64_t taps = static_cast<std::int64_t>(g.taps.size());
    const std::int64_t margin = g.taps.back();
    std::vector<std::int64_t> neg(g.taps.size());
    for (std::size_t d = 0; d < g.taps.size(); ++d) neg[d] = -g.taps[d];

    for (std::int64_t t0 = 0; t0 < g.flat; t0 += kTile) {
      const std::int64_t len = std::min(kTile, g.flat - t0);
      for (int co = 0; co < out_; ++co) {
        const T* go = dypad + co * dy_stride + margin + t0;
        T* gw = weight.grad.data() + static_cast<std::int64_t>(co) * in_ * taps;
        for (int ci = 0; ci < in_; ++ci)
          accumulate_weight_grad(gw + ci * taps, go, xpad + ci * g.pad_voxels + t0, g.taps.data(), taps, len);
      }
    }
    for (std::int64_t t0 = 0; t0 < g.pad_voxels; t0 += kTile) {
      const std::int64_t len = std::min(kTile, g.pad_voxels - t0);
      for (int ci = 0; ci < in_; ++ci) {
        T* din = dxpad + ci * g.pad_voxels + t0;
        for (int co = 0; co < out_; ++co) {
          const T* w = weight.value.data() + (static_cast<std::int64_t>(co) * in_ + ci) * taps;
          correlate(din, dypad + co * dy_stride + margin + t0, w, neg.data(), taps, len);
        }
      }
    }
  }

  void crop_flat(const Geometry& g, const T* ypad, T* y) const {
    for (int z = 0; z < g.oext[2]; ++z)
      for (int yy = 0; yy < g.oext[1]; ++yy)
        std::copy_n(ypad + linear_index(g.pext, 0, yy, z), g.oext[0], y + linear_index(g.oext, 0, yy, z));
  }

  void scatter_flat(const Geometry& g, const T* dy, T* dypad) const {
    for (int z = 0; z < g.oext[2]; ++z)
      for (int yy = 0; yy < g.oext[1]; ++yy)
        std::copy_n(dy + linear_index(g.oext, 0, yy, z), g.oext[0], dypad + linear_index(g.pext, 0, yy, z));
  }

  void forward_rows(const Geometry& g, const T* xpad, T* y) const {
    for (int co = 0; co < out_; ++co) {
      T* out = y + co * g.out_voxels;
      std::fill(out, out + g.out_voxels, bias.value[co]);
      for_each_row(g, co, [&](const T* w, const T* in, std::int64_t out_off) {
        T* o = out + out_off;
        for (int d0 = 0; d0 < kernel_[0]; ++d0) {
          const T wv = w[d0];
          for (int ox = 0; ox < g.oext[0]; ++ox) o[ox] += wv * in[static_cast<std::int64_t>(ox) * stride_[0] + d0];
        }
      }, xpad);
    }
  }

  void backward_rows(const Geometry& g, const T* xpad, const T* dy, T* dxpad) {
    const T* w_base = weight.value.data();
    for (int co = 0; co < out_; ++co) {
      const T* gout = dy + co * g.out_voxels;
      for_each_row(g, co, [&](const T* w, const T* in, std::int64_t out_off) {
        const T* go = gout + out_off;
        T* gw = weight.grad.data() + (w - w_base);
        T* din = dxpad + (in - xpad);
        for (int d0 = 0; d0 < kernel_[0]; ++d0) {
          const T wv = w[d0];
          T acc{};
#pragma omp simd reduction(+ : acc)
          for (int ox = 0; ox < g.oext[0]; ++ox) {
            const std::int64_t ix = static_cast<std::int64_t>(ox) * stride_[0] + d0;
            acc += go[ox] * in[ix];
            din[ix] += wv * go[ox];
          }
          gw[d0] += acc;
        }
      }, xpad);
    }
  }

  void pad(const T* x, const Geometry& g, std::vector<T>& xpad) const {
    xpad.assign(static_cast<std::size_t>(g.pad_voxels * in_), T{});
    const int p0 = kernel_[0] / 2, p1 = kernel_[1] / 2, p2 = kernel_[2] / 2;
    for (int ci = 0; ci < in_; ++ci) {
      const T* src = x + ci * voxel_count(g.iext);
      T* dst = xpad.data() + ci * g.pad_voxels;
      for (int z = 0; z < g.iext[2]; ++z)
        for (int y = 0; y < g.iext[1]; ++y)
          std::copy_n(src + linear_index(g.iext, 0, y, z), g.iext[0], dst + linear_index(g.pext, p0, y + p1, z + p2));
    }
  }

  void unpad(const std::vector<T>& xpad, const Geometry& g, T* x) const {
    const int p0 = kernel_[0] / 2, p1 = kernel_[1] / 2, p2 = kernel_[2] / 2;
    for (int ci = 0; ci < in_; ++ci) {
      T* dst = x + ci * voxel_count(g.iext);
      const T* src = xpad.data() + ci * g.pad_voxels;
      for (int z = 0; z < g.iext[2]; ++z)
        for (int y = 0; y < g.iext[1]; ++y)
          std::copy_n(src + linear_index(g.pext, p0, y + p1, z + p2), g.iext[0], dst + linear_index(g.iext, 0, y, z));
    }
  }

  // Calls fn(weight row for (co, ci, d2, d1), padded input row start, output row offset) for every
  // output row and kernel row; the callee walks d0 and x.
  template <class Fn>
  void for_each_row(const Geometry& g, int co, Fn&& fn, const T* xpad) const {
    const std::int64_t k_row = kernel_[0];
    for (int ci = 0; ci < in_; ++ci) {
      const T* in_c = xpad + ci * g.pad_voxels;
      for (int d2 = 0; d2 < kernel_[2]; ++d2)
        for (int d1 = 0; d1 < kernel_[1]; ++d1) {
          const T* w = weight.value.data() +
                       ((static_cast<std::int64_t>(co) * in_ + ci) * kernel_[2] * kernel_[1] + d2 * kernel_[1] + d1) * k_row;
          for (int oz = 0; oz < g.oext[2]; ++oz) {
            const int iz = oz * stride_[2] + d2;
            for (int oy = 0; oy < g.oext[1]; ++oy) {
              const int iy = oy * stride_[1] + d1;
              fn(w, in_c + linear_index(g.pext, 0, iy, iz), linear_index(g.oext, 0, oy, oz));
            }
          }
        }
    }
  }

  int in_ = 0;
  int out_ = 0;
  Triple kernel_{1, 1, 1};
  Triple stride_{1, 1, 1};
  Tensor<T> input_;
};

// Transposed convolution with kernel == stride (non-overlapping upsampling).
template <class T>
class TransposedConv3d {
 public:
  TransposedConv3d() = default;
  TransposedConv3d(const std::string& name, int in_channels, int out_channels, const Triple& stride)
      : weight(name + ".weight", {out_channels, stride[2], stride[1], stride[0], in_channels}),
        bias(name + ".bias", {out_channels}),
        in_(in_channels),
        out_(out_channels),
        stride_(stride) {}

  Parameter<T> weight;
  Parameter<T> bias;

  void initialize(std::mt19937_64& rng) {
    he_normal(weight, in_, rng);
    std::fill(bias.value.begin(), bias.value.end(), T{});
  }

  void collect(ParameterList<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Tensor<T> apply(const Tensor<T>& x) const {
    if (x.c != in_) throw ShapeError(weight.name + ": expected " + std::to_string(in_) + " channels");
    const Triple oext{x.ext[0] * stride_[0], x.ext[1] * stride_[1], x.ext[2] * stride_[2]};
    Tensor<T> y(x.n, out_, oext);
    const std::int64_t P = x.spatial();
    const std::int64_t rows = static_cast<std::int64_t>(out_) * voxel_count(stride_);
    Eigen::Map<const RowMatrix<T>> W(weight.value.data(), rows, in_);
    RowMatrix<T> Y(rows, P);
    for (int i = 0; i < x.n; ++i) {
      Y.noalias() = W * Eigen::Map<const RowMatrix<T>>(x.sample(i), in_, P);
      scatter(Y, x.ext, y.sample(i));
      for (int o = 0; o < out_; ++o) {
        T* ch = y.channel(i, o);
        for (std::int64_t v = 0; v < y.spatial(); ++v) ch[v] += bias.value[o];
      }
    }
    return y;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    return apply(x);
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T>& x = input_;
    const std::int64_t P = x.spatial();
    const std::int64_t rows = static_cast<std::int64_t>(out_) * voxel_count(stride_);
    Eigen::Map<const RowMatrix<T>> W(weight.value.data(), rows, in_);
    Eigen::Map<RowMatrix<T>> dW(weight.grad.data(), rows, in_);
    Tensor<T> dx(x.n, in_, x.ext);
    RowMatrix<T> dY(rows, P);
    for (int i = 0; i < x.n; ++i) {
      for (int o = 0; o < out_; ++o) {
        const T* ch = dy.channel(i, o);
        T s{};
        for (std::int64_t v = 0; v < dy.spatial(); ++v) s += ch[v];
        bias.grad[o] += s;
      }
      gather(dy.sample(i), x.ext, dY);
      Eigen::Map<const RowMatrix<T>> X(x.sample(i), in_, P);
      dW.noalias() += dY * X.transpose();
      Eigen::Map<RowMatrix<T>>(dx.sample(i), in_, P).noalias() = W.transpose() * dY;
    }
    input_ = Tensor<T>();
    return dx;
  }

 private:
  // Row (o, k2, k1, k0) of Y lands at output voxel (x*s0+k0, y*s1+k1, z*s2+k2) of channel o.
  template <class Fn>
  void for_each_target(const Triple& iext, Fn&& fn) const {
    const Triple oext{iext[0] * stride_[0], iext[1] * stride_[1], iext[2] * stride_[2]};
    const std::int64_t out_voxels = voxel_count(oext);
    std::int64_t row = 0;
    for (int o = 0; o < out_; ++o)
      for (int k2 = 0; k2 < stride_[2]; ++k2)
        for (int k1 = 0; k1 < stride_[1]; ++k1)
          for (int k0 = 0; k0 < stride_[0]; ++k0, ++row) {
            std::int64_t p = 0;
            for (int z = 0; z < iext[2]; ++z)
              for (int y = 0; y < iext[1]; ++y)
                for (int x = 0; x < iext[0]; ++x, ++p) {
                  const std::int64_t target =
                      o * out_voxels + linear_index(oext, x * stride_[0] + k0, y * stride_[1] + k1, z * stride_[2] + k2);
                  fn(row, p, target);
                }
          }
  }

  void scatter(const RowMatrix<T>& Y, const Triple& iext, T* out) const {
    for_each_target(iext, [&](std::int64_t row, std::int64_t p, std::int64_t target) { out[target] = Y(row, p); });
  }

  void gather(const T* dout, const Triple& iext, RowMatrix<T>& dY) const {
    for_each_target(iext, [&](std::int64_t row, std::int64_t p, std::int64_t target) { dY(row, p) = dout[target]; });
  }

  int in_ = 0;
  int out_ = 0;
  Triple stride_{1, 1, 1};
  Tensor<T> input_;
};

// Per-sample, per-channel normalisation over the spatial extent with learned affine.
template <class T>
class InstanceNorm {
 public:
  InstanceNorm() = default;
  InstanceNorm(const std::string& name, int channels)
      : gamma(name + ".weight", {channels}), beta(name + ".bias", {channels}), channels_(channels) {
    std::fill(gamma.value.begin(), gamma.value.end(), T{1});
  }

  Parameter<T> gamma;
  Parameter<T> beta;

  void initialize(std::mt19937_64&) {
    std::fill(gamma.value.begin(), gamma.value.end(), T{1});
    std::fill(beta.value.begin(), beta.value.end(), T{});
  }

  void collect(ParameterList<T>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }

  Tensor<T> apply(const Tensor<T>& x) const { return run(x, nullptr, nullptr); }

  Tensor<T> forward(const Tensor<T>& x) { return run(x, &xhat_, &inv_std_); }

  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx(dy.n, dy.c, dy.ext);
    const std::int64_t P = dy.spatial();
    for (int i = 0; i < dy.n; ++i) {
      for (int ch = 0; ch < channels_; ++ch) {
        const T* g = dy.channel(i, ch);
        const T* xh = xhat_.channel(i, ch);
        double sum_dy = 0, sum_dy_xhat = 0;
        for (std::int64_t v = 0; v < P; ++v) {
          sum_dy += g[v];
          sum_dy_xhat += static_cast<double>(g[v]) * xh[v];
        }
        gamma.grad[ch] += static_cast<T>(sum_dy_xhat);
        beta.grad[ch] += static_cast<T>(sum_dy);
        const double scale = gamma.value[ch] * inv_std_[static_cast<std::size_t>(i) * channels_ + ch] / P;
        T* out = dx.channel(i, ch);
        for (std::int64_t v = 0; v < P; ++v)
          out[v] = static_cast<T>(scale * (P * static_cast<double>(g[v]) - sum_dy - xh[v] * sum_dy_xhat));
      }
    }
    xhat_ = Tensor<T>();
    return dx;
  }

 private:
  Tensor<T> run(const Tensor<T>& x, Tensor<T>* xhat, std::vector<double>* inv_std) const {
    if (x.c != channels_) throw ShapeError(gamma.name + ": channel mismatch");
    Tensor<T> y(x.n, x.c, x.ext);
    if (xhat) *xhat = Tensor<T>(x.n, x.c, x.ext);
    if (inv_std) inv_std->assign(static_cast<std::size_t>(x.n) * x.c, 0.0);
    const std::int64_t P = x.spatial();
    for (int i = 0; i < x.n; ++i) {
      for (int ch = 0; ch < channels_; ++ch) {
        const T* in = x.channel(i, ch);
        double mean = 0;
        for (std::int64_t v = 0; v < P; ++v) mean += in[v];
        mean /= P;
        double var = 0;
        for (std::int64_t v = 0; v < P; ++v) {
          const double d = in[v] - mean;
          var += d * d;
        }
        var /= P;
        const double inv = 1.0 / std::sqrt(var + kNormEpsilon);
        if (inv_std) (*inv_std)[static_cast<std::size_t>(i) * channels_ + ch] = inv;
        T* out = y.channel(i, ch);
        T* xh = xhat ? xhat->channel(i, ch) : nullptr;
        const double g = gamma.value[ch];
        const double b = beta.value[ch];
        for (std::int64_t v = 0; v < P; ++v) {
          const double h = (in[v] - mean) * inv;
          if (xh) xh[v] = static_cast<T>(h);
          out[v] = static_cast<T>(g * h + b);
        }
      }
    }
    return y;
  }

  int channels_ = 0;
  Tensor<T> xhat_;
  std::vector<double> inv_std_;
};

template <class T>
class LeakyRelu {
 public:
  Tensor<T> apply(Tensor<T> x) const {
    for (auto& v : x.data)
      if (v < 0) v *= static_cast<T>(kLeakySlope);
    return x;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    return apply(x);
  }

  Tensor<T> backward(Tensor<T> dy) {
    for (std::size_t i = 0; i < dy.data.size(); ++i)
      if (input_.data[i] < 0) dy.data[i] *= static_cast<T>(kLeakySlope);
    input_ = Tensor<T>();
    return dy;
  }

  // Which side of the kink each input of the last training pass fell on.
  void append_pattern(std::vector<std::uint8_t>& out) const {
    for (T v : input_.data) out.push_back(v < 0);
  }

 private:
  Tensor<T> input_;
};

}  // namespace planseg::nn
