#pragma once

#include <cstdint>
#include <vector>

#include "planseg/nn/layers.hpp"
#include "planseg/topology.hpp"

namespace planseg::nn {

struct BuildOptions {
  // Bypass normalisation and nonlinearity, leaving a purely linear network (probing and equivariance tests).
  bool linear = false;
};

// conv -> instance norm -> leaky relu
template <class T>
class ConvUnit {
 public:
  ConvUnit() = default;
  ConvUnit(const std::string& name, int in, int out, const Triple& kernel, const Triple& stride, bool linear);

  Tensor<T> apply(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(Tensor<T> dy);
  void initialize(std::mt19937_64& rng);
  void collect(ParameterList<T>& out);
  void append_pattern(std::vector<std::uint8_t>& out) const { act_.append_pattern(out); }

 private:
  Conv3d<T> conv_;
  InstanceNorm<T> norm_;
  LeakyRelu<T> act_;
  bool linear_ = false;
};

// Pre-activation residual block: x + conv(act(norm(conv(act(norm(x)))))).
// A 1^3 projection replaces the identity skip when channels or stride change.
template <class T>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(const std::string& name, int in, int out, const Triple& kernel, const Triple& stride, bool linear);

  Tensor<T> apply(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void initialize(std::mt19937_64& rng);
  void collect(ParameterList<T>& out);
  void append_pattern(std::vector<std::uint8_t>& out) const {
    act1_.append_pattern(out);
    act2_.append_pattern(out);
  }

 private:
  InstanceNorm<T> norm1_, norm2_;
  LeakyRelu<T> act1_, act2_;
  Conv3d<T> conv1_, conv2_;
  bool has_projection_ = false;
  Conv3d<T> projection_;
  bool linear_ = false;
};

// U-Net with a plain or residual encoder and optional deep-supervision heads.
// Output r has the spatial extent of encoder stage r; output 0 is full resolution.
template <class T>
class UNet {
 public:
  UNet() = default;
  UNet(const TopologyDescriptor& topo, std::uint64_t seed, BuildOptions options = {});

  const TopologyDescriptor& descriptor() const { return topo_; }
  std::uint64_t seed() const { return seed_; }
  const BuildOptions& options() const { return options_; }

  // Training pass: caches activations and returns every supervised output.
  std::vector<Tensor<T>> forward(const Tensor<T>& x);
  // Backpropagates per-output gradients (same layout as forward's result). Returns d(loss)/d(input).
  Tensor<T> backward(const std::vector<Tensor<T>>& grads);

  // Stateless passes, safe to call concurrently on a shared network.
  Tensor<T> predict(const Tensor<T>& x) const;
  std::vector<Tensor<T>> infer_all(const Tensor<T>& x) const;
  Tensor<T> encode(const Tensor<T>& x) const;

  // Rectifier sign pattern of the last training forward pass (before backward releases it).
  // Two passes with equal patterns lie on one smooth piece of the network function.
  std::vector<std::uint8_t> activation_pattern() const;

  ParameterList<T> parameters();
  std::int64_t parameter_count() const;
  void zero_grad();
  int num_outputs() const { return static_cast<int>(heads_.size()); }

 private:
  template <class Self>
  static std::vector<Tensor<T>> run(Self& self, const Tensor<T>& x, bool all_outputs, bool encoder_only);
  void check_input(const Tensor<T>& x) const;

  TopologyDescriptor topo_;
  std::uint64_t seed_ = 0;
  BuildOptions options_;
  ConvUnit<T> stem_;
  std::vector<std::vector<ConvUnit<T>>> plain_stages_;
  std::vector<std::vector<ResidualBlock<T>>> residual_stages_;
  std::vector<TransposedConv3d<T>> upsamplers_;
  std::vector<std::vector<ConvUnit<T>>> decoder_;
  std::vector<Conv3d<T>> heads_;
};

using SegmentationNetwork = UNet<float>;

template <class T = float>
UNet<T> build_network(const TopologyDescriptor& topo, std::uint64_t seed, BuildOptions options = {}) {
  return UNet<T>(topo, seed, options);
}

extern template class UNet<float>;
extern template class UNet<double>;

}  // namespace planseg::nn
