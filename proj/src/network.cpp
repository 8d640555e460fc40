#include "planseg/nn/network.hpp"

#include <type_traits>

namespace planseg::nn {

// ---- ConvUnit ----------------------------------------------------------------

template <class T>
ConvUnit<T>::ConvUnit(const std::string& name, int in, int out, const Triple& kernel, const Triple& stride,
                      bool linear)
    : conv_(name + ".conv", in, out, kernel, stride), norm_(name + ".norm", out), linear_(linear) {}

template <class T>
Tensor<T> ConvUnit<T>::apply(const Tensor<T>& x) const {
  Tensor<T> y = conv_.apply(x);
  if (linear_) return y;
  return act_.apply(norm_.apply(y));
}

template <class T>
Tensor<T> ConvUnit<T>::forward(const Tensor<T>& x) {
  Tensor<T> y = conv_.forward(x);
  if (linear_) return y;
  return act_.forward(norm_.forward(y));
}

template <class T>
Tensor<T> ConvUnit<T>::backward(Tensor<T> dy) {
  if (!linear_) dy = norm_.backward(act_.backward(std::move(dy)));
  return conv_.backward(dy);
}

template <class T>
void ConvUnit<T>::initialize(std::mt19937_64& rng) {
  conv_.initialize(rng);
  norm_.initialize(rng);
}

template <class T>
void ConvUnit<T>::collect(ParameterList<T>& out) {
  conv_.collect(out);
  norm_.collect(out);
}

// ---- ResidualBlock -------------------------------------------------------------

template <class T>
ResidualBlock<T>::ResidualBlock(const std::string& name, int in, int out, const Triple& kernel, const Triple& stride,
                                bool linear)
    : norm1_(name + ".norm1", in),
      norm2_(name + ".norm2", out),
      conv1_(name + ".conv1", in, out, kernel, stride),
      conv2_(name + ".conv2", out, out, kernel, Triple{1, 1, 1}),
      has_projection_(in != out || stride != Triple{1, 1, 1}),
      linear_(linear) {
  if (has_projection_) projection_ = Conv3d<T>(name + ".projection", in, out, Triple{1, 1, 1}, stride);
}

template <class T>
Tensor<T> ResidualBlock<T>::apply(const Tensor<T>& x) const {
  Tensor<T> h = linear_ ? x : act1_.apply(norm1_.apply(x));
  h = conv1_.apply(h);
  if (!linear_) h = act2_.apply(norm2_.apply(h));
  h = conv2_.apply(h);
  add_into(h, has_projection_ ? projection_.apply(x) : x);
  return h;
}

template <class T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x) {
  Tensor<T> h = linear_ ? x : act1_.forward(norm1_.forward(x));
  h = conv1_.forward(h);
  if (!linear_) h = act2_.forward(norm2_.forward(h));
  h = conv2_.forward(h);
  add_into(h, has_projection_ ? projection_.forward(x) : x);
  return h;
}

template <class T>
Tensor<T> ResidualBlock<T>::backward(const Tensor<T>& dy) {
  Tensor<T> d = conv2_.backward(dy);
  if (!linear_) d = norm2_.backward(act2_.backward(std::move(d)));
  d = conv1_.backward(d);
  if (!linear_) d = norm1_.backward(act1_.backward(std::move(d)));
  add_into(d, has_projection_ ? projection_.backward(dy) : dy);
  return d;
}

template <class T>
void ResidualBlock<T>::initialize(std::mt19937_64& rng) {
  norm1_.initialize(rng);
  conv1_.initialize(rng);
  norm2_.initialize(rng);
  conv2_.initialize(rng);
  if (has_projection_) projection_.initialize(rng);
}

template <class T>
void ResidualBlock<T>::collect(ParameterList<T>& out) {
  norm1_.collect(out);
  conv1_.collect(out);
  norm2_.collect(out);
  conv2_.collect(out);
  if (has_projection_) projection_.collect(out);
}

// ---- UNet ----------------------------------------------------------------------

template <class T>
UNet<T>::UNet(const TopologyDescriptor& topo, std::uint64_t seed, BuildOptions options)
    : topo_(topo), seed_(seed), options_(options) {
  validate_descriptor(topo_);
  const auto& f = topo_.features_per_stage;
  const int S = topo_.num_stages;
  const bool lin = options_.linear;
  constexpr Triple kUnit{1, 1, 1};

  if (topo_.encoder_type == EncoderType::Plain) {
    plain_stages_.resize(S);
    for (int s = 0; s < S; ++s) {
      for (int j = 0; j < topo_.blocks_per_stage_encoder[s]; ++j) {
        const int in = j > 0 ? f[s] : (s == 0 ? topo_.num_input_channels : f[s - 1]);
        plain_stages_[s].emplace_back("encoder.stage" + std::to_string(s) + ".unit" + std::to_string(j), in, f[s],
                                      topo_.kernel_sizes[s], j == 0 ? topo_.strides_per_stage[s] : kUnit, lin);
      }
    }
  } else {
    stem_ = ConvUnit<T>("encoder.stem", topo_.num_input_channels, f[0], topo_.kernel_sizes[0], kUnit, lin);
    residual_stages_.resize(S);
    for (int s = 0; s < S; ++s) {
      for (int b = 0; b < topo_.blocks_per_stage_encoder[s]; ++b) {
        const int in = b > 0 ? f[s] : (s == 0 ? f[0] : f[s - 1]);
        residual_stages_[s].emplace_back("encoder.stage" + std::to_string(s) + ".block" + std::to_string(b), in, f[s],
                                         topo_.kernel_sizes[s], b == 0 ? topo_.strides_per_stage[s] : kUnit, lin);
      }
    }
  }

  decoder_.resize(S - 1);
  for (int s = 0; s + 1 < S; ++s) {
    upsamplers_.emplace_back("decoder.level" + std::to_string(s) + ".up", f[s + 1], f[s], topo_.strides_per_stage[s + 1]);
    for (int j = 0; j < topo_.convs_per_stage_decoder[s]; ++j) {
      decoder_[s].emplace_back("decoder.level" + std::to_string(s) + ".unit" + std::to_string(j), j == 0 ? 2 * f[s] : f[s],
                               f[s], topo_.kernel_sizes[s], kUnit, lin);
    }
  }

  const int heads = topo_.deep_supervision ? S : 1;
  for (int r = 0; r < heads; ++r)
    heads_.emplace_back("head" + std::to_string(r), f[r], topo_.num_classes, kUnit, kUnit);

  std::mt19937_64 rng(seed);
  if (topo_.encoder_type == EncoderType::Residual) stem_.initialize(rng);
  for (auto& stage : plain_stages_)
    for (auto& u : stage) u.initialize(rng);
  for (auto& stage : residual_stages_)
    for (auto& b : stage) b.initialize(rng);
  for (int s = 0; s + 1 < S; ++s) {
    upsamplers_[s].initialize(rng);
    for (auto& u : decoder_[s]) u.initialize(rng);
  }
  for (auto& h : heads_) h.initialize(rng);
}

template <class T>
void UNet<T>::check_input(const Tensor<T>& x) const {
  if (x.c != topo_.num_input_channels) {
    throw ShapeError("network expects " + std::to_string(topo_.num_input_channels) + " input channels, got " +
                     std::to_string(x.c));
  }
  const Triple total = cumulative_stride(topo_, topo_.num_stages - 1);
  for (int a = 0; a < 3; ++a) {
    if (x.ext[a] % total[a] != 0) {
      throw ShapeError("input extent " + std::to_string(x.ext[a]) + " on axis " + std::to_string(a) +
                       " is not divisible by the cumulative stride " + std::to_string(total[a]));
    }
  }
}

template <class T>
template <class Self>
std::vector<Tensor<T>> UNet<T>::run(Self& self, const Tensor<T>& x, bool all_outputs, bool encoder_only) {
  auto call = [](auto& layer, const Tensor<T>& in) {
    if constexpr (std::is_const_v<Self>) {
      return layer.apply(in);
    } else {
      return layer.forward(in);
    }
  };
  self.check_input(x);
  const int S = self.topo_.num_stages;
  std::vector<Tensor<T>> skips(S);
  Tensor<T> cur = x;
  if (self.topo_.encoder_type == EncoderType::Residual) cur = call(self.stem_, cur);
  for (int s = 0; s < S; ++s) {
    if (self.topo_.encoder_type == EncoderType::Plain) {
      for (auto& unit : self.plain_stages_[s]) cur = call(unit, cur);
    } else {
      for (auto& block : self.residual_stages_[s]) cur = call(block, cur);
    }
    if (s + 1 < S) skips[s] = cur;
  }
  if (encoder_only) return {std::move(cur)};

  const bool supervised = all_outputs && self.topo_.deep_supervision;
  std::vector<Tensor<T>> outputs(supervised ? S : 1);
  if (supervised) outputs[S - 1] = call(self.heads_[S - 1], cur);
  for (int s = S - 2; s >= 0; --s) {
    cur = concat_channels(call(self.upsamplers_[s], cur), skips[s]);
    skips[s] = Tensor<T>();
    for (auto& unit : self.decoder_[s]) cur = call(unit, cur);
    if (s == 0 || supervised) outputs[s] = call(self.heads_[s], cur);
  }
  return outputs;
}

template <class T>
std::vector<Tensor<T>> UNet<T>::forward(const Tensor<T>& x) {
  return run(*this, x, true, false);
}

template <class T>
Tensor<T> UNet<T>::predict(const Tensor<T>& x) const {
  return std::move(run(*this, x, false, false).front());
}

template <class T>
std::vector<Tensor<T>> UNet<T>::infer_all(const Tensor<T>& x) const {
  return run(*this, x, true, false);
}

template <class T>
Tensor<T> UNet<T>::encode(const Tensor<T>& x) const {
  return std::move(run(*this, x, false, true).front());
}

template <class T>
Tensor<T> UNet<T>::backward(const std::vector<Tensor<T>>& grads) {
  const int S = topo_.num_stages;
  if (static_cast<int>(grads.size()) != num_outputs())
    throw ShapeError("backward expects one gradient per network output");
  std::vector<Tensor<T>> skip_grads(S);
  Tensor<T> d = heads_[0].backward(grads[0]);
  for (int s = 0; s + 1 < S; ++s) {
    for (auto it = decoder_[s].rbegin(); it != decoder_[s].rend(); ++it) d = it->backward(std::move(d));
    auto [d_up, d_skip] = split_channels(d, topo_.features_per_stage[s]);
    skip_grads[s] = std::move(d_skip);
    d = upsamplers_[s].backward(d_up);
    if (topo_.deep_supervision) add_into(d, heads_[s + 1].backward(grads[s + 1]));
  }

  for (int s = S - 1; s >= 0; --s) {
    if (s + 1 < S) add_into(d, skip_grads[s]);
    if (topo_.encoder_type == EncoderType::Plain) {
      auto& stage = plain_stages_[s];
      for (auto it = stage.rbegin(); it != stage.rend(); ++it) d = it->backward(std::move(d));
    } else {
      auto& stage = residual_stages_[s];
      for (auto it = stage.rbegin(); it != stage.rend(); ++it) d = it->backward(d);
    }
  }
  if (topo_.encoder_type == EncoderType::Residual) d = stem_.backward(std::move(d));
  return d;
}

template <class T>
std::vector<std::uint8_t> UNet<T>::activation_pattern() const {
  std::vector<std::uint8_t> out;
  if (topo_.encoder_type == EncoderType::Residual) stem_.append_pattern(out);
  for (const auto& stage : plain_stages_)
    for (const auto& u : stage) u.append_pattern(out);
  for (const auto& stage : residual_stages_)
    for (const auto& b : stage) b.append_pattern(out);
  for (const auto& level : decoder_)
    for (const auto& u : level) u.append_pattern(out);
  return out;
}

template <class T>
ParameterList<T> UNet<T>::parameters() {
  ParameterList<T> out;
  if (topo_.encoder_type == EncoderType::Residual) stem_.collect(out);
  for (auto& stage : plain_stages_)
    for (auto& u : stage) u.collect(out);
  for (auto& stage : residual_stages_)
    for (auto& b : stage) b.collect(out);
  for (std::size_t s = 0; s < upsamplers_.size(); ++s) {
    upsamplers_[s].collect(out);
    for (auto& u : decoder_[s]) u.collect(out);
  }
  for (auto& h : heads_) h.collect(out);
  return out;
}

template <class T>
std::int64_t UNet<T>::parameter_count() const {
  std::int64_t total = 0;
  for (const auto* p : const_cast<UNet*>(this)->parameters()) total += p->numel();
  return total;
}

template <class T>
void UNet<T>::zero_grad() {
  for (auto* p : parameters()) std::fill(p->grad.begin(), p->grad.end(), T{});
}

template class ConvUnit<float>;
template class ConvUnit<double>;
template class ResidualBlock<float>;
template class ResidualBlock<double>;
template class UNet<float>;
template class UNet<double>;

}  // namespace planseg::nn
