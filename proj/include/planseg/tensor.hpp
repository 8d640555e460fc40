#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "planseg/errors.hpp"
#include "planseg/types.hpp"

namespace planseg {

// Dense (batch, channel, x, y, z) array; x varies fastest.
template <class T>
struct Tensor {
  int n = 0;
  int c = 0;
  Triple ext{};
  std::vector<T> data;

  Tensor() = default;
  Tensor(int batch, int channels, const Triple& extent, T fill = T{})
      : n(batch), c(channels), ext(extent), data(static_cast<std::size_t>(batch) * channels * voxel_count(extent), fill) {}

  std::int64_t spatial() const { return voxel_count(ext); }
  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

  T* channel(int sample, int ch) { return data.data() + (static_cast<std::int64_t>(sample) * c + ch) * spatial(); }
  const T* channel(int sample, int ch) const {
    return data.data() + (static_cast<std::int64_t>(sample) * c + ch) * spatial();
  }
  T* sample(int i) { return channel(i, 0); }
  const T* sample(int i) const { return channel(i, 0); }

  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && ext == o.ext; }
};

inline std::int64_t linear_index(const Triple& ext, int x, int y, int z) {
  return (static_cast<std::int64_t>(z) * ext[1] + y) * ext[0] + x;
}

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out;
  out.n = t.n;
  out.c = t.c;
  out.ext = t.ext;
  out.data.assign(t.data.begin(), t.data.end());
  return out;
}

// Reverses `values` (count blocks of ext voxels each) along every axis whose bit is set in `axis_mask`.
template <class T>
void flip_blocks(std::span<T> values, const Triple& ext, unsigned axis_mask) {
  if (axis_mask == 0) return;
  const std::int64_t block = voxel_count(ext);
  std::vector<T> scratch(static_cast<std::size_t>(block));
  const bool fx = axis_mask & 1u, fy = axis_mask & 2u, fz = axis_mask & 4u;
  for (std::size_t off = 0; off + block <= values.size(); off += block) {
    T* src = values.data() + off;
    for (int z = 0; z < ext[2]; ++z) {
      const int tz = fz ? ext[2] - 1 - z : z;
      for (int y = 0; y < ext[1]; ++y) {
        const int ty = fy ? ext[1] - 1 - y : y;
        const T* row = src + linear_index(ext, 0, y, z);
        T* dst = scratch.data() + linear_index(ext, 0, ty, tz);
        if (fx) {
          for (int x = 0; x < ext[0]; ++x) dst[ext[0] - 1 - x] = row[x];
        } else {
          for (int x = 0; x < ext[0]; ++x) dst[x] = row[x];
        }
      }
    }
    std::copy(scratch.begin(), scratch.end(), src);
  }
}

template <class T>
Tensor<T> flipped(Tensor<T> t, unsigned axis_mask) {
  flip_blocks(std::span<T>(t.data), t.ext, axis_mask);
  return t;
}

inline unsigned axis_mask_of(std::span<const int> axes) {
  unsigned mask = 0;
  for (int a : axes) mask |= 1u << a;
  return mask;
}

// Concatenates along channels: result holds a's channels then b's.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n != b.n || a.ext != b.ext) throw ShapeError("concat: batch or spatial extent mismatch");
  Tensor<T> out(a.n, a.c + b.c, a.ext);
  const std::int64_t sa = a.c * a.spatial();
  const std::int64_t sb = b.c * b.spatial();
  for (int i = 0; i < a.n; ++i) {
    std::copy_n(a.sample(i), sa, out.sample(i));
    std::copy_n(b.sample(i), sb, out.sample(i) + sa);
  }
  return out;
}

// Inverse of concat_channels for gradients: splits off the first `first_channels` channels.
template <class T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& t, int first_channels) {
  Tensor<T> a(t.n, first_channels, t.ext);
  Tensor<T> b(t.n, t.c - first_channels, t.ext);
  const std::int64_t sa = a.c * a.spatial();
  const std::int64_t sb = b.c * b.spatial();
  for (int i = 0; i < t.n; ++i) {
    std::copy_n(t.sample(i), sa, a.sample(i));
    std::copy_n(t.sample(i) + sa, sb, b.sample(i));
  }
  return {std::move(a), std::move(b)};
}

template <class T>
void add_into(Tensor<T>& acc, const Tensor<T>& x) {
  if (!acc.same_shape(x)) throw ShapeError("add: shape mismatch");
  for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += x.data[i];
}

}  // namespace planseg
