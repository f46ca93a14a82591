#pragma once

// Grid containers and the sampling / encoding primitives shared by the
// transform, metric and loss code.
//
// Voxel (x, y, z) is stored at x + nx * (y + ny * z). Sampling coordinates
// are continuous voxel indices on the same grid.

#include <acreg/errors.hpp>
#include <acreg/parallel.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace acreg {

using Vec3i = std::array<int, 3>;
using Vec3d = std::array<double, 3>;

struct GridMeta {
  Vec3i dims{1, 1, 1};
  Vec3d spacing{1.0, 1.0, 1.0};

  GridMeta() = default;

  /// Size-1 axes are accepted (block averaging can produce them); file and
  /// phantom entry points additionally require at least 2 voxels per axis.
  explicit GridMeta(Vec3i d, Vec3d s = {1.0, 1.0, 1.0}) : dims(d), spacing(s) {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw ShapeError("grid dimension " + std::to_string(a) + " must be >= 1");
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
        throw InvalidInputError("grid spacing " + std::to_string(a) + " must be finite and > 0");
    }
  }

  std::size_t size() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
           static_cast<std::size_t>(dims[2]);
  }

  std::size_t stride(int axis) const {
    if (axis == 0) return 1;
    if (axis == 1) return static_cast<std::size_t>(dims[0]);
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]);
  }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(z));
  }

  Vec3i coords(std::size_t i) const {
    const auto nx = static_cast<std::size_t>(dims[0]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    return {static_cast<int>(i % nx), static_cast<int>((i / nx) % ny), static_cast<int>(i / (nx * ny))};
  }

  friend bool operator==(const GridMeta& a, const GridMeta& b) {
    if (a.dims != b.dims) return false;
    for (int k = 0; k < 3; ++k)
      if (std::abs(a.spacing[k] - b.spacing[k]) > 1e-6 * std::max(a.spacing[k], b.spacing[k])) return false;
    return true;
  }
};

inline std::string describe(const GridMeta& m) {
  std::ostringstream os;
  os << m.dims[0] << "x" << m.dims[1] << "x" << m.dims[2];
  return os.str();
}

inline void require_same_grid(const GridMeta& a, const GridMeta& b, std::string_view op) {
  if (!(a == b))
    throw ShapeError(std::string(op) + ": grid mismatch (" + describe(a) + " vs " + describe(b) + ")");
}

inline void require_min_dims(const GridMeta& m, int min_dim, std::string_view op) {
  for (int a = 0; a < 3; ++a)
    if (m.dims[a] < min_dim)
      throw ShapeError(std::string(op) + ": every axis needs at least " + std::to_string(min_dim) +
                       " voxels, got " + describe(m));
}

/// Calls fn(x, y, z, i) for every voxel, slices of constant z in parallel.
template <class Fn>
void for_each_voxel(const GridMeta& m, Fn&& fn) {
  const std::size_t slice = m.stride(2);
  parallel_for(
      0, static_cast<std::size_t>(m.dims[2]),
      [&](std::size_t zs) {
        const int z = static_cast<int>(zs);
        std::size_t i = zs * slice;
        for (int y = 0; y < m.dims[1]; ++y)
          for (int x = 0; x < m.dims[0]; ++x, ++i) fn(x, y, z, i);
      },
      std::max<std::size_t>(1, 4096 / std::max<std::size_t>(1, slice)));
}

template <class Real>
class ScalarVolume {
public:
  ScalarVolume() = default;

  explicit ScalarVolume(GridMeta meta, Real fill = Real(0)) : meta_(meta), values_(meta.size(), fill) {}

  ScalarVolume(GridMeta meta, std::vector<Real> values) : meta_(meta), values_(std::move(values)) {
    if (values_.size() != meta_.size())
      throw ShapeError("scalar volume: value count " + std::to_string(values_.size()) + " does not match grid " +
                       describe(meta_));
    for (const Real v : values_)
      if (!std::isfinite(v)) throw InvalidInputError("scalar volume: non-finite value");
  }

  const GridMeta& meta() const { return meta_; }
  std::size_t size() const { return values_.size(); }

  std::span<const Real> values() const& { return values_; }
  std::span<Real> values() & { return values_; }
  // On a temporary, hand the storage over so a range-for stays valid.
  std::vector<Real> values() && { return std::move(values_); }
  const Real* data() const { return values_.data(); }
  Real* data() { return values_.data(); }

  Real operator[](std::size_t i) const { return values_[i]; }
  Real& operator[](std::size_t i) { return values_[i]; }
  Real operator()(int x, int y, int z) const { return values_[meta_.index(x, y, z)]; }
  Real& operator()(int x, int y, int z) { return values_[meta_.index(x, y, z)]; }

private:
  GridMeta meta_;
  std::vector<Real> values_;
};

enum class Tissue : std::uint8_t { background = 0, csf = 1, gm = 2, wm = 3 };
inline constexpr int kTissueCount = 4;

inline const char* tissue_name(int label) {
  static constexpr const char* names[] = {"BG", "CSF", "GM", "WM"};
  return (label >= 0 && label < kTissueCount) ? names[label] : "?";
}

class LabelVolume {
public:
  LabelVolume() = default;

  explicit LabelVolume(GridMeta meta, std::uint8_t fill = 0) : meta_(meta), labels_(meta.size(), fill) {
    check(fill);
  }

  LabelVolume(GridMeta meta, std::vector<std::uint8_t> labels) : meta_(meta), labels_(std::move(labels)) {
    if (labels_.size() != meta_.size())
      throw ShapeError("label volume: label count does not match grid " + describe(meta_));
    for (const auto l : labels_) check(l);
  }

  const GridMeta& meta() const { return meta_; }
  std::size_t size() const { return labels_.size(); }
  std::span<const std::uint8_t> labels() const& { return labels_; }
  std::vector<std::uint8_t> labels() && { return std::move(labels_); }

  std::uint8_t operator[](std::size_t i) const { return labels_[i]; }
  std::uint8_t operator()(int x, int y, int z) const { return labels_[meta_.index(x, y, z)]; }

  void set(std::size_t i, std::uint8_t label) {
    check(label);
    labels_[i] = label;
  }
  void set(int x, int y, int z, std::uint8_t label) { set(meta_.index(x, y, z), label); }

  friend bool operator==(const LabelVolume& a, const LabelVolume& b) {
    return a.meta_ == b.meta_ && a.labels_ == b.labels_;
  }

private:
  static void check(std::uint8_t l) {
    if (l >= kTissueCount)
      throw InvalidInputError("label volume: label " + std::to_string(l) + " outside {0,1,2,3}");
  }

  GridMeta meta_;
  std::vector<std::uint8_t> labels_;
};

/// One soft membership channel per tissue label; channels sum to 1 per voxel.
template <class Real>
struct SoftTissueMap {
  std::array<ScalarVolume<Real>, kTissueCount> channels;

  const GridMeta& meta() const { return channels[0].meta(); }
};

namespace detail {

/// Linear interpolation support along one axis with border clamp.
template <class Real>
struct AxisWeights {
  std::size_t lo = 0;  // voxel index of the lower node
  std::size_t hi = 0;  // voxel index of the upper node (== lo on size-1 axes)
  Real t = 0;          // weight of the upper node
  Real dt = 0;         // d t / d p: 1 inside [0, n-1], 0 where clamped
};

template <class Real>
inline AxisWeights<Real> axis_weights(Real p, int n) {
  AxisWeights<Real> w;
  if (n == 1) return w;
  const Real top = static_cast<Real>(n - 1);
  Real q = p;
  w.dt = Real(1);
  if (q < Real(0)) {
    q = Real(0);
    w.dt = Real(0);
  } else if (q > top) {
    q = top;
    w.dt = Real(0);
  }
  const int i0 = std::min(static_cast<int>(std::floor(q)), n - 2);
  w.lo = static_cast<std::size_t>(i0);
  w.hi = w.lo + 1;
  w.t = q - static_cast<Real>(i0);
  return w;
}

/// The eight-node stencil of a trilinear sample. Used for forward
/// interpolation, the spatial gradient of the interpolant, and the adjoint
/// scatter onto the sampled grid.
template <class Real>
struct TrilinearCell {
  std::array<std::size_t, 8> idx{};  // bit0: x upper, bit1: y upper, bit2: z upper
  Real tx = 0, ty = 0, tz = 0;
  Real dx = 0, dy = 0, dz = 0;

  Real weight(int b) const {
    return ((b & 1) ? tx : Real(1) - tx) * ((b & 2) ? ty : Real(1) - ty) * ((b & 4) ? tz : Real(1) - tz);
  }

  Real interpolate(const Real* f) const {
    const Real c00 = f[idx[0]] + tx * (f[idx[1]] - f[idx[0]]);
    const Real c10 = f[idx[2]] + tx * (f[idx[3]] - f[idx[2]]);
    const Real c01 = f[idx[4]] + tx * (f[idx[5]] - f[idx[4]]);
    const Real c11 = f[idx[6]] + tx * (f[idx[7]] - f[idx[6]]);
    const Real c0 = c00 + ty * (c10 - c00);
    const Real c1 = c01 + ty * (c11 - c01);
    return c0 + tz * (c1 - c0);
  }

  /// Derivative of the interpolant with respect to the sampling point.
  std::array<Real, 3> gradient(const Real* f) const {
    const Real f0 = f[idx[0]], f1 = f[idx[1]], f2 = f[idx[2]], f3 = f[idx[3]];
    const Real f4 = f[idx[4]], f5 = f[idx[5]], f6 = f[idx[6]], f7 = f[idx[7]];
    const Real ux = Real(1) - tx, uy = Real(1) - ty, uz = Real(1) - tz;
    const Real gx = uy * uz * (f1 - f0) + ty * uz * (f3 - f2) + uy * tz * (f5 - f4) + ty * tz * (f7 - f6);
    const Real gy = ux * uz * (f2 - f0) + tx * uz * (f3 - f1) + ux * tz * (f6 - f4) + tx * tz * (f7 - f5);
    const Real gz = ux * uy * (f4 - f0) + tx * uy * (f5 - f1) + ux * ty * (f6 - f2) + tx * ty * (f7 - f3);
    return {dx * gx, dy * gy, dz * gz};
  }

  /// Adds value * weight to each node: the adjoint of interpolate().
  void scatter(Real* f, Real value) const {
    for (int b = 0; b < 8; ++b) f[idx[b]] += value * weight(b);
  }
};

template <class Real>
inline TrilinearCell<Real> trilinear_cell(const GridMeta& m, Real px, Real py, Real pz) {
  if (!std::isfinite(px) || !std::isfinite(py) || !std::isfinite(pz))
    throw InvalidInputError("trilinear sample: non-finite sampling point");
  const auto ax = axis_weights(px, m.dims[0]);
  const auto ay = axis_weights(py, m.dims[1]);
  const auto az = axis_weights(pz, m.dims[2]);
  const std::size_t sy = m.stride(1), sz = m.stride(2);
  TrilinearCell<Real> c;
  for (int b = 0; b < 8; ++b) {
    const std::size_t x = (b & 1) ? ax.hi : ax.lo;
    const std::size_t y = (b & 2) ? ay.hi : ay.lo;
    const std::size_t z = (b & 4) ? az.hi : az.lo;
    c.idx[b] = x + sy * y + sz * z;
  }
  c.tx = ax.t;
  c.ty = ay.t;
  c.tz = az.t;
  c.dx = ax.dt;
  c.dy = ay.dt;
  c.dz = az.dt;
  return c;
}

/// Sum over the (2r+1)^3 box centred on each voxel, truncated at the borders.
template <class Real>
inline std::vector<Real> box_sum(const GridMeta& m, std::span<const Real> in, int radius) {
  std::vector<Real> cur(in.begin(), in.end());
  std::vector<Real> next(cur.size());
  // x: running sum along each contiguous row.
  {
    const int n = m.dims[0];
    const std::size_t rows = m.size() / static_cast<std::size_t>(n);
    parallel_for(
        0, rows,
        [&](std::size_t row) {
          const Real* src = cur.data() + row * static_cast<std::size_t>(n);
          Real* dst = next.data() + row * static_cast<std::size_t>(n);
          Real acc = 0;
          for (int i = 0; i <= std::min(radius, n - 1); ++i) acc += src[i];
          for (int i = 0; i < n; ++i) {
            dst[i] = acc;
            if (i + radius + 1 < n) acc += src[i + radius + 1];
            if (i - radius >= 0) acc -= src[i - radius];
          }
        },
        64);
    std::swap(cur, next);
  }
  // y and z: the same sweep applied to whole contiguous blocks at once.
  for (int axis = 1; axis < 3; ++axis) {
    const int n = m.dims[axis];
    const std::size_t block = m.stride(axis);
    const std::size_t outer = m.size() / (block * static_cast<std::size_t>(n));
    std::vector<Real> acc_store(block * outer);
    parallel_for(0, outer, [&](std::size_t o) {
      const Real* src = cur.data() + o * block * static_cast<std::size_t>(n);
      Real* dst = next.data() + o * block * static_cast<std::size_t>(n);
      Real* acc = acc_store.data() + o * block;
      std::fill(acc, acc + block, Real(0));
      for (int i = 0; i <= std::min(radius, n - 1); ++i) {
        const Real* s = src + block * static_cast<std::size_t>(i);
        for (std::size_t k = 0; k < block; ++k) acc[k] += s[k];
      }
      for (int i = 0; i < n; ++i) {
        std::copy(acc, acc + block, dst + block * static_cast<std::size_t>(i));
        if (i + radius + 1 < n) {
          const Real* s = src + block * static_cast<std::size_t>(i + radius + 1);
          for (std::size_t k = 0; k < block; ++k) acc[k] += s[k];
        }
        if (i - radius >= 0) {
          const Real* s = src + block * static_cast<std::size_t>(i - radius);
          for (std::size_t k = 0; k < block; ++k) acc[k] -= s[k];
        }
      }
    });
    std::swap(cur, next);
  }
  return cur;
}

/// Number of voxels in each truncated box (same geometry as box_sum).
inline std::vector<int> box_counts(const GridMeta& m, int radius) {
  std::array<std::vector<int>, 3> per_axis;
  for (int a = 0; a < 3; ++a) {
    per_axis[a].resize(static_cast<std::size_t>(m.dims[a]));
    for (int i = 0; i < m.dims[a]; ++i)
      per_axis[a][static_cast<std::size_t>(i)] = std::min(i + radius, m.dims[a] - 1) - std::max(i - radius, 0) + 1;
  }
  std::vector<int> out(m.size());
  for (int z = 0; z < m.dims[2]; ++z)
    for (int y = 0; y < m.dims[1]; ++y)
      for (int x = 0; x < m.dims[0]; ++x)
        out[m.index(x, y, z)] = per_axis[0][static_cast<std::size_t>(x)] * per_axis[1][static_cast<std::size_t>(y)] *
                                per_axis[2][static_cast<std::size_t>(z)];
  return out;
}

} // namespace detail

template <class Real>
Real sample_trilinear(const ScalarVolume<Real>& vol, const std::array<Real, 3>& p) {
  return detail::trilinear_cell(vol.meta(), p[0], p[1], p[2]).interpolate(vol.data());
}

namespace detail {

template <class Real>
inline int nearest_index(Real p, int n) {
  const Real r = std::floor(p + Real(0.5));
  if (r <= Real(0)) return 0;
  if (r >= static_cast<Real>(n - 1)) return n - 1;
  return static_cast<int>(r);
}

} // namespace detail

/// Label at the nearest voxel, rounding halves up; clamped to the grid.
template <class Real>
std::uint8_t sample_nearest(const LabelVolume& labels, const std::array<Real, 3>& p) {
  if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2]))
    throw InvalidInputError("nearest sample: non-finite sampling point");
  const auto& m = labels.meta();
  return labels(detail::nearest_index(p[0], m.dims[0]), detail::nearest_index(p[1], m.dims[1]),
                detail::nearest_index(p[2], m.dims[2]));
}

/// Separable Gaussian smoothing, kernel truncated at 3 sigma and renormalised
/// over the in-grid taps at the borders. sigma == 0 returns the input.
template <class Real>
ScalarVolume<Real> gaussian_smooth(const ScalarVolume<Real>& vol, double sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw InvalidInputError("gaussian_smooth: sigma must be >= 0");
  if (sigma == 0.0) return vol;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  for (int k = -radius; k <= radius; ++k)
    kernel[static_cast<std::size_t>(k + radius)] = std::exp(-0.5 * (k * k) / (sigma * sigma));

  const GridMeta& m = vol.meta();
  std::vector<Real> cur(vol.values().begin(), vol.values().end());
  std::vector<Real> next(cur.size());
  for (int axis = 0; axis < 3; ++axis) {
    const int n = m.dims[axis];
    const std::size_t stride = m.stride(axis);
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    const std::size_t lines = static_cast<std::size_t>(m.dims[a1]) * static_cast<std::size_t>(m.dims[a2]);
    parallel_for(
        0, lines,
        [&](std::size_t line) {
          Vec3i start{0, 0, 0};
          start[a1] = static_cast<int>(line % static_cast<std::size_t>(m.dims[a1]));
          start[a2] = static_cast<int>(line / static_cast<std::size_t>(m.dims[a1]));
          const std::size_t base = m.index(start[0], start[1], start[2]);
          for (int i = 0; i < n; ++i) {
            double acc = 0.0, wsum = 0.0;
            for (int k = std::max(-radius, -i); k <= std::min(radius, n - 1 - i); ++k) {
              const double w = kernel[static_cast<std::size_t>(k + radius)];
              acc += w * static_cast<double>(cur[base + stride * static_cast<std::size_t>(i + k)]);
              wsum += w;
            }
            next[base + stride * static_cast<std::size_t>(i)] = static_cast<Real>(acc / wsum);
          }
        },
        16);
    std::swap(cur, next);
  }
  ScalarVolume<Real> out(m);
  std::copy(cur.begin(), cur.end(), out.values().begin());
  return out;
}

/// Soft one-hot encoding: per-label indicators, Gaussian-smoothed, then
/// renormalised to sum to one at every voxel.
template <class Real>
SoftTissueMap<Real> one_hot_soft(const LabelVolume& labels, double sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw InvalidInputError("one_hot_soft: sigma must be >= 0");
  const GridMeta& m = labels.meta();
  SoftTissueMap<Real> out;
  for (int c = 0; c < kTissueCount; ++c) {
    ScalarVolume<Real> ind(m);
    for (std::size_t i = 0; i < m.size(); ++i) ind[i] = labels[i] == c ? Real(1) : Real(0);
    out.channels[static_cast<std::size_t>(c)] = gaussian_smooth(ind, sigma);
  }
  for (std::size_t i = 0; i < m.size(); ++i) {
    Real sum = 0;
    for (auto& ch : out.channels) sum += ch[i];
    for (auto& ch : out.channels) ch[i] = std::clamp(ch[i] / sum, Real(0), Real(1));
  }
  return out;
}

inline GridMeta coarse_grid(const GridMeta& m, int factor) {
  if (factor < 1) throw InvalidInputError("resample_level: factor must be >= 1");
  Vec3i d{};
  Vec3d s{};
  for (int a = 0; a < 3; ++a) {
    d[a] = (m.dims[a] + factor - 1) / factor;
    s[a] = m.spacing[a] * factor;
  }
  return GridMeta(d, s);
}

/// Block-average downsampling. Trailing partial blocks average the voxels
/// they contain.
template <class Real>
ScalarVolume<Real> resample_level(const ScalarVolume<Real>& vol, int factor) {
  if (factor < 1) throw InvalidInputError("resample_level: factor must be >= 1");
  if (factor == 1) return vol;
  const GridMeta& m = vol.meta();
  const GridMeta cm = coarse_grid(m, factor);
  ScalarVolume<Real> out(cm);
  for (int z = 0; z < cm.dims[2]; ++z)
    for (int y = 0; y < cm.dims[1]; ++y)
      for (int x = 0; x < cm.dims[0]; ++x) {
        double acc = 0.0;
        int count = 0;
        for (int k = z * factor; k < std::min((z + 1) * factor, m.dims[2]); ++k)
          for (int j = y * factor; j < std::min((y + 1) * factor, m.dims[1]); ++j)
            for (int i = x * factor; i < std::min((x + 1) * factor, m.dims[0]); ++i) {
              acc += static_cast<double>(vol(i, j, k));
              ++count;
            }
        out(x, y, z) = static_cast<Real>(acc / count);
      }
  return out;
}

/// Block-mode downsampling of labels; ties resolve to the lower label.
inline LabelVolume resample_labels(const LabelVolume& labels, int factor) {
  if (factor < 1) throw InvalidInputError("resample_labels: factor must be >= 1");
  if (factor == 1) return labels;
  const GridMeta& m = labels.meta();
  const GridMeta cm = coarse_grid(m, factor);
  std::vector<std::uint8_t> out(cm.size());
  for (int z = 0; z < cm.dims[2]; ++z)
    for (int y = 0; y < cm.dims[1]; ++y)
      for (int x = 0; x < cm.dims[0]; ++x) {
        std::array<int, kTissueCount> votes{};
        for (int k = z * factor; k < std::min((z + 1) * factor, m.dims[2]); ++k)
          for (int j = y * factor; j < std::min((y + 1) * factor, m.dims[1]); ++j)
            for (int i = x * factor; i < std::min((x + 1) * factor, m.dims[0]); ++i) ++votes[labels(i, j, k)];
        out[cm.index(x, y, z)] =
            static_cast<std::uint8_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
      }
  return LabelVolume(cm, std::move(out));
}

template <class Real>
SoftTissueMap<Real> resample_level(const SoftTissueMap<Real>& soft, int factor) {
  SoftTissueMap<Real> out;
  for (int c = 0; c < kTissueCount; ++c)
    out.channels[static_cast<std::size_t>(c)] = resample_level(soft.channels[static_cast<std::size_t>(c)], factor);
  return out;
}

} // namespace acreg
