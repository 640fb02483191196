#pragma once

// Attention-map container and geometric primitives: max-min normalization,
// soft IoU, center of mass, bounding-box extraction from thresholded maps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ear {

struct empty_map_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Axis { X, Y };

// H x W grid of non-negative reals, row-major.
class AttentionMap {
 public:
  AttentionMap() = default;
  AttentionMap(int h, int w, double fill = 0.0)
      : h_(h), w_(w), v_(static_cast<size_t>(h) * w, fill) {
    if (h <= 0 || w <= 0) throw std::invalid_argument("AttentionMap: bad size");
  }
  AttentionMap(int h, int w, std::vector<double> values)
      : h_(h), w_(w), v_(std::move(values)) {
    if (v_.size() != static_cast<size_t>(h) * w)
      throw std::invalid_argument("AttentionMap: size mismatch");
  }

  int height() const { return h_; }
  int width() const { return w_; }
  size_t size() const { return v_.size(); }

  double& at(int r, int c) { return v_[static_cast<size_t>(r) * w_ + c]; }
  double at(int r, int c) const { return v_[static_cast<size_t>(r) * w_ + c]; }
  double& operator[](size_t i) { return v_[i]; }
  double operator[](size_t i) const { return v_[i]; }

  const std::vector<double>& values() const { return v_; }
  std::vector<double>& values() { return v_; }

  double sum() const {
    double s = 0;
    for (double x : v_) s += x;
    return s;
  }
  double max_value() const { return *std::max_element(v_.begin(), v_.end()); }
  double min_value() const { return *std::min_element(v_.begin(), v_.end()); }

 private:
  int h_ = 0, w_ = 0;
  std::vector<double> v_;
};

// One map per prompt token, all at the same timestep.
struct AttentionStack {
  std::vector<AttentionMap> maps;
  int timestep = 0;

  const AttentionMap& map(int token) const { return maps.at(token); }
  int token_count() const { return static_cast<int>(maps.size()); }
};

struct BoundingBox {
  int row_min = 0, row_max = 0, col_min = 0, col_max = 0;

  bool contains(int r, int c) const {
    return r >= row_min && r <= row_max && c >= col_min && c <= col_max;
  }
};

// (v - min) / (max - min); a constant map normalizes to all zeros.
inline AttentionMap normalize_maxmin(const AttentionMap& m) {
  const double lo = m.min_value();
  const double hi = m.max_value();
  AttentionMap out(m.height(), m.width());
  if (hi > lo) {
    const double inv = 1.0 / (hi - lo);
    for (size_t i = 0; i < m.size(); ++i) out[i] = (m[i] - lo) * inv;
  }
  return out;
}

// Soft IoU of two maps valued in [0,1]:
//   sum(a*b) / sum(a+b), symmetric, range [0, 1/2].
// Both maps all-zero is defined as 0 so batched loss sums stay total.
inline double iou(const AttentionMap& a, const AttentionMap& b) {
  if (a.height() != b.height() || a.width() != b.width())
    throw std::invalid_argument("iou: resolution mismatch");
  double num = 0, den = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    num += a[i] * b[i];
    den += a[i] + b[i];
  }
  return den > 0 ? num / den : 0.0;
}

// Mass-normalized first moment along an axis. X uses the column index,
// Y the row index (rows grow downward). The `normalized` flag off gives
// the raw first moment without dividing by total mass.
inline double center_of_mass(const AttentionMap& m, Axis axis,
                             bool normalized = true) {
  double mass = 0, moment = 0;
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c) {
      const double v = m.at(r, c);
      mass += v;
      moment += v * (axis == Axis::X ? c : r);
    }
  if (!normalized) return moment;
  if (mass <= 0) throw empty_map_error("center_of_mass: empty map");
  return moment / mass;
}

namespace detail {

inline AttentionMap upscale_nearest(const AttentionMap& m, int factor) {
  AttentionMap out(m.height() * factor, m.width() * factor);
  for (int r = 0; r < out.height(); ++r)
    for (int c = 0; c < out.width(); ++c)
      out.at(r, c) = m.at(r / factor, c / factor);
  return out;
}

// Separable truncated Gaussian, radius ceil(3*sigma), clamped borders.
inline AttentionMap gaussian_blur(const AttentionMap& m, double sigma) {
  if (sigma <= 0) return m;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double ksum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    ksum += k[i + radius];
  }
  for (double& x : k) x /= ksum;

  AttentionMap tmp(m.height(), m.width());
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        const int cc = std::clamp(c + i, 0, m.width() - 1);
        acc += k[i + radius] * m.at(r, cc);
      }
      tmp.at(r, c) = acc;
    }
  AttentionMap out(m.height(), m.width());
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        const int rr = std::clamp(r + i, 0, m.height() - 1);
        acc += k[i + radius] * tmp.at(rr, c);
      }
      out.at(r, c) = acc;
    }
  return out;
}

// 4-connected component labels over a binary mask; returns label grid and
// per-label pixel counts (label 0 = background).
inline std::pair<std::vector<int>, std::vector<int>> label_components(
    const std::vector<uint8_t>& mask, int h, int w) {
  std::vector<int> labels(mask.size(), 0);
  std::vector<int> areas{0};
  int next = 1;
  std::vector<size_t> stack;
  for (size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || labels[start]) continue;
    const int lab = next++;
    areas.push_back(0);
    stack.push_back(start);
    labels[start] = lab;
    while (!stack.empty()) {
      const size_t p = stack.back();
      stack.pop_back();
      ++areas[lab];
      const int r = static_cast<int>(p) / w;
      const int c = static_cast<int>(p) % w;
      const int dr[4] = {-1, 1, 0, 0};
      const int dc[4] = {0, 0, -1, 1};
      for (int d = 0; d < 4; ++d) {
        const int nr = r + dr[d], nc = c + dc[d];
        if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
        const size_t q = static_cast<size_t>(nr) * w + nc;
        if (mask[q] && !labels[q]) {
          labels[q] = lab;
          stack.push_back(q);
        }
      }
    }
  }
  return {std::move(labels), std::move(areas)};
}

}  // namespace detail

// Upscale, blur, max-min normalize, keep the top 10% of pixels, and return
// the tight box of the largest 4-connected component.
inline BoundingBox extract_bbox(const AttentionMap& m, int upscale = 4,
                                double blur_sigma = 1.0) {
  if (m.sum() <= 0) throw empty_map_error("extract_bbox: empty map");
  AttentionMap big = detail::upscale_nearest(m, std::max(1, upscale));
  big = detail::gaussian_blur(big, blur_sigma);
  big = normalize_maxmin(big);
  if (big.max_value() <= 0) throw empty_map_error("extract_bbox: empty map");

  std::vector<double> sorted(big.values());
  std::sort(sorted.begin(), sorted.end());
  const double thresh = sorted[static_cast<size_t>(0.9 * (sorted.size() - 1))];

  std::vector<uint8_t> mask(big.size());
  for (size_t i = 0; i < big.size(); ++i)
    mask[i] = big[i] >= thresh && big[i] > 0 ? 1 : 0;

  auto [labels, areas] =
      detail::label_components(mask, big.height(), big.width());
  int best = 0;
  for (size_t lab = 1; lab < areas.size(); ++lab)
    if (areas[lab] > areas[best] || best == 0) best = static_cast<int>(lab);
  if (best == 0) throw empty_map_error("extract_bbox: empty map");

  BoundingBox box{big.height(), -1, big.width(), -1};
  for (int r = 0; r < big.height(); ++r)
    for (int c = 0; c < big.width(); ++c)
      if (labels[static_cast<size_t>(r) * big.width() + c] == best) {
        box.row_min = std::min(box.row_min, r);
        box.row_max = std::max(box.row_max, r);
        box.col_min = std::min(box.col_min, c);
        box.col_max = std::max(box.col_max, c);
      }
  return box;
}

// --- dump formats: CSV (H rows of comma-separated reals) and 8-bit PGM ---

inline void write_map_csv(const AttentionMap& m, std::ostream& os) {
  os.precision(17);
  for (int r = 0; r < m.height(); ++r) {
    for (int c = 0; c < m.width(); ++c) {
      if (c) os << ',';
      os << m.at(r, c);
    }
    os << '\n';
  }
}

inline void write_map_pgm(const AttentionMap& m, std::ostream& os) {
  os << "P5\n" << m.width() << ' ' << m.height() << "\n255\n";
  for (size_t i = 0; i < m.size(); ++i) {
    const double v = std::clamp(m[i], 0.0, 1.0);
    os.put(static_cast<char>(static_cast<int>(std::lround(v * 255.0))));
  }
}

inline void write_map_csv_file(const AttentionMap& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  write_map_csv(m, f);
}

inline void write_map_pgm_file(const AttentionMap& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  write_map_pgm(m, f);
}

}  // namespace ear
