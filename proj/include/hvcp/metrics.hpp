#pragma once

// Completion metrics: Chamfer distance, unidirectional Hausdorff, total mutual
// difference, volumetric IoU, normal consistency, and F-score. Nearest
// neighbors run through a uniform cell index that returns exactly what the
// brute-force scan returns — same dist2, same first-index tie break — so the
// accelerated path is interchangeable with the reference one.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "hvcp/pointcloud.hpp"
#include "hvcp/rng.hpp"
#include "hvcp/shapes.hpp"

namespace hvcp::metrics {

// Points a completion cloud carries when a mesh is resampled for evaluation.
constexpr std::size_t kCompletionCloudPoints = 2048;

// Reference scan: first index attaining the minimum squared distance.
inline std::pair<std::size_t, double> nearest_brute(const std::vector<Vec3>& pts,
                                                    const Vec3& q) {
  check(!pts.empty(), "nearest: empty point set");
  std::size_t bi = 0;
  double bd = dist2(pts[0], q);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    double d = dist2(pts[i], q);
    if (d < bd) {
      bd = d;
      bi = i;
    }
  }
  return {bi, bd};
}

// Uniform cell grid over the point bounding box; queries expand Chebyshev
// shells of cells outward until nothing unscanned can beat the current best.
// Shells keep expanding while the unscanned lower bound merely ties, so exact
// ties resolve to the smallest index just like the brute scan.
class NnIndex {
 public:
  explicit NnIndex(const std::vector<Vec3>& pts) : pts_(&pts) {
    check(!pts.empty(), "nn index: empty point set");
    Vec3 lo = pts[0], hi = pts[0];
    for (const auto& p : pts)
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], p[a]);
        hi[a] = std::max(hi[a], p[a]);
      }
    lo_ = lo;
    double target = std::round(std::cbrt(static_cast<double>(pts.size())));
    cells_ = static_cast<std::size_t>(std::clamp(target, 1.0, 64.0));
    for (int a = 0; a < 3; ++a)
      w_[a] = std::max((hi[a] - lo[a]) / static_cast<double>(cells_), 1e-12);
    buckets_.assign(cells_ * cells_ * cells_, {});
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const Vec3& p = pts[i];
      buckets_[flat(cell(p.x, 0), cell(p.y, 1), cell(p.z, 2))].push_back(i);
    }
  }

  std::pair<std::size_t, double> nearest(const Vec3& q) const {
    const auto& pts = *pts_;
    long C = static_cast<long>(cells_);
    long cx = cell(q.x, 0), cy = cell(q.y, 1), cz = cell(q.z, 2);
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0;
    bool found = false;
    for (long r = 0; r <= C; ++r) {
      for (long x = cx - r; x <= cx + r; ++x) {
        if (x < 0 || x >= C) continue;
        for (long y = cy - r; y <= cy + r; ++y) {
          if (y < 0 || y >= C) continue;
          for (long z = cz - r; z <= cz + r; ++z) {
            if (z < 0 || z >= C) continue;
            long cheb = std::max({std::labs(x - cx), std::labs(y - cy), std::labs(z - cz)});
            if (cheb != r) continue;
            for (std::size_t i :
                 buckets_[flat(static_cast<std::size_t>(x), static_cast<std::size_t>(y),
                               static_cast<std::size_t>(z))]) {
              double d = dist2(pts[i], q);
              if (d < best || (d == best && (!found || i < bi))) {
                best = d;
                bi = i;
                found = true;
              }
            }
          }
        }
      }
      // Closest any cell beyond shell r can come to q: distance to the
      // nearest uncovered slab boundary, infinite when none remains.
      double lb = std::numeric_limits<double>::infinity();
      long c3[3] = {cx, cy, cz};
      double qc[3] = {q.x, q.y, q.z};
      for (int a = 0; a < 3; ++a) {
        if (c3[a] - r > 0)
          lb = std::min(lb, qc[a] - (lo_[a] + static_cast<double>(c3[a] - r) * w_[a]));
        if (c3[a] + r + 1 < C)
          lb = std::min(lb, (lo_[a] + static_cast<double>(c3[a] + r + 1) * w_[a]) - qc[a]);
      }
      if (!std::isfinite(lb)) break;
      if (found && best < lb * lb) break;
    }
    check(found, "nn index: query found no point");
    return {bi, best};
  }

 private:
  long cell(double v, int a) const {
    double c = std::floor((v - lo_[a]) / w_[a]);
    return std::clamp(static_cast<long>(c), 0L, static_cast<long>(cells_) - 1);
  }
  std::size_t flat(std::size_t x, std::size_t y, std::size_t z) const {
    return (x * cells_ + y) * cells_ + z;
  }

  const std::vector<Vec3>* pts_;
  Vec3 lo_;
  double w_[3] = {1, 1, 1};
  std::size_t cells_ = 1;
  std::vector<std::vector<std::size_t>> buckets_;
};

// ---- cloud-to-cloud metrics ---------------------------------------------------

// Symmetric Chamfer distance: half the sum of both directed mean Euclidean
// nearest-neighbor distances.
inline double chamfer_l1(const PointCloud& a, const PointCloud& b) {
  check(a.size() >= 1 && b.size() >= 1, "chamfer: clouds must be non-empty");
  NnIndex ia(a.points), ib(b.points);
  double sa = 0;
  for (const auto& p : a.points) sa += std::sqrt(ib.nearest(p).second);
  sa /= static_cast<double>(a.size());
  double sb = 0;
  for (const auto& p : b.points) sb += std::sqrt(ia.nearest(p).second);
  sb /= static_cast<double>(b.size());
  return 0.5 * (sa + sb);
}

struct UhdOptions {
  bool mean_min = false;  // average the per-point minima instead of taking the max
};

// Unidirectional Hausdorff from the partial input into each completion,
// averaged over completions: fidelity of samples to the observed points.
inline double uhd(const PointCloud& partial, const std::vector<PointCloud>& completions,
                  UhdOptions opt = {}) {
  check(partial.size() >= 1, "uhd: empty partial cloud");
  check(!completions.empty(), "uhd: need at least one completion");
  double acc = 0;
  for (const auto& c : completions) {
    check(c.size() >= 1, "uhd: empty completion cloud");
    NnIndex idx(c.points);
    double dir = 0;
    for (const auto& p : partial.points) {
      double d = std::sqrt(idx.nearest(p).second);
      dir = opt.mean_min ? dir + d : std::max(dir, d);
    }
    if (opt.mean_min) dir /= static_cast<double>(partial.size());
    acc += dir;
  }
  return acc / static_cast<double>(completions.size());
}

struct TmdOptions {
  bool sum_pairs = false;  // report the raw pair sum instead of the pair mean
};

// Total mutual difference: Chamfer distance over all unordered completion
// pairs; higher means more diverse completions.
inline double tmd(const std::vector<PointCloud>& completions, TmdOptions opt = {}) {
  check(completions.size() >= 2, "tmd: need at least two completions");
  double acc = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < completions.size(); ++i)
    for (std::size_t j = i + 1; j < completions.size(); ++j) {
      acc += chamfer_l1(completions[i], completions[j]);
      ++pairs;
    }
  return opt.sum_pairs ? acc : acc / static_cast<double>(pairs);
}

struct CompletionSet {
  PointCloud partial;
  std::vector<PointCloud> completions;  // k samples; the pipeline default is 10
};

inline double uhd(const CompletionSet& s, UhdOptions opt = {}) {
  return uhd(s.partial, s.completions, opt);
}
inline double tmd(const CompletionSet& s, TmdOptions opt = {}) {
  return tmd(s.completions, opt);
}

// Mean absolute cosine between each point's normal and its nearest neighbor's
// normal, averaged over both directions.
inline double normal_consistency(const PointCloud& a, const PointCloud& b) {
  check(a.size() >= 1 && b.size() >= 1, "normal consistency: clouds must be non-empty");
  check(a.has_normals() && b.has_normals(), "normal consistency: clouds need normals");
  NnIndex ia(a.points), ib(b.points);
  double sa = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    sa += std::abs(dot(a.normals[i], b.normals[ib.nearest(a.points[i]).first]));
  sa /= static_cast<double>(a.size());
  double sb = 0;
  for (std::size_t i = 0; i < b.size(); ++i)
    sb += std::abs(dot(b.normals[i], a.normals[ia.nearest(b.points[i]).first]));
  sb /= static_cast<double>(b.size());
  return 0.5 * (sa + sb);
}

struct FScore {
  double precision = 0;
  double recall = 0;
  double f = 0;
};

// Fraction of predicted points within tau of the reference and vice versa;
// zero when neither side scores (instead of NaN).
inline FScore f_score(const PointCloud& pred, const PointCloud& truth, double tau = 0.01) {
  check(pred.size() >= 1 && truth.size() >= 1, "f-score: clouds must be non-empty");
  check(tau > 0, "f-score: tau must be positive");
  NnIndex ip(pred.points), it(truth.points);
  FScore r;
  for (const auto& p : pred.points)
    if (std::sqrt(it.nearest(p).second) <= tau) r.precision += 1;
  r.precision /= static_cast<double>(pred.size());
  for (const auto& p : truth.points)
    if (std::sqrt(ip.nearest(p).second) <= tau) r.recall += 1;
  r.recall /= static_cast<double>(truth.size());
  r.f = (r.precision + r.recall) > 0
            ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
            : 0.0;
  return r;
}

// ---- volumetric IoU -------------------------------------------------------------

using OccupancyFn = std::function<bool(const Vec3&)>;

// Analytic occupancy with the shape decomposed once up front.
inline OccupancyFn shape_occupancy_fn(const data::ShapeSpec& s) {
  auto parts = data::decompose(s);
  return [parts](const Vec3& q) {
    for (const auto& p : parts)
      if (data::part_inside(p, q)) return true;
    return false;
  };
}

// Grid occupancy: trilinear interpolation of the stored field (samples at cell
// centers, border clamped) binarized at 0.5 — the same region the extracted
// isosurface bounds.
inline OccupancyFn grid_occupancy_fn(std::vector<double> grid, std::size_t side) {
  check(side >= 1, "grid occupancy: side must be >= 1");
  check(grid.size() == side * side * side, "grid occupancy: size mismatch");
  auto g = std::make_shared<const std::vector<double>>(std::move(grid));
  return [g, side](const Vec3& q) {
    double s = static_cast<double>(side);
    std::size_t i0[3], i1[3];
    double f[3];
    for (int a = 0; a < 3; ++a) {
      double c = (q[a] + 0.5) * s - 0.5;
      double fl = std::floor(c);
      long i = static_cast<long>(fl);
      double frac = c - fl;
      if (i < 0) {
        i = 0;
        frac = 0;
      }
      if (i >= static_cast<long>(side) - 1) {
        i = static_cast<long>(side) - 1;
        frac = 0;
      }
      i0[a] = static_cast<std::size_t>(i);
      i1[a] = std::min(i0[a] + 1, side - 1);
      f[a] = frac;
    }
    auto at = [&](std::size_t x, std::size_t y, std::size_t z) {
      return (*g)[(x * side + y) * side + z];
    };
    double v = 0;
    for (int bx = 0; bx < 2; ++bx)
      for (int by = 0; by < 2; ++by)
        for (int bz = 0; bz < 2; ++bz) {
          double w = (bx ? f[0] : 1 - f[0]) * (by ? f[1] : 1 - f[1]) * (bz ? f[2] : 1 - f[2]);
          v += w * at(bx ? i1[0] : i0[0], by ? i1[1] : i0[1], bz ? i1[2] : i0[2]);
        }
    return v > 0.5;
  };
}

// Monte Carlo IoU over the unit cube. An empty union counts as a perfect
// match of two empty shapes; the flag reports when that rule fired. A region
// predicate, when given, restricts the comparison to that part of the cube.
inline double volumetric_iou_mc(const OccupancyFn& a, const OccupancyFn& b,
                                std::size_t samples, Rng& rng,
                                bool* both_empty = nullptr,
                                const OccupancyFn& region = {}) {
  check(samples >= 1, "iou: need at least one sample");
  std::size_t inter = 0, uni = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    Vec3 q{rng.uniform() - 0.5, rng.uniform() - 0.5, rng.uniform() - 0.5};
    if (region && !region(q)) continue;
    bool oa = a(q), ob = b(q);
    inter += (oa && ob) ? 1 : 0;
    uni += (oa || ob) ? 1 : 0;
  }
  if (both_empty) *both_empty = uni == 0;
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Exact IoU of two same-side grids counted over the lattice cells, binarized
// at 0.5, with the same empty-union rule.
inline double volumetric_iou_grids(const std::vector<double>& a, const std::vector<double>& b,
                                   std::size_t side, bool* both_empty = nullptr) {
  check(side >= 1, "iou: side must be >= 1");
  check(a.size() == side * side * side && b.size() == a.size(), "iou: grid size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    bool oa = a[i] > 0.5, ob = b[i] > 0.5;
    inter += (oa && ob) ? 1 : 0;
    uni += (oa || ob) ? 1 : 0;
  }
  if (both_empty) *both_empty = uni == 0;
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace hvcp::metrics
