#pragma once

// Synthetic parametric-shape corpus: analytic occupancy oracles, area-exact
// surface samplers with closed-form normals, the bottom/octant partial-view
// protocols, and deterministic dataset generation/serialization.
//
// Every family decomposes into axis-aligned primitive parts; occupancy is the
// union of closed part interiors and surface sampling draws area-weighted
// part samples rejected when they fall strictly inside another part, which
// yields exact uniform samples on the union boundary.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hvcp/core.hpp"
#include "hvcp/io.hpp"
#include "hvcp/pointcloud.hpp"
#include "hvcp/rng.hpp"

namespace hvcp::data {

constexpr double kShapeMargin = 0.45;  // shapes stay inside [-margin, margin]^3
constexpr double kPi = 3.14159265358979323846;

enum class Family : std::uint8_t {
  sphere = 0,
  box = 1,
  cylinder = 2,
  capsule = 3,
  union2 = 4,
  stool2mode = 5,
};

inline const char* family_name(Family f) {
  switch (f) {
    case Family::sphere: return "sphere";
    case Family::box: return "box";
    case Family::cylinder: return "cylinder";
    case Family::capsule: return "capsule";
    case Family::union2: return "union2";
    case Family::stool2mode: return "stool2mode";
  }
  return "?";
}

struct ShapeSpec {
  Family family = Family::sphere;
  std::vector<double> params;
};

// ---- primitive parts --------------------------------------------------------

// Axis-aligned analytic primitives; cylinders and capsules stand on the z axis.
struct Part {
  enum class Kind { sphere, box, cylinder, capsule } kind;
  Vec3 center{};
  Vec3 half{};        // box half-extents
  double radius = 0;  // sphere / cylinder / capsule
  double hz = 0;      // cylinder / capsule half-height of the straight section
};

inline bool part_inside(const Part& p, const Vec3& q) {
  Vec3 d = q - p.center;
  switch (p.kind) {
    case Part::Kind::sphere:
      return norm2(d) <= p.radius * p.radius;
    case Part::Kind::box:
      return std::abs(d.x) <= p.half.x && std::abs(d.y) <= p.half.y && std::abs(d.z) <= p.half.z;
    case Part::Kind::cylinder:
      return d.x * d.x + d.y * d.y <= p.radius * p.radius && std::abs(d.z) <= p.hz;
    case Part::Kind::capsule: {
      double cz = std::min(std::max(d.z, -p.hz), p.hz);
      double dz = d.z - cz;
      return d.x * d.x + d.y * d.y + dz * dz <= p.radius * p.radius;
    }
  }
  return false;
}

inline bool part_strictly_inside(const Part& p, const Vec3& q) {
  Vec3 d = q - p.center;
  switch (p.kind) {
    case Part::Kind::sphere:
      return norm2(d) < p.radius * p.radius;
    case Part::Kind::box:
      return std::abs(d.x) < p.half.x && std::abs(d.y) < p.half.y && std::abs(d.z) < p.half.z;
    case Part::Kind::cylinder:
      return d.x * d.x + d.y * d.y < p.radius * p.radius && std::abs(d.z) < p.hz;
    case Part::Kind::capsule: {
      double cz = std::min(std::max(d.z, -p.hz), p.hz);
      double dz = d.z - cz;
      return d.x * d.x + d.y * d.y + dz * dz < p.radius * p.radius;
    }
  }
  return false;
}

inline double part_area(const Part& p) {
  switch (p.kind) {
    case Part::Kind::sphere:
      return 4.0 * kPi * p.radius * p.radius;
    case Part::Kind::box:
      return 8.0 * (p.half.x * p.half.y + p.half.y * p.half.z + p.half.x * p.half.z);
    case Part::Kind::cylinder:
      return 2.0 * kPi * p.radius * (2.0 * p.hz) + 2.0 * kPi * p.radius * p.radius;
    case Part::Kind::capsule:
      return 2.0 * kPi * p.radius * (2.0 * p.hz) + 4.0 * kPi * p.radius * p.radius;
  }
  return 0;
}

inline Vec3 uniform_sphere_dir(Rng& rng) {
  double z = rng.uniform(-1.0, 1.0);
  double phi = rng.uniform(0.0, 2.0 * kPi);
  double s = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {s * std::cos(phi), s * std::sin(phi), z};
}

// Area-weighted uniform point on the part surface with its outward normal.
inline Vec3 part_sample_surface(const Part& p, Rng& rng, Vec3& normal) {
  switch (p.kind) {
    case Part::Kind::sphere: {
      Vec3 dir = uniform_sphere_dir(rng);
      normal = dir;
      return p.center + dir * p.radius;
    }
    case Part::Kind::box: {
      // pick a face pair axis by area, then a sign, then uniform in the face
      double ax = p.half.y * p.half.z, ay = p.half.x * p.half.z, az = p.half.x * p.half.y;
      double u = rng.uniform() * (ax + ay + az);
      int axis = u < ax ? 0 : (u < ax + ay ? 1 : 2);
      double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      Vec3 q;
      for (int a = 0; a < 3; ++a)
        q[a] = a == axis ? sign * p.half[a] : rng.uniform(-p.half[a], p.half[a]);
      normal = {0, 0, 0};
      normal[axis] = sign;
      return p.center + q;
    }
    case Part::Kind::cylinder: {
      double lateral = 2.0 * kPi * p.radius * (2.0 * p.hz);
      double caps = 2.0 * kPi * p.radius * p.radius;
      if (rng.uniform() * (lateral + caps) < lateral) {
        double th = rng.uniform(0.0, 2.0 * kPi);
        double z = rng.uniform(-p.hz, p.hz);
        normal = {std::cos(th), std::sin(th), 0};
        return p.center + Vec3{p.radius * std::cos(th), p.radius * std::sin(th), z};
      }
      double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      double rr = p.radius * std::sqrt(rng.uniform());
      double th = rng.uniform(0.0, 2.0 * kPi);
      normal = {0, 0, sign};
      return p.center + Vec3{rr * std::cos(th), rr * std::sin(th), sign * p.hz};
    }
    case Part::Kind::capsule: {
      double lateral = 2.0 * kPi * p.radius * (2.0 * p.hz);
      double ends = 4.0 * kPi * p.radius * p.radius;
      if (rng.uniform() * (lateral + ends) < lateral) {
        double th = rng.uniform(0.0, 2.0 * kPi);
        double z = rng.uniform(-p.hz, p.hz);
        normal = {std::cos(th), std::sin(th), 0};
        return p.center + Vec3{p.radius * std::cos(th), p.radius * std::sin(th), z};
      }
      Vec3 dir = uniform_sphere_dir(rng);
      normal = dir;
      double attach = dir.z >= 0 ? p.hz : -p.hz;
      return p.center + Vec3{0, 0, attach} + dir * p.radius;
    }
  }
  fail("part_sample_surface: bad kind");
}

// ---- family decomposition ----------------------------------------------------

namespace detail {

inline void want_params(const ShapeSpec& s, std::size_t n) {
  check(s.params.size() == n, std::string("shape spec: ") + family_name(s.family) +
                                  " expects " + std::to_string(n) + " params, got " +
                                  std::to_string(s.params.size()));
}

}  // namespace detail

// Square stool tops use this fraction of the round-top radius as half-extent,
// keeping corners inside the margin cube for every jitter draw.
constexpr double kStoolSquareFactor = 0.75;
constexpr double kStoolLegZlo = -0.40;
constexpr double kStoolLegOverlap = 0.01;  // legs end strictly inside the top slab

inline std::vector<Part> decompose(const ShapeSpec& s) {
  const auto& pr = s.params;
  switch (s.family) {
    case Family::sphere: {
      detail::want_params(s, 4);
      Part p{Part::Kind::sphere, {pr[0], pr[1], pr[2]}, {}, pr[3], 0};
      return {p};
    }
    case Family::box: {
      detail::want_params(s, 6);
      Part p{Part::Kind::box, {pr[0], pr[1], pr[2]}, {pr[3], pr[4], pr[5]}, 0, 0};
      return {p};
    }
    case Family::cylinder: {
      detail::want_params(s, 5);
      Part p{Part::Kind::cylinder, {pr[0], pr[1], pr[2]}, {}, pr[3], pr[4]};
      return {p};
    }
    case Family::capsule: {
      detail::want_params(s, 5);
      Part p{Part::Kind::capsule, {pr[0], pr[1], pr[2]}, {}, pr[3], pr[4]};
      return {p};
    }
    case Family::union2: {
      detail::want_params(s, 10);
      Part a{Part::Kind::sphere, {pr[0], pr[1], pr[2]}, {}, pr[3], 0};
      Part b{Part::Kind::box, {pr[4], pr[5], pr[6]}, {pr[7], pr[8], pr[9]}, 0, 0};
      return {a, b};
    }
    case Family::stool2mode: {
      detail::want_params(s, 6);
      int mode = static_cast<int>(pr[0]);
      check(mode == 0 || mode == 1, "stool2mode: mode must be 0 (round) or 1 (square)");
      double lp = pr[1], lw = pr[2], r = pr[3], top_zlo = pr[4], top_zhi = pr[5];
      std::vector<Part> parts;
      double leg_ztop = top_zlo + kStoolLegOverlap;
      double leg_cz = (kStoolLegZlo + leg_ztop) / 2.0;
      double leg_hz = (leg_ztop - kStoolLegZlo) / 2.0;
      for (double sx : {-1.0, 1.0})
        for (double sy : {-1.0, 1.0}) {
          Part leg{Part::Kind::box, {sx * lp, sy * lp, leg_cz}, {lw, lw, leg_hz}, 0, 0};
          parts.push_back(leg);
        }
      double top_cz = (top_zlo + top_zhi) / 2.0;
      double top_hz = (top_zhi - top_zlo) / 2.0;
      if (mode == 0) {
        Part top{Part::Kind::cylinder, {0, 0, top_cz}, {}, r, top_hz};
        parts.push_back(top);
      } else {
        double a = kStoolSquareFactor * r;
        Part top{Part::Kind::box, {0, 0, top_cz}, {a, a, top_hz}, 0, 0};
        parts.push_back(top);
      }
      return parts;
    }
  }
  fail("decompose: bad family");
}

inline void part_aabb(const Part& p, Vec3& lo, Vec3& hi) {
  switch (p.kind) {
    case Part::Kind::sphere:
      lo = p.center - Vec3{p.radius, p.radius, p.radius};
      hi = p.center + Vec3{p.radius, p.radius, p.radius};
      return;
    case Part::Kind::box:
      lo = p.center - p.half;
      hi = p.center + p.half;
      return;
    case Part::Kind::cylinder:
      lo = p.center - Vec3{p.radius, p.radius, p.hz};
      hi = p.center + Vec3{p.radius, p.radius, p.hz};
      return;
    case Part::Kind::capsule:
      lo = p.center - Vec3{p.radius, p.radius, p.hz + p.radius};
      hi = p.center + Vec3{p.radius, p.radius, p.hz + p.radius};
      return;
  }
}

inline void validate_spec(const ShapeSpec& s) {
  auto parts = decompose(s);
  check(!parts.empty(), "shape spec: no parts");
  for (const auto& p : parts) {
    Vec3 lo, hi;
    part_aabb(p, lo, hi);
    for (int a = 0; a < 3; ++a)
      check(lo[a] >= -kShapeMargin && hi[a] <= kShapeMargin,
            std::string("shape spec: ") + family_name(s.family) +
                " escapes the margin cube on axis " + std::to_string(a));
  }
}

// Bounding z-extent of the analytic shape (used for the mode-identity checks).
inline void spec_z_extent(const ShapeSpec& s, double& zlo, double& zhi) {
  auto parts = decompose(s);
  zlo = 1e30;
  zhi = -1e30;
  for (const auto& p : parts) {
    Vec3 lo, hi;
    part_aabb(p, lo, hi);
    zlo = std::min(zlo, lo.z);
    zhi = std::max(zhi, hi.z);
  }
}

// ---- oracle and samplers ------------------------------------------------------

// Exact analytic inside test; the boundary counts as inside.
inline int occupancy_oracle(const ShapeSpec& s, const Vec3& q) {
  for (const auto& p : decompose(s))
    if (part_inside(p, q)) return 1;
  return 0;
}

// Area-weighted uniform samples on the union boundary with outward normals.
inline PointCloud sample_surface(const ShapeSpec& s, std::size_t count, Rng& rng) {
  check(count >= 1, "sample_surface: count must be >= 1");
  auto parts = decompose(s);
  std::vector<double> cum(parts.size());
  double total = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    total += part_area(parts[i]);
    cum[i] = total;
  }
  PointCloud pc;
  pc.points.reserve(count);
  pc.normals.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    for (int attempt = 0;; ++attempt) {
      check(attempt < 100000, "sample_surface: rejection sampling failed to converge");
      double u = rng.uniform() * total;
      std::size_t pi = 0;
      while (pi + 1 < parts.size() && u >= cum[pi]) ++pi;
      Vec3 normal;
      Vec3 pt = part_sample_surface(parts[pi], rng, normal);
      bool interior = false;
      for (std::size_t pj = 0; pj < parts.size() && !interior; ++pj)
        if (pj != pi && part_strictly_inside(parts[pj], pt)) interior = true;
      if (!interior) {
        pc.points.push_back(pt);
        pc.normals.push_back(normal);
        break;
      }
    }
  }
  return pc;
}

// ---- partial-view protocols -----------------------------------------------------

enum class ViewMode { bottom, octant };

inline const char* view_mode_name(ViewMode m) { return m == ViewMode::bottom ? "bottom" : "octant"; }

inline ViewMode parse_view_mode(const std::string& s) {
  if (s == "bottom") return ViewMode::bottom;
  if (s == "octant") return ViewMode::octant;
  fail("view mode must be 'bottom' or 'octant', got '" + s + "'");
}

// Indices of the points kept by the cut; midpoints come from the cloud extent.
inline std::vector<std::size_t> view_kept_indices(const PointCloud& pc, ViewMode mode) {
  check(pc.size() >= 1, "partial_view: empty cloud");
  double zlo = 1e30, zhi = -1e30, xlo = 1e30, xhi = -1e30;
  for (const auto& p : pc.points) {
    zlo = std::min(zlo, p.z);
    zhi = std::max(zhi, p.z);
    xlo = std::min(xlo, p.x);
    xhi = std::max(xhi, p.x);
  }
  double z_mid = (zlo + zhi) / 2.0;
  double x_mid = (xlo + xhi) / 2.0;
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const Vec3& p = pc.points[i];
    bool ok = p.z < z_mid;
    if (mode == ViewMode::octant) ok = ok && p.x < x_mid;
    if (ok) kept.push_back(i);
  }
  return kept;
}

constexpr std::size_t kPartialPoints = 1024;

// Keeps the cut region and uniformly subsamples to exactly 1024 points.
inline PointCloud partial_view(const PointCloud& pc, ViewMode mode, Rng& rng,
                               std::size_t partial_points = kPartialPoints,
                               std::vector<std::size_t>* chosen = nullptr) {
  auto kept = view_kept_indices(pc, mode);
  check(kept.size() >= partial_points,
        "partial_view: only " + std::to_string(kept.size()) + " points in the kept region, need " +
            std::to_string(partial_points) + " (regenerate upstream with a denser cloud)");
  auto pick = rng.sample_indices(kept.size(), partial_points);
  PointCloud out;
  out.points.reserve(partial_points);
  if (pc.has_normals()) out.normals.reserve(partial_points);
  if (chosen) chosen->clear();
  for (auto k : pick) {
    std::size_t i = kept[k];
    if (chosen) chosen->push_back(i);
    out.points.push_back(pc.points[i]);
    if (pc.has_normals()) out.normals.push_back(pc.normals[i]);
  }
  return out;
}

// ---- random spec generation -------------------------------------------------------

// Parameter jitter ranges; all draws land strictly inside the margin cube.
inline ShapeSpec random_spec(Family f, Rng& rng) {
  ShapeSpec s;
  s.family = f;
  switch (f) {
    case Family::sphere:
      s.params = {rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1),
                  rng.uniform(0.20, 0.34)};
      break;
    case Family::box:
      s.params = {rng.uniform(-0.1, 0.1),  rng.uniform(-0.1, 0.1),  rng.uniform(-0.1, 0.1),
                  rng.uniform(0.12, 0.30), rng.uniform(0.12, 0.30), rng.uniform(0.12, 0.30)};
      break;
    case Family::cylinder:
      s.params = {rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1),
                  rng.uniform(0.12, 0.30), rng.uniform(0.12, 0.30)};
      break;
    case Family::capsule: {
      double cx = rng.uniform(-0.1, 0.1), cy = rng.uniform(-0.1, 0.1), cz = rng.uniform(-0.1, 0.1);
      double r = rng.uniform(0.08, 0.16);
      double hz = rng.uniform(0.10, 0.34 - r);
      s.params = {cx, cy, cz, r, hz};
      break;
    }
    case Family::union2: {
      s.params = {rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15),
                  rng.uniform(0.15, 0.25),  rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15),
                  rng.uniform(-0.15, 0.15), rng.uniform(0.10, 0.20),  rng.uniform(0.10, 0.20),
                  rng.uniform(0.10, 0.20)};
      break;
    }
    case Family::stool2mode: {
      double mode = rng.uniform() < 0.5 ? 0.0 : 1.0;
      double lp = rng.uniform(0.14, 0.165);
      double lw = rng.uniform(0.04, 0.06);
      double r = rng.uniform(0.33, 0.38);
      double top_zlo = rng.uniform(0.24, 0.28);
      double top_zhi = top_zlo + rng.uniform(0.10, 0.14);
      s.params = {mode, lp, lw, r, top_zlo, top_zhi};
      break;
    }
  }
  validate_spec(s);
  return s;
}

// Same stool with the other top; identical below the top slab by construction.
inline ShapeSpec with_mode(const ShapeSpec& s, int mode) {
  check(s.family == Family::stool2mode, "with_mode: only stool2mode has modes");
  ShapeSpec out = s;
  out.params[0] = static_cast<double>(mode);
  return out;
}

// ---- dataset ---------------------------------------------------------------------

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::size_t train_count = 0, val_count = 0, test_count = 0;
  ViewMode mode = ViewMode::bottom;
  std::map<Family, double> weights;
  std::size_t complete_points = 2048;
  std::size_t partial_points = 1024;
  std::size_t query_points = 2048;
};

struct DatasetItem {
  ShapeSpec spec;
  PointCloud complete;
  PointCloud partial;
  std::vector<Vec3> queries;
  std::vector<double> query_occ;
};

inline void validate_manifest(const DatasetManifest& m) {
  check(m.train_count > 0 && m.val_count > 0 && m.test_count > 0,
        "manifest: train/val/test counts must all be positive");
  double sum = 0;
  for (auto& [f, w] : m.weights) {
    check(w >= 0, "manifest: negative weight for " + std::string(family_name(f)));
    sum += w;
  }
  check(std::abs(sum - 1.0) <= 1e-9, "manifest: family weights must sum to 1, got " +
                                         fmt_g17(sum));
  check(m.partial_points >= 1 && m.complete_points >= m.partial_points,
        "manifest: need complete_points >= partial_points >= 1");
  check(m.query_points >= 1, "manifest: query_points must be >= 1");
}

inline DatasetManifest parse_manifest(const std::string& text) {
  DatasetManifest m;
  std::map<std::string, Family> family_keys = {
      {"w_sphere", Family::sphere},     {"w_box", Family::box},
      {"w_cylinder", Family::cylinder}, {"w_capsule", Family::capsule},
      {"w_union2", Family::union2},     {"w_stool2mode", Family::stool2mode}};
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::size_t h = line.find('#');
    if (h != std::string::npos) line = line.substr(0, h);
    bool blank = true;
    for (char c : line)
      if (!std::isspace(static_cast<unsigned char>(c))) blank = false;
    if (blank) continue;
    std::size_t eq = line.find('=');
    check(eq != std::string::npos,
          "manifest: line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
    auto trim = [](std::string v) {
      std::size_t b = v.find_first_not_of(" \t");
      std::size_t e = v.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : v.substr(b, e - b + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    check(!key.empty() && !val.empty(),
          "manifest: empty key or value at line " + std::to_string(lineno));
    auto as_u64 = [&] {
      try {
        return static_cast<std::uint64_t>(std::stoull(val));
      } catch (...) {
        fail("manifest: '" + key + "' wants an integer, got '" + val + "'");
      }
    };
    auto as_f64 = [&] {
      try {
        return std::stod(val);
      } catch (...) {
        fail("manifest: '" + key + "' wants a number, got '" + val + "'");
      }
    };
    if (key == "seed")
      m.seed = as_u64();
    else if (key == "train")
      m.train_count = as_u64();
    else if (key == "val")
      m.val_count = as_u64();
    else if (key == "test")
      m.test_count = as_u64();
    else if (key == "mode")
      m.mode = parse_view_mode(val);
    else if (key == "complete_points")
      m.complete_points = as_u64();
    else if (key == "partial_points")
      m.partial_points = as_u64();
    else if (key == "query_points")
      m.query_points = as_u64();
    else if (family_keys.count(key))
      m.weights[family_keys.at(key)] = as_f64();
    else
      fail("manifest: unknown key '" + key + "'");
  }
  validate_manifest(m);
  return m;
}

inline std::string serialize_manifest(const DatasetManifest& m) {
  std::ostringstream os;
  os << "seed=" << m.seed << "\n";
  os << "train=" << m.train_count << "\n";
  os << "val=" << m.val_count << "\n";
  os << "test=" << m.test_count << "\n";
  os << "mode=" << view_mode_name(m.mode) << "\n";
  os << "complete_points=" << m.complete_points << "\n";
  os << "partial_points=" << m.partial_points << "\n";
  os << "query_points=" << m.query_points << "\n";
  for (auto& [f, w] : m.weights) os << "w_" << family_name(f) << "=" << fmt_g17(w) << "\n";
  return os.str();
}

// ---- item generation ---------------------------------------------------------------

inline Family pick_family(const DatasetManifest& m, Rng& rng) {
  double u = rng.uniform();
  double acc = 0;
  Family last = Family::sphere;
  bool any = false;
  for (auto& [f, w] : m.weights) {
    if (w <= 0) continue;
    last = f;
    any = true;
    acc += w;
    if (u < acc) return f;
  }
  check(any, "pick_family: no positive weights");
  return last;
}

// One deterministic item. The complete cloud is an area-uniform surface draw;
// when the cut region of a 'complete_points' draw cannot cover the partial
// budget (octant cuts and stools), the partial is drawn from a denser cloud
// and the complete cloud is rebuilt as partial + uniform filler from the same
// dense draw, preserving the partial-is-subset invariant.
inline DatasetItem generate_item(const DatasetManifest& m, std::uint64_t split_tag,
                                 std::uint64_t index) {
  Rng rng(mix64(m.seed, split_tag, index));
  DatasetItem item;
  item.spec = random_spec(pick_family(m, rng), rng);

  PointCloud complete = sample_surface(item.spec, m.complete_points, rng);
  if (view_kept_indices(complete, m.mode).size() >= m.partial_points) {
    item.partial = partial_view(complete, m.mode, rng, m.partial_points);
    item.complete = std::move(complete);
  } else {
    std::size_t dense_count = std::max<std::size_t>(2 * m.complete_points, 4096);
    PointCloud dense;
    for (;; dense_count *= 2) {
      check(dense_count <= (1u << 22), "generate_item: cut region stays too sparse");
      dense = sample_surface(item.spec, dense_count, rng);
      if (view_kept_indices(dense, m.mode).size() >= m.partial_points) break;
    }
    std::vector<std::size_t> chosen;
    item.partial = partial_view(dense, m.mode, rng, m.partial_points, &chosen);
    std::vector<char> is_partial(dense.size(), 0);
    for (auto i : chosen) is_partial[i] = 1;
    std::vector<std::size_t> rest;
    rest.reserve(dense.size() - chosen.size());
    for (std::size_t i = 0; i < dense.size(); ++i)
      if (!is_partial[i]) rest.push_back(i);
    std::size_t filler = m.complete_points - m.partial_points;
    check(rest.size() >= filler, "generate_item: dense cloud too small for filler");
    auto pick = rng.sample_indices(rest.size(), filler);
    item.complete = item.partial;
    for (auto k : pick) {
      item.complete.points.push_back(dense.points[rest[k]]);
      item.complete.normals.push_back(dense.normals[rest[k]]);
    }
  }

  item.queries.reserve(m.query_points);
  item.query_occ.reserve(m.query_points);
  for (std::size_t q = 0; q < m.query_points; ++q) {
    Vec3 p{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
    item.queries.push_back(p);
    item.query_occ.push_back(static_cast<double>(occupancy_oracle(item.spec, p)));
  }
  return item;
}

// ---- item serialization --------------------------------------------------------------

constexpr char kItemMagic[4] = {'H', 'V', 'S', 'D'};

inline void write_item(std::ostream& os, const DatasetItem& item) {
  io::write_bytes(os, kItemMagic, 4);
  std::uint8_t tag = static_cast<std::uint8_t>(item.spec.family);
  io::write_bytes(os, &tag, 1);
  io::write_f64_array(os, item.spec.params);
  auto write_cloud = [&os](const PointCloud& pc) {
    check(pc.has_normals(), "write_item: cloud missing normals");
    std::vector<double> flat;
    flat.reserve(pc.size() * 6);
    for (std::size_t i = 0; i < pc.size(); ++i) {
      const Vec3& p = pc.points[i];
      const Vec3& n = pc.normals[i];
      flat.insert(flat.end(), {p.x, p.y, p.z, n.x, n.y, n.z});
    }
    io::write_f64_array(os, flat);
  };
  write_cloud(item.complete);
  write_cloud(item.partial);
  std::vector<double> q;
  q.reserve(item.queries.size() * 4);
  for (std::size_t i = 0; i < item.queries.size(); ++i) {
    const Vec3& p = item.queries[i];
    q.insert(q.end(), {p.x, p.y, p.z, item.query_occ[i]});
  }
  io::write_f64_array(os, q);
}

inline DatasetItem read_item(std::istream& is, const std::string& what) {
  char magic[4];
  io::read_bytes(is, magic, 4, what + " magic");
  check(std::memcmp(magic, kItemMagic, 4) == 0, "dataset item: bad magic in " + what);
  std::uint8_t tag;
  io::read_bytes(is, &tag, 1, what + " family tag");
  check(tag <= 5, "dataset item: unknown family tag in " + what);
  DatasetItem item;
  item.spec.family = static_cast<Family>(tag);
  item.spec.params = io::read_f64_array(is, what + " params", 64);
  auto read_cloud = [&is, &what](const char* which) {
    auto flat = io::read_f64_array(is, what + std::string(" ") + which);
    check(flat.size() % 6 == 0, "dataset item: " + std::string(which) + " array not 6-wide in " +
                                    what);
    PointCloud pc;
    std::size_t n = flat.size() / 6;
    pc.points.reserve(n);
    pc.normals.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      pc.points.push_back({flat[i * 6], flat[i * 6 + 1], flat[i * 6 + 2]});
      pc.normals.push_back({flat[i * 6 + 3], flat[i * 6 + 4], flat[i * 6 + 5]});
    }
    return pc;
  };
  item.complete = read_cloud("complete cloud");
  item.partial = read_cloud("partial cloud");
  auto q = io::read_f64_array(is, what + " queries");
  check(q.size() % 4 == 0, "dataset item: query array not 4-wide in " + what);
  std::size_t nq = q.size() / 4;
  item.queries.reserve(nq);
  item.query_occ.reserve(nq);
  for (std::size_t i = 0; i < nq; ++i) {
    item.queries.push_back({q[i * 4], q[i * 4 + 1], q[i * 4 + 2]});
    item.query_occ.push_back(q[i * 4 + 3]);
  }
  validate_spec(item.spec);
  return item;
}

// ---- dataset directory ------------------------------------------------------------------

inline const char* split_name(int split) { return split == 0 ? "train" : (split == 1 ? "val" : "test"); }

inline std::string item_filename(std::uint64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "item_%05llu.bin", static_cast<unsigned long long>(index));
  return buf;
}

// Writes manifest.txt plus train/ val/ test/ item files; byte-deterministic.
inline void make_dataset(const DatasetManifest& m, const std::filesystem::path& out_dir) {
  validate_manifest(m);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  io::write_text_file(out_dir / "manifest.txt", serialize_manifest(m));
  const std::size_t counts[3] = {m.train_count, m.val_count, m.test_count};
  for (int split = 0; split < 3; ++split) {
    fs::path dir = out_dir / split_name(split);
    fs::create_directories(dir);
    for (std::uint64_t i = 0; i < counts[split]; ++i) {
      DatasetItem item = generate_item(m, static_cast<std::uint64_t>(split), i);
      std::ofstream os(dir / item_filename(i), std::ios::binary | std::ios::trunc);
      if (!os) throw io::IoError("make_dataset: cannot create item file in " + dir.string());
      write_item(os, item);
      if (!os) throw io::IoError("make_dataset: write failed in " + dir.string());
    }
  }
}

inline DatasetManifest load_manifest(const std::filesystem::path& dataset_dir) {
  return parse_manifest(io::read_text_file(dataset_dir / "manifest.txt"));
}

inline std::vector<DatasetItem> load_split(const std::filesystem::path& dataset_dir,
                                           const std::string& split) {
  check(split == "train" || split == "val" || split == "test",
        "load_split: split must be train/val/test, got '" + split + "'");
  DatasetManifest m = load_manifest(dataset_dir);
  std::size_t count = split == "train" ? m.train_count
                                       : (split == "val" ? m.val_count : m.test_count);
  std::vector<DatasetItem> items;
  items.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    auto path = dataset_dir / split / item_filename(i);
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io::IoError("load_split: cannot open " + path.string());
    items.push_back(read_item(is, path.string()));
  }
  return items;
}

}  // namespace hvcp::data
