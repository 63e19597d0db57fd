#pragma once

// Point cloud container plus XYZ text and binary little-endian PLY I/O.
// Clouds live in the unit cube [-0.5,0.5]^3; normals, when present, are unit
// length. Writers are canonical so identical clouds produce identical bytes.

#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hvcp/core.hpp"
#include "hvcp/io.hpp"
#include "hvcp/rng.hpp"

namespace hvcp {

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;  // empty, or one per point

  std::size_t size() const { return points.size(); }
  bool has_normals() const { return !normals.empty(); }
};

inline void validate_cloud(const PointCloud& pc, bool require_unit_cube = true) {
  check(pc.size() >= 1, "point cloud: empty");
  check(pc.normals.empty() || pc.normals.size() == pc.points.size(),
        "point cloud: normal count mismatch");
  if (require_unit_cube)
    for (const auto& p : pc.points)
      check(p.x >= -0.5 && p.x <= 0.5 && p.y >= -0.5 && p.y <= 0.5 && p.z >= -0.5 && p.z <= 0.5,
            "point cloud: point outside the unit cube");
  for (const auto& n : pc.normals)
    check(std::abs(norm(n) - 1.0) <= 1e-6, "point cloud: normal is not unit length");
}

inline PointCloud subsample(const PointCloud& pc, std::size_t k, Rng& rng) {
  check(k <= pc.size(), "subsample: k exceeds cloud size");
  auto idx = rng.sample_indices(pc.size(), k);
  PointCloud out;
  out.points.reserve(k);
  if (pc.has_normals()) out.normals.reserve(k);
  for (auto i : idx) {
    out.points.push_back(pc.points[i]);
    if (pc.has_normals()) out.normals.push_back(pc.normals[i]);
  }
  return out;
}

// ---- XYZ text: "x y z" or "x y z nx ny nz" per line ------------------------

inline void write_xyz(const std::filesystem::path& path, const PointCloud& pc) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw io::IoError("xyz: cannot create " + path.string());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const Vec3& p = pc.points[i];
    os << fmt_g17(p.x) << ' ' << fmt_g17(p.y) << ' ' << fmt_g17(p.z);
    if (pc.has_normals()) {
      const Vec3& n = pc.normals[i];
      os << ' ' << fmt_g17(n.x) << ' ' << fmt_g17(n.y) << ' ' << fmt_g17(n.z);
    }
    os << '\n';
  }
  if (!os) throw io::IoError("xyz: write failed for " + path.string());
}

inline PointCloud read_xyz(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw io::IoError("xyz: cannot open " + path.string());
  PointCloud pc;
  std::string line;
  std::size_t lineno = 0;
  int width = 0;  // 3 or 6, fixed by the first data line
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::vector<double> vals;
    double v;
    while (ls >> v) vals.push_back(v);
    if (vals.empty()) continue;  // blank line
    if (width == 0) {
      check(vals.size() == 3 || vals.size() == 6,
            "xyz: line " + std::to_string(lineno) + " has " + std::to_string(vals.size()) +
                " columns (want 3 or 6) in " + path.string());
      width = static_cast<int>(vals.size());
    }
    check(vals.size() == static_cast<std::size_t>(width),
          "xyz: inconsistent column count at line " + std::to_string(lineno) + " in " +
              path.string());
    pc.points.push_back({vals[0], vals[1], vals[2]});
    if (width == 6) pc.normals.push_back({vals[3], vals[4], vals[5]});
  }
  check(!pc.points.empty(), "xyz: no points in " + path.string());
  return pc;
}

// ---- binary little-endian PLY ----------------------------------------------

inline void write_ply(const std::filesystem::path& path, const PointCloud& pc) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw io::IoError("ply: cannot create " + path.string());
  os << "ply\nformat binary_little_endian 1.0\n";
  os << "element vertex " << pc.size() << "\n";
  os << "property double x\nproperty double y\nproperty double z\n";
  if (pc.has_normals()) os << "property double nx\nproperty double ny\nproperty double nz\n";
  os << "end_header\n";
  for (std::size_t i = 0; i < pc.size(); ++i) {
    io::write_f64(os, pc.points[i].x);
    io::write_f64(os, pc.points[i].y);
    io::write_f64(os, pc.points[i].z);
    if (pc.has_normals()) {
      io::write_f64(os, pc.normals[i].x);
      io::write_f64(os, pc.normals[i].y);
      io::write_f64(os, pc.normals[i].z);
    }
  }
  if (!os) throw io::IoError("ply: write failed for " + path.string());
}

inline PointCloud read_ply(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io::IoError("ply: cannot open " + path.string());
  std::string line;
  check(std::getline(is, line) && line == "ply", "ply: bad magic in " + path.string());
  bool le = false;
  std::size_t count = 0;
  std::vector<std::pair<std::string, bool>> props;  // name, is_double
  bool in_vertex = false;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "comment") continue;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      le = (fmt == "binary_little_endian");
      check(le, "ply: only binary_little_endian is supported (" + path.string() + ")");
    } else if (tok == "element") {
      std::string name;
      ls >> name >> count;
      check(name == "vertex", "ply: unsupported element '" + name + "' in " + path.string());
      in_vertex = true;
    } else if (tok == "property") {
      check(in_vertex, "ply: property outside vertex element in " + path.string());
      std::string type, name;
      ls >> type >> name;
      check(type == "double" || type == "float",
            "ply: unsupported property type '" + type + "' in " + path.string());
      props.emplace_back(name, type == "double");
    } else if (tok == "end_header") {
      break;
    } else {
      throw io::IoError("ply: unsupported header line '" + line + "' in " + path.string());
    }
  }
  std::vector<std::string> names;
  for (auto& [n, d] : props) names.push_back(n);
  bool with_normals = false;
  if (names == std::vector<std::string>{"x", "y", "z"}) {
    with_normals = false;
  } else if (names == std::vector<std::string>{"x", "y", "z", "nx", "ny", "nz"}) {
    with_normals = true;
  } else {
    throw io::IoError("ply: unsupported property layout in " + path.string());
  }
  PointCloud pc;
  pc.points.resize(count);
  if (with_normals) pc.normals.resize(count);
  auto read_one = [&](bool is_double) {
    if (is_double) return io::read_f64(is, "ply vertex data");
    float f;
    io::read_bytes(is, &f, 4, "ply vertex data");
    return static_cast<double>(f);
  };
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t pidx = 0; pidx < props.size(); ++pidx) {
      double v = read_one(props[pidx].second);
      if (pidx < 3)
        pc.points[i][static_cast<int>(pidx)] = v;
      else
        pc.normals[i][static_cast<int>(pidx - 3)] = v;
    }
  }
  check(!pc.points.empty(), "ply: no points in " + path.string());
  return pc;
}

}  // namespace hvcp
