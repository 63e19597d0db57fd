#pragma once

// Marching-cubes extraction from occupancy grids, plus mesh utilities: vertex
// normals, watertightness checks, OBJ round trip, and area-weighted surface
// sampling. The 256-case table is generated at first use from the cube's
// combinatorics (crossing edges linked into loops face by face, saddle faces
// resolved by separating the inside corners); the resolution rule depends
// only on a face's own corners, so adjacent cells always agree and closed
// isosurfaces come out watertight.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "hvcp/io.hpp"
#include "hvcp/pointcloud.hpp"
#include "hvcp/rng.hpp"

namespace hvcp::mesh {

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::size_t, 3>> faces;  // ccw seen from outside
  std::vector<Vec3> normals;                      // per vertex; empty until computed
  bool degenerate_normals = false;  // some vertex had a zero-area star
};

inline void validate_mesh(const TriMesh& m) {
  for (const auto& f : m.faces) {
    check(f[0] < m.vertices.size() && f[1] < m.vertices.size() && f[2] < m.vertices.size(),
          "mesh: face index out of range");
    check(f[0] != f[1] && f[1] != f[2] && f[0] != f[2], "mesh: degenerate face");
  }
  if (!m.normals.empty()) {
    check(m.normals.size() == m.vertices.size(), "mesh: normal count mismatch");
    for (const auto& n : m.normals)
      check(std::abs(norm(n) - 1.0) <= 1e-6, "mesh: normals must be unit length");
  }
}

// ---- cube combinatorics -----------------------------------------------------

namespace mc {

// Corner b sits at offset kCorner[b]; edge e joins corners kEdge[e]; face f
// lists its corners in cyclic order.
constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                               {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
constexpr int kEdge[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                              {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};
constexpr int kFace[6][4] = {{0, 1, 2, 3}, {4, 5, 6, 7}, {0, 1, 5, 4},
                             {2, 3, 7, 6}, {1, 2, 6, 5}, {3, 0, 4, 7}};

struct Tables {
  std::array<std::uint16_t, 256> edge_mask{};     // bit e: edge e crosses the surface
  std::array<std::array<int, 16>, 256> tris{};    // edge-id triples, -1 terminated
};

inline Vec3 corner_pos(int b) {
  return {static_cast<double>(kCorner[b][0]), static_cast<double>(kCorner[b][1]),
          static_cast<double>(kCorner[b][2])};
}

// Gradient of the trilinear interpolant of the eight corner values at local
// coordinates (u,v,w) in [0,1]^3.
inline Vec3 trilinear_gradient(const double vals[8], const Vec3& p) {
  double c[2][2][2];
  for (int b = 0; b < 8; ++b) c[kCorner[b][0]][kCorner[b][1]][kCorner[b][2]] = vals[b];
  auto w = [](int bit, double t) { return bit ? t : 1.0 - t; };
  Vec3 g{0, 0, 0};
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      g.x += w(a, p.y) * w(b, p.z) * (c[1][a][b] - c[0][a][b]);
      g.y += w(a, p.x) * w(b, p.z) * (c[a][1][b] - c[a][0][b]);
      g.z += w(a, p.x) * w(b, p.y) * (c[a][b][1] - c[a][b][0]);
    }
  return g;
}

inline Tables build_tables() {
  int edge_of[8][8];
  for (auto& row : edge_of) std::fill(row, row + 8, -1);
  for (int e = 0; e < 12; ++e) {
    edge_of[kEdge[e][0]][kEdge[e][1]] = e;
    edge_of[kEdge[e][1]][kEdge[e][0]] = e;
  }

  Tables T;
  for (int cfg = 0; cfg < 256; ++cfg) {
    bool in[8];
    for (int b = 0; b < 8; ++b) in[b] = (cfg >> b) & 1;

    std::uint16_t mask = 0;
    for (int e = 0; e < 12; ++e)
      if (in[kEdge[e][0]] != in[kEdge[e][1]]) mask |= static_cast<std::uint16_t>(1u << e);
    T.edge_mask[cfg] = mask;
    T.tris[cfg].fill(-1);
    if (mask == 0) continue;

    // Surface segments on each face: two crossing sides pair up uniquely;
    // a saddle face (diagonal inside corners) contributes one segment around
    // each inside corner, keeping the inside corners separated.
    std::vector<std::array<int, 2>> segs;
    for (const auto& f : kFace) {
      int side_edge[4];
      bool crossing[4];
      int n_cross = 0;
      for (int s = 0; s < 4; ++s) {
        int a = f[s], b = f[(s + 1) % 4];
        side_edge[s] = edge_of[a][b];
        crossing[s] = in[a] != in[b];
        n_cross += crossing[s] ? 1 : 0;
      }
      if (n_cross == 2) {
        std::array<int, 2> seg{-1, -1};
        for (int s = 0; s < 4; ++s)
          if (crossing[s]) seg[seg[0] < 0 ? 0 : 1] = side_edge[s];
        segs.push_back(seg);
      } else if (n_cross == 4) {
        for (int s = 0; s < 4; ++s)
          if (in[f[s]])
            segs.push_back({side_edge[(s + 3) % 4], side_edge[s]});
      } else {
        check(n_cross == 0, "marching cubes tables: impossible face crossing count");
      }
    }

    // Each crossing edge is met by exactly two segments; walking them links
    // the segments into disjoint closed loops.
    std::array<std::array<int, 2>, 12> at;
    std::array<int, 12> deg{};
    for (int i = 0; i < static_cast<int>(segs.size()); ++i)
      for (int end = 0; end < 2; ++end) {
        int e = segs[static_cast<std::size_t>(i)][static_cast<std::size_t>(end)];
        check(deg[e] < 2, "marching cubes tables: edge met more than twice");
        at[e][deg[e]++] = i;
      }
    for (int e = 0; e < 12; ++e)
      check(((mask >> e) & 1) == 0 || deg[e] == 2,
            "marching cubes tables: crossing edge not closed into a loop");

    std::vector<bool> used(segs.size(), false);
    int out_n = 0;
    auto emit = [&](int a, int b, int c) {
      check(out_n + 3 <= 15, "marching cubes tables: triangle budget exceeded");
      T.tris[cfg][out_n++] = a;
      T.tris[cfg][out_n++] = b;
      T.tris[cfg][out_n++] = c;
    };

    double vals[8];
    for (int b = 0; b < 8; ++b) vals[b] = in[b] ? 1.0 : 0.0;

    for (std::size_t s0 = 0; s0 < segs.size(); ++s0) {
      if (used[s0]) continue;
      std::vector<int> loop{segs[s0][0], segs[s0][1]};
      used[s0] = true;
      while (true) {
        int e = loop.back();
        int nxt = used[static_cast<std::size_t>(at[e][0])] ? at[e][1] : at[e][0];
        check(!used[static_cast<std::size_t>(nxt)], "marching cubes tables: open loop");
        used[static_cast<std::size_t>(nxt)] = true;
        const auto& sg = segs[static_cast<std::size_t>(nxt)];
        int other = sg[0] == e ? sg[1] : sg[0];
        if (other == loop.front()) break;  // loop closed
        loop.push_back(other);
      }
      check(loop.size() >= 3, "marching cubes tables: malformed loop");

      std::vector<Vec3> pos;
      Vec3 ctr{0, 0, 0};
      for (int e : loop) {
        Vec3 p = (corner_pos(kEdge[e][0]) + corner_pos(kEdge[e][1])) * 0.5;
        pos.push_back(p);
        ctr += p;
      }
      ctr = ctr / static_cast<double>(loop.size());
      Vec3 nrm{0, 0, 0};
      for (std::size_t i = 0; i < pos.size(); ++i)
        nrm += cross(pos[i] - ctr, pos[(i + 1) % pos.size()] - ctr);
      double side = dot(nrm, trilinear_gradient(vals, ctr));
      check(std::abs(side) > 1e-9, "marching cubes tables: undecidable loop orientation");
      if (side > 0) std::reverse(loop.begin(), loop.end());
      for (std::size_t i = 1; i + 1 < loop.size(); ++i)
        emit(loop[0], loop[i], loop[i + 1]);
    }
  }
  return T;
}

inline const Tables& tables() {
  static const Tables t = build_tables();
  return t;
}

}  // namespace mc

// ---- extraction -------------------------------------------------------------

// Isosurface of a side^3 occupancy grid laid out x-major with samples at cell
// centers ((i+0.5)/side - 0.5, ...). Inside means value > iso; triangles wind
// counter-clockwise seen from outside (toward lower occupancy). Vertices are
// welded on their lattice edge, and crossings that land exactly on a sample
// snap to the lattice point so coincident vertices never duplicate.
inline TriMesh marching_cubes(const std::vector<double>& grid, std::size_t side,
                              double iso) {
  check(side >= 2, "marching_cubes: side must be >= 2");
  check(grid.size() == side * side * side, "marching_cubes: grid size mismatch");
  check(iso > 0.0 && iso < 1.0, "marching_cubes: iso must lie in (0,1)");
  const mc::Tables& T = mc::tables();

  auto flat = [&](std::size_t i, std::size_t j, std::size_t k) {
    return (i * side + j) * side + k;
  };
  double pitch = 1.0 / static_cast<double>(side);
  auto lattice = [&](std::size_t i, std::size_t j, std::size_t k) {
    return Vec3{(static_cast<double>(i) + 0.5) * pitch - 0.5,
                (static_cast<double>(j) + 0.5) * pitch - 0.5,
                (static_cast<double>(k) + 0.5) * pitch - 0.5};
  };

  TriMesh m;
  std::unordered_map<std::uint64_t, std::size_t> weld;

  for (std::size_t x = 0; x + 1 < side; ++x)
    for (std::size_t y = 0; y + 1 < side; ++y)
      for (std::size_t z = 0; z + 1 < side; ++z) {
        double vals[8];
        int cfg = 0;
        for (int b = 0; b < 8; ++b) {
          vals[b] = grid[flat(x + static_cast<std::size_t>(mc::kCorner[b][0]),
                              y + static_cast<std::size_t>(mc::kCorner[b][1]),
                              z + static_cast<std::size_t>(mc::kCorner[b][2]))];
          if (vals[b] > iso) cfg |= 1 << b;
        }
        if (cfg == 0 || cfg == 255) continue;

        std::size_t vid[12] = {};
        for (int e = 0; e < 12; ++e) {
          if (((T.edge_mask[static_cast<std::size_t>(cfg)] >> e) & 1) == 0) continue;
          int a = mc::kEdge[e][0], b = mc::kEdge[e][1];
          int axis = mc::kCorner[a][0] != mc::kCorner[b][0]   ? 0
                     : mc::kCorner[a][1] != mc::kCorner[b][1] ? 1
                                                              : 2;
          int lo = mc::kCorner[a][axis] < mc::kCorner[b][axis] ? a : b;
          int hi = lo == a ? b : a;
          std::size_t pi = x + static_cast<std::size_t>(mc::kCorner[lo][0]);
          std::size_t pj = y + static_cast<std::size_t>(mc::kCorner[lo][1]);
          std::size_t pk = z + static_cast<std::size_t>(mc::kCorner[lo][2]);
          double vlo = vals[lo], vhi = vals[hi];
          double t = (iso - vlo) / (vhi - vlo);

          std::uint64_t key;
          Vec3 p = lattice(pi, pj, pk);
          if (t <= 0.0) {
            key = static_cast<std::uint64_t>(flat(pi, pj, pk)) * 4 + 3;
          } else if (t >= 1.0) {
            std::size_t qi = pi + (axis == 0), qj = pj + (axis == 1),
                        qk = pk + (axis == 2);
            key = static_cast<std::uint64_t>(flat(qi, qj, qk)) * 4 + 3;
            p = lattice(qi, qj, qk);
          } else {
            key = static_cast<std::uint64_t>(flat(pi, pj, pk)) * 4 +
                  static_cast<std::uint64_t>(axis);
            p[axis] += t * pitch;
          }

          auto it = weld.find(key);
          if (it == weld.end()) {
            it = weld.emplace(key, m.vertices.size()).first;
            m.vertices.push_back(p);
          }
          vid[e] = it->second;
        }

        const auto& tr = T.tris[static_cast<std::size_t>(cfg)];
        for (int i = 0; i < 16 && tr[static_cast<std::size_t>(i)] >= 0; i += 3) {
          std::size_t v0 = vid[tr[static_cast<std::size_t>(i)]];
          std::size_t v1 = vid[tr[static_cast<std::size_t>(i + 1)]];
          std::size_t v2 = vid[tr[static_cast<std::size_t>(i + 2)]];
          if (v0 == v1 || v1 == v2 || v0 == v2) continue;  // snapped shut
          m.faces.push_back({v0, v1, v2});
        }
      }
  return m;
}

// ---- mesh utilities ---------------------------------------------------------

// Area-weighted average of incident face normals (raw cross products already
// carry the area weight). A vertex whose incident faces all have zero area
// gets +z and sets the degenerate flag.
inline TriMesh vertex_normals(const TriMesh& in) {
  TriMesh m = in;
  m.normals.assign(m.vertices.size(), Vec3{0, 0, 0});
  m.degenerate_normals = false;
  for (const auto& f : m.faces) {
    Vec3 n = cross(m.vertices[f[1]] - m.vertices[f[0]], m.vertices[f[2]] - m.vertices[f[0]]);
    for (std::size_t v : f) m.normals[v] += n;
  }
  for (auto& n : m.normals) {
    double len = norm(n);
    if (len < 1e-20) {
      n = Vec3{0, 0, 1};
      m.degenerate_normals = true;
    } else {
      n = n / len;
    }
  }
  return m;
}

inline std::map<std::pair<std::size_t, std::size_t>, std::size_t> edge_uses(
    const TriMesh& m) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> uses;
  for (const auto& f : m.faces)
    for (int s = 0; s < 3; ++s) {
      std::size_t a = f[static_cast<std::size_t>(s)];
      std::size_t b = f[static_cast<std::size_t>((s + 1) % 3)];
      ++uses[{std::min(a, b), std::max(a, b)}];
    }
  return uses;
}

inline std::size_t edge_count(const TriMesh& m) { return edge_uses(m).size(); }

// Every undirected face edge is shared by exactly two faces.
inline bool is_watertight(const TriMesh& m) {
  if (m.faces.empty()) return false;
  for (const auto& [e, n] : edge_uses(m))
    if (n != 2) return false;
  return true;
}

inline long long euler_characteristic(const TriMesh& m) {
  return static_cast<long long>(m.vertices.size()) -
         static_cast<long long>(edge_count(m)) + static_cast<long long>(m.faces.size());
}

// ---- OBJ round trip ---------------------------------------------------------

inline std::string obj_text(const TriMesh& m) {
  check(m.normals.size() == m.vertices.size(),
        "obj: mesh needs vertex normals before export");
  std::ostringstream os;
  for (const auto& v : m.vertices)
    os << "v " << fmt_g17(v.x) << ' ' << fmt_g17(v.y) << ' ' << fmt_g17(v.z) << '\n';
  for (const auto& n : m.normals)
    os << "vn " << fmt_g17(n.x) << ' ' << fmt_g17(n.y) << ' ' << fmt_g17(n.z) << '\n';
  for (const auto& f : m.faces) {
    os << 'f';
    for (std::size_t v : f) os << ' ' << v + 1 << "//" << v + 1;
    os << '\n';
  }
  return os.str();
}

inline void export_obj(const TriMesh& m, const std::filesystem::path& path) {
  io::write_text_file(path, obj_text(m));
}

inline TriMesh parse_obj(const std::string& text) {
  TriMesh m;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    auto want3 = [&](const char* what) {
      double a, b, c;
      check(static_cast<bool>(ls >> a >> b >> c), "obj: line " + std::to_string(lineno) +
                                                      ": expected three " + what);
      return Vec3{a, b, c};
    };
    if (tag == "v") {
      m.vertices.push_back(want3("vertex coordinates"));
    } else if (tag == "vn") {
      m.normals.push_back(want3("normal coordinates"));
    } else if (tag == "f") {
      std::array<std::size_t, 3> f{};
      for (int s = 0; s < 3; ++s) {
        std::string tok;
        check(static_cast<bool>(ls >> tok),
              "obj: line " + std::to_string(lineno) + ": face needs three vertices");
        std::size_t sep = tok.find("//");
        check(sep != std::string::npos,
              "obj: line " + std::to_string(lineno) + ": face token must be i//i");
        std::string vi = tok.substr(0, sep), ni = tok.substr(sep + 2);
        check(vi == ni, "obj: line " + std::to_string(lineno) +
                            ": vertex and normal index must agree");
        std::size_t idx = 0;
        try {
          idx = std::stoull(vi);
        } catch (...) {
          fail("obj: line " + std::to_string(lineno) + ": bad face index '" + vi + "'");
        }
        check(idx >= 1, "obj: line " + std::to_string(lineno) + ": indices are 1-based");
        f[static_cast<std::size_t>(s)] = idx - 1;
      }
      std::string extra;
      check(!(ls >> extra), "obj: line " + std::to_string(lineno) + ": only triangles");
      m.faces.push_back(f);
    } else {
      fail("obj: line " + std::to_string(lineno) + ": unknown directive '" + tag + "'");
    }
  }
  check(m.normals.empty() || m.normals.size() == m.vertices.size(),
        "obj: normal count must match vertex count");
  validate_mesh(m);
  return m;
}

inline TriMesh import_obj(const std::filesystem::path& path) {
  return parse_obj(io::read_text_file(path));
}

// ---- surface sampling -------------------------------------------------------

// Area-weighted uniform surface samples with barycentric normal interpolation
// (falling back to the face normal where the interpolated normal vanishes).
inline PointCloud sample_mesh_surface(const TriMesh& m, std::size_t count, Rng& rng) {
  check(!m.faces.empty(), "sample_mesh_surface: mesh has no faces");
  check(m.normals.size() == m.vertices.size(),
        "sample_mesh_surface: mesh needs vertex normals");
  std::vector<double> cum(m.faces.size());
  double total = 0;
  for (std::size_t i = 0; i < m.faces.size(); ++i) {
    const auto& f = m.faces[i];
    total += 0.5 * norm(cross(m.vertices[f[1]] - m.vertices[f[0]],
                              m.vertices[f[2]] - m.vertices[f[0]]));
    cum[i] = total;
  }
  check(total > 0, "sample_mesh_surface: mesh has zero area");

  PointCloud pc;
  pc.points.reserve(count);
  pc.normals.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    double u = rng.uniform() * total;
    std::size_t fi = static_cast<std::size_t>(
        std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
    if (fi >= m.faces.size()) fi = m.faces.size() - 1;
    const auto& f = m.faces[fi];
    double sq = std::sqrt(rng.uniform());
    double r2 = rng.uniform();
    double w0 = 1.0 - sq, w1 = sq * (1.0 - r2), w2 = sq * r2;
    Vec3 p = m.vertices[f[0]] * w0 + m.vertices[f[1]] * w1 + m.vertices[f[2]] * w2;
    Vec3 n = m.normals[f[0]] * w0 + m.normals[f[1]] * w1 + m.normals[f[2]] * w2;
    double len = norm(n);
    if (len < 1e-12) {
      n = cross(m.vertices[f[1]] - m.vertices[f[0]], m.vertices[f[2]] - m.vertices[f[0]]);
      len = norm(n);
      check(len > 0, "sample_mesh_surface: degenerate face normal");
    }
    pc.points.push_back(p);
    pc.normals.push_back(n / len);
  }
  return pc;
}

}  // namespace hvcp::mesh
