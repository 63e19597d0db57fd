#pragma once

// Hierarchical conditional VAE over three axis-aligned latent sequences per
// level. A root layer maps global codes to level-1 latents; each further
// level doubles the per-axis resolution, conditioning every cell on its
// parent window {floor(j/2)-1, floor(j/2), floor(j/2)+1} (clamped) plus
// pooled volume features, and adds a sampled residual onto the midpoint
// parent. Last-level latents decode into CP factor rows. Prior parameters
// are always computed so the KL against the posterior chain is available.

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "hvcp/autodiff.hpp"
#include "hvcp/core.hpp"
#include "hvcp/cpfield.hpp"
#include "hvcp/encoder.hpp"
#include "hvcp/nn.hpp"
#include "hvcp/rng.hpp"

namespace hvcp::vae {

enum class Mode { prior, posterior, posterior_mean };
enum class Variant { hierarchical, local, global_code, global_factors };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::hierarchical: return "hierarchical";
    case Variant::local: return "local";
    case Variant::global_code: return "global";
    case Variant::global_factors: return "global-factors";
  }
  fail("variant_name: bad variant");
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::hierarchical, Variant::local, Variant::global_code,
                    Variant::global_factors})
    if (s == variant_name(v)) return v;
  fail("unknown model variant '" + s + "'");
}

struct HvaeConfig {
  std::size_t levels = 4;
  std::size_t n1 = 4;             // level-1 cells per axis; doubles each level
  std::size_t d_z = 16;           // latent width per cell
  std::size_t trunk_hidden = 64;  // stochastic-layer trunk width
  std::size_t head_hidden = 64;   // factor-head hidden width
  std::size_t rank = 8;           // R of the factor decomposition
  std::size_t channels = 32;      // d, feature/conditioner channels
  std::size_t global_len = 128;   // n, global code length
  bool share_axis_weights = false;

  std::size_t level_res(std::size_t level) const { return n1 << (level - 1); }
  std::size_t top_res() const { return level_res(levels); }
  std::size_t total_cells() const {
    std::size_t s = 0;
    for (std::size_t i = 1; i <= levels; ++i) s += 3 * level_res(i);
    return s;
  }
};

inline void validate_config(const HvaeConfig& c) {
  check(c.levels >= 1, "hvae config: levels must be >= 1");
  check(c.n1 >= 1, "hvae config: n1 must be >= 1");
  check(c.d_z >= 1 && c.rank >= 1 && c.channels >= 1 && c.global_len >= 1,
        "hvae config: widths must be >= 1");
  check(c.trunk_hidden >= 1 && c.head_hidden >= 1, "hvae config: hidden widths must be >= 1");
}

struct GaussianParams {
  ad::Tensor mu;
  ad::Tensor log_var;  // clamped to [-10, 10] wherever a network emits it
};

struct AxisLatents {
  ad::Tensor z;  // (n, d_z)
  GaussianParams prior;
  GaussianParams posterior;
  bool has_posterior = false;
};

struct LevelLatents {
  std::size_t n = 0;
  std::array<AxisLatents, 3> axes;
};

struct LatentHierarchy {
  std::vector<LevelLatents> levels;
};

using AxisConds = std::array<ad::Tensor, 3>;  // per axis (n, channels)

inline const char* axis_tag(std::size_t a) {
  static const char* tags[3] = {"x", "y", "z"};
  check(a < 3, "axis_tag: axis out of range");
  return tags[a];
}

// KL( N(mu_q, e^{lv_q}) || N(mu_p, e^{lv_p}) ) summed over all entries.
inline ad::Tensor kl_diag_gauss(ad::Graph& g, const GaussianParams& q, const GaussianParams& p) {
  check(q.mu.shape() == p.mu.shape() && q.log_var.shape() == p.log_var.shape() &&
            q.mu.shape() == q.log_var.shape(),
        "kl_diag_gauss: shape mismatch");
  ad::Tensor dmu = g.sub(q.mu, p.mu);
  ad::Tensor quad = g.add(g.exp_fn(q.log_var), g.mul(dmu, dmu));
  ad::Tensor term = g.add(g.scale(g.sub(p.log_var, q.log_var), 0.5),
                          g.add_scalar(g.scale(g.mul(quad, g.exp_fn(g.neg(p.log_var))), 0.5),
                                       -0.5));
  return g.sum_all(term);
}

// Reparameterized draw z = mu + exp(lv/2) * eps; mean_only skips the noise
// (and consumes no randomness).
inline ad::Tensor sample_gauss(ad::Graph& g, const GaussianParams& p, Rng& rng, bool mean_only) {
  if (mean_only) return p.mu;
  ad::Tensor eps(p.mu.shape(), rng.normals(p.mu.size()));
  return g.add(p.mu, g.mul(g.exp_fn(g.scale(p.log_var, 0.5)), eps));
}

// ---- volume conditioners ---------------------------------------------------

// Mask-weighted mean of every slab perpendicular to the axis; slabs with no
// observed voxels yield zeros. Result is (side, channels).
inline ad::Tensor axis_slab_mean(ad::Graph& g, const enc::FeatureVolume& f, std::size_t axis) {
  check(axis < 3, "axis_slab_mean: axis out of range");
  std::size_t side = f.res[axis];
  std::size_t voxels = f.res[0] * f.res[1] * f.res[2];
  check(f.mask.size() == voxels, "axis_slab_mean: mask size mismatch");

  ad::Tensor mask(Shape{f.res[0], f.res[1], f.res[2], 1}, std::vector<double>(f.mask));
  ad::Tensor masked = g.mul(f.data, mask);

  std::vector<double> counts(side, 0.0);
  for (std::size_t i = 0; i < f.res[0]; ++i)
    for (std::size_t j = 0; j < f.res[1]; ++j)
      for (std::size_t k = 0; k < f.res[2]; ++k) {
        std::size_t idx[3] = {i, j, k};
        counts[idx[axis]] += f.mask[(i * f.res[1] + j) * f.res[2] + k];
      }
  std::vector<double> inv(side, 0.0);
  for (std::size_t s = 0; s < side; ++s)
    if (counts[s] > 0) inv[s] = 1.0 / counts[s];

  std::vector<std::size_t> reduce_axes =
      axis == 0 ? std::vector<std::size_t>{1, 2}
                : (axis == 1 ? std::vector<std::size_t>{0, 2} : std::vector<std::size_t>{0, 1});
  ad::Tensor sums = g.reduce_sum(masked, reduce_axes);  // (side, channels)
  return g.mul(sums, ad::Tensor(Shape{side, 1}, std::move(inv)));
}

// Plain average of groups of side/n consecutive cells; (side,d) -> (n,d).
inline ad::Tensor pool_cells(ad::Graph& g, const ad::Tensor& slab, std::size_t n) {
  check(slab.shape().size() == 2, "pool_cells: expects (side, d)");
  std::size_t side = slab.shape()[0], d = slab.shape()[1];
  check(n >= 1 && side % n == 0,
        "pool_cells: target resolution " + std::to_string(n) + " does not divide side " +
            std::to_string(side));
  std::size_t group = side / n;
  if (group == 1) return slab;
  return g.reduce_mean(g.reshape(slab, Shape{n, group, d}), {1});
}

// Per-cell conditional features for one axis at resolution n.
inline ad::Tensor axis_condition(ad::Graph& g, const enc::FeatureVolume& f, std::size_t n,
                                 std::size_t axis) {
  return pool_cells(g, axis_slab_mean(g, f, axis), n);
}

inline AxisConds all_axis_conditions(ad::Graph& g, const enc::FeatureVolume& f, std::size_t n) {
  return {axis_condition(g, f, n, 0), axis_condition(g, f, n, 1), axis_condition(g, f, n, 2)};
}

// ---- parameter creation ----------------------------------------------------

inline std::string level_axis_prefix(const HvaeConfig& cfg, const std::string& stem,
                                     std::size_t axis) {
  return stem + "." + (cfg.share_axis_weights ? "s" : axis_tag(axis));
}

inline void init_hvae(nn::ParamStore& store, const HvaeConfig& cfg, Variant var, Rng& rng) {
  validate_config(cfg);
  std::size_t dz = cfg.d_z, d = cfg.channels, n1 = cfg.level_res(1);
  std::size_t root_out = 2 * 3 * n1 * dz;

  if (var != Variant::local) {
    nn::init_mlp(store,
                 {{cfg.global_len, cfg.trunk_hidden, cfg.trunk_hidden, root_out},
                  nn::Act::relu, nn::Act::identity},
                 "vae.root.prior", rng);
    nn::init_mlp(store,
                 {{2 * cfg.global_len, cfg.trunk_hidden, cfg.trunk_hidden, root_out},
                  nn::Act::relu, nn::Act::identity},
                 "vae.root.post", rng);
  }

  auto init_axes = [&](const std::string& stem, std::size_t in_prior, std::size_t in_post) {
    std::size_t naxes = cfg.share_axis_weights ? 1 : 3;
    for (std::size_t a = 0; a < naxes; ++a) {
      std::string p = level_axis_prefix(cfg, stem, a);
      nn::init_mlp(store,
                   {{in_prior, cfg.trunk_hidden, cfg.trunk_hidden, 2 * dz}, nn::Act::relu,
                    nn::Act::identity},
                   p + ".prior", rng);
      nn::init_mlp(store,
                   {{in_post, cfg.trunk_hidden, cfg.trunk_hidden, 2 * dz}, nn::Act::relu,
                    nn::Act::identity},
                   p + ".post", rng);
    }
  };

  if (var == Variant::hierarchical)
    for (std::size_t lvl = 2; lvl <= cfg.levels; ++lvl)
      init_axes("vae.lvl" + std::to_string(lvl), 3 * dz + d, 3 * dz + 2 * d);
  if (var == Variant::local) init_axes("vae.loc", d, 2 * d);

  if (var == Variant::hierarchical || var == Variant::local) {
    std::size_t naxes = cfg.share_axis_weights ? 1 : 3;
    for (std::size_t a = 0; a < naxes; ++a)
      nn::init_mlp(store,
                   {{dz, cfg.head_hidden, cfg.rank * d}, nn::Act::relu, nn::Act::identity},
                   level_axis_prefix(cfg, "vae.head", a), rng);
  }
  if (var == Variant::global_factors)
    nn::init_mlp(store,
                 {{3 * n1 * dz, cfg.head_hidden, 3 * cfg.top_res() * cfg.rank * d},
                  nn::Act::relu, nn::Act::identity},
                 "vae.headg", rng);
}

// ---- stochastic layers -----------------------------------------------------

namespace detail {

inline GaussianParams split_params(ad::Graph& g, const ad::Tensor& out, std::size_t dz) {
  GaussianParams p;
  p.mu = g.slice(out, 1, 0, dz);
  p.log_var = g.clamp(g.slice(out, 1, dz, 2 * dz), -10.0, 10.0);
  return p;
}

}  // namespace detail

// Level-1 latents from the global code(s). Posterior modes require c_y.
inline LevelLatents root_layer(nn::Ctx& ctx, const HvaeConfig& cfg, const ad::Tensor& c_x,
                               const ad::Tensor* c_y, Rng& rng, Mode mode) {
  ad::Graph& g = ctx.g;
  check(c_x.size() == cfg.global_len, "root_layer: c_x length mismatch");
  bool use_post = mode != Mode::prior;
  check(!use_post || c_y != nullptr, "root_layer: posterior mode requires c_y");
  std::size_t n1 = cfg.level_res(1), dz = cfg.d_z;
  std::size_t m = 3 * n1 * dz;

  auto run = [&](const std::string& prefix, const ad::Tensor& in, std::size_t width) {
    nn::MlpSpec spec{{width, cfg.trunk_hidden, cfg.trunk_hidden, 2 * m}, nn::Act::relu,
                     nn::Act::identity};
    ad::Tensor out = nn::mlp_forward(ctx, spec, prefix, in);
    GaussianParams p;
    p.mu = g.reshape(g.slice(out, 1, 0, m), Shape{3, n1, dz});
    p.log_var = g.clamp(g.reshape(g.slice(out, 1, m, 2 * m), Shape{3, n1, dz}), -10.0, 10.0);
    return p;
  };

  ad::Tensor cx_row = g.reshape(c_x, Shape{1, cfg.global_len});
  GaussianParams prior = run("vae.root.prior", cx_row, cfg.global_len);
  GaussianParams posterior;
  if (use_post) {
    check(c_y->size() == cfg.global_len, "root_layer: c_y length mismatch");
    ad::Tensor cy_row = g.reshape(*c_y, Shape{1, cfg.global_len});
    posterior = run("vae.root.post", g.concat({cx_row, cy_row}, 1), 2 * cfg.global_len);
  }

  ad::Tensor z_all =
      sample_gauss(g, use_post ? posterior : prior, rng, mode == Mode::posterior_mean);

  LevelLatents out;
  out.n = n1;
  auto axis_block = [&](const ad::Tensor& t, std::size_t a) {
    return g.reshape(g.slice(t, 0, a, a + 1), Shape{n1, dz});
  };
  for (std::size_t a = 0; a < 3; ++a) {
    out.axes[a].z = axis_block(z_all, a);
    out.axes[a].prior = {axis_block(prior.mu, a), axis_block(prior.log_var, a)};
    if (use_post) {
      out.axes[a].posterior = {axis_block(posterior.mu, a), axis_block(posterior.log_var, a)};
      out.axes[a].has_posterior = true;
    }
  }
  return out;
}

// One resolution-doubling step: each child cell sees its clamped parent
// window plus pooled conditioners, and adds a sampled residual onto the
// midpoint parent latent.
inline LevelLatents stochastic_layer(nn::Ctx& ctx, const HvaeConfig& cfg, std::size_t level,
                                     const LevelLatents& prev, const AxisConds& cond_x,
                                     const AxisConds* cond_y, Rng& rng, Mode mode) {
  ad::Graph& g = ctx.g;
  check(level >= 2 && level <= cfg.levels, "stochastic_layer: level out of range");
  std::size_t n_prev = cfg.level_res(level - 1), n = cfg.level_res(level);
  check(prev.n == n_prev, "stochastic_layer: parent resolution mismatch");
  bool use_post = mode != Mode::prior;
  check(!use_post || cond_y != nullptr, "stochastic_layer: posterior mode requires cond_y");
  std::size_t dz = cfg.d_z, d = cfg.channels;

  std::vector<std::size_t> u_lo(n), u_mid(n), u_hi(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t p = j / 2;
    u_lo[j] = p == 0 ? 0 : p - 1;
    u_mid[j] = p;
    u_hi[j] = p + 1 >= n_prev ? n_prev - 1 : p + 1;
  }

  LevelLatents out;
  out.n = n;
  std::string stem = "vae.lvl" + std::to_string(level);
  for (std::size_t a = 0; a < 3; ++a) {
    check(cond_x[a].shape() == (Shape{n, d}), "stochastic_layer: cond_x extent mismatch");
    const ad::Tensor& zp = prev.axes[a].z;
    check(zp.shape() == (Shape{n_prev, dz}), "stochastic_layer: parent latent shape mismatch");

    ad::Tensor win = g.concat({g.gather_rows(zp, u_lo), g.gather_rows(zp, u_mid),
                               g.gather_rows(zp, u_hi)},
                              1);  // (n, 3*dz)
    std::string prefix = level_axis_prefix(cfg, stem, a);

    nn::MlpSpec prior_spec{{3 * dz + d, cfg.trunk_hidden, cfg.trunk_hidden, 2 * dz},
                           nn::Act::relu, nn::Act::identity};
    ad::Tensor prior_out =
        nn::mlp_forward(ctx, prior_spec, prefix + ".prior", g.concat({win, cond_x[a]}, 1));
    out.axes[a].prior = detail::split_params(g, prior_out, dz);

    if (use_post) {
      check((*cond_y)[a].shape() == (Shape{n, d}),
            "stochastic_layer: cond_y extent mismatch");
      nn::MlpSpec post_spec{{3 * dz + 2 * d, cfg.trunk_hidden, cfg.trunk_hidden, 2 * dz},
                            nn::Act::relu, nn::Act::identity};
      ad::Tensor post_out = nn::mlp_forward(
          ctx, post_spec, prefix + ".post", g.concat({win, cond_x[a], (*cond_y)[a]}, 1));
      out.axes[a].posterior = detail::split_params(g, post_out, dz);
      out.axes[a].has_posterior = true;
    }

    const GaussianParams& src = use_post ? out.axes[a].posterior : out.axes[a].prior;
    ad::Tensor residual = sample_gauss(g, src, rng, mode == Mode::posterior_mean);
    out.axes[a].z = g.add(g.gather_rows(zp, u_mid), residual);
  }
  return out;
}

// Single stochastic layer at the top resolution with no parent chain and no
// global code; cells are conditioned on pooled volume features only.
inline LevelLatents local_layer(nn::Ctx& ctx, const HvaeConfig& cfg, const AxisConds& cond_x,
                                const AxisConds* cond_y, Rng& rng, Mode mode) {
  ad::Graph& g = ctx.g;
  bool use_post = mode != Mode::prior;
  check(!use_post || cond_y != nullptr, "local_layer: posterior mode requires cond_y");
  std::size_t n = cfg.top_res(), dz = cfg.d_z, d = cfg.channels;

  LevelLatents out;
  out.n = n;
  for (std::size_t a = 0; a < 3; ++a) {
    check(cond_x[a].shape() == (Shape{n, d}), "local_layer: cond_x extent mismatch");
    std::string prefix = level_axis_prefix(cfg, "vae.loc", a);
    nn::MlpSpec prior_spec{{d, cfg.trunk_hidden, cfg.trunk_hidden, 2 * dz}, nn::Act::relu,
                           nn::Act::identity};
    out.axes[a].prior =
        detail::split_params(g, nn::mlp_forward(ctx, prior_spec, prefix + ".prior", cond_x[a]),
                             dz);
    if (use_post) {
      check((*cond_y)[a].shape() == (Shape{n, d}), "local_layer: cond_y extent mismatch");
      nn::MlpSpec post_spec{{2 * d, cfg.trunk_hidden, cfg.trunk_hidden, 2 * dz}, nn::Act::relu,
                            nn::Act::identity};
      out.axes[a].posterior = detail::split_params(
          g, nn::mlp_forward(ctx, post_spec, prefix + ".post",
                             g.concat({cond_x[a], (*cond_y)[a]}, 1)),
          dz);
      out.axes[a].has_posterior = true;
    }
    const GaussianParams& src = use_post ? out.axes[a].posterior : out.axes[a].prior;
    out.axes[a].z = sample_gauss(g, src, rng, mode == Mode::posterior_mean);
  }
  return out;
}

// Last-level latents -> per-axis factor rows.
inline cp::FactorSet decode_factors(nn::Ctx& ctx, const HvaeConfig& cfg,
                                    const LevelLatents& top) {
  ad::Graph& g = ctx.g;
  check(top.n == cfg.top_res(), "decode_factors: latent extent must equal the volume side");
  std::size_t rd = cfg.rank * cfg.channels;
  cp::FactorSet f;
  f.rank = cfg.rank;
  f.channels = cfg.channels;
  nn::MlpSpec spec{{cfg.d_z, cfg.head_hidden, rd}, nn::Act::relu, nn::Act::identity};
  ad::Tensor* slots[3] = {&f.vx, &f.vy, &f.vz};
  for (std::size_t a = 0; a < 3; ++a) {
    check(top.axes[a].z.shape() == (Shape{top.n, cfg.d_z}),
          "decode_factors: latent shape mismatch");
    ad::Tensor rows =
        nn::mlp_forward(ctx, spec, level_axis_prefix(cfg, "vae.head", a), top.axes[a].z);
    *slots[a] = g.reshape(rows, Shape{top.n, cfg.rank, cfg.channels});
  }
  return f;
}

// Root latents flattened into one vector -> all three factor arrays at once.
inline cp::FactorSet decode_factors_global(nn::Ctx& ctx, const HvaeConfig& cfg,
                                           const LevelLatents& root) {
  ad::Graph& g = ctx.g;
  std::size_t n1 = cfg.level_res(1), dz = cfg.d_z, side = cfg.top_res();
  std::size_t rd = cfg.rank * cfg.channels;
  ad::Tensor flat = g.reshape(
      g.concat({root.axes[0].z, root.axes[1].z, root.axes[2].z}, 0), Shape{1, 3 * n1 * dz});
  nn::MlpSpec spec{{3 * n1 * dz, cfg.head_hidden, 3 * side * rd}, nn::Act::relu,
                   nn::Act::identity};
  ad::Tensor all = nn::mlp_forward(ctx, spec, "vae.headg", flat);
  cp::FactorSet f;
  f.rank = cfg.rank;
  f.channels = cfg.channels;
  ad::Tensor* slots[3] = {&f.vx, &f.vy, &f.vz};
  for (std::size_t a = 0; a < 3; ++a)
    *slots[a] = g.reshape(g.slice(all, 1, a * side * rd, (a + 1) * side * rd),
                          Shape{side, cfg.rank, cfg.channels});
  return f;
}

// Sum of per-level, per-axis KL(posterior || prior); zero if the hierarchy
// carries no posterior (prior-mode runs).
inline ad::Tensor hierarchy_kl(ad::Graph& g, const LatentHierarchy& h) {
  ad::Tensor total = ad::Tensor::scalar(0.0);
  for (const auto& lvl : h.levels)
    for (const auto& ax : lvl.axes)
      if (ax.has_posterior) total = g.add(total, kl_diag_gauss(g, ax.posterior, ax.prior));
  return total;
}

// ---- full chain --------------------------------------------------------

struct CodePair {
  ad::Tensor code;         // global code, shape (global_len)
  enc::FeatureVolume vol;  // observed feature volume with mask
};

struct CompleteResult {
  cp::MergedVolume merged;
  ad::Tensor kl;
  LatentHierarchy hierarchy;
  cp::FactorSet factors;
};

// Runs the chain for the given variant and merges the predicted volume with
// the observed one. Posterior modes require y.
inline CompleteResult complete(nn::Ctx& ctx, const HvaeConfig& cfg, Variant var,
                               const CodePair& x, const CodePair* y, Rng& rng, Mode mode) {
  ad::Graph& g = ctx.g;
  validate_config(cfg);
  check(var != Variant::global_code,
        "complete: the global variant decodes straight from the latent code and has no "
        "volume pipeline");
  std::size_t side = cfg.top_res();
  check(x.vol.res[0] == side && x.vol.res[1] == side && x.vol.res[2] == side,
        "complete: volume side must equal the top-level resolution");
  check(x.vol.channels == cfg.channels, "complete: volume channel mismatch");
  bool use_post = mode != Mode::prior;
  check(!use_post || y != nullptr, "complete: posterior mode requires y");

  CompleteResult res;
  if (var == Variant::hierarchical) {
    LevelLatents cur =
        root_layer(ctx, cfg, x.code, use_post ? &y->code : nullptr, rng, mode);
    res.hierarchy.levels.push_back(cur);
    for (std::size_t lvl = 2; lvl <= cfg.levels; ++lvl) {
      std::size_t n = cfg.level_res(lvl);
      AxisConds cx = all_axis_conditions(g, x.vol, n);
      AxisConds cy;
      if (use_post) cy = all_axis_conditions(g, y->vol, n);
      cur = stochastic_layer(ctx, cfg, lvl, cur, cx, use_post ? &cy : nullptr, rng, mode);
      res.hierarchy.levels.push_back(cur);
    }
    res.factors = decode_factors(ctx, cfg, cur);
  } else if (var == Variant::local) {
    AxisConds cx = all_axis_conditions(g, x.vol, side);
    AxisConds cy;
    if (use_post) cy = all_axis_conditions(g, y->vol, side);
    LevelLatents top = local_layer(ctx, cfg, cx, use_post ? &cy : nullptr, rng, mode);
    res.hierarchy.levels.push_back(top);
    res.factors = decode_factors(ctx, cfg, top);
  } else {  // global_factors
    LevelLatents root =
        root_layer(ctx, cfg, x.code, use_post ? &y->code : nullptr, rng, mode);
    res.hierarchy.levels.push_back(root);
    res.factors = decode_factors_global(ctx, cfg, root);
  }

  enc::FeatureVolume pred = cp::reconstruct_volume(g, res.factors);
  res.merged = cp::merge(g, pred, x.vol);
  res.kl = hierarchy_kl(g, res.hierarchy);
  return res;
}

}  // namespace hvcp::vae
