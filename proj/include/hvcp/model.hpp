#pragma once

// Ties the encoders, the latent hierarchy, and the occupancy decoder into one
// trainable model: parameter creation, per-query forward passes for every
// variant, and deterministic grid inference for extraction.

#include <cstdint>
#include <vector>

#include "hvcp/decoder.hpp"
#include "hvcp/hvae.hpp"

namespace hvcp::model {

struct ModelConfig {
  vae::HvaeConfig vae;
  vae::Variant variant = vae::Variant::hierarchical;
  enc::EncoderSizes enc;  // global_out / local_channels must mirror the vae widths
  std::size_t dec_hidden = 128;

  std::size_t resolution() const { return vae.top_res(); }

  bool uses_global_code() const { return variant != vae::Variant::local; }
  bool uses_volume() const { return variant != vae::Variant::global_code; }

  // Feature channels handed to the decoder next to the 3 coordinates: the
  // merged volume for volume variants, the flattened root latent otherwise.
  std::size_t feature_channels() const {
    if (variant == vae::Variant::global_code) return 3 * vae.level_res(1) * vae.d_z;
    return 2 * vae.channels + 1;
  }
  dec::DecoderSizes decoder_sizes() const {
    return dec::decoder_for_channels(feature_channels(), dec_hidden);
  }
};

// Keeps the encoder output widths locked to what the chain consumes.
inline void tie_widths(ModelConfig& c) {
  c.enc.global_out = c.vae.global_len;
  c.enc.local_channels = c.vae.channels;
}

inline void validate_model(const ModelConfig& c) {
  vae::validate_config(c.vae);
  check(c.enc.global_out == c.vae.global_len,
        "model: encoder global_out must equal the global code length");
  check(c.enc.local_channels == c.vae.channels,
        "model: encoder local_channels must equal the conditioner channel count");
  check(c.enc.point_hidden >= 1 && c.enc.global_feat >= 1 && c.dec_hidden >= 1,
        "model: hidden widths must be >= 1");
  if (c.uses_volume())
    check(c.resolution() >= 2, "model: volume variants need a top resolution >= 2");
}

// Number of scalar latent dimensions the variant actually samples; KL terms
// are normalized by this so lambda means the same thing across variants.
inline std::size_t latent_dims(const ModelConfig& c) {
  switch (c.variant) {
    case vae::Variant::hierarchical:
      return c.vae.total_cells() * c.vae.d_z;
    case vae::Variant::local:
      return 3 * c.vae.top_res() * c.vae.d_z;
    default:  // global_code, global_factors: root level only
      return 3 * c.vae.level_res(1) * c.vae.d_z;
  }
}

inline void init_model(nn::ParamStore& store, const ModelConfig& cfg, Rng& rng) {
  validate_model(cfg);
  if (cfg.uses_global_code()) enc::init_global_encoder(store, cfg.enc, rng);
  if (cfg.uses_volume()) enc::init_local_encoder(store, cfg.enc, rng);
  vae::init_hvae(store, cfg.vae, cfg.variant, rng);
  dec::init_decoder(store, cfg.decoder_sizes(), rng);
}

// Encodes one observed cloud into the code/volume pair the chain consumes.
// Variants that skip a branch leave the corresponding field default-empty.
inline vae::CodePair encode_observation(nn::Ctx& ctx, const ModelConfig& cfg,
                                        const PointCloud& pc) {
  vae::CodePair out;
  if (cfg.uses_global_code()) out.code = enc::encode_global(ctx, pc, cfg.enc).c;
  if (cfg.uses_volume()) {
    std::size_t side = cfg.resolution();
    const std::size_t res[3] = {side, side, side};
    out.vol = enc::encode_local(ctx, pc, res, cfg.enc);
  }
  return out;
}

// Flattens the root latent of the code-only variant into a single feature row
// of length 3 * n1 * d_z (axis blocks in x, y, z order).
inline ad::Tensor flatten_root_latent(ad::Graph& g, const vae::LevelLatents& root,
                                      std::size_t d_z) {
  std::vector<ad::Tensor> rows;
  rows.reserve(3);
  for (std::size_t a = 0; a < 3; ++a)
    rows.push_back(g.reshape(root.axes[a].z, Shape{1, root.n * d_z}));
  return g.concat(rows, 1);
}

struct Forward {
  ad::Tensor probs;  // (M) occupancy probabilities at the query points
  ad::Tensor kl;     // scalar; zero when nothing carries a posterior
  vae::CompleteResult chain;  // populated for volume variants only
  bool has_chain = false;
};

// Full differentiable pass: encode x (and y for posterior modes), run the
// latent chain for the configured variant, and decode the query points.
inline Forward forward_queries(nn::Ctx& ctx, const ModelConfig& cfg, const PointCloud& x,
                               const PointCloud* y, const ad::Tensor& queries, Rng& rng,
                               vae::Mode mode) {
  validate_model(cfg);
  ad::Graph& g = ctx.g;
  check(queries.shape().size() == 2 && queries.shape()[1] == 3,
        "forward_queries: queries must be (M,3)");
  bool use_post = mode != vae::Mode::prior;
  check(!use_post || y != nullptr, "forward_queries: posterior modes need the complete cloud");

  vae::CodePair xp = encode_observation(ctx, cfg, x);
  vae::CodePair yp;
  if (use_post) yp = encode_observation(ctx, cfg, *y);

  Forward out;
  if (cfg.variant == vae::Variant::global_code) {
    vae::LevelLatents root = vae::root_layer(ctx, cfg.vae, xp.code,
                                             use_post ? &yp.code : nullptr, rng, mode);
    ad::Tensor row = flatten_root_latent(g, root, cfg.vae.d_z);
    std::vector<std::size_t> rep(queries.shape()[0], 0);
    ad::Tensor feats = g.gather_rows(row, rep);
    out.probs = dec::occupancy(ctx, cfg.decoder_sizes(), queries, feats);
    vae::LatentHierarchy h;
    h.levels.push_back(root);
    out.kl = vae::hierarchy_kl(g, h);
  } else {
    vae::CompleteResult r =
        vae::complete(ctx, cfg.vae, cfg.variant, xp, use_post ? &yp : nullptr, rng, mode);
    ad::Tensor feats = cp::sample_features(g, r.merged, queries);
    out.probs = dec::occupancy(ctx, cfg.decoder_sizes(), queries, feats);
    out.kl = r.kl;
    out.chain = std::move(r);
    out.has_chain = true;
  }
  return out;
}

// Inference-only occupancy over the side^3 lattice of cell centers, x-major.
// One grad-free pass fixes the latents (sampling from rng per the mode), then
// the decoder is evaluated in independent chunks. Bitwise deterministic for a
// given rng state regardless of the thread count.
inline std::vector<double> complete_grid(const nn::ParamStore& store, const ModelConfig& cfg,
                                         const PointCloud& x, const PointCloud* y, Rng& rng,
                                         vae::Mode mode, std::size_t side,
                                         std::size_t threads = 0) {
  validate_model(cfg);
  check(side >= 8, "complete_grid: side must be >= 8");
  ad::Graph g;
  g.set_grad_enabled(false);
  nn::Ctx ctx{g, store, {}};
  bool use_post = mode != vae::Mode::prior;
  check(!use_post || y != nullptr, "complete_grid: posterior modes need the complete cloud");

  vae::CodePair xp = encode_observation(ctx, cfg, x);
  vae::CodePair yp;
  if (use_post) yp = encode_observation(ctx, cfg, *y);

  dec::DecoderSizes sz = cfg.decoder_sizes();
  if (cfg.variant != vae::Variant::global_code) {
    vae::CompleteResult r =
        vae::complete(ctx, cfg.vae, cfg.variant, xp, use_post ? &yp : nullptr, rng, mode);
    return dec::occupancy_grid(store, sz, r.merged, side, threads);
  }

  vae::LevelLatents root =
      vae::root_layer(ctx, cfg.vae, xp.code, use_post ? &yp.code : nullptr, rng, mode);
  ad::Tensor row = flatten_root_latent(g, root, cfg.vae.d_z);
  const std::vector<double> rowv = row.data();

  std::size_t total = side * side * side;
  std::vector<double> out(total);
  const std::size_t chunk = 4096;
  std::size_t nchunks = (total + chunk - 1) / chunk;
  parallel_for(nchunks, [&](std::size_t c) {
    std::size_t begin = c * chunk;
    std::size_t end = std::min(begin + chunk, total);
    std::size_t m = end - begin;
    std::vector<double> q;
    q.reserve(m * 3);
    std::vector<double> f;
    f.reserve(m * rowv.size());
    for (std::size_t v = begin; v < end; ++v) {
      std::size_t i = v / (side * side);
      std::size_t j = (v / side) % side;
      std::size_t k = v % side;
      double s = static_cast<double>(side);
      q.push_back((static_cast<double>(i) + 0.5) / s - 0.5);
      q.push_back((static_cast<double>(j) + 0.5) / s - 0.5);
      q.push_back((static_cast<double>(k) + 0.5) / s - 0.5);
      f.insert(f.end(), rowv.begin(), rowv.end());
    }
    ad::Graph cg;
    cg.set_grad_enabled(false);
    nn::Ctx cctx{cg, store, {}};
    ad::Tensor queries(Shape{m, 3}, std::move(q));
    ad::Tensor feats(Shape{m, rowv.size()}, std::move(f));
    ad::Tensor probs = dec::occupancy(cctx, sz, queries, feats);
    for (std::size_t v = begin; v < end; ++v) out[v] = probs.data()[v - begin];
  }, threads);
  return out;
}

// True when the store carries the approximate-posterior weights the
// reconstruction path needs (models are always initialized with them, but a
// checkpoint may have been produced by a stripped or foreign writer).
inline bool has_posterior_params(const nn::ParamStore& store) {
  for (const auto& [name, p] : store.entries()) {
    (void)p;
    if (name.find(".post.") != std::string::npos) return true;
  }
  return false;
}

}  // namespace hvcp::model
