#pragma once

// Point-cloud encoders: a PointNet with global max pooling producing a
// fixed-length context vector, and a shallow per-point network with one
// voxel-local max-pool feedback stage producing a sparse feature volume.
// Both are permutation- and duplication-invariant by construction.

#include <string>
#include <vector>

#include "hvcp/autodiff.hpp"
#include "hvcp/core.hpp"
#include "hvcp/nn.hpp"
#include "hvcp/pointcloud.hpp"

namespace hvcp::enc {

struct GlobalCode {
  ad::Tensor c;  // shape (n)
};

struct FeatureVolume {
  std::size_t res[3] = {0, 0, 0};
  std::size_t channels = 0;
  ad::Tensor data;           // (H,W,D,channels)
  std::vector<double> mask;  // H*W*D entries in {0,1}: voxel received >= 1 point
};

struct EncoderSizes {
  std::size_t point_hidden = 64;    // per-point width of the first layer (both encoders)
  std::size_t global_feat = 128;    // second per-point width of the global encoder
  std::size_t global_out = 128;     // n, the global code length
  std::size_t local_channels = 32;  // d, feature volume channels
  bool scatter_mean = false;        // mean pooling instead of max for the volume
};

// Voxel index along one axis; boundary coordinate +0.5 lands in the last voxel.
inline std::size_t voxel_axis_index(double coord, std::size_t extent) {
  double u = std::floor((coord + 0.5) * static_cast<double>(extent));
  double clamped = std::min(std::max(u, 0.0), static_cast<double>(extent - 1));
  return static_cast<std::size_t>(clamped);
}

inline std::size_t voxel_flat_index(const Vec3& p, const std::size_t res[3]) {
  std::size_t i = voxel_axis_index(p.x, res[0]);
  std::size_t j = voxel_axis_index(p.y, res[1]);
  std::size_t k = voxel_axis_index(p.z, res[2]);
  return (i * res[1] + j) * res[2] + k;
}

inline void init_global_encoder(nn::ParamStore& store, const EncoderSizes& sz, Rng& rng) {
  nn::MlpSpec per_point{{3, sz.point_hidden, sz.global_feat}, nn::Act::relu, nn::Act::relu};
  nn::init_mlp(store, per_point, "enc.global.point", rng);
  nn::MlpSpec head{{sz.global_feat, sz.global_out}, nn::Act::relu, nn::Act::identity};
  nn::init_mlp(store, head, "enc.global.head", rng);
}

inline void init_local_encoder(nn::ParamStore& store, const EncoderSizes& sz, Rng& rng) {
  nn::MlpSpec first{{3, sz.point_hidden}, nn::Act::relu, nn::Act::relu};
  nn::init_mlp(store, first, "enc.local.point", rng);
  nn::MlpSpec second{{2 * sz.point_hidden, sz.local_channels}, nn::Act::relu, nn::Act::identity};
  nn::init_mlp(store, second, "enc.local.mix", rng);
}

inline ad::Tensor cloud_tensor(const PointCloud& pc) {
  std::vector<double> flat;
  flat.reserve(pc.size() * 3);
  for (const auto& p : pc.points) flat.insert(flat.end(), {p.x, p.y, p.z});
  return ad::Tensor(Shape{pc.size(), 3}, std::move(flat));
}

// Permutation-invariant global context vector of length global_out.
inline GlobalCode encode_global(nn::Ctx& ctx, const PointCloud& pc, const EncoderSizes& sz) {
  validate_cloud(pc);
  ad::Graph& g = ctx.g;
  nn::MlpSpec per_point{{3, sz.point_hidden, sz.global_feat}, nn::Act::relu, nn::Act::relu};
  ad::Tensor h = nn::mlp_forward(ctx, per_point, "enc.global.point", cloud_tensor(pc));
  std::vector<std::size_t> seg(pc.size(), 0);
  ad::Tensor pooled = g.segment_max(h, seg, 1);  // (1, global_feat)
  nn::MlpSpec head{{sz.global_feat, sz.global_out}, nn::Act::relu, nn::Act::identity};
  ad::Tensor c = nn::mlp_forward(ctx, head, "enc.global.head", pooled);
  return GlobalCode{g.reshape(c, Shape{sz.global_out})};
}

// Sparse feature volume: per-point features pooled into containing voxels,
// with one pooled-feedback stage before the final per-point mix.
inline FeatureVolume encode_local(nn::Ctx& ctx, const PointCloud& pc, const std::size_t res[3],
                                  const EncoderSizes& sz) {
  validate_cloud(pc);
  check(res[0] >= 2 && res[1] >= 2 && res[2] >= 2, "encode_local: resolution must be >= 2");
  ad::Graph& g = ctx.g;
  std::size_t voxels = res[0] * res[1] * res[2];
  std::vector<std::size_t> seg(pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i) seg[i] = voxel_flat_index(pc.points[i], res);

  nn::MlpSpec first{{3, sz.point_hidden}, nn::Act::relu, nn::Act::relu};
  ad::Tensor f1 = nn::mlp_forward(ctx, first, "enc.local.point", cloud_tensor(pc));
  ad::Tensor pooled = g.segment_max(f1, seg, voxels);
  ad::Tensor feedback = g.gather_rows(pooled, seg);
  nn::MlpSpec second{{2 * sz.point_hidden, sz.local_channels}, nn::Act::relu, nn::Act::identity};
  ad::Tensor f2 = nn::mlp_forward(ctx, second, "enc.local.mix", g.concat({f1, feedback}, 1));
  ad::Tensor vol = sz.scatter_mean ? g.segment_mean(f2, seg, voxels)
                                   : g.segment_max(f2, seg, voxels);

  FeatureVolume out;
  out.res[0] = res[0];
  out.res[1] = res[1];
  out.res[2] = res[2];
  out.channels = sz.local_channels;
  out.data = g.reshape(vol, Shape{res[0], res[1], res[2], sz.local_channels});
  out.mask.assign(voxels, 0.0);
  for (auto s : seg) out.mask[s] = 1.0;
  return out;
}

}  // namespace hvcp::enc
