#pragma once

// CP-factored feature volumes: three per-axis factor matrices reconstruct a
// dense rank-R feature volume, which is merged with an observed partial
// volume plus its occupancy mask and sampled continuously by trilinear
// interpolation.

#include <cstddef>
#include <utility>
#include <vector>

#include "hvcp/autodiff.hpp"
#include "hvcp/core.hpp"
#include "hvcp/encoder.hpp"

namespace hvcp::cp {

struct FactorSet {
  std::size_t rank = 0;      // R
  std::size_t channels = 0;  // d
  ad::Tensor vx;             // (H, R, d)
  ad::Tensor vy;             // (W, R, d)
  ad::Tensor vz;             // (D, R, d)
};

inline void validate_factors(const FactorSet& f) {
  check(f.rank >= 1, "FactorSet: rank must be >= 1");
  check(f.channels >= 1, "FactorSet: channels must be >= 1");
  for (const ad::Tensor* t : {&f.vx, &f.vy, &f.vz}) {
    check(t->shape().size() == 3, "FactorSet: factors must be rank-3");
    check(t->shape()[1] == f.rank && t->shape()[2] == f.channels,
          "FactorSet: factor shape mismatch with (rank, channels)");
  }
}

// Dense volume F[i,j,k,t] = sum_r vx[i,r,t] * vy[j,r,t] * vz[k,r,t].
inline enc::FeatureVolume reconstruct_volume(ad::Graph& g, const FactorSet& f) {
  validate_factors(f);
  enc::FeatureVolume out;
  out.res[0] = f.vx.shape()[0];
  out.res[1] = f.vy.shape()[0];
  out.res[2] = f.vz.shape()[0];
  out.channels = f.channels;
  out.data = g.cp_contract(f.vx, f.vy, f.vz);
  out.mask.assign(out.res[0] * out.res[1] * out.res[2], 1.0);
  return out;
}

struct MergedVolume {
  std::size_t res[3] = {0, 0, 0};
  std::size_t channels = 0;  // 2*d + 1
  ad::Tensor data;           // (H,W,D,2d+1) laid out as [pred | partial | mask]
};

// Channel-concatenates the predicted volume, the observed partial volume, and
// the partial-occupancy mask. The partial block is carried through unchanged.
inline MergedVolume merge(ad::Graph& g, const enc::FeatureVolume& pred,
                          const enc::FeatureVolume& partial) {
  check(pred.res[0] == partial.res[0] && pred.res[1] == partial.res[1] &&
            pred.res[2] == partial.res[2],
        "merge: resolution mismatch between predicted and partial volumes");
  check(pred.channels == partial.channels, "merge: channel mismatch");
  std::size_t voxels = pred.res[0] * pred.res[1] * pred.res[2];
  check(partial.mask.size() == voxels, "merge: mask size mismatch");
  ad::Tensor mask(Shape{pred.res[0], pred.res[1], pred.res[2], 1},
                  std::vector<double>(partial.mask));
  MergedVolume out;
  out.res[0] = pred.res[0];
  out.res[1] = pred.res[1];
  out.res[2] = pred.res[2];
  out.channels = 2 * pred.channels + 1;
  out.data = g.concat({pred.data, partial.data, mask}, 3);
  return out;
}

// Trilinear interpolation of the merged volume at M query points in
// [-0.5, 0.5]^3; returns (M, channels).
inline ad::Tensor sample_features(ad::Graph& g, const MergedVolume& v,
                                  const ad::Tensor& queries) {
  check(queries.shape().size() == 2 && queries.shape()[1] == 3,
        "sample_features: queries must have shape (M,3)");
  const auto& q = queries.data();
  for (double c : q)
    check(c >= -0.5 && c <= 0.5, "sample_features: query outside the unit cube");
  return g.trilinear_sample(v.data, queries);
}

// Parameter counts: CP factors vs the dense volume they reconstruct.
inline std::pair<std::size_t, std::size_t> latent_budget(const std::size_t res[3],
                                                         std::size_t d_z) {
  std::size_t factors = (res[0] + res[1] + res[2]) * d_z;
  std::size_t dense = res[0] * res[1] * res[2] * d_z;
  return {factors, dense};
}

}  // namespace hvcp::cp
