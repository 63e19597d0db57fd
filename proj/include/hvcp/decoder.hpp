#pragma once

// Local implicit occupancy decoder: a fully connected network on
// [query point | interpolated feature] with one skip connection of the raw
// input into the second layer, squashed to a probability. A grid evaluator
// covers the unit cube with cell centers for mesh extraction.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "hvcp/autodiff.hpp"
#include "hvcp/core.hpp"
#include "hvcp/cpfield.hpp"
#include "hvcp/nn.hpp"
#include "hvcp/rng.hpp"
#include "hvcp/threading.hpp"

namespace hvcp::dec {

struct DecoderSizes {
  std::size_t in_features = 0;  // 3 + merged channel count
  std::size_t hidden = 128;
};

inline DecoderSizes decoder_for_channels(std::size_t merged_channels, std::size_t hidden = 128) {
  return DecoderSizes{3 + merged_channels, hidden};
}

inline void init_decoder(nn::ParamStore& store, const DecoderSizes& sz, Rng& rng) {
  check(sz.in_features > 3, "init_decoder: input must carry at least one feature channel");
  std::size_t in = sz.in_features, h = sz.hidden;
  store.add("dec.fc0.w", Shape{in, h}, nn::glorot_uniform(in, h, rng));
  store.add("dec.fc0.b", Shape{h}, std::vector<double>(h, 0.0));
  store.add("dec.fc1.w", Shape{h + in, h}, nn::glorot_uniform(h + in, h, rng));
  store.add("dec.fc1.b", Shape{h}, std::vector<double>(h, 0.0));
  store.add("dec.fc2.w", Shape{h, h}, nn::glorot_uniform(h, h, rng));
  store.add("dec.fc2.b", Shape{h}, std::vector<double>(h, 0.0));
  store.add("dec.fc3.w", Shape{h, 1}, nn::glorot_uniform(h, 1, rng));
  store.add("dec.fc3.b", Shape{1}, std::vector<double>(1, 0.0));
}

// queries (M,3) and features (M, in_features-3) -> probabilities (M).
inline ad::Tensor occupancy(nn::Ctx& ctx, const DecoderSizes& sz, const ad::Tensor& queries,
                            const ad::Tensor& features) {
  ad::Graph& g = ctx.g;
  check(queries.shape().size() == 2 && queries.shape()[1] == 3,
        "occupancy: queries must be (M,3)");
  check(features.shape().size() == 2 && features.shape()[0] == queries.shape()[0],
        "occupancy: feature batch mismatch");
  check(features.shape()[1] + 3 == sz.in_features,
        "occupancy: feature channel count " + std::to_string(features.shape()[1]) +
            " does not match decoder input width " + std::to_string(sz.in_features));

  ad::Tensor in = g.concat({queries, features}, 1);
  ad::Tensor h1 = g.relu(g.add(g.matmul(in, ctx.p("dec.fc0.w")), ctx.p("dec.fc0.b")));
  ad::Tensor h2 = g.relu(g.add(g.matmul(g.concat({h1, in}, 1), ctx.p("dec.fc1.w")),
                               ctx.p("dec.fc1.b")));
  ad::Tensor h3 = g.relu(g.add(g.matmul(h2, ctx.p("dec.fc2.w")), ctx.p("dec.fc2.b")));
  ad::Tensor logit = g.add(g.matmul(h3, ctx.p("dec.fc3.w")), ctx.p("dec.fc3.b"));
  return g.reshape(g.logistic(logit), Shape{queries.shape()[0]});
}

// Mean binary cross-entropy with probabilities clamped to [1e-7, 1-1e-7].
inline ad::Tensor binary_cross_entropy(ad::Graph& g, const ad::Tensor& probs,
                                       const ad::Tensor& labels) {
  check(probs.shape() == labels.shape(), "binary_cross_entropy: shape mismatch");
  for (double o : labels.data())
    check(o == 0.0 || o == 1.0, "binary_cross_entropy: labels must be binary");
  ad::Tensor p = g.clamp(probs, 1e-7, 1.0 - 1e-7);
  ad::Tensor pos = g.mul(labels, g.log_fn(p));
  ad::Tensor negp = g.add_scalar(g.neg(p), 1.0);
  ad::Tensor neg_lbl = g.add_scalar(g.neg(labels), 1.0);
  return g.neg(g.mean_all(g.add(pos, g.mul(neg_lbl, g.log_fn(negp)))));
}

// Occupancy probabilities at the side^3 lattice of cell centers covering the
// unit cube, laid out x-major: index (i*side + j)*side + k. Pure inference;
// chunks are evaluated on independent graphs (optionally across threads) so
// the result is identical regardless of the thread count.
inline std::vector<double> occupancy_grid(const nn::ParamStore& store, const DecoderSizes& sz,
                                          const cp::MergedVolume& vol, std::size_t side,
                                          std::size_t threads = 0) {
  check(side >= 8, "occupancy_grid: side must be >= 8");
  check(vol.channels + 3 == sz.in_features, "occupancy_grid: volume channel mismatch");
  ad::Tensor voldata(vol.data.shape(), vol.data.data_ptr());  // strip any graph history

  std::size_t total = side * side * side;
  std::vector<double> out(total);
  const std::size_t chunk = 4096;
  std::size_t nchunks = (total + chunk - 1) / chunk;

  parallel_for(nchunks, [&](std::size_t c) {
    std::size_t begin = c * chunk;
    std::size_t end = std::min(begin + chunk, total);
    std::vector<double> q;
    q.reserve((end - begin) * 3);
    for (std::size_t v = begin; v < end; ++v) {
      std::size_t i = v / (side * side);
      std::size_t j = (v / side) % side;
      std::size_t k = v % side;
      double s = static_cast<double>(side);
      q.push_back((static_cast<double>(i) + 0.5) / s - 0.5);
      q.push_back((static_cast<double>(j) + 0.5) / s - 0.5);
      q.push_back((static_cast<double>(k) + 0.5) / s - 0.5);
    }
    ad::Graph g;
    g.set_grad_enabled(false);
    nn::Ctx ctx{g, store, {}};
    ad::Tensor queries(Shape{end - begin, 3}, std::move(q));
    ad::Tensor feats = g.trilinear_sample(voldata, queries);
    ad::Tensor probs = occupancy(ctx, sz, queries, feats);
    for (std::size_t v = begin; v < end; ++v) out[v] = probs.data()[v - begin];
  }, threads);
  return out;
}

}  // namespace hvcp::dec
