// KL is validated against closed forms and a Monte-Carlo estimator; layer
// semantics (residual upsampling, parent-window locality, log-variance
// clamping, conditioner pooling) against hand-constructed weights and plain
// loops; and the full chain against determinism and central differences.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "hvcp/hvae.hpp"
#include "hvcp/rng.hpp"

using hvcp::Rng;
using hvcp::Shape;
using hvcp::ad::Graph;
using hvcp::ad::Tensor;
using namespace hvcp::vae;
namespace nn = hvcp::nn;
namespace cpf = hvcp::cp;
using hvcp::enc::FeatureVolume;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(hvcp::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

FeatureVolume random_volume(std::size_t side, std::size_t channels, Rng& rng,
                            bool full_mask = false) {
  FeatureVolume f;
  f.res[0] = f.res[1] = f.res[2] = side;
  f.channels = channels;
  f.data = random_tensor({side, side, side, channels}, rng);
  f.mask.resize(side * side * side);
  for (auto& m : f.mask) m = (full_mask || rng.below(3)) ? 1.0 : 0.0;
  return f;
}

HvaeConfig tiny_config() {
  HvaeConfig cfg;
  cfg.levels = 2;
  cfg.n1 = 2;  // top resolution 4
  cfg.d_z = 3;
  cfg.trunk_hidden = 8;
  cfg.head_hidden = 6;
  cfg.rank = 2;
  cfg.channels = 4;
  cfg.global_len = 5;
  return cfg;
}

CodePair make_pair(const HvaeConfig& cfg, std::uint64_t seed, bool full_mask = false) {
  Rng rng(seed);
  CodePair p;
  p.code = random_tensor({cfg.global_len}, rng);
  p.vol = random_volume(cfg.top_res(), cfg.channels, rng, full_mask);
  return p;
}

void zero_param(nn::ParamStore& store, const std::string& name) {
  auto& v = *store.at(name).value;
  std::fill(v.begin(), v.end(), 0.0);
}

// Closed-form KL between scalar Gaussians, written independently of the
// graph implementation.
double kl_scalar(double mu_q, double lv_q, double mu_p, double lv_p) {
  double var_q = std::exp(lv_q), var_p = std::exp(lv_p);
  return 0.5 * (lv_p - lv_q) + (var_q + (mu_q - mu_p) * (mu_q - mu_p)) / (2.0 * var_p) - 0.5;
}

}  // namespace

TEST(Hvae, KlOfIdenticalGaussiansIsZero) {
  Rng rng(301);
  Graph g;
  GaussianParams q{random_tensor({4, 3}, rng), random_tensor({4, 3}, rng)};
  Tensor kl = kl_diag_gauss(g, q, q);
  EXPECT_NEAR(kl.value(), 0.0, 1e-12);
}

TEST(Hvae, KlMatchesClosedFormOnKnownPairs) {
  Graph g;
  // N(1,1) || N(0,1) = 1/2.
  GaussianParams q1{Tensor({1}, {1.0}), Tensor({1}, {0.0})};
  GaussianParams p1{Tensor({1}, {0.0}), Tensor({1}, {0.0})};
  EXPECT_NEAR(kl_diag_gauss(g, q1, p1).value(), 0.5, 1e-12);

  // N(0,4) || N(0,1) = (4 - 1 - ln 4)/2.
  GaussianParams q2{Tensor({1}, {0.0}), Tensor({1}, {std::log(4.0)})};
  GaussianParams p2{Tensor({1}, {0.0}), Tensor({1}, {0.0})};
  EXPECT_NEAR(kl_diag_gauss(g, q2, p2).value(), (4.0 - 1.0 - std::log(4.0)) / 2.0, 1e-12);

  // Entries sum: both of the above stacked.
  GaussianParams q3{Tensor({2}, {1.0, 0.0}), Tensor({2}, {0.0, std::log(4.0)})};
  GaussianParams p3{Tensor({2}, {0.0, 0.0}), Tensor({2}, {0.0, 0.0})};
  EXPECT_NEAR(kl_diag_gauss(g, q3, p3).value(),
              0.5 + (4.0 - 1.0 - std::log(4.0)) / 2.0, 1e-12);
}

TEST(Hvae, KlIsNonNegativeOnRandomPairs) {
  Rng rng(302);
  Graph g;
  for (int t = 0; t < 50; ++t) {
    GaussianParams q{random_tensor({5}, rng), random_tensor({5}, rng, -2.0, 2.0)};
    GaussianParams p{random_tensor({5}, rng), random_tensor({5}, rng, -2.0, 2.0)};
    EXPECT_GE(kl_diag_gauss(g, q, p).value(), -1e-12);
  }
}

TEST(Hvae, KlClosedFormMatchesMonteCarloWithinOnePercent) {
  Rng rng(303);
  Graph g;
  const std::size_t samples = 1000000;
  int accepted = 0;
  while (accepted < 20) {
    double mu_q = rng.uniform(-1.0, 1.0), lv_q = rng.uniform(-0.7, 0.7);
    double mu_p = rng.uniform(-1.0, 1.0), lv_p = rng.uniform(-0.7, 0.7);
    double closed = kl_scalar(mu_q, lv_q, mu_p, lv_p);
    if (closed < 0.3) continue;  // keep the relative comparison meaningful
    ++accepted;

    double sigma_q = std::exp(0.5 * lv_q), inv_var_p = std::exp(-lv_p);
    double acc = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
      double eps = rng.normal();
      double z = mu_q + sigma_q * eps;
      acc += 0.5 * (lv_p - lv_q) + 0.5 * ((z - mu_p) * (z - mu_p) * inv_var_p - eps * eps);
    }
    double mc = acc / static_cast<double>(samples);

    GaussianParams q{Tensor({1}, {mu_q}), Tensor({1}, {lv_q})};
    GaussianParams p{Tensor({1}, {mu_p}), Tensor({1}, {lv_p})};
    double impl = kl_diag_gauss(g, q, p).value();
    EXPECT_NEAR(impl, closed, 1e-12);
    EXPECT_LE(std::abs(impl - mc), 0.01 * closed)
        << "pair " << accepted << ": impl " << impl << " mc " << mc;
  }
}

TEST(Hvae, SampleGaussMomentsMatchStandardNormal) {
  Rng prng(304);
  const std::size_t n = 100000;
  GaussianParams p{random_tensor({n}, prng, -2.0, 2.0), random_tensor({n}, prng, -1.0, 1.0)};
  Graph g;
  Rng rng(305);
  Tensor z = sample_gauss(g, p, rng, false);
  double mean = 0.0, var = 0.0;
  std::vector<double> unit(n);
  for (std::size_t i = 0; i < n; ++i) {
    unit[i] = (z.data()[i] - p.mu.data()[i]) / std::exp(0.5 * p.log_var.data()[i]);
    mean += unit[i];
  }
  mean /= static_cast<double>(n);
  for (double u : unit) var += (u - mean) * (u - mean);
  var /= static_cast<double>(n);
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(var, 1.0, 0.02);
}

TEST(Hvae, SampleGaussMeanOnlyReturnsMuAndConsumesNoRandomness) {
  Rng prng(306);
  GaussianParams p{random_tensor({7}, prng), random_tensor({7}, prng)};
  Graph g;
  Rng rng_a(42), rng_b(42);
  Tensor z = sample_gauss(g, p, rng_a, true);
  EXPECT_EQ(z.data(), p.mu.data());
  EXPECT_EQ(rng_a.uniform(), rng_b.uniform());
}

TEST(Hvae, AxisConditionConstantVolumeIsConstantAndEmptyMaskIsZero) {
  const std::size_t side = 4, d = 3;
  FeatureVolume f;
  f.res[0] = f.res[1] = f.res[2] = side;
  f.channels = d;
  f.data = Tensor::full({side, side, side, d}, 1.25);
  f.mask.assign(side * side * side, 1.0);

  Graph g;
  for (std::size_t axis = 0; axis < 3; ++axis) {
    Tensor c = axis_condition(g, f, 2, axis);
    ASSERT_EQ(c.shape(), (Shape{2, d}));
    for (double v : c.data()) EXPECT_NEAR(v, 1.25, 1e-12);
  }

  f.mask.assign(side * side * side, 0.0);
  Tensor c0 = axis_condition(g, f, 2, 0);
  for (double v : c0.data()) EXPECT_EQ(v, 0.0);
}

TEST(Hvae, AxisConditionMatchesTripleLoopOracle) {
  Rng rng(307);
  const std::size_t side = 6, d = 3, n = 3, group = side / n;
  FeatureVolume f = random_volume(side, d, rng);

  Graph g;
  for (std::size_t axis = 0; axis < 3; ++axis) {
    Tensor got = axis_condition(g, f, n, axis);
    ASSERT_EQ(got.shape(), (Shape{n, d}));
    // Slab means by direct summation, then plain group averages.
    std::vector<std::vector<double>> slab(side, std::vector<double>(d, 0.0));
    for (std::size_t s = 0; s < side; ++s) {
      double count = 0.0;
      std::vector<double> sum(d, 0.0);
      for (std::size_t i = 0; i < side; ++i)
        for (std::size_t j = 0; j < side; ++j)
          for (std::size_t k = 0; k < side; ++k) {
            std::size_t idx[3] = {i, j, k};
            if (idx[axis] != s) continue;
            std::size_t v = (i * side + j) * side + k;
            count += f.mask[v];
            for (std::size_t t = 0; t < d; ++t)
              sum[t] += f.data.data()[v * d + t] * f.mask[v];
          }
      if (count > 0)
        for (std::size_t t = 0; t < d; ++t) slab[s][t] = sum[t] / count;
    }
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t t = 0; t < d; ++t) {
        double mean = 0.0;
        for (std::size_t gg = 0; gg < group; ++gg) mean += slab[c * group + gg][t];
        mean /= static_cast<double>(group);
        EXPECT_NEAR(got.data()[c * d + t], mean, 1e-12) << "axis " << axis;
      }
  }
}

TEST(Hvae, AxisConditionRejectsNonDivisibleResolution) {
  Rng rng(308);
  FeatureVolume f = random_volume(6, 2, rng);
  Graph g;
  EXPECT_THROW(axis_condition(g, f, 4, 0), std::runtime_error);
}

TEST(Hvae, RootLayerDegenerateSigmaCollapsesToMeanAndClampPinsLogVar) {
  HvaeConfig cfg = tiny_config();
  nn::ParamStore store;
  Rng init(309);
  init_hvae(store, cfg, Variant::hierarchical, init);
  for (const char* leaf : {"fc0.w", "fc0.b", "fc1.w", "fc1.b", "fc2.w"})
    zero_param(store, std::string("vae.root.prior.") + leaf);
  std::size_t m = 3 * cfg.n1 * cfg.d_z;
  auto& bias = *store.at("vae.root.prior.fc2.b").value;
  for (std::size_t i = 0; i < m; ++i) bias[i] = 0.7;
  for (std::size_t i = m; i < 2 * m; ++i) bias[i] = -50.0;

  Rng prng(310);
  Tensor c_x = random_tensor({cfg.global_len}, prng);
  Graph g;
  nn::Ctx ctx{g, store, {}};
  Rng rng(311);
  LevelLatents l1 = root_layer(ctx, cfg, c_x, nullptr, rng, Mode::prior);
  ASSERT_EQ(l1.n, cfg.n1);
  for (std::size_t a = 0; a < 3; ++a) {
    for (double lv : l1.axes[a].prior.log_var.data()) EXPECT_EQ(lv, -10.0);
    for (double mu : l1.axes[a].prior.mu.data()) EXPECT_DOUBLE_EQ(mu, 0.7);
    for (double z : l1.axes[a].z.data()) EXPECT_NEAR(z, 0.7, 0.05);
    EXPECT_FALSE(l1.axes[a].has_posterior);
  }

  // The clamp also pins from above.
  for (std::size_t i = m; i < 2 * m; ++i) bias[i] = 50.0;
  Graph g2;
  nn::Ctx ctx2{g2, store, {}};
  Rng rng2(312);
  LevelLatents up = root_layer(ctx2, cfg, c_x, nullptr, rng2, Mode::prior);
  for (double lv : up.axes[0].prior.log_var.data()) EXPECT_EQ(lv, 10.0);
}

TEST(Hvae, RootLayerIsDeterministicGivenSeedAndRequiresCyForPosterior) {
  HvaeConfig cfg = tiny_config();
  nn::ParamStore store;
  Rng init(313);
  init_hvae(store, cfg, Variant::hierarchical, init);
  Rng prng(314);
  Tensor c_x = random_tensor({cfg.global_len}, prng);
  Tensor c_y = random_tensor({cfg.global_len}, prng);

  auto run = [&](std::uint64_t seed, Mode mode, const Tensor* cy) {
    Graph g;
    nn::Ctx ctx{g, store, {}};
    Rng rng(seed);
    LevelLatents l = root_layer(ctx, cfg, c_x, cy, rng, mode);
    return l.axes[0].z.data();
  };
  EXPECT_EQ(run(5, Mode::prior, nullptr), run(5, Mode::prior, nullptr));
  EXPECT_NE(run(5, Mode::prior, nullptr), run(6, Mode::prior, nullptr));
  EXPECT_EQ(run(5, Mode::posterior, &c_y), run(5, Mode::posterior, &c_y));

  Graph g;
  nn::Ctx ctx{g, store, {}};
  Rng rng(7);
  EXPECT_THROW(root_layer(ctx, cfg, c_x, nullptr, rng, Mode::posterior), std::runtime_error);
  EXPECT_THROW(root_layer(ctx, cfg, c_x, nullptr, rng, Mode::posterior_mean),
               std::runtime_error);
}

TEST(Hvae, StochasticLayerZeroResidualIsNearestNeighborUpsample) {
  HvaeConfig cfg = tiny_config();
  nn::ParamStore store;
  Rng init(315);
  init_hvae(store, cfg, Variant::hierarchical, init);
  for (std::size_t a = 0; a < 3; ++a) {
    std::string p = "vae.lvl2." + std::string(axis_tag(a)) + ".prior.";
    for (const char* leaf : {"fc0.w", "fc0.b", "fc1.w", "fc1.b", "fc2.w"})
      zero_param(store, p + leaf);
    auto& bias = *store.at(p + "fc2.b").value;
    for (std::size_t i = cfg.d_z; i < 2 * cfg.d_z; ++i) bias[i] = -50.0;
  }

  Rng prng(316);
  LevelLatents prev;
  prev.n = cfg.n1;
  for (auto& ax : prev.axes) ax.z = random_tensor({cfg.n1, cfg.d_z}, prng);
  AxisConds cond{random_tensor({4, cfg.channels}, prng),
                 random_tensor({4, cfg.channels}, prng),
                 random_tensor({4, cfg.channels}, prng)};

  Graph g;
  nn::Ctx ctx{g, store, {}};
  Rng rng(317);
  LevelLatents out = stochastic_layer(ctx, cfg, 2, prev, cond, nullptr, rng, Mode::prior);
  ASSERT_EQ(out.n, 2 * cfg.n1);
  for (std::size_t a = 0; a < 3; ++a) {
    for (double lv : out.axes[a].prior.log_var.data()) EXPECT_EQ(lv, -10.0);
    const auto& zc = out.axes[a].z.data();
    const auto& zp = prev.axes[a].z.data();
    for (std::size_t j = 0; j < out.n; ++j)
      for (std::size_t t = 0; t < cfg.d_z; ++t)
        EXPECT_NEAR(zc[j * cfg.d_z + t], zp[(j / 2) * cfg.d_z + t], 0.05)
            << "axis " << a << " cell " << j;
  }
}

TEST(Hvae, StochasticLayerRespectsClampedParentWindows) {
  HvaeConfig cfg = tiny_config();
  cfg.n1 = 4;  // level 2 has 8 cells over 4 parents
  cfg.levels = 2;
  nn::ParamStore store;
  Rng init(318);
  init_hvae(store, cfg, Variant::hierarchical, init);

  Rng prng(319);
  LevelLatents prev;
  prev.n = 4;
  for (auto& ax : prev.axes) ax.z = random_tensor({4, cfg.d_z}, prng);
  AxisConds cond{random_tensor({8, cfg.channels}, prng),
                 random_tensor({8, cfg.channels}, prng),
                 random_tensor({8, cfg.channels}, prng)};

  auto prior_mu = [&](const LevelLatents& p) {
    Graph g;
    nn::Ctx ctx{g, store, {}};
    Rng rng(320);
    LevelLatents out = stochastic_layer(ctx, cfg, 2, p, cond, nullptr, rng, Mode::prior);
    return out.axes[0].prior.mu.data();
  };
  auto base = prior_mu(prev);

  for (std::size_t r = 0; r < 4; ++r) {
    LevelLatents bumped = prev;
    std::vector<double> zd = prev.axes[0].z.data();
    for (std::size_t t = 0; t < cfg.d_z; ++t) zd[r * cfg.d_z + t] += 0.37;
    bumped.axes[0].z = Tensor({4, cfg.d_z}, zd);
    auto moved = prior_mu(bumped);

    for (std::size_t j = 0; j < 8; ++j) {
      std::size_t p = j / 2;
      std::size_t lo = p == 0 ? 0 : p - 1;
      std::size_t hi = p + 1 >= 4 ? 3 : p + 1;
      bool in_window = (r == lo || r == p || r == hi);
      bool row_changed = false;
      for (std::size_t t = 0; t < cfg.d_z; ++t)
        if (moved[j * cfg.d_z + t] != base[j * cfg.d_z + t]) row_changed = true;
      EXPECT_EQ(row_changed, in_window) << "parent " << r << " child " << j;
    }
  }
}

TEST(Hvae, PosteriorMatchesPriorWhenYPathwayWeightsAreZero) {
  HvaeConfig cfg = tiny_config();
  nn::ParamStore store;
  Rng init(321);
  init_hvae(store, cfg, Variant::hierarchical, init);

  // Copy the prior trunk into the posterior and zero the rows that read the
  // y-conditioner, so the two branches compute the same function.
  std::size_t dz = cfg.d_z, d = cfg.channels, t = cfg.trunk_hidden;
  for (std::size_t a = 0; a < 3; ++a) {
    std::string pp = "vae.lvl2." + std::string(axis_tag(a)) + ".prior.";
    std::string qp = "vae.lvl2." + std::string(axis_tag(a)) + ".post.";
    const auto& w_prior = *store.at(pp + "fc0.w").value;  // (3dz+d, t)
    auto& w_post = *store.at(qp + "fc0.w").value;         // (3dz+2d, t)
    std::fill(w_post.begin(), w_post.end(), 0.0);
    for (std::size_t r = 0; r < 3 * dz + d; ++r)
      for (std::size_t c = 0; c < t; ++c) w_post[r * t + c] = w_prior[r * t + c];
    for (const char* leaf : {"fc0.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b"})
      *store.at(qp + leaf).value = *store.at(pp + leaf).value;
  }

  Rng prng(322);
  LevelLatents prev;
  prev.n = cfg.n1;
  for (auto& ax : prev.axes) ax.z = random_tensor({cfg.n1, dz}, prng);
  AxisConds cond{random_tensor({4, d}, prng), random_tensor({4, d}, prng),
                 random_tensor({4, d}, prng)};

  Graph g;
  nn::Ctx ctx{g, store, {}};
  Rng rng(323);
  LevelLatents out = stochastic_layer(ctx, cfg, 2, prev, cond, &cond, rng, Mode::posterior);
  for (std::size_t a = 0; a < 3; ++a) {
    ASSERT_TRUE(out.axes[a].has_posterior);
    EXPECT_EQ(out.axes[a].posterior.mu.data(), out.axes[a].prior.mu.data());
    EXPECT_EQ(out.axes[a].posterior.log_var.data(), out.axes[a].prior.log_var.data());
    EXPECT_NEAR(kl_diag_gauss(g, out.axes[a].posterior, out.axes[a].prior).value(), 0.0,
                1e-12);
  }
}

TEST(Hvae, DecodeFactorsIsPermutationEquivariantAcrossCells) {
  HvaeConfig cfg = tiny_config();
  nn::ParamStore store;
  Rng init(324);
  init_hvae(store, cfg, Variant::hierarchical, init);
  std::size_t n = cfg.top_res();

  Rng prng(325);
  LevelLatents top;
  top.n = n;
  for (auto& ax : top.axes) ax.z = random_tensor({n, cfg.d_z}, prng);

  std::vector<std::size_t> perm = {2, 0, 3, 1};
  LevelLatents shuffled;
  shuffled.n = n;
  for (std::size_t a = 0; a < 3; ++a) {
    std::vector<double> zd(n * cfg.d_z);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < cfg.d_z; ++t)
        zd[j * cfg.d_z + t] = top.axes[a].z.data()[perm[j] * cfg.d_z + t];
    shuffled.axes[a].z = Tensor({n, cfg.d_z}, zd);
  }

  Graph g;
  nn::Ctx ctx{g, store, {}};
  cpf::FactorSet base = decode_factors(ctx, cfg, top);
  cpf::FactorSet moved = decode_factors(ctx, cfg, shuffled);
  std::size_t row = cfg.rank * cfg.channels;
  const Tensor* bt[3] = {&base.vx, &base.vy, &base.vz};
  const Tensor* mt[3] = {&moved.vx, &moved.vy, &moved.vz};
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t e = 0; e < row; ++e)
        EXPECT_EQ(mt[a]->data()[j * row + e], bt[a]->data()[perm[j] * row + e]);
}

TEST(Hvae, ZeroFactorHeadYieldsAnAllZeroPredictedVolume) {
  HvaeConfig cfg = tiny_config();
  nn::ParamStore store;
  Rng init(326);
  init_hvae(store, cfg, Variant::hierarchical, init);
  for (std::size_t a = 0; a < 3; ++a)
    for (const char* leaf : {"fc0.w", "fc0.b", "fc1.w", "fc1.b"})
      zero_param(store, "vae.head." + std::string(axis_tag(a)) + "." + leaf);

  Rng prng(327);
  LevelLatents top;
  top.n = cfg.top_res();
  for (auto& ax : top.axes) ax.z = random_tensor({top.n, cfg.d_z}, prng);

  Graph g;
  nn::Ctx ctx{g, store, {}};
  cpf::FactorSet f = decode_factors(ctx, cfg, top);
  FeatureVolume pred = cpf::reconstruct_volume(g, f);
  for (double v : pred.data.data()) EXPECT_EQ(v, 0.0);
}

TEST(Hvae, ResolutionsDoubleAndCellBudgetMatchesFactorCount) {
  HvaeConfig cfg;  // defaults
  EXPECT_EQ(cfg.level_res(1), 4u);
  EXPECT_EQ(cfg.level_res(2), 8u);
  EXPECT_EQ(cfg.level_res(3), 16u);
  EXPECT_EQ(cfg.level_res(4), 32u);
  EXPECT_EQ(cfg.top_res(), 32u);
  EXPECT_EQ(cfg.total_cells(), 3u * (4u + 8u + 16u + 32u));
  EXPECT_EQ(cfg.total_cells(), 180u);

  // Last-level latent count equals the factor-parameter budget.
  std::size_t res[3] = {cfg.top_res(), cfg.top_res(), cfg.top_res()};
  EXPECT_EQ(3 * cfg.top_res() * cfg.d_z, cpf::latent_budget(res, cfg.d_z).first);
}

TEST(Hvae, CompletePriorModeSeedsDifferAndCarryZeroKl) {
  HvaeConfig cfg = tiny_config();
  nn::ParamStore store;
  Rng init(328);
  init_hvae(store, cfg, Variant::hierarchical, init);
  CodePair x = make_pair(cfg, 329);

  auto run = [&](std::uint64_t seed) {
    Graph g;
    nn::Ctx ctx{g, store, {}};
    Rng rng(seed);
    return complete(ctx, cfg, Variant::hierarchical, x, nullptr, rng, Mode::prior);
  };
  CompleteResult a = run(1), b = run(2), a2 = run(1);
  EXPECT_EQ(a.kl.value(), 0.0);
  ASSERT_EQ(a.merged.channels, 2 * cfg.channels + 1);
  EXPECT_EQ(a.merged.data.data(), a2.merged.data.data());
  EXPECT_NE(a.merged.data.data(), b.merged.data.data());

  // The observed block is carried through unchanged regardless of the seed.
  std::size_t d = cfg.channels, stride = 2 * d + 1, voxels = cfg.top_res() * cfg.top_res() *
                                                             cfg.top_res();
  for (std::size_t v = 0; v < voxels; ++v)
    for (std::size_t t = 0; t < d; ++t) {
      EXPECT_EQ(a.merged.data.data()[v * stride + d + t], x.vol.data.data()[v * d + t]);
      EXPECT_EQ(b.merged.data.data()[v * stride + d + t], x.vol.data.data()[v * d + t]);
    }
}

TEST(Hvae, CompletePosteriorMeanIsDeterministicWithNonNegativeKl) {
  HvaeConfig cfg = tiny_config();
  nn::ParamStore store;
  Rng init(330);
  init_hvae(store, cfg, Variant::hierarchical, init);
  CodePair x = make_pair(cfg, 331);
  CodePair y = make_pair(cfg, 332, /*full_mask=*/true);

  auto run = [&] {
    Graph g;
    nn::Ctx ctx{g, store, {}};
    Rng rng(333);
    CompleteResult r = complete(ctx, cfg, Variant::hierarchical, x, &y, rng, Mode::posterior_mean);
    return std::make_pair(r.merged.data.data(), r.kl.value());
  };
  auto [m1, k1] = run();
  auto [m2, k2] = run();
  EXPECT_EQ(m1, m2);
  EXPECT_EQ(k1, k2);
  EXPECT_GE(k1, -1e-12);
  EXPECT_GT(k1, 0.0);  // independently initialized branches should not coincide

  Graph g;
  nn::Ctx ctx{g, store, {}};
  Rng rng(334);
  EXPECT_THROW(complete(ctx, cfg, Variant::hierarchical, x, nullptr, rng, Mode::posterior),
               std::runtime_error);
}

TEST(Hvae, CompleteSupportsLocalAndGlobalFactorVariants) {
  HvaeConfig cfg = tiny_config();
  CodePair x = make_pair(cfg, 335);
  CodePair y = make_pair(cfg, 336, /*full_mask=*/true);

  {
    nn::ParamStore store;
    Rng init(337);
    init_hvae(store, cfg, Variant::local, init);
    Graph g;
    nn::Ctx ctx{g, store, {}};
    Rng rng(338);
    CompleteResult prior = complete(ctx, cfg, Variant::local, x, nullptr, rng, Mode::prior);
    EXPECT_EQ(prior.hierarchy.levels.size(), 1u);
    EXPECT_EQ(prior.hierarchy.levels[0].n, cfg.top_res());
    EXPECT_EQ(prior.kl.value(), 0.0);
    Rng rng2(339);
    CompleteResult post = complete(ctx, cfg, Variant::local, x, &y, rng2, Mode::posterior);
    EXPECT_GE(post.kl.value(), -1e-12);
    EXPECT_GT(post.kl.value(), 0.0);
  }
  {
    nn::ParamStore store;
    Rng init(340);
    init_hvae(store, cfg, Variant::global_factors, init);
    Graph g;
    nn::Ctx ctx{g, store, {}};
    Rng rng(341);
    CompleteResult r = complete(ctx, cfg, Variant::global_factors, x, &y, rng, Mode::posterior);
    EXPECT_EQ(r.hierarchy.levels.size(), 1u);
    EXPECT_EQ(r.hierarchy.levels[0].n, cfg.n1);
    EXPECT_GT(r.kl.value(), 0.0);
    ASSERT_EQ(r.merged.data.shape(),
              (Shape{cfg.top_res(), cfg.top_res(), cfg.top_res(), 2 * cfg.channels + 1}));
  }
  {
    nn::ParamStore store;
    Rng init(342);
    init_hvae(store, cfg, Variant::global_code, init);
    Graph g;
    nn::Ctx ctx{g, store, {}};
    Rng rng(343);
    EXPECT_THROW(complete(ctx, cfg, Variant::global_code, x, nullptr, rng, Mode::prior),
                 std::runtime_error);
  }
}

TEST(Hvae, CompleteChainGradientsPassCentralDifferences) {
  HvaeConfig cfg;
  cfg.levels = 2;
  cfg.n1 = 2;
  cfg.d_z = 2;
  cfg.trunk_hidden = 6;
  cfg.head_hidden = 5;
  cfg.rank = 1;
  cfg.channels = 2;
  cfg.global_len = 3;
  nn::ParamStore store;
  Rng init(344);
  init_hvae(store, cfg, Variant::hierarchical, init);
  CodePair x = make_pair(cfg, 345);
  CodePair y = make_pair(cfg, 346, /*full_mask=*/true);

  auto loss_fn = [&](nn::Ctx& ctx) {
    Graph& g = ctx.g;
    Rng rng(347);
    CompleteResult r = complete(ctx, cfg, Variant::hierarchical, x, &y, rng, Mode::posterior);
    return g.add(g.mean_all(g.mul(r.merged.data, r.merged.data)), g.scale(r.kl, 0.05));
  };
  auto rep = nn::grad_check_params(store, loss_fn, 1e-5);
  EXPECT_LT(rep.max_rel_err, 1e-4) << "worst parameter: " << rep.worst_param << " entry "
                                   << rep.worst_entry;
}
