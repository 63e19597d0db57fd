// Layer math is validated against hand-composed affine chains, Adam against
// its closed-form recurrence tracked manually, and full MLP gradients against
// central differences.

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "hvcp/nn.hpp"

using hvcp::Rng;
using hvcp::Shape;
using hvcp::ad::Graph;
using hvcp::ad::Tensor;
using namespace hvcp::nn;
namespace ad = hvcp::ad;

namespace {

ParamStore tiny_mlp_store() {
  // 2 -> 3 -> 1 with fixed weights
  ParamStore s;
  s.add("net.fc0.w", {2, 3}, {0.1, -0.2, 0.3, 0.4, 0.5, -0.6});
  s.add("net.fc0.b", {3}, {0.01, 0.02, 0.03});
  s.add("net.fc1.w", {3, 1}, {1.0, -1.0, 0.5});
  s.add("net.fc1.b", {1}, {-0.1});
  return s;
}

MlpSpec tiny_spec() {
  MlpSpec spec;
  spec.widths = {2, 3, 1};
  spec.hidden = Act::relu;
  spec.output = Act::identity;
  return spec;
}

}  // namespace

TEST(Nn, MlpForwardMatchesHandComposition) {
  ParamStore store = tiny_mlp_store();
  Graph g;
  Ctx ctx{g, store, {}};
  std::vector<double> xs = {0.7, -0.3, -1.0, 2.0};
  Tensor out = mlp_forward(ctx, tiny_spec(), "net", Tensor({2, 2}, xs));
  ASSERT_EQ(out.shape(), (Shape{2, 1}));

  const auto& w0 = *store.at("net.fc0.w").value;
  const auto& b0 = *store.at("net.fc0.b").value;
  const auto& w1 = *store.at("net.fc1.w").value;
  const auto& b1 = *store.at("net.fc1.b").value;
  for (int row = 0; row < 2; ++row) {
    double h[3];
    for (int j = 0; j < 3; ++j) {
      double a = b0[static_cast<size_t>(j)];
      for (int i = 0; i < 2; ++i)
        a += xs[static_cast<size_t>(row * 2 + i)] * w0[static_cast<size_t>(i * 3 + j)];
      h[j] = a > 0 ? a : 0;
    }
    double y = b1[0];
    for (int j = 0; j < 3; ++j) y += h[j] * w1[static_cast<size_t>(j)];
    EXPECT_NEAR(out.data()[static_cast<size_t>(row)], y, 1e-15);
  }
}

TEST(Nn, MlpRejectsWrongInputWidth) {
  ParamStore store = tiny_mlp_store();
  Graph g;
  Ctx ctx{g, store, {}};
  EXPECT_THROW(mlp_forward(ctx, tiny_spec(), "net", Tensor({1, 3}, {1, 2, 3})),
               std::runtime_error);
}

TEST(Nn, GlorotInitBoundsAndZeroBias) {
  ParamStore store;
  Rng rng(101);
  MlpSpec spec;
  spec.widths = {10, 20, 5};
  init_mlp(store, spec, "m", rng);
  ASSERT_TRUE(store.contains("m.fc0.w"));
  ASSERT_TRUE(store.contains("m.fc1.b"));

  double bound0 = std::sqrt(6.0 / (10 + 20));
  for (double v : *store.at("m.fc0.w").value) {
    EXPECT_LE(std::abs(v), bound0);
  }
  double bound1 = std::sqrt(6.0 / (20 + 5));
  bool any_nonzero = false;
  for (double v : *store.at("m.fc1.w").value) {
    EXPECT_LE(std::abs(v), bound1);
    any_nonzero = any_nonzero || v != 0.0;
  }
  EXPECT_TRUE(any_nonzero);
  for (double v : *store.at("m.fc0.b").value) EXPECT_DOUBLE_EQ(v, 0.0);
  for (double v : *store.at("m.fc1.b").value) EXPECT_DOUBLE_EQ(v, 0.0);

  // same seed reproduces, different seed does not
  ParamStore s2, s3;
  Rng r2(101), r3(102);
  init_mlp(s2, spec, "m", r2);
  init_mlp(s3, spec, "m", r3);
  EXPECT_EQ(*store.at("m.fc0.w").value, *s2.at("m.fc0.w").value);
  EXPECT_NE(*store.at("m.fc0.w").value, *s3.at("m.fc0.w").value);
}

TEST(Nn, AdamFirstStepMatchesClosedForm) {
  ParamStore store;
  store.add("p", {2}, {1.0, -2.0});
  AdamConfig cfg;
  cfg.lr = 0.01;
  std::map<std::string, ad::Tensor> grads;
  grads.emplace("p", ad::Tensor({2}, {0.5, -0.25}));
  adam_step(store, grads, cfg);
  // After one step m-hat = g, v-hat = g^2, so the update is lr*g/(|g|+eps).
  EXPECT_NEAR((*store.at("p").value)[0], 1.0 - 0.01 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR((*store.at("p").value)[1], -2.0 + 0.01 * 0.25 / (0.25 + 1e-8), 1e-15);
  EXPECT_EQ(store.at("p").step, 1u);
}

TEST(Nn, AdamMatchesManualRecurrenceOverSteps) {
  ParamStore store;
  store.add("p", {1}, {0.3});
  AdamConfig cfg;
  cfg.lr = 0.05;
  double p = 0.3, m = 0, v = 0;
  std::vector<double> gs = {0.2, -0.7, 0.1, 0.0, 1.5};
  for (std::size_t t = 1; t <= gs.size(); ++t) {
    double gval = gs[t - 1];
    std::map<std::string, ad::Tensor> grads;
    grads.emplace("p", ad::Tensor({1}, {gval}));
    adam_step(store, grads, cfg);
    m = cfg.beta1 * m + (1 - cfg.beta1) * gval;
    v = cfg.beta2 * v + (1 - cfg.beta2) * gval * gval;
    double mh = m / (1 - std::pow(cfg.beta1, static_cast<double>(t)));
    double vh = v / (1 - std::pow(cfg.beta2, static_cast<double>(t)));
    p -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    EXPECT_NEAR((*store.at("p").value)[0], p, 1e-14) << "step " << t;
  }
}

TEST(Nn, AdamZeroGradAndZeroLrLeaveValueFixed) {
  ParamStore store;
  store.add("p", {1}, {0.42});
  AdamConfig cfg;
  std::map<std::string, ad::Tensor> zero;
  zero.emplace("p", ad::Tensor({1}, {0.0}));
  adam_step(store, zero, cfg);
  EXPECT_DOUBLE_EQ((*store.at("p").value)[0], 0.42);

  cfg.lr = 0.0;
  std::map<std::string, ad::Tensor> g;
  g.emplace("p", ad::Tensor({1}, {3.0}));
  adam_step(store, g, cfg);
  EXPECT_DOUBLE_EQ((*store.at("p").value)[0], 0.42);
  EXPECT_EQ(store.at("p").step, 2u);
}

TEST(Nn, AdamNonFiniteGradAbortsWithoutTouchingAnything) {
  ParamStore store;
  store.add("a", {1}, {1.0});
  store.add("b", {1}, {2.0});
  AdamConfig cfg;
  std::map<std::string, ad::Tensor> grads;
  grads.emplace("a", ad::Tensor({1}, {0.5}));
  grads.emplace("b", ad::Tensor({1}, {std::nan("")}));
  EXPECT_THROW(adam_step(store, grads, cfg), std::runtime_error);
  EXPECT_DOUBLE_EQ((*store.at("a").value)[0], 1.0);
  EXPECT_DOUBLE_EQ((*store.at("b").value)[0], 2.0);
  EXPECT_EQ(store.at("a").step, 0u);
  EXPECT_EQ(store.at("b").step, 0u);
  // the error names the offending parameter
  try {
    adam_step(store, grads, cfg);
    FAIL() << "expected throw";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
  }
}

TEST(Nn, AdamReplayIsBitIdentical) {
  auto run = [] {
    ParamStore store;
    Rng rng(7);
    MlpSpec spec;
    spec.widths = {3, 4, 2};
    init_mlp(store, spec, "m", rng);
    AdamConfig cfg;
    cfg.lr = 0.003;
    Rng grng(8);
    for (int it = 0; it < 5; ++it) {
      std::map<std::string, ad::Tensor> grads;
      for (auto& [name, p] : store.entries()) {
        std::vector<double> g(p.value->size());
        for (auto& v : g) v = grng.normal();
        grads.emplace(name, ad::Tensor(p.shape, std::move(g)));
      }
      adam_step(store, grads, cfg);
    }
    return *store.at("m.fc0.w").value;
  };
  auto v1 = run();
  auto v2 = run();
  ASSERT_EQ(v1.size(), v2.size());
  for (std::size_t i = 0; i < v1.size(); ++i) EXPECT_EQ(v1[i], v2[i]);
}

TEST(Nn, MlpGradientsPassCentralDifferenceCheck) {
  ParamStore store;
  Rng rng(55);
  MlpSpec spec;
  spec.widths = {3, 6, 4, 1};
  spec.hidden = Act::tanh;  // smooth everywhere: safe for finite differences
  init_mlp(store, spec, "m", rng);
  std::vector<double> xs(5 * 3);
  for (auto& v : xs) v = rng.uniform(-1, 1);
  auto loss_fn = [&spec, &xs](Ctx& ctx) {
    Tensor out = mlp_forward(ctx, spec, "m", Tensor({5, 3}, xs));
    return ctx.g.mean_all(ctx.g.mul(out, out));
  };
  auto rep = grad_check_params(store, loss_fn, 1e-5);
  EXPECT_LT(rep.max_rel_err, 1e-6) << "worst at " << rep.worst_param;
}

TEST(Nn, CtxMemoizesParameterLeaves) {
  ParamStore store;
  store.add("w", {2, 1}, {1.0, 2.0});
  Graph g;
  Ctx ctx{g, store, {}};
  Tensor x1 = Tensor({1, 2}, {1.0, 0.0});
  Tensor x2 = Tensor({1, 2}, {0.0, 1.0});
  Tensor w_first = ctx.p("w");
  Tensor loss = g.add(g.sum_all(g.matmul(x1, ctx.p("w"))), g.sum_all(g.matmul(x2, ctx.p("w"))));
  EXPECT_EQ(ctx.bound.size(), 1u);
  auto named = ctx.named_grads(g.backward(loss));
  ASSERT_TRUE(named.count("w"));
  EXPECT_DOUBLE_EQ(named.at("w").data()[0], 1.0);
  EXPECT_DOUBLE_EQ(named.at("w").data()[1], 1.0);
  EXPECT_EQ(w_first.node(), ctx.p("w").node());
}

TEST(Nn, AccumulateGradsAveragesInOrder) {
  std::map<std::string, std::vector<double>> acc;
  std::map<std::string, ad::Tensor> g1, g2;
  g1.emplace("w", ad::Tensor({2}, {2.0, 4.0}));
  g2.emplace("w", ad::Tensor({2}, {6.0, 8.0}));
  accumulate_grads(acc, g1, 0.5);
  accumulate_grads(acc, g2, 0.5);
  EXPECT_DOUBLE_EQ(acc.at("w")[0], 4.0);
  EXPECT_DOUBLE_EQ(acc.at("w")[1], 6.0);
}
