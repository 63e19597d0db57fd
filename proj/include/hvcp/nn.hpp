#pragma once

// Parameter store, MLP construction/forward, Glorot initialization, and a
// per-parameter Adam step. Parameters live outside any graph; each forward
// pass binds them as leaves through a Ctx so gradients can be collected by
// name. Iteration order everywhere follows std::map's key order, which makes
// training byte-reproducible.

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "hvcp/autodiff.hpp"
#include "hvcp/core.hpp"
#include "hvcp/rng.hpp"

namespace hvcp::nn {

struct Param {
  Shape shape;
  std::shared_ptr<std::vector<double>> value;
  // Adam state.
  std::vector<double> m, v;
  std::uint64_t step = 0;
};

class ParamStore {
 public:
  void add(const std::string& name, Shape shape, std::vector<double> init) {
    check(!params_.count(name), "param store: duplicate parameter '" + name + "'");
    check(numel(shape) == init.size(), "param store: init size mismatch for '" + name + "'");
    Param p;
    p.shape = std::move(shape);
    p.value = std::make_shared<std::vector<double>>(std::move(init));
    p.m.assign(p.value->size(), 0.0);
    p.v.assign(p.value->size(), 0.0);
    params_.emplace(name, std::move(p));
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Param& at(const std::string& name) {
    auto it = params_.find(name);
    check(it != params_.end(), "param store: unknown parameter '" + name + "'");
    return it->second;
  }
  const Param& at(const std::string& name) const {
    auto it = params_.find(name);
    check(it != params_.end(), "param store: unknown parameter '" + name + "'");
    return it->second;
  }

  std::map<std::string, Param>& entries() { return params_; }
  const std::map<std::string, Param>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }

 private:
  std::map<std::string, Param> params_;
};

// Per-forward binding of parameters into a graph. Binding is memoized so a
// parameter used twice contributes one leaf (gradients accumulate on it).
struct Ctx {
  ad::Graph& g;
  const ParamStore& params;

  ad::Tensor p(const std::string& name) {
    auto it = bound.find(name);
    if (it != bound.end()) return it->second;
    const Param& pr = params.at(name);
    ad::Tensor leaf = g.leaf(ad::Tensor(pr.shape, pr.value), true);
    bound.emplace(name, leaf);
    return leaf;
  }

  // name -> gradient, for every bound parameter present in the grad map.
  std::map<std::string, ad::Tensor> named_grads(const ad::GradMap& grads) const {
    std::map<std::string, ad::Tensor> out;
    for (const auto& [name, leaf] : bound) {
      auto it = grads.find(leaf.node());
      if (it != grads.end()) out.emplace(name, it->second);
    }
    return out;
  }

  std::map<std::string, ad::Tensor> bound;
};

enum class Act { identity, relu, tanh, softplus, logistic };

inline ad::Tensor apply_act(ad::Graph& g, const ad::Tensor& x, Act a) {
  switch (a) {
    case Act::identity:
      return x;
    case Act::relu:
      return g.relu(x);
    case Act::tanh:
      return g.tanh_fn(x);
    case Act::softplus:
      return g.softplus(x);
    case Act::logistic:
      return g.logistic(x);
  }
  fail("apply_act: bad activation");
}

// widths = {in, h1, ..., out}; layer i maps widths[i] -> widths[i+1].
struct MlpSpec {
  std::vector<std::size_t> widths;
  Act hidden = Act::relu;
  Act output = Act::identity;
};

inline std::vector<double> glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> w(fan_in * fan_out);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  return w;
}

inline std::string layer_name(const std::string& prefix, std::size_t i, const char* leaf) {
  return prefix + ".fc" + std::to_string(i) + "." + leaf;
}

// Creates weight/bias entries for every layer of spec under prefix.
inline void init_mlp(ParamStore& store, const MlpSpec& spec, const std::string& prefix,
                     Rng& rng) {
  check(spec.widths.size() >= 2, "init_mlp: need at least in/out widths for '" + prefix + "'");
  for (std::size_t i = 0; i + 1 < spec.widths.size(); ++i) {
    std::size_t fin = spec.widths[i], fout = spec.widths[i + 1];
    store.add(layer_name(prefix, i, "w"), Shape{fin, fout}, glorot_uniform(fin, fout, rng));
    store.add(layer_name(prefix, i, "b"), Shape{fout}, std::vector<double>(fout, 0.0));
  }
}

// x is (B, in); result (B, out).
inline ad::Tensor mlp_forward(Ctx& ctx, const MlpSpec& spec, const std::string& prefix,
                              ad::Tensor x) {
  check(x.shape().size() == 2, "mlp_forward: input must be rank 2, got " +
                                   shape_str(x.shape()));
  check(x.shape()[1] == spec.widths.front(),
        "mlp_forward: input width " + std::to_string(x.shape()[1]) + " != spec width " +
            std::to_string(spec.widths.front()) + " for '" + prefix + "'");
  for (std::size_t i = 0; i + 1 < spec.widths.size(); ++i) {
    x = ctx.g.add(ctx.g.matmul(x, ctx.p(layer_name(prefix, i, "w"))),
                  ctx.p(layer_name(prefix, i, "b")));
    bool last = (i + 2 == spec.widths.size());
    x = apply_act(ctx.g, x, last ? spec.output : spec.hidden);
  }
  return x;
}

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Applies one bias-corrected Adam update per named gradient. Any non-finite
// gradient entry aborts before any parameter is touched.
inline void adam_step(ParamStore& store, const std::map<std::string, ad::Tensor>& grads,
                      const AdamConfig& cfg) {
  for (const auto& [name, g] : grads) {
    const Param& p = store.at(name);
    check(p.shape == g.shape(), "adam: gradient shape mismatch for '" + name + "'");
    for (double v : g.data())
      check(std::isfinite(v), "adam: non-finite gradient for parameter '" + name + "'");
  }
  for (const auto& [name, g] : grads) {
    Param& p = store.at(name);
    p.step += 1;
    double t = static_cast<double>(p.step);
    double c1 = 1.0 - std::pow(cfg.beta1, t);
    double c2 = 1.0 - std::pow(cfg.beta2, t);
    const auto& gd = g.data();
    auto& val = *p.value;
    for (std::size_t i = 0; i < gd.size(); ++i) {
      p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * gd[i];
      p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
      double mhat = p.m[i] / c1;
      double vhat = p.v[i] / c2;
      val[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// Central-difference check of d(loss)/d(param) for every entry of every
// parameter in the store. fn must rebuild the loss from a fresh Ctx so the
// probes see the perturbed values. Reports the worst relative error
// |analytic-numeric| / max(1e-8, |analytic|+|numeric|) and where it occurred.
struct StoreGradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_entry = 0;
};

inline StoreGradCheckReport grad_check_params(ParamStore& store,
                                              const std::function<ad::Tensor(Ctx&)>& fn,
                                              double eps = 1e-5) {
  check(eps > 0, "grad_check_params: eps must be positive");
  std::map<std::string, ad::Tensor> analytic;
  {
    ad::Graph g;
    Ctx ctx{g, store, {}};
    ad::Tensor loss = fn(ctx);
    check(loss.size() == 1, "grad_check_params: loss must be scalar");
    check(std::isfinite(loss.value()), "grad_check_params: non-finite loss");
    analytic = ctx.named_grads(g.backward(loss));
  }
  auto probe = [&store, &fn]() {
    ad::Graph g;
    g.set_grad_enabled(false);
    Ctx ctx{g, store, {}};
    double v = fn(ctx).value();
    check(std::isfinite(v), "grad_check_params: non-finite loss at probe");
    return v;
  };
  StoreGradCheckReport rep;
  for (auto& [name, param] : store.entries()) {
    const std::vector<double>* ga = nullptr;
    auto it = analytic.find(name);
    if (it != analytic.end()) ga = &it->second.data();
    auto& val = *param.value;
    for (std::size_t e = 0; e < val.size(); ++e) {
      double keep = val[e];
      val[e] = keep + eps;
      double fp = probe();
      val[e] = keep - eps;
      double fm = probe();
      val[e] = keep;
      double numeric = (fp - fm) / (2.0 * eps);
      double a = ga ? (*ga)[e] : 0.0;
      double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst_param = name;
        rep.worst_entry = e;
      }
    }
  }
  return rep;
}

inline void adam_step(ParamStore& store, const std::map<std::string, std::vector<double>>& grads,
                      const AdamConfig& cfg) {
  std::map<std::string, ad::Tensor> wrapped;
  for (const auto& [name, g] : grads)
    wrapped.emplace(name, ad::Tensor(store.at(name).shape, g));
  adam_step(store, wrapped, cfg);
}

// Elementwise sum of named gradient sets, scaled; used to average per-item
// gradients in a fixed order before the optimizer step.
inline void accumulate_grads(std::map<std::string, std::vector<double>>& acc,
                             const std::map<std::string, ad::Tensor>& grads, double scale) {
  for (const auto& [name, g] : grads) {
    auto& slot = acc[name];
    const auto& gd = g.data();
    if (slot.empty()) slot.assign(gd.size(), 0.0);
    check(slot.size() == gd.size(), "accumulate_grads: size mismatch for '" + name + "'");
    for (std::size_t i = 0; i < gd.size(); ++i) slot[i] += gd[i] * scale;
  }
}

}  // namespace hvcp::nn
