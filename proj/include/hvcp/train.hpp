#pragma once

// Training loop for the completion model: ELBO assembly with an annealed KL
// weight, deterministic batching, CSV logging, and bit-exact checkpointing
// (parameters plus optimizer state) with exact resume.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "hvcp/io.hpp"
#include "hvcp/model.hpp"
#include "hvcp/shapes.hpp"

namespace hvcp::train {

// Thrown when the loss turns NaN/inf mid-run; distinct from generic failures
// so callers can map it to a dedicated process exit code.
struct NonFiniteLossError : std::runtime_error {
  explicit NonFiniteLossError(const std::string& msg) : std::runtime_error(msg) {}
};

// Which cloud conditions the chain: the partial view (completion training)
// or the complete cloud itself (auto-encoding).
enum class Condition { partial, complete };

inline const char* condition_name(Condition c) {
  return c == Condition::partial ? "partial" : "complete";
}

inline Condition parse_condition(const std::string& s) {
  if (s == "partial") return Condition::partial;
  if (s == "complete") return Condition::complete;
  fail("train config: unknown condition '" + s + "' (want partial|complete)");
}

struct TrainConfig {
  // model
  std::size_t resolution = 32;  // top-level volume side; must be n1 * 2^(levels-1)
  std::size_t channels = 32;    // d, feature/conditioner channels
  std::size_t rank = 8;         // R of the factor decomposition
  std::size_t levels = 4;       // stochastic layers in the hierarchy
  std::size_t d_z = 16;         // latent width per cell
  std::size_t global_len = 128; // n, global code length
  std::size_t trunk_hidden = 64;
  std::size_t head_hidden = 64;
  std::size_t point_hidden = 64;
  std::size_t global_feat = 128;
  std::size_t dec_hidden = 128;
  bool share_axis_weights = false;
  bool scatter_mean = false;
  vae::Variant variant = vae::Variant::hierarchical;
  Condition condition = Condition::partial;
  // optimization
  std::size_t batch = 4;
  std::size_t iterations = 10000;
  std::size_t warmup = 10000;  // iterations over which the KL weight ramps up
  double lr = 1e-4;
  double lambda_max = 0.1;
  std::size_t queries = 256;  // query points drawn per item per iteration
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 1000;
  // paths (empty disables the corresponding file output)
  std::string data;        // dataset directory
  std::string checkpoint;  // checkpoint file
  std::string log;         // CSV training log
};

inline void validate_train_config(const TrainConfig& c) {
  check(c.levels >= 1, "train config: levels must be >= 1");
  std::size_t shift = c.levels - 1;
  check(shift < 32, "train config: levels is implausibly large");
  std::size_t n1 = c.resolution >> shift;
  check(n1 >= 1 && (n1 << shift) == c.resolution,
        "train config: resolution must be n1 * 2^(levels-1) for integer n1 >= 1");
  check(c.channels >= 1 && c.rank >= 1 && c.d_z >= 1 && c.global_len >= 1,
        "train config: model widths must be >= 1");
  check(c.trunk_hidden >= 1 && c.head_hidden >= 1 && c.point_hidden >= 1 &&
            c.global_feat >= 1 && c.dec_hidden >= 1,
        "train config: hidden widths must be >= 1");
  check(c.batch >= 1, "train config: batch must be >= 1");
  check(c.iterations >= 1, "train config: iterations must be >= 1");
  check(c.warmup >= 1, "train config: warmup must be >= 1");
  check(c.warmup <= c.iterations, "train config: warmup must not exceed iterations");
  check(c.lr > 0.0, "train config: lr must be positive");
  check(c.lambda_max >= 0.0, "train config: lambda_max must be >= 0");
  check(c.queries >= 1, "train config: queries must be >= 1");
  check(c.checkpoint_every >= 1, "train config: checkpoint_every must be >= 1");
}

inline model::ModelConfig model_config(const TrainConfig& t) {
  validate_train_config(t);
  model::ModelConfig m;
  m.vae.levels = t.levels;
  m.vae.n1 = t.resolution >> (t.levels - 1);
  m.vae.d_z = t.d_z;
  m.vae.trunk_hidden = t.trunk_hidden;
  m.vae.head_hidden = t.head_hidden;
  m.vae.rank = t.rank;
  m.vae.channels = t.channels;
  m.vae.global_len = t.global_len;
  m.vae.share_axis_weights = t.share_axis_weights;
  m.variant = t.variant;
  m.enc.point_hidden = t.point_hidden;
  m.enc.global_feat = t.global_feat;
  m.enc.scatter_mean = t.scatter_mean;
  m.dec_hidden = t.dec_hidden;
  model::tie_widths(m);
  return m;
}

// ---- key=value round trip ----------------------------------------------------

namespace detail {

struct KvEntry {
  std::string key, value;
  std::size_t line = 0;
};

// Same surface syntax as the dataset manifest: key=value lines, '#' comments,
// surrounding whitespace ignored.
inline std::vector<KvEntry> scan_kv(const std::string& text, const std::string& what) {
  std::vector<KvEntry> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::size_t h = line.find('#');
    if (h != std::string::npos) line = line.substr(0, h);
    bool blank = true;
    for (char c : line)
      if (!std::isspace(static_cast<unsigned char>(c))) blank = false;
    if (blank) continue;
    std::size_t eq = line.find('=');
    check(eq != std::string::npos,
          what + ": line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
    auto trim = [](std::string v) {
      std::size_t b = v.find_first_not_of(" \t");
      std::size_t e = v.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : v.substr(b, e - b + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    check(!key.empty() && !val.empty(),
          what + ": empty key or value at line " + std::to_string(lineno));
    out.push_back({key, val, lineno});
  }
  return out;
}

inline std::uint64_t kv_u64(const KvEntry& e, const std::string& what) {
  try {
    std::size_t used = 0;
    std::uint64_t v = std::stoull(e.value, &used);
    check(used == e.value.size(), "");
    return v;
  } catch (...) {
    fail(what + ": '" + e.key + "' wants a non-negative integer, got '" + e.value + "'");
  }
}

inline double kv_f64(const KvEntry& e, const std::string& what) {
  try {
    std::size_t used = 0;
    double v = std::stod(e.value, &used);
    check(used == e.value.size(), "");
    return v;
  } catch (...) {
    fail(what + ": '" + e.key + "' wants a number, got '" + e.value + "'");
  }
}

inline bool kv_bool(const KvEntry& e, const std::string& what) {
  if (e.value == "true") return true;
  if (e.value == "false") return false;
  fail(what + ": '" + e.key + "' wants true|false, got '" + e.value + "'");
}

}  // namespace detail

// Applies one key to the config; returns false for keys it does not know so
// wrapping configs can layer their own keys on top.
inline bool apply_train_key(TrainConfig& c, const detail::KvEntry& e) {
  const std::string what = "train config";
  using detail::kv_bool;
  using detail::kv_f64;
  using detail::kv_u64;
  if (e.key == "resolution") c.resolution = kv_u64(e, what);
  else if (e.key == "channels") c.channels = kv_u64(e, what);
  else if (e.key == "rank") c.rank = kv_u64(e, what);
  else if (e.key == "levels") c.levels = kv_u64(e, what);
  else if (e.key == "d_z") c.d_z = kv_u64(e, what);
  else if (e.key == "global_len") c.global_len = kv_u64(e, what);
  else if (e.key == "trunk_hidden") c.trunk_hidden = kv_u64(e, what);
  else if (e.key == "head_hidden") c.head_hidden = kv_u64(e, what);
  else if (e.key == "point_hidden") c.point_hidden = kv_u64(e, what);
  else if (e.key == "global_feat") c.global_feat = kv_u64(e, what);
  else if (e.key == "dec_hidden") c.dec_hidden = kv_u64(e, what);
  else if (e.key == "share_axis_weights") c.share_axis_weights = kv_bool(e, what);
  else if (e.key == "scatter_mean") c.scatter_mean = kv_bool(e, what);
  else if (e.key == "variant") c.variant = vae::parse_variant(e.value);
  else if (e.key == "condition") c.condition = parse_condition(e.value);
  else if (e.key == "batch") c.batch = kv_u64(e, what);
  else if (e.key == "iterations") c.iterations = kv_u64(e, what);
  else if (e.key == "warmup") c.warmup = kv_u64(e, what);
  else if (e.key == "lr") c.lr = kv_f64(e, what);
  else if (e.key == "lambda_max") c.lambda_max = kv_f64(e, what);
  else if (e.key == "queries") c.queries = kv_u64(e, what);
  else if (e.key == "seed") c.seed = kv_u64(e, what);
  else if (e.key == "checkpoint_every") c.checkpoint_every = kv_u64(e, what);
  else if (e.key == "data") c.data = e.value;
  else if (e.key == "checkpoint") c.checkpoint = e.value;
  else if (e.key == "log") c.log = e.value;
  else return false;
  return true;
}

inline TrainConfig parse_train_config(const std::string& text) {
  TrainConfig c;
  std::vector<std::string> seen;
  for (const auto& e : detail::scan_kv(text, "train config")) {
    for (const auto& k : seen)
      check(k != e.key, "train config: duplicate key '" + e.key + "'");
    seen.push_back(e.key);
    check(apply_train_key(c, e), "train config: unknown key '" + e.key + "'");
  }
  validate_train_config(c);
  return c;
}

inline std::string serialize_train_config(const TrainConfig& c) {
  std::ostringstream os;
  os << "resolution=" << c.resolution << "\n";
  os << "channels=" << c.channels << "\n";
  os << "rank=" << c.rank << "\n";
  os << "levels=" << c.levels << "\n";
  os << "d_z=" << c.d_z << "\n";
  os << "global_len=" << c.global_len << "\n";
  os << "trunk_hidden=" << c.trunk_hidden << "\n";
  os << "head_hidden=" << c.head_hidden << "\n";
  os << "point_hidden=" << c.point_hidden << "\n";
  os << "global_feat=" << c.global_feat << "\n";
  os << "dec_hidden=" << c.dec_hidden << "\n";
  os << "share_axis_weights=" << (c.share_axis_weights ? "true" : "false") << "\n";
  os << "scatter_mean=" << (c.scatter_mean ? "true" : "false") << "\n";
  os << "variant=" << vae::variant_name(c.variant) << "\n";
  os << "condition=" << condition_name(c.condition) << "\n";
  os << "batch=" << c.batch << "\n";
  os << "iterations=" << c.iterations << "\n";
  os << "warmup=" << c.warmup << "\n";
  os << "lr=" << fmt_g17(c.lr) << "\n";
  os << "lambda_max=" << fmt_g17(c.lambda_max) << "\n";
  os << "queries=" << c.queries << "\n";
  os << "seed=" << c.seed << "\n";
  os << "checkpoint_every=" << c.checkpoint_every << "\n";
  if (!c.data.empty()) os << "data=" << c.data << "\n";
  if (!c.checkpoint.empty()) os << "checkpoint=" << c.checkpoint << "\n";
  if (!c.log.empty()) os << "log=" << c.log << "\n";
  return os.str();
}

// ---- ELBO ---------------------------------------------------------------------

// KL weight ramp: 0 at step 0, linear up to lambda_max at step == warmup.
inline double anneal(std::uint64_t step, const TrainConfig& c) {
  double frac = static_cast<double>(step) / static_cast<double>(c.warmup);
  return c.lambda_max * std::min(1.0, frac);
}

struct BatchItem {
  const data::DatasetItem* item = nullptr;
  std::vector<std::size_t> query_sel;  // indices into item->queries
};

inline ad::Tensor batch_queries(const data::DatasetItem& it,
                                const std::vector<std::size_t>& sel) {
  std::vector<double> q;
  q.reserve(sel.size() * 3);
  for (std::size_t i : sel) {
    check(i < it.queries.size(), "train: query index out of range");
    const Vec3& p = it.queries[i];
    q.insert(q.end(), {p.x, p.y, p.z});
  }
  return ad::Tensor(Shape{sel.size(), 3}, std::move(q));
}

inline ad::Tensor batch_labels(const data::DatasetItem& it,
                               const std::vector<std::size_t>& sel) {
  std::vector<double> o;
  o.reserve(sel.size());
  for (std::size_t i : sel) o.push_back(it.query_occ[i]);
  return ad::Tensor(Shape{sel.size()}, std::move(o));
}

struct ElboParts {
  ad::Tensor loss;    // recon + lambda * kl, scalar
  double recon = 0;   // mean clamped binary cross-entropy over the batch
  double kl = 0;      // mean KL per latent dimension over the batch
  double lambda = 0;  // weight the loss used
};

// Posterior-sampled ELBO over a batch: reconstruction is the mean BCE across
// items, the KL term is normalized per latent dimension so the weight is
// comparable across variants and hierarchy sizes.
inline ElboParts elbo_loss(nn::Ctx& ctx, const model::ModelConfig& mcfg, Condition cond,
                           const std::vector<BatchItem>& batch, double lambda, Rng& rng) {
  check(!batch.empty(), "elbo_loss: empty batch");
  ad::Graph& g = ctx.g;
  ad::Tensor recon_sum = ad::Tensor::scalar(0.0);
  ad::Tensor kl_sum = ad::Tensor::scalar(0.0);
  for (const BatchItem& b : batch) {
    check(b.item != nullptr && !b.query_sel.empty(), "elbo_loss: malformed batch item");
    const PointCloud& x =
        cond == Condition::partial ? b.item->partial : b.item->complete;
    ad::Tensor q = batch_queries(*b.item, b.query_sel);
    ad::Tensor labels = batch_labels(*b.item, b.query_sel);
    model::Forward fwd = model::forward_queries(ctx, mcfg, x, &b.item->complete, q, rng,
                                                vae::Mode::posterior);
    recon_sum = g.add(recon_sum, dec::binary_cross_entropy(g, fwd.probs, labels));
    kl_sum = g.add(kl_sum, fwd.kl);
  }
  double inv_b = 1.0 / static_cast<double>(batch.size());
  ad::Tensor recon = g.scale(recon_sum, inv_b);
  ad::Tensor kl_norm =
      g.scale(kl_sum, inv_b / static_cast<double>(model::latent_dims(mcfg)));
  ElboParts parts;
  parts.loss = g.add(recon, g.scale(kl_norm, lambda));
  parts.recon = recon.value();
  parts.kl = kl_norm.value();
  parts.lambda = lambda;
  return parts;
}

// ---- checkpoints ----------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'H', 'V', 'C', 'P'};
inline constexpr char kOptimizerMagic[4] = {'O', 'P', 'T', '0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nn::ParamStore params;
  std::string config_text;
  std::uint64_t completed_iters = 0;
};

inline void save_checkpoint(const std::filesystem::path& path, const nn::ParamStore& store,
                            const std::string& config_text,
                            std::uint64_t completed_iters) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw io::IoError("checkpoint: cannot create " + path.string());
  io::write_bytes(os, kCheckpointMagic, 4);
  io::write_u32(os, kCheckpointVersion);
  io::write_string(os, config_text);
  io::write_u64(os, store.size());
  for (const auto& [name, p] : store.entries()) {
    io::write_string(os, name);
    io::write_u32(os, static_cast<std::uint32_t>(p.shape.size()));
    for (std::size_t e : p.shape) io::write_u64(os, e);
    if (!p.value->empty())
      io::write_bytes(os, p.value->data(), p.value->size() * sizeof(double));
  }
  io::write_bytes(os, kOptimizerMagic, 4);
  io::write_u64(os, completed_iters);
  for (const auto& [name, p] : store.entries()) {
    (void)name;
    io::write_u64(os, p.step);
    if (!p.m.empty()) io::write_bytes(os, p.m.data(), p.m.size() * sizeof(double));
    if (!p.v.empty()) io::write_bytes(os, p.v.data(), p.v.size() * sizeof(double));
  }
  if (!os.flush()) throw io::IoError("checkpoint: write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io::IoError("checkpoint: cannot open " + path.string());
  char magic[4];
  io::read_bytes(is, magic, 4, "checkpoint magic");
  check(std::memcmp(magic, kCheckpointMagic, 4) == 0,
        "checkpoint: bad magic; not a checkpoint file");
  std::uint32_t version = io::read_u32(is, "checkpoint version");
  check(version == kCheckpointVersion,
        "checkpoint: unsupported format version " + std::to_string(version));
  Checkpoint ck;
  ck.config_text = io::read_string(is, "checkpoint config");
  std::uint64_t count = io::read_u64(is, "checkpoint parameter count");
  check(count <= (1ull << 20), "checkpoint: implausible parameter count");
  std::vector<std::string> order;
  order.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = io::read_string(is, "checkpoint parameter name");
    std::uint32_t rank = io::read_u32(is, "checkpoint parameter rank");
    check(rank <= 8, "checkpoint: implausible parameter rank");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
      e = io::read_u64(is, "checkpoint parameter extent");
      check(e > 0 && e <= (1ull << 32), "checkpoint: implausible extent");
      n *= e;
    }
    check(n <= (1ull << 30), "checkpoint: implausible parameter size");
    std::vector<double> vals(n);
    if (n) io::read_bytes(is, vals.data(), n * sizeof(double), "checkpoint parameter data");
    ck.params.add(name, std::move(shape), std::move(vals));
    order.push_back(std::move(name));
  }
  char opt[4];
  io::read_bytes(is, opt, 4, "checkpoint optimizer marker");
  check(std::memcmp(opt, kOptimizerMagic, 4) == 0,
        "checkpoint: bad optimizer-state marker");
  ck.completed_iters = io::read_u64(is, "checkpoint iteration count");
  for (const std::string& name : order) {
    nn::Param& p = ck.params.at(name);
    p.step = io::read_u64(is, "checkpoint optimizer step");
    std::size_t n = p.value->size();
    if (n) {
      io::read_bytes(is, p.m.data(), n * sizeof(double), "checkpoint optimizer m");
      io::read_bytes(is, p.v.data(), n * sizeof(double), "checkpoint optimizer v");
    }
  }
  is.peek();
  check(is.eof(), "checkpoint: trailing bytes after optimizer state");
  return ck;
}

// ---- loop -----------------------------------------------------------------------

namespace detail {

inline nn::ParamStore clone_params(const nn::ParamStore& src) {
  nn::ParamStore out;
  for (const auto& [name, p] : src.entries()) {
    out.add(name, p.shape, *p.value);
    nn::Param& q = out.at(name);
    q.m = p.m;
    q.v = p.v;
    q.step = p.step;
  }
  return out;
}

inline constexpr std::uint64_t kTagInit = 0x696e6974;  // stream tag: model init
inline constexpr std::uint64_t kTagIter = 0x69746572;  // stream tag: per-iteration

}  // namespace detail

struct TrainResult {
  nn::ParamStore params;
  std::string csv;  // header plus one row per iteration executed by this call
  double final_loss = 0.0;
  std::uint64_t iterations_run = 0;
};

// Runs (or resumes) the optimization. Deterministic: iteration t draws its
// batch, query subsets, and latent noise from an Rng seeded by (seed, t)
// alone, so a resumed run retraces exactly the iterations it continues.
inline TrainResult train_loop(const TrainConfig& cfg,
                              const std::vector<data::DatasetItem>& items,
                              const Checkpoint* resume = nullptr) {
  validate_train_config(cfg);
  check(!items.empty(), "train: dataset is empty");
  model::ModelConfig mcfg = model_config(cfg);

  TrainResult res;
  std::uint64_t start = 0;
  if (resume != nullptr) {
    check(resume->completed_iters <= cfg.iterations,
          "train: checkpoint already past the requested iteration count");
    res.params = detail::clone_params(resume->params);
    start = resume->completed_iters;
  } else {
    Rng init_rng(mix64(cfg.seed, detail::kTagInit));
    model::init_model(res.params, mcfg, init_rng);
  }

  nn::AdamConfig adam;
  adam.lr = cfg.lr;
  std::string config_text = serialize_train_config(cfg);
  std::ostringstream csv;
  csv << "iter,loss,recon,kl,lambda\n";

  for (std::uint64_t it = start + 1; it <= cfg.iterations; ++it) {
    Rng rng(mix64(cfg.seed, detail::kTagIter, it));
    std::vector<BatchItem> batch(cfg.batch);
    for (auto& b : batch) {
      b.item = &items[rng.below(items.size())];
      check(cfg.queries <= b.item->queries.size(),
            "train: queries exceeds the stored query count of an item");
      b.query_sel = rng.sample_indices(b.item->queries.size(), cfg.queries);
    }

    ad::Graph g;
    nn::Ctx ctx{g, res.params, {}};
    double lambda = anneal(it, cfg);
    ElboParts parts = elbo_loss(ctx, mcfg, cfg.condition, batch, lambda, rng);
    double loss_v = parts.loss.value();
    if (!std::isfinite(loss_v))
      throw NonFiniteLossError("train: non-finite loss at iteration " + std::to_string(it));
    ad::GradMap grads = g.backward(parts.loss);
    nn::adam_step(res.params, ctx.named_grads(grads), adam);

    csv << it << ',' << fmt_g17(loss_v) << ',' << fmt_g17(parts.recon) << ','
        << fmt_g17(parts.kl) << ',' << fmt_g17(lambda) << '\n';
    res.final_loss = loss_v;
    ++res.iterations_run;

    if (!cfg.checkpoint.empty() &&
        (it % cfg.checkpoint_every == 0 || it == cfg.iterations))
      save_checkpoint(cfg.checkpoint, res.params, config_text, it);
  }

  res.csv = csv.str();
  if (!cfg.log.empty()) io::write_text_file(cfg.log, res.csv);
  return res;
}

}  // namespace hvcp::train
