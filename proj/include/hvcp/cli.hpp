#pragma once

// Command-line surface behind the hvcp binary: a flat key=value config that
// layers extraction and metric options over the training config, plus the
// subcommand implementations (make-data, train, complete, reconstruct, eval,
// gradcheck) with one stable process exit code per failure class.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "hvcp/meshing.hpp"
#include "hvcp/metrics.hpp"
#include "hvcp/train.hpp"

namespace hvcp::cli {

// ---- exit codes -------------------------------------------------------------------

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;    // unexpected failure
inline constexpr int kExitUsage = 2;       // bad flags, config, manifest, or input data
inline constexpr int kExitIo = 3;          // unreadable or unwritable files
inline constexpr int kExitNonFinite = 4;   // training loss went NaN/inf
inline constexpr int kExitEmptyMesh = 5;   // extraction produced no surface
inline constexpr int kExitNoPosterior = 6; // checkpoint lacks posterior weights
inline constexpr int kExitGradCheck = 7;   // a gradient check exceeded tolerance

struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failure tied to a specific exit code (empty extraction, missing posterior,
// gradcheck mismatch).
struct ExitError : std::runtime_error {
  int code;
  ExitError(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

// ---- config ----------------------------------------------------------------------

// One flat key=value file: every training key plus the extraction and metric
// options below. Unknown keys are errors; parse(serialize(c)) == c.
struct CliConfig {
  train::TrainConfig train;
  double iso = 0.5;                  // isosurface level for mesh extraction
  std::size_t grid = 64;             // extraction lattice side
  std::size_t samples = 10;          // completions drawn per input
  double tau = 0.01;                 // f-score distance threshold
  std::size_t iou_samples = 100000;  // Monte Carlo samples per IoU estimate
  bool uhd_mean_min = false;         // average instead of max over per-sample minima
  bool tmd_sum_pairs = false;        // sum instead of mean over completion pairs
};

inline bool apply_cli_key(CliConfig& c, const train::detail::KvEntry& e) {
  const std::string what = "config";
  using train::detail::kv_bool;
  using train::detail::kv_f64;
  using train::detail::kv_u64;
  if (train::apply_train_key(c.train, e)) return true;
  if (e.key == "iso") c.iso = kv_f64(e, what);
  else if (e.key == "grid") c.grid = kv_u64(e, what);
  else if (e.key == "samples") c.samples = kv_u64(e, what);
  else if (e.key == "tau") c.tau = kv_f64(e, what);
  else if (e.key == "iou_samples") c.iou_samples = kv_u64(e, what);
  else if (e.key == "uhd_mean_min") c.uhd_mean_min = kv_bool(e, what);
  else if (e.key == "tmd_sum_pairs") c.tmd_sum_pairs = kv_bool(e, what);
  else return false;
  return true;
}

// Everything wrong with a config file is the caller's input, so it must
// surface as UsageError no matter which shared parser noticed first.
inline void validate_cli_config(const CliConfig& c) {
  auto ensure = [](bool ok, const std::string& msg) {
    if (!ok) throw UsageError(msg);
  };
  try {
    train::validate_train_config(c.train);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  ensure(c.iso > 0.0 && c.iso < 1.0, "config: iso must lie strictly inside (0,1)");
  ensure(c.grid >= 8, "config: grid must be >= 8");
  ensure(c.samples >= 1, "config: samples must be >= 1");
  ensure(c.tau > 0.0, "config: tau must be positive");
  ensure(c.iou_samples >= 1, "config: iou_samples must be >= 1");
}

inline CliConfig parse_cli_config(const std::string& text) {
  CliConfig c;
  std::vector<std::string> seen;
  try {
    for (const auto& e : train::detail::scan_kv(text, "config")) {
      for (const auto& k : seen)
        if (k == e.key) throw UsageError("config: duplicate key '" + e.key + "'");
      seen.push_back(e.key);
      if (!apply_cli_key(c, e)) throw UsageError("config: unknown key '" + e.key + "'");
    }
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  validate_cli_config(c);
  return c;
}

inline std::string serialize_cli_config(const CliConfig& c) {
  std::ostringstream os;
  os << train::serialize_train_config(c.train);
  os << "iso=" << fmt_g17(c.iso) << "\n";
  os << "grid=" << c.grid << "\n";
  os << "samples=" << c.samples << "\n";
  os << "tau=" << fmt_g17(c.tau) << "\n";
  os << "iou_samples=" << c.iou_samples << "\n";
  os << "uhd_mean_min=" << (c.uhd_mean_min ? "true" : "false") << "\n";
  os << "tmd_sum_pairs=" << (c.tmd_sum_pairs ? "true" : "false") << "\n";
  return os.str();
}

// ---- shared plumbing -------------------------------------------------------------

namespace detail {

struct FlagSpec {
  const char* name;
  bool takes_value;
};

using FlagMap = std::map<std::string, std::string>;

// '--name value' pairs plus bare boolean switches; anything else is a usage error.
inline FlagMap parse_flags(const std::vector<std::string>& args,
                           const std::vector<FlagSpec>& specs) {
  FlagMap out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    const FlagSpec* spec = nullptr;
    for (const auto& s : specs)
      if (a == std::string("--") + s.name) spec = &s;
    if (!spec) throw UsageError("unknown flag '" + a + "'");
    if (out.count(spec->name)) throw UsageError("duplicate flag '" + a + "'");
    if (spec->takes_value) {
      if (i + 1 >= args.size()) throw UsageError("flag '" + a + "' needs a value");
      out[spec->name] = args[++i];
    } else {
      out[spec->name] = "true";
    }
  }
  return out;
}

inline std::string need(const FlagMap& f, const std::string& name) {
  auto it = f.find(name);
  if (it == f.end()) throw UsageError("missing required flag '--" + name + "'");
  return it->second;
}

inline bool has(const FlagMap& f, const std::string& name) { return f.count(name) != 0; }

inline std::uint64_t flag_u64(const FlagMap& f, const std::string& name, std::uint64_t dflt) {
  auto it = f.find(name);
  if (it == f.end()) return dflt;
  try {
    std::size_t used = 0;
    std::uint64_t v = std::stoull(it->second, &used);
    check(used == it->second.size(), "");
    return v;
  } catch (...) {
    throw UsageError("flag '--" + name + "' wants a non-negative integer, got '" +
                     it->second + "'");
  }
}

inline double flag_f64(const FlagMap& f, const std::string& name, double dflt) {
  auto it = f.find(name);
  if (it == f.end()) return dflt;
  try {
    std::size_t used = 0;
    double v = std::stod(it->second, &used);
    check(used == it->second.size(), "");
    return v;
  } catch (...) {
    throw UsageError("flag '--" + name + "' wants a number, got '" + it->second + "'");
  }
}

// Remaps content-level failures (malformed config/manifest/cloud) to usage
// errors while letting genuine I/O failures keep their own exit code.
template <typename Fn>
auto as_usage(Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const io::IoError&) {
    throw;
  } catch (const UsageError&) {
    throw;
  } catch (const ExitError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

// Remaps corruption detected while decoding a binary file (bad magic,
// implausible sizes) to an I/O failure.
template <typename Fn>
auto as_io(Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const io::IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw io::IoError(e.what());
  }
}

inline void ensure_dir(const std::filesystem::path& p) {
  if (p.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw io::IoError("cannot create directory " + p.string() + ": " + ec.message());
}

}  // namespace detail

// HVCP_THREADS caps the worker threads used for grid inference; unset or 0
// means the machine's native parallelism.
inline std::size_t env_threads() {
  const char* e = std::getenv("HVCP_THREADS");
  if (!e || !*e) return 0;
  std::string s(e);
  try {
    std::size_t used = 0;
    std::uint64_t v = std::stoull(s, &used);
    check(used == s.size(), "");
    return static_cast<std::size_t>(v);
  } catch (...) {
    throw UsageError("HVCP_THREADS must be a non-negative integer, got '" + s + "'");
  }
}

struct LoadedModel {
  nn::ParamStore params;
  train::TrainConfig train;
  model::ModelConfig model;
  std::uint64_t completed_iters = 0;
};

inline LoadedModel load_model(const std::filesystem::path& path) {
  train::Checkpoint ck = detail::as_io([&] { return train::load_checkpoint(path); });
  LoadedModel lm;
  try {
    lm.train = train::parse_train_config(ck.config_text);
    lm.model = train::model_config(lm.train);
  } catch (const std::exception& e) {
    throw io::IoError("checkpoint: embedded config is invalid: " + std::string(e.what()));
  }
  lm.params = std::move(ck.params);
  lm.completed_iters = ck.completed_iters;
  return lm;
}

inline PointCloud read_input_cloud(const std::filesystem::path& path) {
  PointCloud pc = detail::as_usage([&] { return read_xyz(path); });
  detail::as_usage([&] {
    validate_cloud(pc);
    return 0;
  });
  return pc;
}

// Marching cubes plus vertex normals, failing with the dedicated exit code
// when the isosurface is empty.
inline mesh::TriMesh mesh_from_grid(const std::vector<double>& grid, std::size_t side,
                                    double iso, const std::string& who) {
  mesh::TriMesh m = mesh::marching_cubes(grid, side, iso);
  if (m.faces.empty())
    throw ExitError(kExitEmptyMesh,
                    who + ": extraction produced an empty surface at iso " + fmt_g17(iso) +
                        " (the model may be untrained or the isovalue badly placed)");
  return mesh::vertex_normals(m);
}

inline std::string sample_obj_name(std::size_t s) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%03llu.obj", static_cast<unsigned long long>(s));
  return buf;
}

// ---- subcommands ------------------------------------------------------------------

inline int cmd_make_data(const std::vector<std::string>& args, std::ostream& out) {
  auto f = detail::parse_flags(args, {{"manifest", true}, {"out", true}});
  // Required flags are resolved before any file is touched so that an
  // incomplete command line is always reported as the usage error it is.
  std::string mpath = detail::need(f, "manifest");
  std::filesystem::path dir = detail::need(f, "out");
  std::string text = io::read_text_file(mpath);
  data::DatasetManifest m = detail::as_usage([&] { return data::parse_manifest(text); });
  detail::ensure_dir(dir);
  data::make_dataset(m, dir);
  out << "wrote " << dir.string() << ": train=" << m.train_count << " val=" << m.val_count
      << " test=" << m.test_count << "\n";
  return kExitOk;
}

inline int cmd_train(const std::vector<std::string>& args, std::ostream& out) {
  auto f = detail::parse_flags(args, {{"config", true}, {"data", true}, {"out", true}});
  std::string cpath = detail::need(f, "config");
  std::filesystem::path outdir = detail::need(f, "out");
  std::string ctext = io::read_text_file(cpath);
  CliConfig cfg = parse_cli_config(ctext);

  std::string datadir = detail::has(f, "data") ? f.at("data") : cfg.train.data;
  if (datadir.empty())
    throw UsageError("no dataset directory: pass --data or set data= in the config");
  detail::ensure_dir(outdir);

  // Outputs always land in --out; the command appends to the log itself so a
  // resumed run extends the existing history instead of truncating it.
  cfg.train.data = datadir;
  cfg.train.checkpoint = (outdir / "checkpoint.bin").string();
  cfg.train.log.clear();
  std::filesystem::path log_path = outdir / "train_log.csv";

  std::vector<data::DatasetItem> items =
      detail::as_usage([&] { return data::load_split(datadir, "train"); });

  train::Checkpoint ck;
  bool resuming = std::filesystem::exists(cfg.train.checkpoint);
  if (resuming) {
    ck = detail::as_io([&] { return train::load_checkpoint(cfg.train.checkpoint); });
    train::TrainConfig prev =
        detail::as_io([&] { return train::parse_train_config(ck.config_text); });
    // Iteration target and file paths may differ between runs; everything that
    // shapes the math must match exactly for the resume to be a continuation.
    train::TrainConfig a = prev, b = cfg.train;
    a.iterations = b.iterations;
    a.data = b.data;
    a.checkpoint = b.checkpoint;
    a.log = b.log;
    if (train::serialize_train_config(a) != train::serialize_train_config(b))
      throw UsageError(
          "train: " + cfg.train.checkpoint +
          " was written with a different model/optimizer config; use a fresh --out directory");
    if (ck.completed_iters > cfg.train.iterations)
      throw UsageError("train: checkpoint is already past iterations=" +
                       std::to_string(cfg.train.iterations));
  }

  train::TrainResult r = train::train_loop(cfg.train, items, resuming ? &ck : nullptr);

  std::string body = r.csv.substr(r.csv.find('\n') + 1);
  if (resuming && std::filesystem::exists(log_path))
    io::write_text_file(log_path, io::read_text_file(log_path) + body);
  else
    io::write_text_file(log_path, r.csv);

  std::uint64_t total = (resuming ? ck.completed_iters : 0) + r.iterations_run;
  out << "trained " << r.iterations_run << " iterations (" << total << " total)";
  if (r.iterations_run > 0) out << ", final loss " << fmt_g17(r.final_loss);
  out << "\ncheckpoint: " << cfg.train.checkpoint << "\nlog: " << log_path.string() << "\n";
  return kExitOk;
}

inline int cmd_complete(const std::vector<std::string>& args, std::ostream& out) {
  auto f = detail::parse_flags(args, {{"checkpoint", true},
                                      {"input", true},
                                      {"out-dir", true},
                                      {"samples", true},
                                      {"seed", true},
                                      {"config", true},
                                      {"iso", true},
                                      {"grid", true}});
  std::string ck_path = detail::need(f, "checkpoint");
  std::string in_path = detail::need(f, "input");
  std::filesystem::path outdir = detail::need(f, "out-dir");
  CliConfig cfg;
  if (detail::has(f, "config")) cfg = parse_cli_config(io::read_text_file(f.at("config")));
  cfg.iso = detail::flag_f64(f, "iso", cfg.iso);
  cfg.grid = detail::flag_u64(f, "grid", cfg.grid);
  cfg.samples = detail::flag_u64(f, "samples", cfg.samples);
  validate_cli_config(cfg);

  LoadedModel lm = load_model(ck_path);
  PointCloud input = read_input_cloud(in_path);
  detail::ensure_dir(outdir);
  std::uint64_t seed = detail::flag_u64(f, "seed", 1);
  std::size_t threads = env_threads();

  std::ostringstream csv;
  csv << "sample,mesh,uhd\n";
  for (std::size_t s = 0; s < cfg.samples; ++s) {
    Rng rng(seed + s);
    std::vector<double> grid = model::complete_grid(lm.params, lm.model, input, nullptr, rng,
                                                    vae::Mode::prior, cfg.grid, threads);
    mesh::TriMesh m =
        mesh_from_grid(grid, cfg.grid, cfg.iso, "complete: sample " + std::to_string(s));
    std::string name = sample_obj_name(s);
    mesh::export_obj(m, outdir / name);
    PointCloud cloud = mesh::sample_mesh_surface(m, metrics::kCompletionCloudPoints, rng);
    double u = metrics::uhd(input, std::vector<PointCloud>{cloud}, {cfg.uhd_mean_min});
    csv << s << ',' << name << ',' << fmt_g17(u) << '\n';
  }
  io::write_text_file(outdir / "uhd.csv", csv.str());
  out << "wrote " << cfg.samples << " completions to " << outdir.string() << "\n";
  return kExitOk;
}

inline int cmd_reconstruct(const std::vector<std::string>& args, std::ostream& out) {
  auto f = detail::parse_flags(args, {{"checkpoint", true},
                                      {"input", true},
                                      {"out", true},
                                      {"config", true},
                                      {"iso", true},
                                      {"grid", true}});
  std::string ck_path = detail::need(f, "checkpoint");
  std::string in_path = detail::need(f, "input");
  std::filesystem::path outpath = detail::need(f, "out");
  CliConfig cfg;
  if (detail::has(f, "config")) cfg = parse_cli_config(io::read_text_file(f.at("config")));
  cfg.iso = detail::flag_f64(f, "iso", cfg.iso);
  cfg.grid = detail::flag_u64(f, "grid", cfg.grid);
  validate_cli_config(cfg);

  LoadedModel lm = load_model(ck_path);
  if (!model::has_posterior_params(lm.params))
    throw ExitError(kExitNoPosterior,
                    "reconstruct: this checkpoint carries no approximate-posterior weights, so "
                    "there is nothing to invert; train a model whose variant learns a posterior "
                    "before reconstructing");
  PointCloud input = read_input_cloud(in_path);
  detail::ensure_dir(outpath.parent_path());

  Rng rng(1);  // the mean path draws nothing; fixed seed keeps the call total
  std::vector<double> grid = model::complete_grid(
      lm.params, lm.model, input, &input, rng, vae::Mode::posterior_mean, cfg.grid, env_threads());
  mesh::TriMesh m = mesh_from_grid(grid, cfg.grid, cfg.iso, "reconstruct");
  mesh::export_obj(m, outpath);
  out << "wrote " << outpath.string() << " (" << m.faces.size() << " triangles)\n";
  return kExitOk;
}

inline int cmd_eval(const std::vector<std::string>& args, std::ostream& out) {
  auto f = detail::parse_flags(args, {{"checkpoint", true},
                                      {"data", true},
                                      {"out", true},
                                      {"mode", true},
                                      {"samples", true},
                                      {"seed", true},
                                      {"config", true},
                                      {"iso", true},
                                      {"grid", true}});
  std::string ck_path = detail::need(f, "checkpoint");
  std::filesystem::path datadir = detail::need(f, "data");
  std::filesystem::path outpath = detail::need(f, "out");
  CliConfig cfg;
  if (detail::has(f, "config")) cfg = parse_cli_config(io::read_text_file(f.at("config")));
  cfg.iso = detail::flag_f64(f, "iso", cfg.iso);
  cfg.grid = detail::flag_u64(f, "grid", cfg.grid);
  cfg.samples = detail::flag_u64(f, "samples", cfg.samples);
  validate_cli_config(cfg);
  if (cfg.samples < 2)
    throw UsageError("eval: samples must be >= 2 so the diversity metric is defined");

  LoadedModel lm = load_model(ck_path);
  if (!model::has_posterior_params(lm.params))
    throw ExitError(kExitNoPosterior,
                    "eval: the auto-encoding metrics need approximate-posterior weights, which "
                    "this checkpoint does not carry");
  data::DatasetManifest manifest =
      detail::as_usage([&] { return data::load_manifest(datadir); });
  std::vector<data::DatasetItem> items =
      detail::as_usage([&] { return data::load_split(datadir, "test"); });
  data::ViewMode vm = manifest.mode;
  if (detail::has(f, "mode"))
    vm = detail::as_usage([&] { return data::parse_view_mode(f.at("mode")); });
  detail::ensure_dir(outpath.parent_path());
  std::uint64_t seed = detail::flag_u64(f, "seed", 1);
  std::size_t threads = env_threads();

  // Stream tags keep the per-item rng draws independent across uses.
  constexpr std::uint64_t kTagView = 0x76696577;  // conditioning view
  constexpr std::uint64_t kTagAuto = 0x6175746f;  // auto-encode + IoU
  constexpr std::uint64_t kTagMesh = 0x6d657368;  // reconstruction surface draw

  std::ostringstream csv;
  csv << "item,uhd,tmd,iou,chamfer,nc,fscore\n";
  double sums[6] = {0, 0, 0, 0, 0, 0};
  for (std::size_t i = 0; i < items.size(); ++i) {
    const data::DatasetItem& item = items[i];

    // Conditioning cloud at the requested view. The stored partial already is
    // that view when the modes agree; otherwise re-cut the complete cloud,
    // falling back to every kept point when the region is sparser than the
    // usual partial budget.
    PointCloud partial;
    if (vm == manifest.mode) {
      partial = item.partial;
    } else {
      Rng prng(mix64(seed, kTagView, i));
      auto kept = data::view_kept_indices(item.complete, vm);
      if (kept.size() >= manifest.partial_points) {
        partial = data::partial_view(item.complete, vm, prng, manifest.partial_points);
      } else {
        if (kept.empty())
          throw UsageError("eval: item " + std::to_string(i) +
                           " has no points in the requested view region");
        for (std::size_t k : kept) {
          partial.points.push_back(item.complete.points[k]);
          partial.normals.push_back(item.complete.normals[k]);
        }
      }
    }

    std::vector<PointCloud> comps;
    comps.reserve(cfg.samples);
    for (std::size_t s = 0; s < cfg.samples; ++s) {
      Rng rng(mix64(seed, i, s));
      std::vector<double> grid = model::complete_grid(lm.params, lm.model, partial, nullptr,
                                                      rng, vae::Mode::prior, cfg.grid, threads);
      mesh::TriMesh m = mesh_from_grid(grid, cfg.grid, cfg.iso,
                                       "eval: item " + std::to_string(i) + " sample " +
                                           std::to_string(s));
      comps.push_back(mesh::sample_mesh_surface(m, metrics::kCompletionCloudPoints, rng));
    }
    double u = metrics::uhd(partial, comps, {cfg.uhd_mean_min});
    double t = metrics::tmd(comps, {cfg.tmd_sum_pairs});

    Rng arng(mix64(seed, kTagAuto, i));
    std::vector<double> agrid =
        model::complete_grid(lm.params, lm.model, item.complete, &item.complete, arng,
                             vae::Mode::posterior_mean, cfg.grid, threads);
    double iou = metrics::volumetric_iou_mc(metrics::shape_occupancy_fn(item.spec),
                                            metrics::grid_occupancy_fn(agrid, cfg.grid),
                                            cfg.iou_samples, arng);
    mesh::TriMesh rm =
        mesh_from_grid(agrid, cfg.grid, cfg.iso, "eval: item " + std::to_string(i) + " auto");
    Rng mrng(mix64(seed, kTagMesh, i));
    PointCloud recon = mesh::sample_mesh_surface(rm, metrics::kCompletionCloudPoints, mrng);
    double ch = metrics::chamfer_l1(recon, item.complete);
    double nc = metrics::normal_consistency(recon, item.complete);
    double fs = metrics::f_score(recon, item.complete, cfg.tau).f;

    double row[6] = {u, t, iou, ch, nc, fs};
    csv << i;
    for (int c = 0; c < 6; ++c) {
      csv << ',' << fmt_g17(row[c]);
      sums[c] += row[c];
    }
    csv << '\n';
  }
  double n = static_cast<double>(items.size());
  csv << "mean";
  for (int c = 0; c < 6; ++c) csv << ',' << fmt_g17(sums[c] / n);
  csv << '\n';
  io::write_text_file(outpath, csv.str());
  out << "evaluated " << items.size() << " items (" << cfg.samples << " completions each): "
      << outpath.string() << "\n";
  return kExitOk;
}

// ---- gradient check ----------------------------------------------------------------

namespace detail {

struct GradComponent {
  std::string name;
  nn::ParamStore store;
  std::function<ad::Tensor(nn::Ctx&)> fn;
  // Central differences balance truncation (grows with eps^2) against
  // cancellation noise (grows with 1/eps); each loss gets the step size on
  // the measured plateau between the two. Small steps also keep the probe
  // window clear of relu corners in the point-wise encoder layers.
  double eps = 1e-5;
};

inline nn::ParamStore subset_params(const nn::ParamStore& full,
                                    const std::vector<std::string>& prefixes) {
  nn::ParamStore out;
  for (const auto& [name, p] : full.entries())
    for (const auto& pre : prefixes)
      if (name.rfind(pre, 0) == 0) {
        out.add(name, p.shape, *p.value);
        break;
      }
  return out;
}

inline std::vector<double> random_values(std::size_t n, Rng& rng, double lo = -1.0,
                                         double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace detail

inline int cmd_gradcheck(const std::vector<std::string>& args, std::ostream& out) {
  auto f = detail::parse_flags(args, {{"scale", true}, {"corrupt", false}});
  std::string scale = detail::need(f, "scale");
  if (scale != "micro")
    throw UsageError("gradcheck: only --scale micro is supported, got '" + scale + "'");
  bool corrupt = detail::has(f, "corrupt");

  // Small enough that central differences over every parameter stay fast,
  // deep enough that every computational path is exercised.
  train::TrainConfig t;
  t.resolution = 8;
  t.levels = 3;  // sides 2, 4, 8
  t.channels = 8;
  t.rank = 2;
  t.d_z = 4;
  t.global_len = 8;
  t.trunk_hidden = 4;
  t.head_hidden = 4;
  t.point_hidden = 4;
  t.global_feat = 4;
  t.dec_hidden = 8;
  t.batch = 1;
  t.queries = 32;
  t.iterations = 1;
  t.warmup = 1;
  t.seed = 11;
  model::ModelConfig mcfg = train::model_config(t);

  data::DatasetManifest dm;
  dm.seed = 5;
  dm.train_count = dm.val_count = dm.test_count = 1;
  dm.mode = data::ViewMode::bottom;
  dm.weights = {{data::Family::sphere, 0.5}, {data::Family::box, 0.5}};
  dm.complete_points = 192;
  dm.partial_points = 96;
  dm.query_points = 64;
  data::DatasetItem item = data::generate_item(dm, 0, 0);

  nn::ParamStore full;
  Rng init_rng(17);
  model::init_model(full, mcfg, init_rng);

  Rng data_rng(23);
  std::size_t side = mcfg.resolution();
  std::size_t voxels = side * side * side;

  // Fixed synthetic inputs shared by every probe of a component, so the only
  // thing that varies between evaluations is the parameter under test.
  auto fixed_volume = [&](std::size_t channels) {
    enc::FeatureVolume v;
    v.res[0] = v.res[1] = v.res[2] = side;
    v.channels = channels;
    v.data = ad::Tensor(Shape{side, side, side, channels},
                        detail::random_values(voxels * channels, data_rng));
    v.mask.resize(voxels);
    for (auto& m : v.mask) m = data_rng.uniform() < 0.5 ? 0.0 : 1.0;
    return v;
  };
  std::vector<double> xc = detail::random_values(t.global_len, data_rng);
  std::vector<double> yc = detail::random_values(t.global_len, data_rng);
  enc::FeatureVolume xvol = fixed_volume(t.channels);
  enc::FeatureVolume yvol = fixed_volume(t.channels);

  std::size_t nq = 32;
  std::vector<double> qv = detail::random_values(nq * 3, data_rng, -0.5, 0.5);
  std::size_t feat_ch = mcfg.feature_channels();
  std::vector<double> fv = detail::random_values(nq * feat_ch, data_rng);
  std::vector<double> lv(nq);
  for (auto& l : lv) l = data_rng.uniform() < 0.5 ? 0.0 : 1.0;

  std::vector<detail::GradComponent> comps;

  comps.push_back({"encoder", detail::subset_params(full, {"enc."}),
                   [&](nn::Ctx& ctx) -> ad::Tensor {
                     vae::CodePair cp = model::encode_observation(ctx, mcfg, item.partial);
                     return ctx.g.add(ctx.g.mean_all(cp.code), ctx.g.mean_all(cp.vol.data));
                   }});

  {
    nn::ParamStore cps;
    Rng fr(29);
    std::size_t fr_rank = 2, fr_ch = 3;
    std::size_t hx = 4, wy = 5, dz = 6;
    cps.add("cp.vx", Shape{hx, fr_rank, fr_ch}, detail::random_values(hx * fr_rank * fr_ch, fr));
    cps.add("cp.vy", Shape{wy, fr_rank, fr_ch}, detail::random_values(wy * fr_rank * fr_ch, fr));
    cps.add("cp.vz", Shape{dz, fr_rank, fr_ch}, detail::random_values(dz * fr_rank * fr_ch, fr));
    std::vector<double> pvals = detail::random_values(hx * wy * dz * fr_ch, fr);
    std::vector<double> pmask(hx * wy * dz);
    for (auto& m : pmask) m = fr.uniform() < 0.5 ? 0.0 : 1.0;
    std::vector<double> cq = detail::random_values(7 * 3, fr, -0.5, 0.5);
    comps.push_back({"cp-field", std::move(cps), [=](nn::Ctx& ctx) -> ad::Tensor {
                       ad::Graph& g = ctx.g;
                       cp::FactorSet fs;
                       fs.rank = fr_rank;
                       fs.channels = fr_ch;
                       fs.vx = ctx.p("cp.vx");
                       fs.vy = ctx.p("cp.vy");
                       fs.vz = ctx.p("cp.vz");
                       enc::FeatureVolume pred = cp::reconstruct_volume(g, fs);
                       enc::FeatureVolume part;
                       part.res[0] = hx;
                       part.res[1] = wy;
                       part.res[2] = dz;
                       part.channels = fr_ch;
                       part.data = ad::Tensor(Shape{hx, wy, dz, fr_ch}, pvals);
                       part.mask = pmask;
                       cp::MergedVolume merged = cp::merge(g, pred, part);
                       ad::Tensor queries(Shape{7, 3}, cq);
                       return g.mean_all(cp::sample_features(g, merged, queries));
                     }});
  }

  comps.push_back({"hierarchy", detail::subset_params(full, {"vae."}),
                   [&](nn::Ctx& ctx) -> ad::Tensor {
                     ad::Graph& g = ctx.g;
                     vae::CodePair x, y;
                     x.code = ad::Tensor(Shape{t.global_len}, xc);
                     x.vol = xvol;
                     y.code = ad::Tensor(Shape{t.global_len}, yc);
                     y.vol = yvol;
                     Rng r(31);
                     vae::CompleteResult res = vae::complete(ctx, mcfg.vae, mcfg.variant, x, &y,
                                                             r, vae::Mode::posterior);
                     // The raw KL dwarfs the reconstruction term; keeping the
                     // loss O(1) keeps finite-difference cancellation noise
                     // well below the tolerance.
                     return g.add(g.mean_all(res.merged.data), g.scale(res.kl, 0.01));
                   },
                   7e-5});

  comps.push_back({"decoder", detail::subset_params(full, {"dec."}),
                   [&, corrupt](nn::Ctx& ctx) -> ad::Tensor {
                     ad::Graph& g = ctx.g;
                     ad::Tensor queries(Shape{nq, 3}, qv);
                     ad::Tensor feats(Shape{nq, feat_ch}, fv);
                     ad::Tensor labels(Shape{nq}, lv);
                     ad::Tensor probs = dec::occupancy(ctx, mcfg.decoder_sizes(), queries, feats);
                     ad::Tensor loss = dec::binary_cross_entropy(g, probs, labels);
                     if (corrupt) {
                       // Negative control: folds a parameter's current value in
                       // as a constant, which numeric probing sees but the
                       // analytic gradient cannot.
                       double leak = ctx.params.at("dec.fc0.w").value->at(0);
                       loss = g.add(loss, ad::Tensor::scalar(leak * 1e-3));
                     }
                     return loss;
                   }});

  comps.push_back({"elbo", detail::subset_params(full, {"enc.", "vae.", "dec."}),
                   [&](nn::Ctx& ctx) -> ad::Tensor {
                     train::BatchItem b;
                     b.item = &item;
                     for (std::size_t q = 0; q < t.queries; ++q) b.query_sel.push_back(q);
                     Rng r(41);
                     return train::elbo_loss(ctx, mcfg, train::Condition::partial, {b}, 0.05, r)
                         .loss;
                   },
                   7e-5});

  // Freshly initialized biases are exactly zero, so a row whose hidden units
  // are all inactive leaves the next preactivation sitting on the relu corner,
  // where one-sided analytic and straddling numeric derivatives legitimately
  // disagree. Probe at a generic point instead: push every zero entry off the
  // kink before checking.
  Rng nudge_rng(47);
  for (auto& c : comps)
    for (auto& [name, p] : c.store.entries()) {
      (void)name;
      for (auto& v : *p.value)
        if (v == 0.0) v = nudge_rng.uniform(0.02, 0.1) * (nudge_rng.uniform() < 0.5 ? -1.0 : 1.0);
    }

  const double tol = 1e-4;
  std::string failed;
  double failed_err = 0.0;
  for (auto& c : comps) {
    nn::StoreGradCheckReport rep = nn::grad_check_params(c.store, c.fn, c.eps);
    out << "component " << c.name << ": max_rel_err " << fmt_g17(rep.max_rel_err) << " (worst "
        << rep.worst_param << "[" << rep.worst_entry << "], " << c.store.size()
        << " parameters)\n";
    if (!(rep.max_rel_err < tol) && failed.empty()) {
      failed = c.name;
      failed_err = rep.max_rel_err;
    }
  }
  if (!failed.empty())
    throw ExitError(kExitGradCheck, "gradcheck: component '" + failed + "' max relative error " +
                                        fmt_g17(failed_err) + " exceeds " + fmt_g17(tol));
  out << "gradient check passed (" << comps.size() << " components, tolerance " << fmt_g17(tol)
      << ")\n";
  return kExitOk;
}

// ---- dispatch -----------------------------------------------------------------------

inline std::string help_text() {
  std::ostringstream os;
  os << "hvcp - probabilistic shape completion on synthetic parametric shapes\n"
     << "\n"
     << "usage: hvcp <command> [flags]\n"
     << "\n"
     << "commands:\n"
     << "  make-data   --manifest FILE --out DIR\n"
     << "                generate the train/val/test dataset a manifest describes\n"
     << "  train       --config FILE --out DIR [--data DIR]\n"
     << "                train (or resume) a model; writes checkpoint.bin and\n"
     << "                train_log.csv into --out\n"
     << "  complete    --checkpoint FILE --input FILE.xyz --out-dir DIR\n"
     << "                [--samples N] [--seed S] [--config FILE] [--iso F] [--grid N]\n"
     << "                draw N completions of a partial cloud as OBJ meshes plus a\n"
     << "                per-sample distance CSV; sample i uses seed S+i\n"
     << "  reconstruct --checkpoint FILE --input FILE.xyz --out FILE.obj\n"
     << "                [--config FILE] [--iso F] [--grid N]\n"
     << "                deterministic mean-latent auto-encode of a complete cloud\n"
     << "  eval        --checkpoint FILE --data DIR --out FILE.csv [--mode bottom|octant]\n"
     << "                [--samples N] [--seed S] [--config FILE] [--iso F] [--grid N]\n"
     << "                completion + auto-encode metrics over the test split\n"
     << "  gradcheck   --scale micro\n"
     << "                central-difference check of every parameter gradient\n"
     << "\n"
     << "config file: flat key=value lines ('#' comments); unknown keys are errors.\n"
     << "keys and defaults:\n";
  std::istringstream defaults(serialize_cli_config(CliConfig{}));
  std::string line;
  while (std::getline(defaults, line)) os << "  " << line << "\n";
  os << "  data= checkpoint= log=   (paths; empty disables)\n"
     << "\n"
     << "environment:\n"
     << "  HVCP_THREADS   caps worker threads for grid inference (0/unset = all cores)\n"
     << "\n"
     << "exit codes:\n"
     << "  0  success\n"
     << "  1  unexpected internal error\n"
     << "  2  bad flags, config, manifest, or input data\n"
     << "  3  unreadable or unwritable file\n"
     << "  4  training loss went non-finite\n"
     << "  5  mesh extraction produced an empty surface\n"
     << "  6  checkpoint lacks approximate-posterior weights\n"
     << "  7  gradient check exceeded tolerance\n";
  return os.str();
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  try {
    if (args.empty()) {
      err << help_text() << "error: no command given\n";
      return kExitUsage;
    }
    std::string cmd = args[0];
    std::vector<std::string> rest(args.begin() + 1, args.end());
    if (cmd == "--help" || cmd == "help") {
      out << help_text();
      return kExitOk;
    }
    if (cmd == "make-data") return cmd_make_data(rest, out);
    if (cmd == "train") return cmd_train(rest, out);
    if (cmd == "complete") return cmd_complete(rest, out);
    if (cmd == "reconstruct") return cmd_reconstruct(rest, out);
    if (cmd == "eval") return cmd_eval(rest, out);
    if (cmd == "gradcheck") return cmd_gradcheck(rest, out);
    throw UsageError("unknown command '" + cmd + "'");
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n(run 'hvcp --help' for usage)\n";
    return kExitUsage;
  } catch (const ExitError& e) {
    err << "error: " << e.what() << "\n";
    return e.code;
  } catch (const train::NonFiniteLossError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNonFinite;
  } catch (const io::IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace hvcp::cli
