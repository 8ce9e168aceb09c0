#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "emcboot/emc.hpp"
#include "emcboot/io.hpp"
#include "emcboot/metrics.hpp"
#include "emcboot/rotations.hpp"
#include "emcboot/synthetic.hpp"
#include "emcboot/uncertainty.hpp"

namespace fs = std::filesystem;
using namespace emcboot;
using io::json;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kConvergence = 3, kIo = 4 };

struct Common {
  unsigned workers = 0;
  bool force = false;
};

struct EmcFlags {
  int grid_n = 0;  // 0: the dataset's grid
  double epsilon = 1e-3;
  int max_iterations = 60;
  std::string fluence = "estimate";
  int fluence_warmup = 10;
  std::uint64_t seed = 1;

  void add(CLI::App* app) {
    app->add_option("--grid-n", grid_n, "Rotation grid refinement (0: dataset default)")->check(CLI::NonNegativeNumber);
    app->add_option("--epsilon", epsilon, "Stopping threshold on the normalized change")->check(CLI::PositiveNumber);
    app->add_option("--max-iterations", max_iterations, "Iteration cap")->check(CLI::PositiveNumber);
    app->add_option("--fluence", fluence, "Fluence handling")->check(CLI::IsMember({"estimate", "fixed"}));
    app->add_option("--fluence-warmup", fluence_warmup, "Unit-fluence iterations before estimation")
        ->check(CLI::NonNegativeNumber);
    app->add_option("--seed", seed, "Seed of the starting model and resampling");
  }

  EmcConfig config(int fallback_n, unsigned workers) const {
    EmcConfig c;
    c.epsilon = epsilon;
    c.max_iterations = max_iterations;
    c.seed = seed;
    c.workers = workers;
    c.fluence_mode = fluence == "fixed" ? FluenceMode::fixed : FluenceMode::estimate;
    c.fluence_warmup = fluence_warmup;
    c.rotations = std::make_shared<RotationSet>(sample_rotation_grid(grid_n > 0 ? grid_n : fallback_n));
    return c;
  }

  json describe() const {
    return {{"grid_n", grid_n}, {"epsilon", epsilon}, {"max_iterations", max_iterations},
            {"fluence", fluence},
            {"fluence_warmup", fluence_warmup}, {"seed", seed}};
  }
};

/// Refuses to reuse an existing non-empty output path unless forced.
void claim_output(const fs::path& p, bool force) {
  if (fs::exists(p) && !(fs::is_directory(p) && fs::is_empty(p)) && !force)
    throw Error(ErrorKind::io, p.string() + " exists; pass --force to overwrite");
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

ShellPartition shells_for(int side, double mask_radius) {
  return make_shells(side, std::max(1.0, side / 64.0), mask_radius);
}

// generate ------------------------------------------------------------------

struct GenerateArgs {
  fs::path out;
  DatasetSpec spec;
  std::string source = "grid";
  double background_level = 0.0;
};

int cmd_generate(const GenerateArgs& a, const Common& c) {
  claim_output(a.out, c.force);
  DatasetSpec spec = a.spec;
  spec.rotation_source = a.source == "random" ? RotationSource::random : RotationSource::grid;
  spec.validate();
  require(a.background_level >= 0.0, "background level must be nonnegative");
  const SyntheticDataset d = generate_dataset(spec, c.workers);
  json extra{{"generator", "emcboot generate"},
             {"phantom", {{"alpha", {1.5, 0.3, 0.5}}, {"beta", {0.2, 0.9, 1.0}}, {"k", -4.0}}},
             {"background_level", a.background_level}};
  io::write_dataset(a.out, d, extra);
  if (a.background_level > 0.0) {
    const BackgroundFrame bg = synthesize_background(spec.side, a.background_level, mix_seed(spec.seed, 5));
    FrameSet km = add_background(d.kf_star, bg, 1.0, 1.0, mix_seed(spec.seed, 6), c.workers);
    io::write_frames(a.out / "Kf_zero_bg", km, {{"background_level", a.background_level}});
    io::write_binary(a.out / "background.f64", bg.values);
  }
  std::cout << "wrote " << spec.frames << " frames per variant to " << a.out.string()
            << " (intensity factor " << io::format_double(d.intensity_factor) << ")\n";
  return kOk;
}

// reconstruct ---------------------------------------------------------------

struct ReconstructArgs {
  fs::path frames, out;
  EmcFlags emc;
};

int cmd_reconstruct(const ReconstructArgs& a, const Common& c) {
  json manifest;
  const FrameSet frames = io::read_frames(a.frames, &manifest);
  claim_output(a.out, c.force);
  fs::create_directories(a.out);
  const int fallback_n = manifest.value("grid_n", 4);
  const EmcConfig cfg = a.emc.config(fallback_n, c.workers);
  const EmcResult r = run_emc(frames, cfg);
  io::write_volume(a.out / "volume.f64", r.volume,
                   {{"iteration", r.iterations}, {"epsilon", cfg.epsilon}, {"seed", cfg.seed},
                    {"mask_radius", frames.detector.mask_radius}});
  io::write_trace(a.out / "trace.csv", r.trace);
  io::write_json(a.out / "summary.json",
                 {{"frames", a.frames.string()},
                  {"config", a.emc.describe()},
                  {"rotations", cfg.rotations->size()},
                  {"workers", resolve_workers(c.workers)},
                  {"iterations", r.iterations},
                  {"converged", r.converged},
                  {"final_change", r.trace.empty() ? 0.0 : r.trace.back().change}});
  std::cout << (r.converged ? "converged" : "not converged") << " after " << r.iterations << " iterations\n";
  return r.converged ? kOk : kConvergence;
}

// errors / baselines ----------------------------------------------------------

struct ErrorsArgs {
  fs::path dataset, out;
  std::string rows;
  bool baselines = false;
  bool baselines_only = false;
  bool strong = false;
  int align_restarts = 1;
  EmcFlags emc;
};

std::vector<ShellErrorCurve> baseline_curves(const SyntheticDataset& d, std::uint64_t seed, unsigned workers) {
  const ShellPartition shells = shells_for(d.spec.side, d.spec.mask_radius);
  const Baselines b = hidden_data_baselines(d.k_star, d.truth, shells, seed, workers);
  return {b.r100_weak, b.r100_strong, b.r50_weak, b.r50_strong};
}

int cmd_errors(const ErrorsArgs& a, const Common& c) {
  const SyntheticDataset d = io::read_dataset(a.dataset);
  claim_output(a.out, c.force);
  std::vector<ShellErrorCurve> curves;
  bool converged = true;
  if (a.baselines || a.baselines_only) curves = baseline_curves(d, a.emc.seed, c.workers);
  json chains = json::array();
  if (!a.baselines_only) {
    const std::vector<std::string> names = a.rows.empty() ? standard_error_chains() : split_list(a.rows);
    std::vector<ErrorChainSpec> specs;
    for (const auto& n : names) specs.push_back(error_chain(n));  // validate before any run
    ChainOptions opt;
    opt.align_restarts = a.align_restarts;
    opt.align.workers = c.workers;
    ErrorChainRunner runner(d, a.emc.config(d.spec.grid_n, c.workers), opt);
    for (const auto& s : specs) {
      const ChainResult r = runner.measure(s);
      converged = converged && r.converged;
      curves.push_back(r.weak);
      if (a.strong) curves.push_back(r.strong);
      chains.push_back({{"label", s.label}, {"converged", r.converged}, {"iterations", r.iterations},
                        {"weak_mean", shell_mean(r.weak)}, {"scale", r.scale}});
      std::cout << s.label << ": mean weak error " << io::format_double(shell_mean(r.weak))
                << (r.converged ? "" : " (not converged)") << '\n';
    }
  }
  io::write_curves(a.out, curves, d.spec.side);
  io::write_json(fs::path(a.out.string() + ".json"),
                 {{"dataset", a.dataset.string()}, {"config", a.emc.describe()}, {"chains", chains}});
  return converged ? kOk : kConvergence;
}

// bootstrap -------------------------------------------------------------------

struct BootstrapArgs {
  fs::path frames, out;
  std::string method = "standard";
  int B = 20;
  double beta = 2.0;
  int align_restarts = 1;
  EmcFlags emc;
};

void write_bootstrap(const fs::path& dir, const BootstrapResult& r, const IntensityVolume& w_a,
                     const json& config) {
  fs::create_directories(dir);
  const std::pair<const char*, const IntensityVolume*> volumes[] = {
      {"W_M", &r.W_M}, {"V", &r.V}, {"R_std", &r.R_std}, {"R_bias", &r.R_bias},
      {"R_S_hat", &r.R_S_hat}, {"R_total", &r.R_total}};
  for (const auto& [name, v] : volumes) io::write_volume(dir / (std::string(name) + ".f64"), *v);
  const ShellPartition shells = shells_for(w_a.side, 0.0);
  ShellErrorCurve curve = bootstrap_shell_error(r.R_total, w_a, shells);
  curve.label = "R_total_" + r.method;
  io::write_curves(dir / "curves.csv", {curve}, w_a.side);
  io::write_json(dir / "summary.json", {{"method", r.method},
                                        {"B", r.B},
                                        {"beta", r.beta},
                                        {"unconverged", r.unconverged},
                                        {"unseen_frames", r.unseen_frames},
                                        {"mean_uncertainty", shell_mean(curve)},
                                        {"config", config}});
}

int cmd_bootstrap(const BootstrapArgs& a, const Common& c) {
  json manifest;
  const FrameSet universe = io::read_frames(a.frames, &manifest);
  claim_output(a.out, c.force);
  BootstrapOptions opt;
  opt.B = a.B;
  opt.beta = a.beta;
  opt.seed = a.emc.seed;
  opt.standard = a.method != "emb";
  opt.emb = a.method != "standard";
  opt.align_restarts = a.align_restarts;
  opt.align.workers = c.workers;
  const EmcConfig cfg = a.emc.config(manifest.value("grid_n", 4), c.workers);
  const BootstrapPair res = run_bootstrap(universe, cfg, opt);
  json config = a.emc.describe();
  config["frames"] = a.frames.string();
  config["workers"] = resolve_workers(c.workers);
  const bool both = opt.standard && opt.emb;
  std::size_t unconverged = 0;
  for (const auto* r : {res.standard ? &*res.standard : nullptr, res.emb ? &*res.emb : nullptr}) {
    if (!r) continue;
    write_bootstrap(both ? a.out / r->method : a.out, *r, res.universe.volume, config);
    unconverged = r->unconverged;
    std::cout << r->method << ": B=" << r->B << ", unconverged runs " << r->unconverged
              << ", frames never drawn " << r->unseen_frames << '\n';
  }
  return unconverged == 0 ? kOk : kConvergence;
}

// sweep -----------------------------------------------------------------------

struct SweepArgs {
  fs::path out;
  std::string peaks = "1000,500,100,90,75,50";
  std::string frames = "250";
  std::string background = "both";
  double background_level = 0.5;
  int B = 20;
  double beta = 2.0;
  DatasetSpec dataset;
  EmcFlags emc;
};

int cmd_sweep(const SweepArgs& a, const Common& c) {
  claim_output(a.out, c.force);
  std::vector<SweepSpec> specs;
  std::vector<bool> bgs;
  if (a.background != "on") bgs.push_back(false);
  if (a.background != "off") bgs.push_back(true);
  for (const auto& m : split_list(a.frames))
    for (const auto& p : split_list(a.peaks))
      for (bool bg : bgs) specs.push_back({std::stod(p), bg, static_cast<std::size_t>(std::stoul(m))});
  require(!specs.empty(), "sweep: nothing to run");
  SweepOptions opt;
  opt.dataset = a.dataset;
  opt.background_level = a.background_level;
  opt.bootstrap.B = a.B;
  opt.bootstrap.beta = a.beta;
  opt.bootstrap.seed = a.emc.seed;
  opt.bootstrap.align.workers = c.workers;
  const auto rows = intensity_sweep(specs, a.emc.config(a.dataset.grid_n, c.workers), opt);
  fs::create_directories(a.out);
  std::ofstream table(a.out / "sweep.csv");
  if (!table) throw Error(ErrorKind::io, "cannot write " + (a.out / "sweep.csv").string());
  table << "peak,background,frames,mean_uncertainty,unconverged\n";
  std::vector<ShellErrorCurve> curves;
  std::size_t unconverged = 0;
  for (const auto& r : rows) {
    table << io::format_double(r.spec.peak) << ',' << (r.spec.background ? "on" : "off") << ','
          << r.spec.frames << ',' << io::format_double(r.mean_uncertainty) << ',' << r.unconverged << '\n';
    ShellErrorCurve curve = r.curve;
    std::ostringstream label;
    label << "P" << r.spec.peak << (r.spec.background ? "_bg" : "") << "_M" << r.spec.frames;
    curve.label = label.str();
    curves.push_back(std::move(curve));
    unconverged += r.unconverged;
  }
  io::write_curves(a.out / "curves.csv", curves, a.dataset.side);
  return unconverged == 0 ? kOk : kConvergence;
}

void add_dataset_flags(CLI::App* app, DatasetSpec& s) {
  app->add_option("--side", s.side, "Grid side length")->check(CLI::PositiveNumber);
  app->add_option("--mask-radius", s.mask_radius, "Beamstop radius in pixels")->check(CLI::NonNegativeNumber);
  app->add_option("--data-grid-n", s.grid_n, "Grid the data rotations are drawn from")->check(CLI::PositiveNumber);
  app->add_option("--fluence-low", s.fluence_low, "Lower fluence bound");
  app->add_option("--fluence-high", s.fluence_high, "Upper fluence bound");
  app->add_option("--dataset-seed", s.seed, "Seed of the generated data");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EMC reconstruction and bootstrap uncertainty estimation for diffraction frames"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--workers", common.workers, "Worker threads (0: $EMCBOOT_WORKERS or all cores)");
  app.add_flag("--force", common.force, "Overwrite existing outputs");

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Generate a synthetic dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--side", gen.spec.side, "Grid side length")->check(CLI::PositiveNumber);
  g->add_option("--mask-radius", gen.spec.mask_radius, "Beamstop radius in pixels")->check(CLI::NonNegativeNumber);
  g->add_option("--grid-n", gen.spec.grid_n, "Grid the data rotations are drawn from")->check(CLI::PositiveNumber);
  g->add_option("--frames", gen.spec.frames, "Number of frames")->check(CLI::PositiveNumber);
  g->add_option("--peak", gen.spec.peak, "Maximum expected photons in one pixel")->check(CLI::PositiveNumber);
  g->add_option("--fluence-low", gen.spec.fluence_low, "Lower fluence bound");
  g->add_option("--fluence-high", gen.spec.fluence_high, "Upper fluence bound");
  g->add_option("--rotations", gen.source, "Data rotations")->check(CLI::IsMember({"grid", "random"}));
  g->add_option("--background-level", gen.background_level, "Mean background photons per pixel (0: none)");
  g->add_option("--seed", gen.spec.seed, "Seed");

  ReconstructArgs rec;
  auto* r = app.add_subcommand("reconstruct", "Run EMC on a frame directory");
  r->add_option("--frames", rec.frames, "Frame directory")->required();
  r->add_option("--out", rec.out, "Output directory")->required();
  rec.emc.add(r);

  ErrorsArgs err;
  auto* e = app.add_subcommand("errors", "Measure error chains against the ground truth");
  e->add_option("--dataset", err.dataset, "Dataset directory")->required();
  e->add_option("--out", err.out, "Output CSV")->required();
  e->add_option("--rows", err.rows, "Comma-separated chains, e.g. R_S,R_N,R_T,R_N+R_T");
  e->add_flag("--baselines", err.baselines, "Include the R_100 / R_50 baselines");
  e->add_flag("--strong", err.strong, "Also emit strong-metric curves");
  e->add_option("--align-restarts", err.align_restarts, "Alignment restarts")->check(CLI::PositiveNumber);
  err.emc.add(e);

  ErrorsArgs base;
  base.baselines_only = true;
  auto* b = app.add_subcommand("baselines", "Emit the R_100 / R_50 baseline curves");
  b->add_option("--dataset", base.dataset, "Dataset directory")->required();
  b->add_option("--out", base.out, "Output CSV")->required();
  b->add_option("--seed", base.emc.seed, "Seed of the random insertions");

  BootstrapArgs boot;
  auto* bs = app.add_subcommand("bootstrap", "Bootstrap uncertainty of a reconstruction");
  bs->add_option("--frames", boot.frames, "Universe frame directory")->required();
  bs->add_option("--out", boot.out, "Output directory")->required();
  bs->add_option("--method", boot.method, "Estimator")->check(CLI::IsMember({"standard", "emb", "both"}));
  bs->add_option("--B", boot.B, "Bootstrap samples")->check(CLI::Range(2, 100000));
  bs->add_option("--beta", boot.beta, "Multiplier of the standard error")->check(CLI::NonNegativeNumber);
  bs->add_option("--align-restarts", boot.align_restarts, "Alignment restarts")->check(CLI::PositiveNumber);
  boot.emc.add(bs);

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "Bootstrap uncertainty against photon count and background");
  s->add_option("--out", sw.out, "Output directory")->required();
  s->add_option("--peaks", sw.peaks, "Comma-separated peak photon counts");
  s->add_option("--frame-counts", sw.frames, "Comma-separated frame counts");
  s->add_option("--background", sw.background, "Background runs")->check(CLI::IsMember({"on", "off", "both"}));
  s->add_option("--background-level", sw.background_level, "Mean background photons per pixel");
  s->add_option("--B", sw.B, "Bootstrap samples")->check(CLI::Range(2, 100000));
  s->add_option("--beta", sw.beta, "Multiplier of the standard error")->check(CLI::NonNegativeNumber);
  add_dataset_flags(s, sw.dataset);
  sw.emc.add(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kConfig;
  }

  try {
    if (*g) return cmd_generate(gen, common);
    if (*r) return cmd_reconstruct(rec, common);
    if (*e) return cmd_errors(err, common);
    if (*b) return cmd_errors(base, common);
    if (*bs) return cmd_bootstrap(boot, common);
    if (*s) return cmd_sweep(sw, common);
  } catch (const Error& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    switch (ex.kind()) {
      case ErrorKind::config: return kConfig;
      case ErrorKind::io: return kIo;
      case ErrorKind::numeric: return kFailure;
    }
  } catch (const fs::filesystem_error& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return kIo;
  } catch (const std::logic_error&) {
    std::cerr << "error: malformed number in a list option\n";
    return kConfig;
  }
  return kFailure;
}
