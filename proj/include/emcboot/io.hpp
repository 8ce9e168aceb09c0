#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "emcboot/common.hpp"
#include "emcboot/emc.hpp"
#include "emcboot/frames.hpp"
#include "emcboot/metrics.hpp"
#include "emcboot/rotations.hpp"
#include "emcboot/synthetic.hpp"
#include "emcboot/volume.hpp"

namespace emcboot::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace fs = std::filesystem;
using json = nlohmann::json;

template <class T>
void write_binary(const fs::path& path, const std::vector<T>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (!out) throw Error(ErrorKind::io, "write failed: " + path.string());
}

template <class T>
std::vector<T> read_binary(const fs::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  const auto size = fs::file_size(path);
  if (size != expected * sizeof(T))
    throw Error(ErrorKind::io, path.string() + ": expected " + std::to_string(expected * sizeof(T)) +
                                   " bytes, found " + std::to_string(size));
  std::vector<T> data(expected);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(size));
  if (!in) throw Error(ErrorKind::io, "read failed: " + path.string());
  return data;
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::io, path.string() + ": " + e.what());
  }
}

inline fs::path sidecar(const fs::path& p) { return fs::path(p.string() + ".json"); }
inline fs::path mask_path(const fs::path& p) { return fs::path(p.string() + ".mask"); }

/// side^3 float64 values (x fastest) plus a JSON sidecar; the voxel mask,
/// when any voxel is masked, goes to a companion byte file.
inline void write_volume(const fs::path& path, const IntensityVolume& v, json meta = json::object()) {
  write_binary(path, v.values);
  meta["side"] = v.side;
  const bool masked = std::any_of(v.mask.begin(), v.mask.end(), [](auto m) { return m != 0; });
  meta["has_mask"] = masked;
  if (masked) write_binary(mask_path(path), v.mask);
  write_json(sidecar(path), meta);
}

inline IntensityVolume read_volume(const fs::path& path, json* meta_out = nullptr) {
  const json meta = read_json(sidecar(path));
  const int side = meta.at("side").get<int>();
  if (side <= 0) throw Error(ErrorKind::io, sidecar(path).string() + ": invalid side");
  IntensityVolume v(side);
  v.values = read_binary<double>(path, v.size());
  if (meta.value("has_mask", false)) v.mask = read_binary<std::uint8_t>(mask_path(path), v.size());
  if (meta_out) *meta_out = meta;
  return v;
}

inline std::vector<double> flatten(std::span<const Quaternion> qs) {
  std::vector<double> out;
  out.reserve(qs.size() * 4);
  for (const auto& q : qs) out.insert(out.end(), {q.w, q.x, q.y, q.z});
  return out;
}

inline std::vector<Quaternion> unflatten(const std::vector<double>& raw) {
  std::vector<Quaternion> qs(raw.size() / 4);
  for (std::size_t j = 0; j < qs.size(); ++j) qs[j] = {raw[4 * j], raw[4 * j + 1], raw[4 * j + 2], raw[4 * j + 3]};
  return qs;
}

/// M_rot x 4 float64 (w, x, y, z) plus sidecar {n, M_rot, seed}.
inline void write_rotations(const fs::path& path, const RotationSet& set) {
  write_binary(path, flatten(set.quaternions));
  write_json(sidecar(path), {{"n", set.refinement}, {"M_rot", set.size()}, {"seed", set.seed}});
}

inline RotationSet read_rotations(const fs::path& path) {
  const json meta = read_json(sidecar(path));
  const auto m = meta.at("M_rot").get<std::size_t>();
  return RotationSet::uniform(unflatten(read_binary<double>(path, 4 * m)), meta.value("n", 0),
                              meta.value("seed", std::uint64_t{0}));
}

/// Frame-set directory: manifest.json, frames.f64 and the optional
/// rotations.f64 / fluences.f64 ground truth.
inline void write_frames(const fs::path& dir, const FrameSet& f, json extra = json::object()) {
  fs::create_directories(dir);
  write_binary(dir / "frames.f64", f.values);
  json m = std::move(extra);
  m["side"] = f.detector.side;
  m["M_data"] = f.count;
  m["mask_radius"] = f.detector.mask_radius;
  m["label"] = f.label;
  m["has_rotations"] = f.true_rotations.has_value();
  m["has_fluences"] = f.true_fluences.has_value();
  if (f.true_rotations) write_binary(dir / "rotations.f64", flatten(*f.true_rotations));
  if (f.true_fluences) write_binary(dir / "fluences.f64", *f.true_fluences);
  write_json(dir / "manifest.json", m);
}

inline FrameSet read_frames(const fs::path& dir, json* manifest_out = nullptr) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::io, "frame directory not found: " + dir.string());
  const json m = read_json(dir / "manifest.json");
  FrameSet f(Detector(m.at("side").get<int>(), m.at("mask_radius").get<double>()),
             m.at("M_data").get<std::size_t>());
  f.values = read_binary<double>(dir / "frames.f64", f.count * f.pixel_count());
  f.label = m.value("label", "");
  if (m.value("has_rotations", false))
    f.true_rotations = unflatten(read_binary<double>(dir / "rotations.f64", 4 * f.count));
  if (m.value("has_fluences", false)) f.true_fluences = read_binary<double>(dir / "fluences.f64", f.count);
  if (manifest_out) *manifest_out = m;
  return f;
}

inline json to_json(const DatasetSpec& s) {
  return {{"side", s.side},
          {"mask_radius", s.mask_radius},
          {"grid_n", s.grid_n},
          {"frames", s.frames},
          {"peak", s.peak},
          {"fluence_low", s.fluence_low},
          {"fluence_high", s.fluence_high},
          {"rotation_source", s.rotation_source == RotationSource::grid ? "grid" : "random"},
          {"seed", s.seed}};
}

inline DatasetSpec dataset_spec_from_json(const json& j) {
  DatasetSpec s;
  try {
    s.side = j.at("side").get<int>();
    s.mask_radius = j.at("mask_radius").get<double>();
    s.grid_n = j.at("grid_n").get<int>();
    s.frames = j.at("frames").get<std::size_t>();
    s.peak = j.at("peak").get<double>();
    s.fluence_low = j.at("fluence_low").get<double>();
    s.fluence_high = j.at("fluence_high").get<double>();
    s.rotation_source = j.at("rotation_source").get<std::string>() == "random" ? RotationSource::random
                                                                               : RotationSource::grid;
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::io, std::string("dataset manifest: ") + e.what());
  }
  return s;
}

inline const char* kVariantDirs[] = {"K_star", "K_zero", "Kf_star", "Kf_zero"};

/// Dataset directory: dataset.json, truth.f64 and one frame directory per
/// variant (K_star, K_zero, Kf_star, Kf_zero).
inline void write_dataset(const fs::path& dir, const SyntheticDataset& d, json extra = json::object()) {
  fs::create_directories(dir);
  json m = std::move(extra);
  m["spec"] = to_json(d.spec);
  m["intensity_factor"] = d.intensity_factor;
  m["variants"] = {kVariantDirs[0], kVariantDirs[1], kVariantDirs[2], kVariantDirs[3]};
  write_volume(dir / "truth.f64", d.truth, {{"mask_radius", d.spec.mask_radius}});
  write_frames(dir / kVariantDirs[0], d.k_star);
  write_frames(dir / kVariantDirs[1], d.k_zero);
  write_frames(dir / kVariantDirs[2], d.kf_star);
  write_frames(dir / kVariantDirs[3], d.kf_zero);
  write_json(dir / "dataset.json", m);
}

inline SyntheticDataset read_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::io, "dataset directory not found: " + dir.string());
  const json m = read_json(dir / "dataset.json");
  SyntheticDataset d;
  d.spec = dataset_spec_from_json(m.at("spec"));
  d.intensity_factor = m.value("intensity_factor", 1.0);
  d.truth = read_volume(dir / "truth.f64");
  FrameSet* targets[] = {&d.k_star, &d.k_zero, &d.kf_star, &d.kf_zero};
  for (int v = 0; v < 4; ++v) {
    const fs::path sub = dir / kVariantDirs[v];
    if (!fs::is_directory(sub)) throw Error(ErrorKind::io, "dataset variant missing: " + sub.string());
    *targets[v] = read_frames(sub);
  }
  return d;
}

inline std::string format_double(double v) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

inline const char* kCurveHeader = "shell_radius,value,metric,label,side";

/// Appends rows (shell_radius, value, metric, label, side); absent shells
/// are written as nan.
inline void write_curve_rows(std::ostream& out, const ShellErrorCurve& c, int side) {
  for (std::size_t u = 0; u < c.size(); ++u)
    out << format_double(c.radius(u)) << ',' << format_double(c.values[u]) << ',' << to_string(c.metric)
        << ',' << c.label << ',' << side << '\n';
}

inline void write_curves(const fs::path& path, const std::vector<ShellErrorCurve>& curves, int side) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot open " + path.string() + " for writing");
  out << kCurveHeader << '\n';
  for (const auto& c : curves) write_curve_rows(out, c, side);
}

inline void write_trace(const fs::path& path, const std::vector<TraceRow>& trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot open " + path.string() + " for writing");
  out << "iteration,change_metric,klein_divergence,klein_divergence_before,skipped_rotations,empty_voxels\n";
  for (const auto& r : trace)
    out << r.iteration << ',' << format_double(r.change) << ',' << format_double(r.divergence_after) << ','
        << format_double(r.divergence_before) << ',' << r.skipped_rotations << ',' << r.empty_voxels << '\n';
}

}  // namespace emcboot::io
