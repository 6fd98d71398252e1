#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "heightbins/errors.hpp"
#include "heightbins/raster.hpp"
#include "heightbins/seed.hpp"

namespace heightbins {

/// Scene generator parameters. Sizes are in pixels, heights in meters.
struct SceneSpec {
  std::uint64_t seed = 1;
  std::size_t patch_size = 32;
  double gsd = 3.0;
  std::size_t buildings_min = 1;
  std::size_t buildings_max = 32;
  std::size_t footprint_min = 3;
  std::size_t footprint_max = 12;
  /// Target share of pixels below 1 m; buildings are added until the
  /// remainder is covered (or placement gives up).
  double background_fraction = 0.57;
  double height_log_mu = 2.2;
  double height_log_sigma = 0.7;
  double min_building_height = 1.5;
  double h_max = 100.0;
  double ground_noise = 0.3;
  /// Vegetation blobs per building. Low canopy stays below 1 m; a share of
  /// the blobs are trees that rise above it off the building footprints.
  double canopy_per_building = 0.5;
  double canopy_max_height = 0.9;
  double tree_fraction = 0.2;
  double tree_max_height = 12.0;
  double sun_azimuth_deg = 315.0;
  double sun_elevation_deg = 45.0;
  double image_noise = 0.02;

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (patch_size < 4) out.push_back("synth: patch_size must be at least 4");
    if (!(gsd > 0.0)) out.push_back("synth: gsd must be positive");
    if (buildings_min > buildings_max) out.push_back("synth: buildings_min exceeds buildings_max");
    if (footprint_min < 1 || footprint_min > footprint_max) out.push_back("synth: footprint range is empty");
    if (buildings_max > 0 && footprint_min + 2 > patch_size) {
      out.push_back("synth: footprint_min " + std::to_string(footprint_min) + " does not fit a " +
                    std::to_string(patch_size) + " px patch");
    }
    if (!(background_fraction >= 0.0 && background_fraction <= 1.0)) {
      out.push_back("synth: background_fraction must lie in [0,1]");
    }
    if (!(height_log_sigma >= 0.0)) out.push_back("synth: height_log_sigma must be nonnegative");
    if (!(min_building_height > 1.0 && min_building_height <= h_max)) {
      out.push_back("synth: min_building_height must lie in (1, h_max]");
    }
    if (!(ground_noise >= 0.0 && ground_noise < 1.0)) out.push_back("synth: ground_noise must lie in [0,1)");
    if (!(canopy_max_height >= 0.0 && canopy_max_height < 1.0)) {
      out.push_back("synth: canopy_max_height must lie in [0,1)");
    }
    if (!(canopy_per_building >= 0.0)) out.push_back("synth: canopy_per_building must be nonnegative");
    if (!(tree_fraction >= 0.0 && tree_fraction <= 1.0)) out.push_back("synth: tree_fraction must lie in [0,1]");
    if (!(tree_max_height > 1.0 && tree_max_height <= h_max)) {
      out.push_back("synth: tree_max_height must lie in (1, h_max]");
    }
    if (!(sun_elevation_deg > 0.0 && sun_elevation_deg <= 90.0)) {
      out.push_back("synth: sun_elevation_deg must lie in (0,90]");
    }
    if (!(image_noise >= 0.0)) out.push_back("synth: image_noise must be nonnegative");
    return out;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = p.front();
    for (std::size_t i = 1; i < p.size(); ++i) msg += "; " + p[i];
    throw ConfigError(msg);
  }
};

inline void to_json(nlohmann::json& j, const SceneSpec& s) {
  j = {{"seed", s.seed},
       {"patch_size", s.patch_size},
       {"gsd", s.gsd},
       {"buildings_min", s.buildings_min},
       {"buildings_max", s.buildings_max},
       {"footprint_min", s.footprint_min},
       {"footprint_max", s.footprint_max},
       {"background_fraction", s.background_fraction},
       {"height_log_mu", s.height_log_mu},
       {"height_log_sigma", s.height_log_sigma},
       {"min_building_height", s.min_building_height},
       {"h_max", s.h_max},
       {"ground_noise", s.ground_noise},
       {"canopy_per_building", s.canopy_per_building},
       {"canopy_max_height", s.canopy_max_height},
       {"tree_fraction", s.tree_fraction},
       {"tree_max_height", s.tree_max_height},
       {"sun_azimuth_deg", s.sun_azimuth_deg},
       {"sun_elevation_deg", s.sun_elevation_deg},
       {"image_noise", s.image_noise}};
}

/// Reads a spec; unknown keys and wrong types are reported together.
inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("synth: spec must be a JSON object");
  SceneSpec s;
  nlohmann::json defaults = s;
  std::vector<std::string> errs;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!defaults.contains(it.key())) {
      errs.push_back("synth: unknown key '" + it.key() + "'");
      continue;
    }
    const bool want_int = defaults[it.key()].is_number_integer();
    if (want_int ? !(it.value().is_number_integer() && it.value().get<std::int64_t>() >= 0) : !it.value().is_number()) {
      errs.push_back("synth: '" + it.key() + "' must be " + (want_int ? "a nonnegative integer" : "a number"));
      continue;
    }
    defaults[it.key()] = it.value();
  }
  if (errs.empty()) {
    const auto& d = defaults;
    s.seed = d["seed"];
    s.patch_size = d["patch_size"];
    s.gsd = d["gsd"];
    s.buildings_min = d["buildings_min"];
    s.buildings_max = d["buildings_max"];
    s.footprint_min = d["footprint_min"];
    s.footprint_max = d["footprint_max"];
    s.background_fraction = d["background_fraction"];
    s.height_log_mu = d["height_log_mu"];
    s.height_log_sigma = d["height_log_sigma"];
    s.min_building_height = d["min_building_height"];
    s.h_max = d["h_max"];
    s.ground_noise = d["ground_noise"];
    s.canopy_per_building = d["canopy_per_building"];
    s.canopy_max_height = d["canopy_max_height"];
    s.tree_fraction = d["tree_fraction"];
    s.tree_max_height = d["tree_max_height"];
    s.sun_azimuth_deg = d["sun_azimuth_deg"];
    s.sun_elevation_deg = d["sun_elevation_deg"];
    s.image_noise = d["image_noise"];
    const auto p = s.problems();
    errs.insert(errs.end(), p.begin(), p.end());
  }
  if (!errs.empty()) {
    std::string msg = errs.front();
    for (std::size_t i = 1; i < errs.size(); ++i) msg += "; " + errs[i];
    throw ConfigError(msg);
  }
  return s;
}

struct Scene {
  RasterPatch image;      // 3 channels, reflectance in [0,1]
  RasterPatch height;     // meters
  RasterPatch footprint;  // {0,1}
  std::size_t building_count = 0;
};

namespace detail {

struct Rect {
  std::size_t x0, y0, w, h;
};

inline bool rect_clear(const std::vector<std::uint8_t>& occ, std::size_t S, const Rect& r) {
  // One pixel of clearance keeps buildings separate components.
  const std::size_t ya = r.y0 > 0 ? r.y0 - 1 : 0, yb = std::min(S, r.y0 + r.h + 1);
  const std::size_t xa = r.x0 > 0 ? r.x0 - 1 : 0, xb = std::min(S, r.x0 + r.w + 1);
  for (std::size_t y = ya; y < yb; ++y)
    for (std::size_t x = xa; x < xb; ++x)
      if (occ[y * S + x]) return false;
  return true;
}

/// Cast shadows: a pixel is shaded when terrain toward the sun rises above
/// the sun ray through it.
inline std::vector<std::uint8_t> cast_shadows(const std::vector<double>& h, std::size_t S, double gsd,
                                              double azimuth_deg, double elevation_deg) {
  std::vector<std::uint8_t> shadow(S * S, 0);
  const double az = azimuth_deg * std::numbers::pi / 180.0;
  const double tan_el = std::tan(elevation_deg * std::numbers::pi / 180.0);
  // Direction toward the sun in image coordinates (y grows southward).
  const double dx = std::sin(az), dy = -std::cos(az);
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      const double h0 = h[y * S + x];
      for (double t = 1.0;; t += 0.5) {
        const double fx = static_cast<double>(x) + dx * t, fy = static_cast<double>(y) + dy * t;
        if (fx < 0 || fy < 0 || fx > static_cast<double>(S - 1) || fy > static_cast<double>(S - 1)) break;
        const double ray = h0 + t * gsd * tan_el;
        const double hs = h[static_cast<std::size_t>(std::lround(fy)) * S + static_cast<std::size_t>(std::lround(fx))];
        if (hs > ray) {
          shadow[y * S + x] = 1;
          break;
        }
        if (ray > 100.0 + h0) break;
      }
    }
  }
  return shadow;
}

}  // namespace detail

/// Generates an (image, height, footprint) triple from `spec` (including its
/// seed). Deterministic for a fixed spec.
inline Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  const std::size_t S = spec.patch_size;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform_int = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  std::vector<double> h(S * S);
  for (auto& v : h) v = spec.ground_noise * unit(rng);

  std::vector<std::uint8_t> occ(S * S, 0);

  // Vegetation blob on open ground: low canopy below 1 m, or a tree.
  auto grow_vegetation = [&] {
    const double cx = unit(rng) * static_cast<double>(S), cy = unit(rng) * static_cast<double>(S);
    const double spread = unit(rng);
    const bool tree = unit(rng) < spec.tree_fraction;
    // Tree crowns are compact; low canopy spreads wider.
    const double rad = tree ? 1.0 + 1.5 * spread : 1.5 + 2.5 * spread;
    const double shape = 0.5 + 0.5 * unit(rng);
    const double peak = tree ? 1.0 + (spec.tree_max_height - 1.0) * shape : spec.canopy_max_height * shape;
    const double cap = tree ? spec.tree_max_height : 0.99;
    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S; ++x) {
        if (occ[y * S + x]) continue;
        const double d2 = (static_cast<double>(x) - cx) * (static_cast<double>(x) - cx) +
                          (static_cast<double>(y) - cy) * (static_cast<double>(y) - cy);
        const double v = peak * std::exp(-d2 / (2.0 * rad * rad));
        h[y * S + x] = std::max(h[y * S + x], std::min(v, cap));
      }
    }
  };
  auto tall_pixels = [&] {
    return static_cast<std::size_t>(std::count_if(h.begin(), h.end(), [](double v) { return v >= 1.0; }));
  };

  // Buildings: non-overlapping rectangles, each followed by its share of
  // vegetation, until pixels at or above 1 m (roofs and trees) meet the
  // foreground target. Later roofs overwrite vegetation under them.
  const std::size_t max_buildings = spec.buildings_max;
  // Per-patch coverage varies around the corpus-level target.
  const double target_fg = (1.0 - spec.background_fraction) * static_cast<double>(S * S) * (0.75 + 0.5 * unit(rng));
  const std::size_t fmax = std::min(spec.footprint_max, S - 2);
  std::lognormal_distribution<double> height_dist(spec.height_log_mu, spec.height_log_sigma);
  std::size_t covered = 0, placed = 0;
  double owed = 0.0;
  for (int attempt = 0; attempt < 1000 && placed < max_buildings; ++attempt) {
    const double remaining = target_fg - static_cast<double>(covered);
    if (placed >= spec.buildings_min && remaining <= 0.0) break;
    detail::Rect r{0, 0, uniform_int(spec.footprint_min, fmax), uniform_int(spec.footprint_min, fmax)};
    // Shrink the last buildings toward the remaining area so coverage lands
    // near the target instead of overshooting by a whole footprint.
    while (placed >= spec.buildings_min && static_cast<double>(r.w * r.h) > 1.5 * remaining &&
           std::max(r.w, r.h) > spec.footprint_min) {
      if (r.w >= r.h) --r.w; else --r.h;
    }
    r.x0 = uniform_int(0, S - r.w);
    r.y0 = uniform_int(0, S - r.h);
    if (!detail::rect_clear(occ, S, r)) continue;
    const double bh = std::clamp(height_dist(rng), spec.min_building_height, spec.h_max);
    const bool gabled = unit(rng) < 0.3 && std::min(r.w, r.h) >= 4;
    for (std::size_t y = r.y0; y < r.y0 + r.h; ++y) {
      for (std::size_t x = r.x0; x < r.x0 + r.w; ++x) {
        double v = bh;
        if (gabled) {
          // Ridge along the long axis, eaves 15% lower than the ridge.
          const bool along_x = r.w >= r.h;
          const double span = static_cast<double>(along_x ? r.h : r.w) - 1.0;
          const double pos = static_cast<double>(along_x ? y - r.y0 : x - r.x0);
          v = bh * (0.85 + 0.15 * (1.0 - std::abs(2.0 * pos / span - 1.0)));
        }
        h[y * S + x] = std::clamp(v, spec.min_building_height, spec.h_max);
        occ[y * S + x] = 1;
      }
    }
    ++placed;
    for (owed += spec.canopy_per_building; owed >= 1.0; owed -= 1.0) grow_vegetation();
    covered = tall_pixels();
  }
  if (owed >= 0.5) grow_vegetation();


  Scene scene;
  scene.building_count = placed;
  scene.height = {S, S, 1, spec.gsd, RasterKind::height, std::vector<float>(S * S)};
  scene.footprint = {S, S, 1, spec.gsd, RasterKind::footprint, std::vector<float>(S * S)};
  for (std::size_t i = 0; i < S * S; ++i) {
    scene.height.values[i] = static_cast<float>(h[i]);
    scene.footprint.values[i] = occ[i] ? 1.0f : 0.0f;
  }

  // Rendering: albedo by surface class (roof tint follows height), Lambert
  // shading from the height gradient, cast shadows, sensor noise.
  const auto shadow = detail::cast_shadows(h, S, spec.gsd, spec.sun_azimuth_deg, spec.sun_elevation_deg);
  const double az = spec.sun_azimuth_deg * std::numbers::pi / 180.0;
  const double el = spec.sun_elevation_deg * std::numbers::pi / 180.0;
  const double lx = std::cos(el) * std::sin(az), ly = -std::cos(el) * std::cos(az), lz = std::sin(el);
  std::normal_distribution<double> noise(0.0, 1.0);
  scene.image = {S, S, 3, spec.gsd, RasterKind::image, std::vector<float>(3 * S * S)};
  const double log_hmax = std::log1p(spec.h_max);
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      const std::size_t i = y * S + x;
      auto hv = [&](long yy, long xx) {
        yy = std::clamp<long>(yy, 0, static_cast<long>(S) - 1);
        xx = std::clamp<long>(xx, 0, static_cast<long>(S) - 1);
        return h[static_cast<std::size_t>(yy) * S + static_cast<std::size_t>(xx)];
      };
      const long yl = static_cast<long>(y), xl = static_cast<long>(x);
      const double gx = (hv(yl, xl + 1) - hv(yl, xl - 1)) / (2.0 * spec.gsd);
      const double gy = (hv(yl + 1, xl) - hv(yl - 1, xl)) / (2.0 * spec.gsd);
      const double nn = std::sqrt(gx * gx + gy * gy + 1.0);
      const double lambert = std::max(0.0, (-gx * lx - gy * ly + lz) / nn);
      double rgb[3];
      if (occ[i]) {
        const double t = std::log1p(h[i]) / log_hmax;
        rgb[0] = 0.55 + 0.35 * t;
        rgb[1] = 0.45 + 0.10 * t;
        rgb[2] = 0.40 - 0.25 * t;
      } else {
        const double veg = std::clamp((h[i] - spec.ground_noise) / std::max(1e-9, spec.canopy_max_height), 0.0, 1.0);
        rgb[0] = 0.45 - 0.25 * veg;
        rgb[1] = 0.45 + 0.10 * veg;
        rgb[2] = 0.40 - 0.20 * veg;
      }
      const double light = (0.35 + 0.65 * lambert) * (shadow[i] ? 0.45 : 1.0);
      for (int c = 0; c < 3; ++c) {
        const double v = rgb[c] * light + spec.image_noise * noise(rng);
        scene.image.values[static_cast<std::size_t>(c) * S * S + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Corpus + manifest

struct ManifestEntry {
  std::string image, height, footprint;
  std::string split;
};

struct Manifest {
  std::filesystem::path base;  // directory the relative paths resolve against
  std::vector<ManifestEntry> entries;

  std::vector<const ManifestEntry*> split(const std::string& name) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
      if (e.split == name) out.push_back(&e);
    return out;
  }
  std::filesystem::path resolve(const std::string& p) const {
    const std::filesystem::path q(p);
    return q.is_absolute() ? q : base / q;
  }
};

inline nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : m.entries) {
    arr.push_back({{"image", e.image}, {"height", e.height}, {"footprint", e.footprint}, {"split", e.split}});
  }
  return arr;
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write manifest: " + path.string());
  f << manifest_to_json(m).dump(2) << '\n';
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("manifest: " + std::string(e.what()), e.byte);
  }
  if (!j.is_array()) throw DataError("manifest: expected a JSON array of entries");
  Manifest m;
  m.base = path.parent_path();
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    for (const char* k : {"image", "height", "footprint", "split"}) {
      if (!e.is_object() || !e.contains(k) || !e[k].is_string()) {
        throw DataError("manifest: entry " + std::to_string(i) + " lacks string field '" + k + "'");
      }
    }
    const std::string split = e["split"];
    if (split != "train" && split != "val" && split != "test") {
      throw DataError("manifest: entry " + std::to_string(i) + " has unknown split '" + split + "'");
    }
    m.entries.push_back({e["image"], e["height"], e["footprint"], split});
  }
  return m;
}

struct CorpusOptions {
  std::size_t count = 64;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
};

/// Split tag of patch `index` out of `count`: the leading share is train,
/// then val, then test.
inline std::string split_for(std::size_t index, const CorpusOptions& opt) {
  const auto n_test = static_cast<std::size_t>(std::lround(opt.test_fraction * static_cast<double>(opt.count)));
  const auto n_val = static_cast<std::size_t>(std::lround(opt.val_fraction * static_cast<double>(opt.count)));
  const std::size_t n_train = opt.count - std::min(opt.count, n_val + n_test);
  if (index < n_train) return "train";
  if (index < n_train + n_val) return "val";
  return "test";
}

/// Writes `opt.count` scenes as HMR1 files plus manifest.json into `dir`.
/// Patch i uses seed derive_seed(spec.seed, i).
inline Manifest synthesize_corpus(const SceneSpec& spec, const CorpusOptions& opt, const std::filesystem::path& dir) {
  spec.validate();
  if (opt.val_fraction < 0 || opt.test_fraction < 0 || opt.val_fraction + opt.test_fraction > 1.0) {
    throw ConfigError("synth: split fractions must be nonnegative and sum to at most 1");
  }
  std::filesystem::create_directories(dir);
  Manifest m;
  m.base = dir;
  for (std::size_t i = 0; i < opt.count; ++i) {
    SceneSpec s = spec;
    s.seed = derive_seed(spec.seed, i);
    const Scene scene = generate_scene(s);
    char stem[32];
    std::snprintf(stem, sizeof stem, "patch_%05zu", i);
    ManifestEntry e{std::string(stem) + "_image.hmr", std::string(stem) + "_height.hmr",
                    std::string(stem) + "_footprint.hmr", split_for(i, opt)};
    write_raster(scene.image, (dir / e.image).string());
    write_raster(scene.height, (dir / e.height).string());
    write_raster(scene.footprint, (dir / e.footprint).string());
    m.entries.push_back(std::move(e));
  }
  write_manifest(m, dir / "manifest.json");
  std::ofstream(dir / "scene_spec.json") << nlohmann::json(spec).dump(2) << '\n';
  return m;
}

}  // namespace heightbins
