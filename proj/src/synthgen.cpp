#include "rstn/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "rstn/rng.hpp"

namespace rstn::synth {

using nlohmann::json;

namespace {
constexpr std::uint64_t kTagPhantom = 0x7068616e746f6d00ull;
}

void PhantomSpec::validate() const {
  require(extents.w >= 32 && extents.h >= 32 && extents.l >= 32,
          "phantom extents must be >= 32 per axis");
  require(target_fraction_lo > 0.0 && target_fraction_hi <= 0.05 &&
              target_fraction_lo <= target_fraction_hi,
          "target fraction range must lie within (0, 0.05]");
  require(target_ellipsoids_lo >= 1 && target_ellipsoids_lo <= target_ellipsoids_hi,
          "bad target ellipsoid count range");
  require(clutter_lo >= 0 && clutter_lo <= clutter_hi, "bad clutter count range");
  require(noise_sigma >= 0.0, "noise sigma must be >= 0");
  for (const auto& band : {target_band, clutter_band, background_band})
    require(band[0] >= 0.0 && band[1] <= 1.0 && band[0] <= band[1],
            "intensity bands must be ordered subranges of [0,1]");
}

vol::LabelMask rasterize_ellipsoids(const vol::Extents& e,
                                    const std::vector<Ellipsoid>& shapes) {
  vol::LabelMask mask = vol::LabelMask::zeros(e);
  for (const Ellipsoid& s : shapes) {
    const int x0 = std::max(0, static_cast<int>(std::floor(s.cx - s.ax)));
    const int x1 = std::min(e.w - 1, static_cast<int>(std::ceil(s.cx + s.ax)));
    const int y0 = std::max(0, static_cast<int>(std::floor(s.cy - s.ay)));
    const int y1 = std::min(e.h - 1, static_cast<int>(std::ceil(s.cy + s.ay)));
    const int z0 = std::max(0, static_cast<int>(std::floor(s.cz - s.az)));
    const int z1 = std::min(e.l - 1, static_cast<int>(std::ceil(s.cz + s.az)));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
          if (s.contains(x, y, z)) mask.values[vol::voxel_index(e, x, y, z)] = 1;
  }
  return mask;
}

namespace {

// Target template in unit coordinates; scaled uniformly about the origin
// until the rasterized voxel count lands in the requested fraction window.
struct TargetTemplate {
  std::vector<Ellipsoid> parts;  // centers relative to target center
};

std::vector<Ellipsoid> scaled_target(const TargetTemplate& tpl, double cx,
                                     double cy, double cz, double s) {
  std::vector<Ellipsoid> out;
  out.reserve(tpl.parts.size());
  for (const Ellipsoid& p : tpl.parts) {
    out.push_back(Ellipsoid{cx + p.cx * s, cy + p.cy * s, cz + p.cz * s,
                            p.ax * s, p.ay * s, p.az * s});
  }
  return out;
}

std::size_t count_voxels(const vol::Extents& e, const std::vector<Ellipsoid>& shapes) {
  return rasterize_ellipsoids(e, shapes).foreground_count();
}

}  // namespace

std::pair<vol::Volume, vol::LabelMask> generate(const PhantomSpec& spec,
                                                GenerationInfo* info) {
  spec.validate();
  const vol::Extents e = spec.extents;
  const double n_total = static_cast<double>(e.numel());
  CounterRng rng(derive_seed(spec.seed, kTagPhantom));

  // Target shape template.
  TargetTemplate tpl;
  const int parts = rng.next_int(spec.target_ellipsoids_lo, spec.target_ellipsoids_hi);
  for (int i = 0; i < parts; ++i) {
    Ellipsoid p;
    if (i == 0) {
      p.cx = p.cy = p.cz = 0.0;
      p.ax = rng.next_in(0.6, 1.0);
      p.ay = rng.next_in(0.6, 1.0);
      p.az = rng.next_in(0.6, 1.0);
    } else {
      const Ellipsoid& root = tpl.parts[0];
      p.cx = rng.next_in(-0.7, 0.7) * root.ax;
      p.cy = rng.next_in(-0.7, 0.7) * root.ay;
      p.cz = rng.next_in(-0.7, 0.7) * root.az;
      p.ax = rng.next_in(0.35, 0.8) * root.ax;
      p.ay = rng.next_in(0.35, 0.8) * root.ay;
      p.az = rng.next_in(0.35, 0.8) * root.az;
    }
    tpl.parts.push_back(p);
  }

  const double cx = e.w * rng.next_in(0.38, 0.62);
  const double cy = e.h * rng.next_in(0.38, 0.62);
  const double cz = e.l * rng.next_in(0.38, 0.62);

  const std::size_t lo_count = static_cast<std::size_t>(
      std::ceil(spec.target_fraction_lo * n_total));
  const std::size_t hi_count = static_cast<std::size_t>(
      std::floor(spec.target_fraction_hi * n_total));
  require(lo_count >= 1 && lo_count <= hi_count,
          "target fraction window admits no voxel count");

  // Largest scale that keeps the whole template inside the volume.
  double reach = 0.0;
  for (const Ellipsoid& p : tpl.parts) {
    reach = std::max(reach, std::abs(p.cx) + p.ax);
    reach = std::max(reach, std::abs(p.cy) + p.ay);
    reach = std::max(reach, std::abs(p.cz) + p.az);
  }
  const double margin = 2.0;
  double border = std::min({cx, cy, cz, e.w - cx, e.h - cy, e.l - cz});
  double s_hi = (border - margin) / reach;
  double s_lo = 0.5;
  require(s_hi > s_lo, "infeasible phantom spec: target cannot fit");
  require(count_voxels(e, scaled_target(tpl, cx, cy, cz, s_hi)) >= lo_count,
          "infeasible phantom spec: target cannot reach requested fraction");

  std::vector<Ellipsoid> target;
  std::size_t count = 0;
  bool hit = false;
  for (int iter = 0; iter < 64; ++iter) {
    const double s = 0.5 * (s_lo + s_hi);
    target = scaled_target(tpl, cx, cy, cz, s);
    count = count_voxels(e, target);
    if (count < lo_count) {
      s_lo = s;
    } else if (count > hi_count) {
      s_hi = s;
    } else {
      hit = true;
      break;
    }
  }
  require(hit, "infeasible phantom spec: fraction window too narrow to hit");

  // Clutter ellipsoids; drawn before the target so the target overwrites.
  std::vector<Ellipsoid> clutter;
  const int n_clutter = rng.next_int(spec.clutter_lo, spec.clutter_hi);
  for (int i = 0; i < n_clutter; ++i) {
    Ellipsoid c;
    c.ax = rng.next_in(2.0, 6.0);
    c.ay = rng.next_in(2.0, 6.0);
    c.az = rng.next_in(2.0, 6.0);
    c.cx = rng.next_in(c.ax + 1.0, e.w - c.ax - 1.0);
    c.cy = rng.next_in(c.ay + 1.0, e.h - c.ay - 1.0);
    c.cz = rng.next_in(c.az + 1.0, e.l - c.az - 1.0);
    clutter.push_back(c);
  }

  vol::Volume v;
  v.extents = e;
  v.spacing = spec.spacing;
  const double bg = rng.next_in(spec.background_band[0], spec.background_band[1]);
  v.intensities.assign(e.numel(), bg);

  for (const Ellipsoid& c : clutter) {
    const double val = rng.next_in(spec.clutter_band[0], spec.clutter_band[1]);
    const int x0 = std::max(0, static_cast<int>(std::floor(c.cx - c.ax)));
    const int x1 = std::min(e.w - 1, static_cast<int>(std::ceil(c.cx + c.ax)));
    const int y0 = std::max(0, static_cast<int>(std::floor(c.cy - c.ay)));
    const int y1 = std::min(e.h - 1, static_cast<int>(std::ceil(c.cy + c.ay)));
    const int z0 = std::max(0, static_cast<int>(std::floor(c.cz - c.az)));
    const int z1 = std::min(e.l - 1, static_cast<int>(std::ceil(c.cz + c.az)));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
          if (c.contains(x, y, z))
            v.intensities[vol::voxel_index(e, x, y, z)] = val;
  }

  vol::LabelMask mask = rasterize_ellipsoids(e, target);
  const double target_val = rng.next_in(spec.target_band[0], spec.target_band[1]);
  for (std::size_t i = 0; i < mask.values.size(); ++i)
    if (mask.values[i]) v.intensities[i] = target_val;

  if (spec.noise_sigma > 0.0) {
    for (double& x : v.intensities) x += spec.noise_sigma * rng.next_normal();
  }
  for (double& x : v.intensities)
    x = static_cast<double>(static_cast<float>(std::clamp(x, 0.0, 1.0)));

  if (info) {
    info->target = target;
    info->clutter = clutter;
    info->target_fraction = static_cast<double>(count) / n_total;
  }
  v.validate();
  mask.validate();
  return {std::move(v), std::move(mask)};
}

std::vector<CorpusCase> generate_corpus(const PhantomSpec& spec, int n,
                                        std::uint64_t seed_base) {
  require(n >= 1, "corpus size must be >= 1");
  std::vector<CorpusCase> cases(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    PhantomSpec s = spec;
    s.seed = seed_base + static_cast<std::uint64_t>(i);
    char id[32];
    std::snprintf(id, sizeof(id), "case_%04d", i);
    auto [v, m] = generate(s);
    cases[static_cast<std::size_t>(i)] =
        CorpusCase{id, s.seed, std::move(v), std::move(m)};
  }
  return cases;
}

namespace {

json spec_to_json(const PhantomSpec& s) {
  json j;
  j["extents"] = {s.extents.w, s.extents.h, s.extents.l};
  j["spacing"] = s.spacing;
  j["target-fraction"] = {s.target_fraction_lo, s.target_fraction_hi};
  j["target-ellipsoids"] = {s.target_ellipsoids_lo, s.target_ellipsoids_hi};
  j["clutter-count"] = {s.clutter_lo, s.clutter_hi};
  j["noise-sigma"] = s.noise_sigma;
  j["target-band"] = s.target_band;
  j["clutter-band"] = s.clutter_band;
  j["background-band"] = s.background_band;
  return j;
}

PhantomSpec spec_from_json(const json& j) {
  PhantomSpec s;
  if (j.contains("extents")) {
    s.extents = {j["extents"][0].get<int>(), j["extents"][1].get<int>(),
                 j["extents"][2].get<int>()};
  }
  if (j.contains("spacing"))
    for (int i = 0; i < 3; ++i)
      s.spacing[static_cast<std::size_t>(i)] = j["spacing"][static_cast<std::size_t>(i)].get<double>();
  if (j.contains("target-fraction")) {
    s.target_fraction_lo = j["target-fraction"][0].get<double>();
    s.target_fraction_hi = j["target-fraction"][1].get<double>();
  }
  if (j.contains("target-ellipsoids")) {
    s.target_ellipsoids_lo = j["target-ellipsoids"][0].get<int>();
    s.target_ellipsoids_hi = j["target-ellipsoids"][1].get<int>();
  }
  if (j.contains("clutter-count")) {
    s.clutter_lo = j["clutter-count"][0].get<int>();
    s.clutter_hi = j["clutter-count"][1].get<int>();
  }
  if (j.contains("noise-sigma")) s.noise_sigma = j["noise-sigma"].get<double>();
  auto band = [&](const char* key, std::array<double, 2>& out) {
    if (j.contains(key)) {
      out[0] = j[key][0].get<double>();
      out[1] = j[key][1].get<double>();
    }
  };
  band("target-band", s.target_band);
  band("clutter-band", s.clutter_band);
  band("background-band", s.background_band);
  if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
  return s;
}

}  // namespace

PhantomSpec phantom_spec_from_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(is.good(), "cannot open phantom spec " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw Error("malformed phantom spec " + path.string() + ": " + e.what());
  }
  PhantomSpec s = spec_from_json(j);
  s.validate();
  return s;
}

std::filesystem::path write_corpus(const std::vector<CorpusCase>& cases,
                                   const PhantomSpec& spec,
                                   std::uint64_t seed_base,
                                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "rstn-corpus";
  manifest["version"] = 1;
  manifest["seed-base"] = seed_base;
  manifest["spec"] = spec_to_json(spec);
  json case_list = json::array();
  for (const CorpusCase& c : cases) {
    const std::string vol_name = c.id + ".vol.json";
    const std::string mask_name = c.id + ".mask.json";
    vol::save_volume(c.volume, dir / vol_name);
    vol::save_mask(c.mask, dir / mask_name);
    case_list.push_back(
        {{"id", c.id}, {"seed", c.seed}, {"volume", vol_name}, {"mask", mask_name}});
  }
  manifest["cases"] = case_list;
  const auto manifest_path = dir / "corpus.json";
  std::ofstream os(manifest_path);
  require(os.good(), "cannot write " + manifest_path.string());
  os << manifest.dump(2) << "\n";
  return manifest_path;
}

std::vector<CorpusEntry> read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  require(is.good(), "cannot open corpus manifest " + manifest_path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw Error("malformed corpus manifest: " + std::string(e.what()));
  }
  require(j.value("format", "") == "rstn-corpus" && j.value("version", 0) == 1,
          "not an rstn-corpus manifest: " + manifest_path.string());
  const auto base = manifest_path.parent_path();
  std::vector<CorpusEntry> out;
  for (const auto& c : j.at("cases")) {
    CorpusEntry e;
    e.id = c.at("id").get<std::string>();
    e.seed = c.at("seed").get<std::uint64_t>();
    e.volume_path = base / c.at("volume").get<std::string>();
    e.mask_path = base / c.at("mask").get<std::string>();
    out.push_back(std::move(e));
  }
  require(!out.empty(), "corpus manifest lists no cases");
  return out;
}

}  // namespace rstn::synth
