#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "rstn/volume.hpp"

namespace rstn::synth {

struct Ellipsoid {
  double cx = 0, cy = 0, cz = 0;  // center, voxel coordinates
  double ax = 1, ay = 1, az = 1;  // semi-axes, voxels

  bool contains(double x, double y, double z) const {
    const double dx = (x - cx) / ax, dy = (y - cy) / ay, dz = (z - cz) / az;
    return dx * dx + dy * dy + dz * dz <= 1.0;
  }
};

// Phantom recipe: one small irregular target (a union of overlapping
// ellipsoids) over a cluttered background whose intensity band overlaps the
// target band, plus Gaussian noise. Deterministic in `seed`.
struct PhantomSpec {
  vol::Extents extents{64, 64, 64};
  std::array<double, 3> spacing = {1.0, 1.0, 1.0};
  double target_fraction_lo = 0.008;
  double target_fraction_hi = 0.015;
  int target_ellipsoids_lo = 2;
  int target_ellipsoids_hi = 4;
  int clutter_lo = 6;
  int clutter_hi = 12;
  double noise_sigma = 0.05;
  std::array<double, 2> target_band = {0.55, 0.75};
  std::array<double, 2> clutter_band = {0.45, 0.80};
  std::array<double, 2> background_band = {0.05, 0.25};
  std::uint64_t seed = 0;

  void validate() const;
};

struct GenerationInfo {
  std::vector<Ellipsoid> target;
  std::vector<Ellipsoid> clutter;
  double target_fraction = 0.0;
};

vol::LabelMask rasterize_ellipsoids(const vol::Extents& e,
                                    const std::vector<Ellipsoid>& shapes);

std::pair<vol::Volume, vol::LabelMask> generate(const PhantomSpec& spec,
                                                GenerationInfo* info = nullptr);

struct CorpusCase {
  std::string id;
  std::uint64_t seed = 0;
  vol::Volume volume;
  vol::LabelMask mask;
};

// Cases are generated with per-case seeds seed_base + i.
std::vector<CorpusCase> generate_corpus(const PhantomSpec& spec, int n,
                                        std::uint64_t seed_base);

// Emits RVOL pairs plus a manifest JSON into `dir`; returns the manifest path.
std::filesystem::path write_corpus(const std::vector<CorpusCase>& cases,
                                   const PhantomSpec& spec,
                                   std::uint64_t seed_base,
                                   const std::filesystem::path& dir);

struct CorpusEntry {
  std::string id;
  std::uint64_t seed = 0;
  std::filesystem::path volume_path;
  std::filesystem::path mask_path;
};

std::vector<CorpusEntry> read_manifest(const std::filesystem::path& manifest_path);

PhantomSpec phantom_spec_from_json_file(const std::filesystem::path& path);

}  // namespace rstn::synth
