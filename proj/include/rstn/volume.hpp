#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rstn/common.hpp"
#include "rstn/tensor.hpp"

namespace rstn::vol {

// Voxel index order is x-fastest: i = x + W*(y + H*z).
struct Extents {
  int w = 0, h = 0, l = 0;
  std::size_t numel() const {
    return static_cast<std::size_t>(w) * h * static_cast<std::size_t>(l);
  }
  bool operator==(const Extents&) const = default;
};

inline std::size_t voxel_index(const Extents& e, int x, int y, int z) {
  return static_cast<std::size_t>(x) +
         static_cast<std::size_t>(e.w) * (static_cast<std::size_t>(y) +
                                          static_cast<std::size_t>(e.h) * z);
}

struct Volume {
  Extents extents;
  std::array<double, 3> spacing = {1.0, 1.0, 1.0};
  std::vector<double> intensities;  // normalized to [0,1]

  double at(int x, int y, int z) const {
    return intensities[voxel_index(extents, x, y, z)];
  }
  void validate() const;
};

struct LabelMask {
  Extents extents;
  std::vector<std::uint8_t> values;  // strictly 0/1

  static LabelMask zeros(Extents e) {
    return LabelMask{e, std::vector<std::uint8_t>(e.numel(), 0)};
  }
  std::uint8_t at(int x, int y, int z) const {
    return values[voxel_index(extents, x, y, z)];
  }
  std::size_t foreground_count() const;
  void validate() const;
};

struct ProbVolume {
  Extents extents;
  std::vector<double> values;  // in [0,1]

  static ProbVolume zeros(Extents e) {
    return ProbVolume{e, std::vector<double>(e.numel(), 0.0)};
  }
  double at(int x, int y, int z) const {
    return values[voxel_index(extents, x, y, z)];
  }
};

enum class Axis { coronal = 0, sagittal = 1, axial = 2 };

inline Axis axis_of(Viewpoint v) { return static_cast<Axis>(v); }
int axis_extent(const Extents& e, Axis a);
// Slice image dims (rows, cols) for a given slicing axis: the remaining
// extents in (x,y,z) order.
std::pair<int, int> slice_dims(const Extents& e, Axis a);

// Three neighbouring slices stacked as channels (index-1, index, index+1),
// border slices replicated.
struct SliceStack {
  Axis axis;
  int index = 0;
  tc::Tensor image;  // [3, rows, cols]
};

SliceStack slice_stack(const Volume& v, Axis axis, int index);

// Single 2D slice of a scalar field as a [1, rows, cols] tensor.
tc::Tensor slice_of(const std::vector<double>& grid, const Extents& e, Axis a,
                    int index);
tc::Tensor mask_slice(const LabelMask& m, Axis a, int index);

// Writes a [1,rows,cols] or [rows*cols] map into slice `index` of `dst`.
void store_slice(ProbVolume& dst, Axis a, int index, const tc::Tensor& map);

// One probability map per slice index along `axis`.
ProbVolume reassemble(const std::vector<tc::Tensor>& maps, const Extents& e,
                      Axis axis);

double dsc(const LabelMask& a, const LabelMask& b);

// Voxelwise mean of the three per-view maps and its >=0.5 binarization.
std::pair<ProbVolume, LabelMask> fuse_and_binarize(const ProbVolume& pc,
                                                   const ProbVolume& ps,
                                                   const ProbVolume& pa);

LabelMask binarize(const ProbVolume& p, double threshold = 0.5);

// Affine intensity windowing (min,max) -> [0,1] with clamping, rounded
// through f32 so in-memory volumes match their RVOL payloads bit-exactly.
void normalize_intensities(std::vector<double>& raw, double window_min,
                           double window_max);

// --- RVOL v1 container ---------------------------------------------------
// JSON header {format, version, dtype, extents, spacing, byte-order,
// data-file} next to a raw little-endian payload, x-fastest voxel order.
// dtype is "f32" for volumes and "u8" for masks.

void save_volume(const Volume& v, const std::filesystem::path& header_path);
Volume load_volume(const std::filesystem::path& header_path);
void save_mask(const LabelMask& m, const std::filesystem::path& header_path);
LabelMask load_mask(const std::filesystem::path& header_path);

}  // namespace rstn::vol
