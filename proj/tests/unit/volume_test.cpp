#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "rstn/volume.hpp"

using namespace rstn;
namespace fs = std::filesystem;

namespace {

vol::Volume make_volume(vol::Extents e, std::uint64_t seed) {
  CounterRng rng(seed);
  vol::Volume v;
  v.extents = e;
  v.intensities.resize(e.numel());
  for (double& x : v.intensities)
    x = static_cast<double>(static_cast<float>(rng.next_unit()));
  return v;
}

vol::LabelMask random_mask(vol::Extents e, std::uint64_t seed, double density = 0.3) {
  CounterRng rng(seed);
  vol::LabelMask m = vol::LabelMask::zeros(e);
  for (auto& x : m.values) x = rng.next_unit() < density ? 1 : 0;
  return m;
}

fs::path temp_dir() {
  const auto dir = fs::temp_directory_path() / "rstn_volume_test";
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("slice_stack picks neighbouring slices with edge replication") {
  const vol::Volume v = make_volume({6, 7, 12}, 1);

  const vol::SliceStack s = vol::slice_stack(v, vol::Axis::axial, 5);
  CHECK(s.image.shape == std::vector<int>{3, 6, 7});
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 7; ++c) {
      CHECK(s.image.at3(0, r, c) == v.at(r, c, 4));
      CHECK(s.image.at3(1, r, c) == v.at(r, c, 5));
      CHECK(s.image.at3(2, r, c) == v.at(r, c, 6));
    }

  const vol::SliceStack s0 = vol::slice_stack(v, vol::Axis::axial, 0);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 7; ++c) {
      CHECK(s0.image.at3(0, r, c) == v.at(r, c, 0));  // replicated edge
      CHECK(s0.image.at3(1, r, c) == v.at(r, c, 0));
      CHECK(s0.image.at3(2, r, c) == v.at(r, c, 1));
    }

  CHECK_THROWS_AS(vol::slice_stack(v, vol::Axis::axial, 12), Error);
}

TEST_CASE("slice_stack spatial shape follows the sliced axis") {
  const vol::Volume v = make_volume({8, 9, 10}, 2);
  CHECK(vol::slice_stack(v, vol::Axis::coronal, 3).image.shape ==
        std::vector<int>{3, 9, 10});
  CHECK(vol::slice_stack(v, vol::Axis::sagittal, 3).image.shape ==
        std::vector<int>{3, 8, 10});
  CHECK(vol::slice_stack(v, vol::Axis::axial, 3).image.shape ==
        std::vector<int>{3, 8, 9});
}

TEST_CASE("reassemble round-trips center channels and rejects bad shapes") {
  const vol::Extents e{5, 6, 7};
  const vol::Volume v = make_volume(e, 3);
  for (const vol::Axis axis :
       {vol::Axis::coronal, vol::Axis::sagittal, vol::Axis::axial}) {
    std::vector<tc::Tensor> maps;
    const int n = vol::axis_extent(e, axis);
    for (int i = 0; i < n; ++i)
      maps.push_back(vol::slice_of(v.intensities, e, axis, i));
    const vol::ProbVolume p = vol::reassemble(maps, e, axis);
    CHECK(p.values == v.intensities);

    for (int i = 0; i < n; ++i) {
      const tc::Tensor back = vol::slice_of(p.values, e, axis, i);
      CHECK(back.data == maps[static_cast<std::size_t>(i)].data);
    }
  }

  std::vector<tc::Tensor> constant(
      static_cast<std::size_t>(e.l),
      tc::Tensor::full({1, e.w, e.h}, 0.3));
  const vol::ProbVolume p = vol::reassemble(constant, e, vol::Axis::axial);
  for (double x : p.values) CHECK(x == 0.3);

  std::vector<tc::Tensor> bad = constant;
  bad[2] = tc::Tensor::full({1, e.w, e.h + 1}, 0.3);
  CHECK_THROWS_AS(vol::reassemble(bad, e, vol::Axis::axial), Error);
  bad.pop_back();
  bad.pop_back();
  CHECK_THROWS_AS(vol::reassemble(bad, e, vol::Axis::axial), Error);
}

TEST_CASE("dsc identities and the counting formula") {
  const vol::Extents e{4, 4, 4};
  vol::LabelMask a = vol::LabelMask::zeros(e);
  a.values[3] = 1;
  a.values[9] = 1;
  CHECK(vol::dsc(a, a) == 1.0);

  vol::LabelMask b = vol::LabelMask::zeros(e);
  b.values[9] = 1;
  b.values[20] = 1;
  // |a|=2, |b|=2, overlap 1 -> 0.5
  CHECK(vol::dsc(a, b) == 0.5);
  CHECK(vol::dsc(b, a) == 0.5);

  vol::LabelMask c = vol::LabelMask::zeros(e);
  c.values[40] = 1;
  CHECK(vol::dsc(a, c) == 0.0);

  const vol::LabelMask empty1 = vol::LabelMask::zeros(e);
  const vol::LabelMask empty2 = vol::LabelMask::zeros(e);
  CHECK(vol::dsc(empty1, empty2) == 1.0);

  vol::LabelMask wrong = vol::LabelMask::zeros({4, 4, 5});
  CHECK_THROWS_AS(vol::dsc(a, wrong), Error);
}

TEST_CASE("dsc equals brute-force voxel enumeration on random 8x8x8 masks") {
  const vol::Extents e{8, 8, 8};
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_mask(e, 1000 + trial, 0.2);
    const auto b = random_mask(e, 5000 + trial, 0.25);
    CHECK(std::abs(vol::dsc(a, b) - oracle::dsc_count(a.values, b.values)) <=
          1e-12);
  }
}

TEST_CASE("fuse_and_binarize: mean of equals, 0.5 boundary, empty maps") {
  const vol::Extents e{4, 5, 6};
  vol::ProbVolume p = vol::ProbVolume::zeros(e);
  CounterRng rng(9);
  for (double& x : p.values) x = rng.next_unit();
  const auto [fused, mask] = vol::fuse_and_binarize(p, p, p);
  for (std::size_t i = 0; i < fused.values.size(); ++i) {
    // (p+p+p)/3 re-rounds; equality holds to 1 ulp
    CHECK(fused.values[i] == doctest::Approx(p.values[i]).epsilon(1e-15));
    CHECK(mask.values[i] == (fused.values[i] >= 0.5 ? 1 : 0));
  }

  vol::ProbVolume a = vol::ProbVolume::zeros(e);
  vol::ProbVolume b = vol::ProbVolume::zeros(e);
  vol::ProbVolume c = vol::ProbVolume::zeros(e);
  a.values[0] = 0.6;
  b.values[0] = 0.6;
  c.values[0] = 0.3;
  const auto [f2, m2] = vol::fuse_and_binarize(a, b, c);
  CHECK(f2.values[0] == 0.5);  // the >= threshold includes the boundary
  CHECK(m2.values[0] == 1);

  const vol::ProbVolume zero = vol::ProbVolume::zeros(e);
  const auto [f3, m3] = vol::fuse_and_binarize(zero, zero, zero);
  CHECK(m3.foreground_count() == 0);

  vol::ProbVolume wrong = vol::ProbVolume::zeros({4, 5, 7});
  CHECK_THROWS_AS(vol::fuse_and_binarize(a, b, wrong), Error);
}

TEST_CASE("fused probabilities stay in [0,1] when inputs do") {
  const vol::Extents e{5, 5, 5};
  vol::ProbVolume a = vol::ProbVolume::zeros(e), b = a, c = a;
  CounterRng rng(77);
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    a.values[i] = rng.next_unit();
    b.values[i] = rng.next_unit();
    c.values[i] = rng.next_unit();
  }
  const auto [fused, mask] = vol::fuse_and_binarize(a, b, c);
  for (double x : fused.values) {
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
  }
}

TEST_CASE("RVOL v1 round trip is bit-exact for volumes and masks") {
  const auto dir = temp_dir();
  for (int trial = 0; trial < 8; ++trial) {
    const vol::Volume v = make_volume({5, 6, 4}, 100 + trial);
    const auto header = dir / ("v" + std::to_string(trial) + ".vol.json");
    vol::save_volume(v, header);
    const vol::Volume lv = vol::load_volume(header);
    CHECK(lv.extents == v.extents);
    CHECK(std::memcmp(lv.intensities.data(), v.intensities.data(),
                      v.intensities.size() * sizeof(double)) == 0);

    const vol::LabelMask m = random_mask({5, 6, 4}, 200 + trial);
    const auto mheader = dir / ("m" + std::to_string(trial) + ".mask.json");
    vol::save_mask(m, mheader);
    const vol::LabelMask lm = vol::load_mask(mheader);
    CHECK(lm.values == m.values);
  }
}

TEST_CASE("RVOL loader rejects corrupt containers") {
  const auto dir = temp_dir();
  const vol::Volume v = make_volume({4, 4, 4}, 1);
  const auto header = dir / "bad.vol.json";
  vol::save_volume(v, header);

  // dtype mismatch: a mask loader pointed at a volume
  CHECK_THROWS_AS(vol::load_mask(header), Error);

  // truncated payload
  fs::resize_file(dir / "bad.vol.raw", 16);
  CHECK_THROWS_AS(vol::load_volume(header), Error);

  // malformed header
  std::ofstream os(header);
  os << "{not json";
  os.close();
  CHECK_THROWS_AS(vol::load_volume(header), Error);

  CHECK_THROWS_AS(vol::load_volume(dir / "missing.vol.json"), Error);
}

TEST_CASE("normalize_intensities windows, clamps and rounds through f32") {
  std::vector<double> raw{-100.0, 0.0, 50.0, 100.0, 400.0};
  vol::normalize_intensities(raw, 0.0, 100.0);
  CHECK(raw[0] == 0.0);
  CHECK(raw[1] == 0.0);
  CHECK(raw[2] == 0.5);
  CHECK(raw[3] == 1.0);
  CHECK(raw[4] == 1.0);
  for (double x : raw)
    CHECK(static_cast<double>(static_cast<float>(x)) == x);
  CHECK_THROWS_AS(vol::normalize_intensities(raw, 1.0, 1.0), Error);
}
