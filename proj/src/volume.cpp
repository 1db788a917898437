#include "rstn/volume.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace rstn::vol {

using nlohmann::json;

void Volume::validate() const {
  require(extents.w >= 3 && extents.h >= 3 && extents.l >= 3,
          "volume extents must be >= 3 on every axis");
  require(intensities.size() == extents.numel(), "volume payload size mismatch");
  for (double v : intensities)
    require(v >= 0.0 && v <= 1.0, "volume intensities must lie in [0,1]");
}

void LabelMask::validate() const {
  require(values.size() == extents.numel(), "mask payload size mismatch");
  for (std::uint8_t v : values)
    require(v == 0 || v == 1, "mask values must be strictly binary");
}

std::size_t LabelMask::foreground_count() const {
  std::size_t n = 0;
  for (std::uint8_t v : values) n += v;
  return n;
}

int axis_extent(const Extents& e, Axis a) {
  switch (a) {
    case Axis::coronal: return e.w;
    case Axis::sagittal: return e.h;
    default: return e.l;
  }
}

std::pair<int, int> slice_dims(const Extents& e, Axis a) {
  switch (a) {
    case Axis::coronal: return {e.h, e.l};
    case Axis::sagittal: return {e.w, e.l};
    default: return {e.w, e.h};
  }
}

namespace {

std::size_t grid_index(const Extents& e, Axis a, int index, int r, int c) {
  switch (a) {
    case Axis::coronal: return voxel_index(e, index, r, c);
    case Axis::sagittal: return voxel_index(e, r, index, c);
    default: return voxel_index(e, r, c, index);
  }
}

void check_index(const Extents& e, Axis a, int index) {
  require(index >= 0 && index < axis_extent(e, a),
          "slice index " + std::to_string(index) + " out of range");
}

}  // namespace

tc::Tensor slice_of(const std::vector<double>& grid, const Extents& e, Axis a,
                    int index) {
  check_index(e, a, index);
  const auto [rows, cols] = slice_dims(e, a);
  tc::Tensor t = tc::Tensor::zeros({1, rows, cols});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      t.at3(0, r, c) = grid[grid_index(e, a, index, r, c)];
  return t;
}

tc::Tensor mask_slice(const LabelMask& m, Axis a, int index) {
  check_index(m.extents, a, index);
  const auto [rows, cols] = slice_dims(m.extents, a);
  tc::Tensor t = tc::Tensor::zeros({1, rows, cols});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      t.at3(0, r, c) = m.values[grid_index(m.extents, a, index, r, c)];
  return t;
}

SliceStack slice_stack(const Volume& v, Axis axis, int index) {
  check_index(v.extents, axis, index);
  const auto [rows, cols] = slice_dims(v.extents, axis);
  const int n = axis_extent(v.extents, axis);
  tc::Tensor img = tc::Tensor::zeros({3, rows, cols});
  for (int ch = 0; ch < 3; ++ch) {
    const int src = std::clamp(index + ch - 1, 0, n - 1);  // edge replication
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        img.at3(ch, r, c) = v.intensities[grid_index(v.extents, axis, src, r, c)];
  }
  return SliceStack{axis, index, std::move(img)};
}

void store_slice(ProbVolume& dst, Axis a, int index, const tc::Tensor& map) {
  check_index(dst.extents, a, index);
  const auto [rows, cols] = slice_dims(dst.extents, a);
  require(map.numel() == rows * cols, "store_slice: map shape mismatch");
  const double* src = map.data.data();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      dst.values[grid_index(dst.extents, a, index, r, c)] =
          src[static_cast<std::size_t>(r) * cols + c];
}

ProbVolume reassemble(const std::vector<tc::Tensor>& maps, const Extents& e,
                      Axis axis) {
  const int n = axis_extent(e, axis);
  require(static_cast<int>(maps.size()) == n,
          "reassemble: expected one map per slice index (" + std::to_string(n) +
              "), got " + std::to_string(maps.size()));
  const auto [rows, cols] = slice_dims(e, axis);
  ProbVolume out = ProbVolume::zeros(e);
  for (int i = 0; i < n; ++i) {
    require(maps[static_cast<std::size_t>(i)].numel() == rows * cols,
            "reassemble: map " + std::to_string(i) + " has inconsistent shape");
    store_slice(out, axis, i, maps[static_cast<std::size_t>(i)]);
  }
  return out;
}

double dsc(const LabelMask& a, const LabelMask& b) {
  require(a.extents == b.extents, "dsc: extent mismatch");
  std::size_t na = 0, nb = 0, inter = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    na += a.values[i];
    nb += b.values[i];
    inter += static_cast<std::size_t>(a.values[i] & b.values[i]);
  }
  if (na + nb == 0) return 1.0;  // both empty: perfect agreement
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

std::pair<ProbVolume, LabelMask> fuse_and_binarize(const ProbVolume& pc,
                                                   const ProbVolume& ps,
                                                   const ProbVolume& pa) {
  require(pc.extents == ps.extents && ps.extents == pa.extents,
          "fuse_and_binarize: extent mismatch");
  ProbVolume fused = ProbVolume::zeros(pc.extents);
  LabelMask mask = LabelMask::zeros(pc.extents);
  for (std::size_t i = 0; i < fused.values.size(); ++i) {
    const double m = (pc.values[i] + ps.values[i] + pa.values[i]) / 3.0;
    fused.values[i] = m;
    mask.values[i] = m >= 0.5 ? 1 : 0;
  }
  return {std::move(fused), std::move(mask)};
}

LabelMask binarize(const ProbVolume& p, double threshold) {
  LabelMask mask = LabelMask::zeros(p.extents);
  for (std::size_t i = 0; i < p.values.size(); ++i)
    mask.values[i] = p.values[i] >= threshold ? 1 : 0;
  return mask;
}

void normalize_intensities(std::vector<double>& raw, double window_min,
                           double window_max) {
  require(window_max > window_min, "intensity window must be non-degenerate");
  const double scale = 1.0 / (window_max - window_min);
  for (double& v : raw) {
    const double t = std::clamp((v - window_min) * scale, 0.0, 1.0);
    v = static_cast<double>(static_cast<float>(t));
  }
}

// --- RVOL v1 ---------------------------------------------------------------

namespace {

template <typename T>
void write_le(std::ofstream& os, const std::vector<T>& data) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(T)));
  } else {
    for (T v : data) {
      auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      os.write(bytes.data(), sizeof(T));
    }
  }
}

template <typename T>
std::vector<T> read_le(std::ifstream& is, std::size_t n) {
  std::vector<T> out(n);
  is.read(reinterpret_cast<char*>(out.data()),
          static_cast<std::streamsize>(n * sizeof(T)));
  require(static_cast<std::size_t>(is.gcount()) == n * sizeof(T),
          "RVOL payload truncated");
  if constexpr (std::endian::native != std::endian::little) {
    for (T& v : out) {
      auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      v = std::bit_cast<T>(bytes);
    }
  }
  return out;
}

void write_header(const std::filesystem::path& header_path,
                  const std::string& dtype, const Extents& e,
                  const std::array<double, 3>& spacing,
                  const std::string& data_name) {
  json h;
  h["format"] = "RVOL";
  h["version"] = 1;
  h["dtype"] = dtype;
  h["extents"] = {e.w, e.h, e.l};
  h["spacing"] = spacing;
  h["byte-order"] = "little";
  h["data-file"] = data_name;
  std::ofstream os(header_path);
  require(os.good(), "cannot write " + header_path.string());
  os << h.dump(2) << "\n";
}

struct HeaderInfo {
  Extents extents;
  std::array<double, 3> spacing;
  std::filesystem::path data_path;
};

HeaderInfo read_header(const std::filesystem::path& header_path,
                       const std::string& expect_dtype) {
  std::ifstream is(header_path);
  require(is.good(), "cannot open " + header_path.string());
  json h;
  try {
    is >> h;
  } catch (const json::exception& e) {
    throw Error("malformed RVOL header " + header_path.string() + ": " + e.what());
  }
  require(h.value("format", "") == "RVOL" && h.value("version", 0) == 1,
          "not an RVOL v1 header: " + header_path.string());
  require(h.value("dtype", "") == expect_dtype,
          "RVOL dtype mismatch in " + header_path.string() + " (expected " +
              expect_dtype + ")");
  require(h.value("byte-order", "") == "little",
          "unsupported byte order in " + header_path.string());
  const auto ext = h.at("extents");
  require(ext.is_array() && ext.size() == 3, "bad extents in RVOL header");
  HeaderInfo info;
  info.extents = {ext[0].get<int>(), ext[1].get<int>(), ext[2].get<int>()};
  const auto sp = h.at("spacing");
  require(sp.is_array() && sp.size() == 3, "bad spacing in RVOL header");
  for (int i = 0; i < 3; ++i)
    info.spacing[static_cast<std::size_t>(i)] = sp[static_cast<std::size_t>(i)].get<double>();
  info.data_path =
      header_path.parent_path() / h.at("data-file").get<std::string>();
  return info;
}

std::filesystem::path data_sibling(const std::filesystem::path& header_path) {
  std::filesystem::path p = header_path;
  p.replace_extension(".raw");
  return p;
}

}  // namespace

void save_volume(const Volume& v, const std::filesystem::path& header_path) {
  v.validate();
  const auto data_path = data_sibling(header_path);
  write_header(header_path, "f32", v.extents, v.spacing,
               data_path.filename().string());
  std::vector<float> payload(v.intensities.size());
  for (std::size_t i = 0; i < payload.size(); ++i)
    payload[i] = static_cast<float>(v.intensities[i]);
  std::ofstream os(data_path, std::ios::binary);
  require(os.good(), "cannot write " + data_path.string());
  write_le(os, payload);
}

Volume load_volume(const std::filesystem::path& header_path) {
  const HeaderInfo info = read_header(header_path, "f32");
  std::ifstream is(info.data_path, std::ios::binary);
  require(is.good(), "cannot open " + info.data_path.string());
  const auto payload = read_le<float>(is, info.extents.numel());
  Volume v;
  v.extents = info.extents;
  v.spacing = info.spacing;
  v.intensities.resize(payload.size());
  for (std::size_t i = 0; i < payload.size(); ++i)
    v.intensities[i] = static_cast<double>(payload[i]);
  v.validate();
  return v;
}

void save_mask(const LabelMask& m, const std::filesystem::path& header_path) {
  m.validate();
  const auto data_path = data_sibling(header_path);
  write_header(header_path, "u8", m.extents, {1.0, 1.0, 1.0},
               data_path.filename().string());
  std::ofstream os(data_path, std::ios::binary);
  require(os.good(), "cannot write " + data_path.string());
  os.write(reinterpret_cast<const char*>(m.values.data()),
           static_cast<std::streamsize>(m.values.size()));
}

LabelMask load_mask(const std::filesystem::path& header_path) {
  const HeaderInfo info = read_header(header_path, "u8");
  std::ifstream is(info.data_path, std::ios::binary);
  require(is.good(), "cannot open " + info.data_path.string());
  LabelMask m;
  m.extents = info.extents;
  m.values.resize(info.extents.numel());
  is.read(reinterpret_cast<char*>(m.values.data()),
          static_cast<std::streamsize>(m.values.size()));
  require(static_cast<std::size_t>(is.gcount()) == m.values.size(),
          "RVOL payload truncated");
  m.validate();
  return m;
}

}  // namespace rstn::vol
