#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <vector>

#include <zlib.h>

#include "mmgl/data_ingest.hpp"

namespace mmgl {
namespace {

constexpr int kHeaderSize = 348;
constexpr int kVoxOffset = 352;

enum DataType : std::int16_t {
  dt_uint8 = 2,
  dt_int16 = 4,
  dt_int32 = 8,
  dt_float32 = 16,
  dt_float64 = 64,
  dt_int8 = 256,
  dt_uint16 = 512,
  dt_uint32 = 768,
};

int bytes_per_voxel(std::int16_t datatype) {
  switch (datatype) {
    case dt_uint8:
    case dt_int8: return 1;
    case dt_int16:
    case dt_uint16: return 2;
    case dt_int32:
    case dt_uint32:
    case dt_float32: return 4;
    case dt_float64: return 8;
    default: return 0;
  }
}

bool has_gz_suffix(const std::filesystem::path& p) { return p.extension() == ".gz"; }

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorKind::missing_file, path.string());
  // gzread passes uncompressed files through unchanged.
  gzFile f = gzopen(path.string().c_str(), "rb");
  require(f != nullptr, ErrorKind::io, "cannot open " + path.string());
  std::vector<unsigned char> bytes;
  std::array<unsigned char, 1 << 16> chunk{};
  for (;;) {
    const int n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()));
    if (n < 0) {
      gzclose(f);
      throw Error(ErrorKind::unreadable_format, "corrupt gzip stream in " + path.string());
    }
    if (n == 0) break;
    bytes.insert(bytes.end(), chunk.begin(), chunk.begin() + n);
  }
  gzclose(f);
  return bytes;
}

void write_all(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (has_gz_suffix(path)) {
    gzFile f = gzopen(path.string().c_str(), "wb6");
    require(f != nullptr, ErrorKind::io, "cannot write " + path.string());
    const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    const int rc = gzclose(f);
    require(n == static_cast<int>(bytes.size()) && rc == Z_OK, ErrorKind::io, "short write " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::io, "short write " + path.string());
}

template <typename T>
T load(const unsigned char* p, bool swap) {
  std::array<unsigned char, sizeof(T)> raw{};
  std::memcpy(raw.data(), p, sizeof(T));
  if (swap) std::reverse(raw.begin(), raw.end());
  T v;
  std::memcpy(&v, raw.data(), sizeof(T));
  return v;
}

template <typename T>
void store(unsigned char* p, T v) {
  std::memcpy(p, &v, sizeof(T));
}

struct RawNifti {
  Shape3 shape;
  std::vector<double> values;
};

RawNifti decode(const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "writer assumes little-endian host");
  const auto bytes = read_all(path);
  const std::string name = path.string();
  require(bytes.size() >= static_cast<std::size_t>(kHeaderSize), ErrorKind::unreadable_format, name + " too short");

  bool swap = false;
  const auto hdr = load<std::int32_t>(bytes.data(), false);
  if (hdr != kHeaderSize) {
    require(load<std::int32_t>(bytes.data(), true) == kHeaderSize, ErrorKind::unreadable_format,
            name + " is not a NIfTI-1 file");
    swap = true;
  }
  const char* magic = reinterpret_cast<const char*>(bytes.data() + 344);
  require(std::strncmp(magic, "n+1", 3) == 0, ErrorKind::unreadable_format, name + " lacks single-file NIfTI magic");

  std::array<std::int16_t, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[static_cast<std::size_t>(i)] = load<std::int16_t>(bytes.data() + 40 + 2 * i, swap);
  require(dim[0] >= 3, ErrorKind::unreadable_format, name + " is not volumetric");
  for (int i = 4; i <= std::min<int>(dim[0], 7); ++i)
    require(dim[static_cast<std::size_t>(i)] <= 1, ErrorKind::unreadable_format, name + " has more than three dimensions");

  const auto datatype = load<std::int16_t>(bytes.data() + 70, swap);
  const int width = bytes_per_voxel(datatype);
  require(width > 0, ErrorKind::unreadable_format, name + " has unsupported datatype " + std::to_string(datatype));

  const auto vox_offset = static_cast<std::size_t>(load<float>(bytes.data() + 108, swap));
  float slope = load<float>(bytes.data() + 112, swap);
  const float inter = load<float>(bytes.data() + 116, swap);
  if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;

  RawNifti raw;
  raw.shape = {dim[3], dim[2], dim[1]};
  require(raw.shape.depth > 0 && raw.shape.height > 0 && raw.shape.width > 0, ErrorKind::unreadable_format,
          name + " has non-positive dimensions");
  const auto n = static_cast<std::size_t>(raw.shape.size());
  require(bytes.size() >= vox_offset + n * static_cast<std::size_t>(width), ErrorKind::unreadable_format,
          name + " truncated voxel data");

  raw.values.resize(n);
  const unsigned char* p = bytes.data() + vox_offset;
  for (std::size_t i = 0; i < n; ++i, p += width) {
    double v = 0.0;
    switch (datatype) {
      case dt_uint8: v = *p; break;
      case dt_int8: v = static_cast<std::int8_t>(*p); break;
      case dt_int16: v = load<std::int16_t>(p, swap); break;
      case dt_uint16: v = load<std::uint16_t>(p, swap); break;
      case dt_int32: v = load<std::int32_t>(p, swap); break;
      case dt_uint32: v = load<std::uint32_t>(p, swap); break;
      case dt_float32: v = load<float>(p, swap); break;
      case dt_float64: v = load<double>(p, swap); break;
      default: break;
    }
    raw.values[i] = v * slope + inter;
  }
  return raw;
}

std::vector<unsigned char> encode_header(const Shape3& shape, std::int16_t datatype) {
  std::vector<unsigned char> bytes(kVoxOffset, 0);
  unsigned char* h = bytes.data();
  store<std::int32_t>(h, kHeaderSize);
  h[39] = 0;
  const std::array<std::int16_t, 8> dim{3, static_cast<std::int16_t>(shape.width), static_cast<std::int16_t>(shape.height),
                                        static_cast<std::int16_t>(shape.depth), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) store<std::int16_t>(h + 40 + 2 * i, dim[static_cast<std::size_t>(i)]);
  store<std::int16_t>(h + 70, datatype);
  store<std::int16_t>(h + 72, static_cast<std::int16_t>(8 * bytes_per_voxel(datatype)));
  for (int i = 0; i < 8; ++i) store<float>(h + 76 + 4 * i, 1.0f);
  store<float>(h + 108, static_cast<float>(kVoxOffset));
  store<float>(h + 112, 1.0f);
  h[123] = 2;  // millimetres
  std::memcpy(h + 344, "n+1\0", 4);
  return bytes;
}

void check_writable_shape(const Shape3& s) {
  constexpr Index lim = std::numeric_limits<std::int16_t>::max();
  require(s.depth > 0 && s.height > 0 && s.width > 0 && s.depth <= lim && s.height <= lim && s.width <= lim,
          ErrorKind::invalid_input, "shape " + to_string(s) + " not representable in NIfTI-1");
}

}  // namespace

Volume read_nifti_volume(const std::filesystem::path& path) {
  auto raw = decode(path);
  Volume v;
  v.id = path.filename().string();
  v.voxels = Grid3<float>(raw.shape);
  std::transform(raw.values.begin(), raw.values.end(), v.voxels.values.begin(),
                 [](double x) { return static_cast<float>(x); });
  return v;
}

LabelVolume read_nifti_labels(const std::filesystem::path& path) {
  auto raw = decode(path);
  LabelVolume l;
  l.labels = Grid3<std::uint8_t>(raw.shape);
  for (std::size_t i = 0; i < raw.values.size(); ++i) {
    const double v = raw.values[i];
    require(v >= 0.0 && v < kNumClasses && v == std::floor(v), ErrorKind::invalid_input,
            path.string() + " contains label " + std::to_string(v));
    l.labels.values[i] = static_cast<std::uint8_t>(v);
  }
  return l;
}

void write_nifti(const std::filesystem::path& path, const Volume& volume) {
  check_writable_shape(volume.shape());
  auto bytes = encode_header(volume.shape(), dt_float32);
  const std::size_t n = volume.voxels.values.size();
  bytes.resize(kVoxOffset + 4 * n);
  std::memcpy(bytes.data() + kVoxOffset, volume.voxels.values.data(), 4 * n);
  write_all(path, bytes);
}

void write_nifti(const std::filesystem::path& path, const LabelVolume& labels) {
  check_writable_shape(labels.shape());
  auto bytes = encode_header(labels.shape(), dt_uint8);
  bytes.insert(bytes.end(), labels.labels.values.begin(), labels.labels.values.end());
  write_all(path, bytes);
}

}  // namespace mmgl
