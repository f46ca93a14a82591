#pragma once

// Single-file NIfTI-1 (.nii) reader and writer for the volume types used
// here: labels, scalar volumes and 3-component vector fields.
//
// Voxel order on disk matches the in-memory order (x fastest). A vector
// field is stored as dim = {5, nx, ny, nz, 1, 3} with intent_code 1007, one
// whole component after another, which is exactly the planar layout of
// VectorField. Headers of either byte order are read; files are written
// little-endian.

#include <acreg/errors.hpp>
#include <acreg/transform.hpp>
#include <acreg/volume.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace acreg::nifti {

inline constexpr std::int32_t kHeaderSize = 348;
inline constexpr std::int32_t kVoxOffset = 352;
inline constexpr std::int16_t kIntentVector = 1007;
inline constexpr char kMagic[4] = {'n', '+', '1', '\0'};

enum class Datatype : std::int16_t {
  uint8 = 2,
  int16 = 4,
  float32 = 16,
  float64 = 64,
};

inline int bytes_per_voxel(Datatype t) {
  switch (t) {
    case Datatype::uint8: return 1;
    case Datatype::int16: return 2;
    case Datatype::float32: return 4;
    case Datatype::float64: return 8;
  }
  return 0;
}

inline bool supported_datatype(std::int16_t code) {
  return code == 2 || code == 4 || code == 16 || code == 64;
}

/// Header fields that are read, kept and copied to derived outputs.
struct Header {
  std::array<std::int16_t, 8> dim{};
  Datatype datatype = Datatype::float32;
  std::int16_t bitpix = 32;
  std::array<float, 8> pixdim{1.0f, 1.0f, 1.0f, 1.0f, 1.0f, 1.0f, 1.0f, 1.0f};
  float vox_offset = static_cast<float>(kVoxOffset);
  float scl_slope = 1.0f;
  float scl_inter = 0.0f;
  std::int16_t intent_code = 0;
  std::uint8_t xyzt_units = 2;  // millimetres
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
  float quatern_b = 0, quatern_c = 0, quatern_d = 0;
  float qoffset_x = 0, qoffset_y = 0, qoffset_z = 0;
  std::array<float, 4> srow_x{}, srow_y{}, srow_z{};
  std::array<char, 80> descrip{};
  bool big_endian = false;

  Vec3i dims() const { return {dim[1], dim[2], dim[3]}; }
  Vec3d spacing() const {
    return {std::abs(static_cast<double>(pixdim[1])), std::abs(static_cast<double>(pixdim[2])),
            std::abs(static_cast<double>(pixdim[3]))};
  }
  bool is_vector_field() const { return dim[0] == 5; }
};

namespace detail {

// Byte offsets of the NIfTI-1 header fields.
enum Offset : std::size_t {
  o_sizeof_hdr = 0,
  o_regular = 38,
  o_dim = 40,
  o_intent_code = 68,
  o_datatype = 70,
  o_bitpix = 72,
  o_pixdim = 76,
  o_vox_offset = 108,
  o_scl_slope = 112,
  o_scl_inter = 116,
  o_xyzt_units = 123,
  o_descrip = 148,
  o_qform_code = 252,
  o_sform_code = 254,
  o_quatern_b = 256,
  o_srow_x = 280,
  o_srow_y = 296,
  o_srow_z = 312,
  o_magic = 344,
};

template <class T>
T byteswap_value(T v) {
  std::array<unsigned char, sizeof(T)> b;
  std::memcpy(b.data(), &v, sizeof(T));
  std::reverse(b.begin(), b.end());
  std::memcpy(&v, b.data(), sizeof(T));
  return v;
}

/// Reads and writes fixed-width values at byte offsets, swapping when the
/// file order differs from the host order.
class ByteView {
public:
  ByteView(unsigned char* data, bool swap) : data_(data), swap_(swap) {}

  template <class T>
  T get(std::size_t offset) const {
    T v;
    std::memcpy(&v, data_ + offset, sizeof(T));
    return swap_ ? byteswap_value(v) : v;
  }

  template <class T>
  void put(std::size_t offset, T v) {
    if (swap_) v = byteswap_value(v);
    std::memcpy(data_ + offset, &v, sizeof(T));
  }

private:
  unsigned char* data_;
  bool swap_;
};

inline constexpr bool host_big_endian = std::endian::native == std::endian::big;

inline std::string where(const std::filesystem::path& p) { return p.string() + ": "; }

struct RawVolume {
  Header header;
  std::vector<double> values;  // after scl_slope / scl_inter
};

inline Header parse_header(std::array<unsigned char, kHeaderSize>& raw, const std::filesystem::path& path) {
  std::int32_t size_native;
  std::memcpy(&size_native, raw.data(), 4);
  bool swap = false;
  if (size_native != kHeaderSize) {
    if (byteswap_value(size_native) != kHeaderSize)
      throw IoError(where(path) + "sizeof_hdr is " + std::to_string(size_native) + ", expected 348");
    swap = true;
  }
  ByteView v(raw.data(), swap);
  if (std::memcmp(raw.data() + o_magic, kMagic, 4) != 0)
    throw IoError(where(path) + "bad magic, expected \"n+1\\0\" (single-file NIfTI-1)");

  Header h;
  h.big_endian = swap != host_big_endian;
  for (int i = 0; i < 8; ++i) h.dim[static_cast<std::size_t>(i)] = v.get<std::int16_t>(o_dim + 2 * static_cast<std::size_t>(i));
  const std::int16_t code = v.get<std::int16_t>(o_datatype);
  if (!supported_datatype(code))
    throw IoError(where(path) + "unsupported datatype code " + std::to_string(code) +
                  " (accepted: 2 uint8, 4 int16, 16 float32, 64 float64)");
  h.datatype = static_cast<Datatype>(code);
  h.bitpix = v.get<std::int16_t>(o_bitpix);
  if (h.bitpix != 8 * bytes_per_voxel(h.datatype))
    throw IoError(where(path) + "bitpix " + std::to_string(h.bitpix) + " does not match datatype " +
                  std::to_string(code));
  for (int i = 0; i < 8; ++i) h.pixdim[static_cast<std::size_t>(i)] = v.get<float>(o_pixdim + 4 * static_cast<std::size_t>(i));
  h.vox_offset = v.get<float>(o_vox_offset);
  h.scl_slope = v.get<float>(o_scl_slope);
  h.scl_inter = v.get<float>(o_scl_inter);
  h.intent_code = v.get<std::int16_t>(o_intent_code);
  h.xyzt_units = raw[o_xyzt_units];
  std::memcpy(h.descrip.data(), raw.data() + o_descrip, h.descrip.size());
  h.qform_code = v.get<std::int16_t>(o_qform_code);
  h.sform_code = v.get<std::int16_t>(o_sform_code);
  h.quatern_b = v.get<float>(o_quatern_b);
  h.quatern_c = v.get<float>(o_quatern_b + 4);
  h.quatern_d = v.get<float>(o_quatern_b + 8);
  h.qoffset_x = v.get<float>(o_quatern_b + 12);
  h.qoffset_y = v.get<float>(o_quatern_b + 16);
  h.qoffset_z = v.get<float>(o_quatern_b + 20);
  for (std::size_t i = 0; i < 4; ++i) {
    h.srow_x[i] = v.get<float>(o_srow_x + 4 * i);
    h.srow_y[i] = v.get<float>(o_srow_y + 4 * i);
    h.srow_z[i] = v.get<float>(o_srow_z + 4 * i);
  }

  if (h.dim[0] < 3 || h.dim[0] > 7) throw IoError(where(path) + "dim[0] = " + std::to_string(h.dim[0]) + " is not supported");
  for (int i = 1; i <= h.dim[0]; ++i)
    if (h.dim[static_cast<std::size_t>(i)] < 1)
      throw IoError(where(path) + "dim[" + std::to_string(i) + "] = " + std::to_string(h.dim[static_cast<std::size_t>(i)]) +
                    " must be >= 1");
  if (!(h.vox_offset >= static_cast<float>(kHeaderSize)) || !std::isfinite(h.vox_offset))
    throw IoError(where(path) + "vox_offset " + std::to_string(h.vox_offset) + " lies inside the header");
  return h;
}

inline std::size_t voxel_count(const Header& h) {
  std::size_t n = 1;
  for (int i = 1; i <= h.dim[0]; ++i) n *= static_cast<std::size_t>(h.dim[static_cast<std::size_t>(i)]);
  return n;
}

inline RawVolume read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(where(path) + "cannot open for reading");
  std::array<unsigned char, kHeaderSize> raw{};
  in.read(reinterpret_cast<char*>(raw.data()), kHeaderSize);
  if (in.gcount() != kHeaderSize) throw IoError(where(path) + "truncated header (" + std::to_string(in.gcount()) + " of 348 bytes)");

  RawVolume out;
  out.header = parse_header(raw, path);
  const Header& h = out.header;
  const std::size_t n = voxel_count(h);
  const int bpv = bytes_per_voxel(h.datatype);
  std::vector<unsigned char> bytes(n * static_cast<std::size_t>(bpv));
  in.seekg(static_cast<std::streamoff>(h.vox_offset));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size())
    throw IoError(where(path) + "truncated data: expected " + std::to_string(bytes.size()) + " bytes after vox_offset, found " +
                  std::to_string(in.gcount()));

  const bool swap = h.big_endian != host_big_endian;
  const ByteView view(bytes.data(), swap);
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t o = i * static_cast<std::size_t>(bpv);
    switch (h.datatype) {
      case Datatype::uint8: out.values[i] = bytes[o]; break;
      case Datatype::int16: out.values[i] = view.get<std::int16_t>(o); break;
      case Datatype::float32: out.values[i] = view.get<float>(o); break;
      case Datatype::float64: out.values[i] = view.get<double>(o); break;
    }
  }
  if (h.scl_slope != 0.0f && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f)) {
    const double slope = h.scl_slope, inter = h.scl_inter;
    for (auto& x : out.values) x = x * slope + inter;
  }
  for (const double x : out.values)
    if (!std::isfinite(x)) throw IoError(where(path) + "data contains non-finite values");
  return out;
}

inline GridMeta grid_of(const Header& h, const std::filesystem::path& path) {
  const Vec3d s = h.spacing();
  for (int a = 0; a < 3; ++a)
    if (!(s[a] > 0.0) || !std::isfinite(s[a]))
      throw IoError(where(path) + "pixdim[" + std::to_string(a + 1) + "] must be finite and non-zero");
  return GridMeta(h.dims(), s);
}

inline void require_scalar_layout(const Header& h, const std::filesystem::path& path) {
  for (int i = 4; i <= h.dim[0]; ++i)
    if (h.dim[static_cast<std::size_t>(i)] != 1)
      throw ShapeError(where(path) + "expected a 3-D volume, but dim[" + std::to_string(i) + "] = " +
                       std::to_string(h.dim[static_cast<std::size_t>(i)]));
}

inline void require_vector_layout(const Header& h, const std::filesystem::path& path) {
  if (h.dim[0] != 5) throw ShapeError(where(path) + "vector field needs dim[0] = 5, found " + std::to_string(h.dim[0]));
  if (h.dim[4] != 1) throw ShapeError(where(path) + "vector field needs dim[4] = 1, found " + std::to_string(h.dim[4]));
  if (h.dim[5] != 3) throw ShapeError(where(path) + "vector field needs dim[5] = 3, found " + std::to_string(h.dim[5]));
  if (h.intent_code != kIntentVector)
    throw ShapeError(where(path) + "vector field needs intent_code 1007, found " + std::to_string(h.intent_code));
}

} // namespace detail

inline Header read_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(detail::where(path) + "cannot open for reading");
  std::array<unsigned char, kHeaderSize> raw{};
  in.read(reinterpret_cast<char*>(raw.data()), kHeaderSize);
  if (in.gcount() != kHeaderSize) throw IoError(detail::where(path) + "truncated header");
  return detail::parse_header(raw, path);
}

template <class Real = double>
ScalarVolume<Real> read_scalar(const std::filesystem::path& path, Header* header = nullptr) {
  auto raw = detail::read_raw(path);
  detail::require_scalar_layout(raw.header, path);
  const GridMeta m = detail::grid_of(raw.header, path);
  std::vector<Real> v(raw.values.begin(), raw.values.end());
  if (header) *header = raw.header;
  return ScalarVolume<Real>(m, std::move(v));
}

inline LabelVolume read_labels(const std::filesystem::path& path, Header* header = nullptr) {
  auto raw = detail::read_raw(path);
  detail::require_scalar_layout(raw.header, path);
  const GridMeta m = detail::grid_of(raw.header, path);
  std::vector<std::uint8_t> labels(raw.values.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double x = raw.values[i];
    if (x != std::floor(x) || x < 0.0 || x >= kTissueCount)
      throw InvalidInputError(detail::where(path) + "label value " + std::to_string(x) + " at voxel " + std::to_string(i) +
                              " is outside {0, 1, 2, 3}");
    labels[i] = static_cast<std::uint8_t>(x);
  }
  if (header) *header = raw.header;
  return LabelVolume(m, std::move(labels));
}

template <class Real, class Tag>
VectorField<Real, Tag> read_vector_field(const std::filesystem::path& path, Header* header = nullptr) {
  auto raw = detail::read_raw(path);
  detail::require_vector_layout(raw.header, path);
  const GridMeta m = detail::grid_of(raw.header, path);
  std::array<std::vector<Real>, 3> comps;
  for (std::size_t c = 0; c < 3; ++c)
    comps[c].assign(raw.values.begin() + static_cast<std::ptrdiff_t>(c * m.size()),
                    raw.values.begin() + static_cast<std::ptrdiff_t>((c + 1) * m.size()));
  if (header) *header = raw.header;
  return VectorField<Real, Tag>(m, std::move(comps));
}

template <class Real = double>
DisplacementField<Real> read_displacement(const std::filesystem::path& path, Header* header = nullptr) {
  return read_vector_field<Real, DisplacementTag>(path, header);
}

template <class Real = double>
VelocityField<Real> read_velocity(const std::filesystem::path& path, Header* header = nullptr) {
  return read_vector_field<Real, VelocityTag>(path, header);
}

using AnyVolume = std::variant<LabelVolume, ScalarVolume<double>, DisplacementField<double>>;

/// Vector fields by dim[0]; uint8 volumes as labels; everything else scalar.
inline AnyVolume read_volume(const std::filesystem::path& path, Header* header = nullptr) {
  const Header h = read_header(path);
  if (h.is_vector_field()) return read_displacement<double>(path, header);
  if (h.datatype == Datatype::uint8) return read_labels(path, header);
  return read_scalar<double>(path, header);
}

struct WriteOptions {
  std::optional<Datatype> datatype;  // defaults: uint8 for labels, float32 otherwise
  const Header* geometry = nullptr;  // orientation and units copied from here
};

namespace detail {

inline Header make_header(const GridMeta& m, Datatype type, int components, const WriteOptions& opt) {
  Header h;
  if (opt.geometry) {
    const Header& g = *opt.geometry;
    h.xyzt_units = g.xyzt_units;
    h.qform_code = g.qform_code;
    h.sform_code = g.sform_code;
    h.quatern_b = g.quatern_b;
    h.quatern_c = g.quatern_c;
    h.quatern_d = g.quatern_d;
    h.qoffset_x = g.qoffset_x;
    h.qoffset_y = g.qoffset_y;
    h.qoffset_z = g.qoffset_z;
    h.srow_x = g.srow_x;
    h.srow_y = g.srow_y;
    h.srow_z = g.srow_z;
    h.descrip = g.descrip;
    h.pixdim[0] = g.pixdim[0];
  }
  h.dim.fill(1);
  h.dim[0] = static_cast<std::int16_t>(components == 1 ? 3 : 5);
  for (int a = 0; a < 3; ++a) {
    if (m.dims[a] > std::numeric_limits<std::int16_t>::max()) throw InvalidInputError("nifti: dimension too large");
    h.dim[static_cast<std::size_t>(a + 1)] = static_cast<std::int16_t>(m.dims[a]);
    h.pixdim[static_cast<std::size_t>(a + 1)] = static_cast<float>(m.spacing[a]);
  }
  if (components != 1) {
    h.dim[4] = 1;
    h.dim[5] = static_cast<std::int16_t>(components);
    h.intent_code = kIntentVector;
  }
  h.datatype = type;
  h.bitpix = static_cast<std::int16_t>(8 * bytes_per_voxel(type));
  return h;
}

/// Stored value of x in `type`; refuses values the type cannot hold exactly
/// (integer types) or at all (out of range).
inline void encode(Datatype type, double x, ByteView& out, std::size_t offset, const std::filesystem::path& path) {
  switch (type) {
    case Datatype::uint8:
      if (x != std::floor(x) || x < 0 || x > 255)
        throw InvalidInputError(where(path) + "value " + std::to_string(x) + " is not representable as uint8");
      out.put<std::uint8_t>(offset, static_cast<std::uint8_t>(x));
      break;
    case Datatype::int16:
      if (x != std::floor(x) || x < -32768 || x > 32767)
        throw InvalidInputError(where(path) + "value " + std::to_string(x) + " is not representable as int16");
      out.put<std::int16_t>(offset, static_cast<std::int16_t>(x));
      break;
    case Datatype::float32:
      if (std::abs(x) > static_cast<double>(std::numeric_limits<float>::max()))
        throw InvalidInputError(where(path) + "value " + std::to_string(x) + " overflows float32");
      out.put<float>(offset, static_cast<float>(x));
      break;
    case Datatype::float64: out.put<double>(offset, x); break;
  }
}

template <class Get>
void write_raw(const std::filesystem::path& path, const Header& h, std::size_t count, Get&& value) {
  std::vector<unsigned char> buf(static_cast<std::size_t>(kVoxOffset) +
                                 count * static_cast<std::size_t>(bytes_per_voxel(h.datatype)),
                                 0);
  ByteView v(buf.data(), host_big_endian);
  v.put<std::int32_t>(o_sizeof_hdr, kHeaderSize);
  buf[o_regular] = 'r';
  for (std::size_t i = 0; i < 8; ++i) v.put<std::int16_t>(o_dim + 2 * i, h.dim[i]);
  v.put<std::int16_t>(o_intent_code, h.intent_code);
  v.put<std::int16_t>(o_datatype, static_cast<std::int16_t>(h.datatype));
  v.put<std::int16_t>(o_bitpix, h.bitpix);
  for (std::size_t i = 0; i < 8; ++i) v.put<float>(o_pixdim + 4 * i, h.pixdim[i]);
  v.put<float>(o_vox_offset, static_cast<float>(kVoxOffset));
  v.put<float>(o_scl_slope, 1.0f);
  v.put<float>(o_scl_inter, 0.0f);
  buf[o_xyzt_units] = h.xyzt_units;
  std::memcpy(buf.data() + o_descrip, h.descrip.data(), h.descrip.size());
  v.put<std::int16_t>(o_qform_code, h.qform_code);
  v.put<std::int16_t>(o_sform_code, h.sform_code);
  const std::array<float, 6> q{h.quatern_b, h.quatern_c, h.quatern_d, h.qoffset_x, h.qoffset_y, h.qoffset_z};
  for (std::size_t i = 0; i < 6; ++i) v.put<float>(o_quatern_b + 4 * i, q[i]);
  for (std::size_t i = 0; i < 4; ++i) {
    v.put<float>(o_srow_x + 4 * i, h.srow_x[i]);
    v.put<float>(o_srow_y + 4 * i, h.srow_y[i]);
    v.put<float>(o_srow_z + 4 * i, h.srow_z[i]);
  }
  std::memcpy(buf.data() + o_magic, kMagic, 4);

  const std::size_t bpv = static_cast<std::size_t>(bytes_per_voxel(h.datatype));
  for (std::size_t i = 0; i < count; ++i)
    encode(h.datatype, value(i), v, static_cast<std::size_t>(kVoxOffset) + i * bpv, path);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(where(path) + "cannot open for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError(where(path) + "write failed");
}

} // namespace detail

inline void write_volume(const std::filesystem::path& path, const LabelVolume& labels, const WriteOptions& opt = {}) {
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= kTissueCount)
      throw InvalidInputError(detail::where(path) + "refusing to write label " + std::to_string(labels[i]) + " at voxel " +
                              std::to_string(i));
  const Header h = detail::make_header(labels.meta(), opt.datatype.value_or(Datatype::uint8), 1, opt);
  detail::write_raw(path, h, labels.size(), [&](std::size_t i) { return static_cast<double>(labels[i]); });
}

template <class Real>
void write_volume(const std::filesystem::path& path, const ScalarVolume<Real>& vol, const WriteOptions& opt = {}) {
  const Header h = detail::make_header(vol.meta(), opt.datatype.value_or(Datatype::float32), 1, opt);
  detail::write_raw(path, h, vol.size(), [&](std::size_t i) { return static_cast<double>(vol[i]); });
}

template <class Real, class Tag>
void write_volume(const std::filesystem::path& path, const VectorField<Real, Tag>& f, const WriteOptions& opt = {}) {
  const Header h = detail::make_header(f.meta(), opt.datatype.value_or(Datatype::float32), 3, opt);
  const std::size_t n = f.size();
  detail::write_raw(path, h, 3 * n, [&](std::size_t i) { return static_cast<double>(f.data(static_cast<int>(i / n))[i % n]); });
}

} // namespace acreg::nifti
