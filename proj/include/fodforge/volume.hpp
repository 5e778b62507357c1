#pragma once

// FODV1 volume container.
//
//   bytes 0-4   "FODV1"
//   bytes 5-8   header length H, uint32 little-endian
//   next H      JSON header: {"magic","dims":[x,y,z,c],"kind","voxel_size","meta"}
//   payload     x*y*z*c float32 little-endian, x fastest, then y, z, channel

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fodforge/error.hpp"

namespace fodforge {

enum class VolumeKind { Dwi, Fod, Mask, Counts };

inline const char* kind_name(VolumeKind k) {
  switch (k) {
    case VolumeKind::Dwi: return "dwi";
    case VolumeKind::Fod: return "fod";
    case VolumeKind::Mask: return "mask";
    case VolumeKind::Counts: return "counts";
  }
  return "?";
}

inline VolumeKind parse_kind(const std::string& s) {
  if (s == "dwi") return VolumeKind::Dwi;
  if (s == "fod") return VolumeKind::Fod;
  if (s == "mask") return VolumeKind::Mask;
  if (s == "counts") return VolumeKind::Counts;
  throw ParseError("unknown volume kind '" + s + "'");
}

using Dims3 = std::array<int, 3>;

class Volume {
 public:
  Volume() = default;
  Volume(Dims3 spatial, int channels, VolumeKind kind)
      : spatial_(spatial), channels_(channels), kind(kind) {
    for (int d : spatial)
      if (d <= 0) throw InvalidInput("volume dimensions must be positive");
    if (channels <= 0) throw InvalidInput("volume channel count must be positive");
    data_.assign(static_cast<std::size_t>(voxel_count()) * static_cast<std::size_t>(channels), 0.0f);
  }

  const Dims3& spatial() const { return spatial_; }
  int channels() const { return channels_; }
  int voxel_count() const { return spatial_[0] * spatial_[1] * spatial_[2]; }
  int index(int x, int y, int z) const { return x + spatial_[0] * (y + spatial_[1] * z); }
  std::array<int, 3> coords(int v) const {
    return {v % spatial_[0], (v / spatial_[0]) % spatial_[1], v / (spatial_[0] * spatial_[1])};
  }
  bool inside(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < spatial_[0] && y < spatial_[1] && z < spatial_[2];
  }

  float value(int voxel, int channel) const { return data_[offset(voxel, channel)]; }
  void set(int voxel, int channel, float v) { data_[offset(voxel, channel)] = v; }

  Eigen::VectorXd voxel(int v) const {
    Eigen::VectorXd out(channels_);
    for (int c = 0; c < channels_; ++c) out(c) = data_[offset(v, c)];
    return out;
  }
  void set_voxel(int v, const Eigen::Ref<const Eigen::VectorXd>& values) {
    if (values.size() != channels_) throw InvalidInput("voxel vector length does not match channel count");
    for (int c = 0; c < channels_; ++c) data_[offset(v, c)] = static_cast<float>(values(c));
  }

  const std::vector<float>& data() const { return data_; }
  std::vector<float>& data() { return data_; }

  std::string shape_string() const {
    return "[" + std::to_string(spatial_[0]) + "," + std::to_string(spatial_[1]) + "," + std::to_string(spatial_[2]) +
           "," + std::to_string(channels_) + "]";
  }

  VolumeKind kind = VolumeKind::Dwi;
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
  /// Free-form descriptors (acquisition scheme, SH order, ...).
  nlohmann::json meta = nlohmann::json::object();

 private:
  std::size_t offset(int voxel, int channel) const {
    return static_cast<std::size_t>(voxel) + static_cast<std::size_t>(voxel_count()) * static_cast<std::size_t>(channel);
  }

  Dims3 spatial_{1, 1, 1};
  int channels_ = 1;
  std::vector<float> data_;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace detail

inline std::string encode_volume(const Volume& vol) {
  nlohmann::json header = {
      {"magic", "FODV1"},
      {"dims", {vol.spatial()[0], vol.spatial()[1], vol.spatial()[2], vol.channels()}},
      {"kind", kind_name(vol.kind)},
      {"voxel_size", vol.voxel_size},
      {"meta", vol.meta},
  };
  const std::string text = header.dump();
  std::string out = "FODV1";
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out.reserve(out.size() + vol.data().size() * 4);
  for (float f : vol.data()) detail::put_f32(out, f);
  return out;
}

inline Volume decode_volume(const std::string& bytes) {
  if (bytes.size() < 9 || bytes.compare(0, 5, "FODV1") != 0) throw ParseError("not a FODV1 volume (bad magic)");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t hlen = detail::get_u32(raw + 5);
  if (bytes.size() < 9 + static_cast<std::size_t>(hlen)) throw ParseError("truncated FODV1 header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(9, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid FODV1 header: ") + e.what());
  }
  Volume vol;
  try {
    const auto dims = header.at("dims").get<std::vector<int>>();
    if (dims.size() != 4) throw ParseError("FODV1 dims must have 4 entries");
    vol = Volume({dims[0], dims[1], dims[2]}, dims[3], parse_kind(header.at("kind").get<std::string>()));
    vol.voxel_size = header.at("voxel_size").get<std::array<double, 3>>();
    vol.meta = header.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid FODV1 header: ") + e.what());
  } catch (const InvalidInput& e) {
    throw ParseError(std::string("invalid FODV1 header: ") + e.what());
  }
  const std::size_t payload = vol.data().size() * 4;
  if (bytes.size() != 9 + static_cast<std::size_t>(hlen) + payload)
    throw ParseError("FODV1 payload is " + std::to_string(bytes.size() - 9 - hlen) + " bytes, header implies " +
                     std::to_string(payload));
  const unsigned char* p = raw + 9 + hlen;
  for (std::size_t i = 0; i < vol.data().size(); ++i) vol.data()[i] = detail::get_f32(p + 4 * i);
  return vol;
}

inline Volume read_volume(const std::string& path) { return decode_volume(detail::read_file(path)); }
inline void write_volume(const std::string& path, const Volume& vol) { detail::write_file(path, encode_volume(vol)); }

/// Throws ConfigError when a file's kind tag does not match its role.
inline void expect_kind(const Volume& vol, VolumeKind kind, const std::string& role) {
  if (vol.kind != kind)
    throw ConfigError(role + " must be a '" + kind_name(kind) + "' volume, got '" + kind_name(vol.kind) + "'");
}

}  // namespace fodforge
