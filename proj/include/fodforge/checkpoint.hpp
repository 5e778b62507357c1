#pragma once

// Versioned parameter container:
//   "FODCKPT" NUL | u32 version | u32 header length | canonical JSON header |
//   u32 tensor count | per tensor: u32 name length, name, u32 rank, u32 dims..., float32 values.
// All integers and floats little-endian.

#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "fodforge/error.hpp"
#include "fodforge/nn.hpp"
#include "fodforge/volume.hpp"

namespace fodforge {

inline constexpr char kCheckpointMagic[8] = {'F', 'O', 'D', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  std::vector<nn::Tensor> tensors;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  const std::string head = ck.header.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(head.size()));
  out += head;
  detail::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (Eigen::Index i = 0; i < t.size(); ++i) detail::put_f32(out, static_cast<float>(t.value(i)));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw ParseError("checkpoint truncated at byte " + std::to_string(pos));
  };
  auto u32 = [&] {
    need(4);
    const std::uint32_t v = detail::get_u32(p + pos);
    pos += 4;
    return v;
  };
  need(sizeof kCheckpointMagic);
  if (std::memcmp(p, kCheckpointMagic, sizeof kCheckpointMagic) != 0) throw ParseError("not a checkpoint file (bad magic)");
  pos += sizeof kCheckpointMagic;
  const std::uint32_t version = u32();
  if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t hlen = u32();
  need(hlen);
  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  pos += hlen;
  const std::uint32_t count = u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    nn::Tensor t;
    const std::uint32_t nlen = u32();
    need(nlen);
    t.name = bytes.substr(pos, nlen);
    pos += nlen;
    const std::uint32_t rank = u32();
    Eigen::Index n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(static_cast<int>(u32()));
      n *= t.shape.back();
    }
    need(static_cast<std::size_t>(n) * 4);
    t.value.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) t.value(i) = detail::get_f32(p + pos + 4 * static_cast<std::size_t>(i));
    pos += static_cast<std::size_t>(n) * 4;
    t.grad = Eigen::VectorXd::Zero(n);
    ck.tensors.push_back(std::move(t));
  }
  if (pos != bytes.size()) throw ParseError("checkpoint has " + std::to_string(bytes.size() - pos) + " trailing bytes");
  return ck;
}

inline Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(detail::read_file(path)); }
inline void write_checkpoint(const std::string& path, const Checkpoint& ck) { detail::write_file(path, encode_checkpoint(ck)); }

/// Every tensor of the store, trainable or not, in registration order.
inline std::vector<nn::Tensor> snapshot_tensors(const nn::ParamStore& ps) {
  std::vector<nn::Tensor> out;
  for (const auto& t : ps.tensors()) out.push_back(nn::Tensor{t.name, t.shape, t.value, Eigen::VectorXd(), t.trainable});
  return out;
}

/// Copies stored values into a store with the same names and shapes.
inline void restore_tensors(nn::ParamStore& ps, const std::vector<nn::Tensor>& tensors) {
  if (tensors.size() != ps.tensors().size())
    throw ConfigError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                      std::to_string(ps.tensors().size()));
  for (const auto& t : tensors) {
    if (!ps.contains(t.name)) throw ConfigError("checkpoint tensor '" + t.name + "' is not a model parameter");
    nn::Tensor& dst = ps.at(t.name);
    if (dst.shape != t.shape) throw ConfigError("checkpoint tensor '" + t.name + "' has the wrong shape");
    dst.value = t.value;
  }
}

}  // namespace fodforge
