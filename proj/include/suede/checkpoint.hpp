#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "suede/errors.hpp"
#include "suede/moe.hpp"
#include "suede/tensor.hpp"

namespace suede {

// Versioned binary checkpoint. Parameter payloads are little-endian f32;
// optimizer moments are stored as additional tensors under adam.m. / adam.v.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string config_echo;
  std::uint64_t epoch = 0;
  std::uint64_t rng_state = 0;
  std::uint64_t adam_step = 0;
  std::map<std::string, std::pair<Shape, std::vector<float>>> tensors;

  void put(const std::string& name, const Tensor& t) {
    std::vector<float> payload(t.data().size());
    for (std::size_t i = 0; i < payload.size(); ++i)
      payload[i] = static_cast<float>(t.data()[i]);
    tensors[name] = {t.shape(), std::move(payload)};
  }

  void put_raw(const std::string& name, const Shape& shape,
               const std::vector<double>& values) {
    std::vector<float> payload(values.size());
    for (std::size_t i = 0; i < payload.size(); ++i)
      payload[i] = static_cast<float>(values[i]);
    tensors[name] = {shape, std::move(payload)};
  }

  // Copies the stored tensor into `target`, enforcing an exact shape match.
  void restore_into(const std::string& name, Tensor& target) const {
    auto it = tensors.find(name);
    require(it != tensors.end(), ErrorCode::kCheckpointShape,
            "checkpoint is missing tensor '" + name + "'");
    require(it->second.first == target.shape(), ErrorCode::kCheckpointShape,
            "checkpoint tensor '" + name + "' has shape " +
                shape_str(it->second.first) + ", model expects " +
                shape_str(target.shape()));
    std::vector<double>& dst = target.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i)
      dst[i] = static_cast<double>(it->second.second[i]);
  }
};

namespace ckpt_detail {

constexpr char kMagic[8] = {'S', 'U', 'E', 'D', 'C', 'K', 'P', 'T'};

template <class T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_pod(std::ifstream& in, T& v, const std::string& path) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(in.gcount() == sizeof(T), ErrorCode::kCheckpointTruncated,
          "checkpoint " + path + " is truncated");
}

}  // namespace ckpt_detail

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kIo, "cannot write checkpoint " + path);
  out.write(ckpt_detail::kMagic, sizeof(ckpt_detail::kMagic));
  ckpt_detail::write_pod(out, Checkpoint::kVersion);
  std::uint64_t cfg_len = c.config_echo.size();
  ckpt_detail::write_pod(out, cfg_len);
  out.write(c.config_echo.data(), static_cast<std::streamsize>(cfg_len));
  ckpt_detail::write_pod(out, c.epoch);
  ckpt_detail::write_pod(out, c.rng_state);
  ckpt_detail::write_pod(out, c.adam_step);
  std::uint32_t count = static_cast<std::uint32_t>(c.tensors.size());
  ckpt_detail::write_pod(out, count);
  for (const auto& [name, entry] : c.tensors) {
    std::uint32_t name_len = static_cast<std::uint32_t>(name.size());
    ckpt_detail::write_pod(out, name_len);
    out.write(name.data(), name_len);
    std::uint32_t ndim = static_cast<std::uint32_t>(entry.first.size());
    ckpt_detail::write_pod(out, ndim);
    for (Index d : entry.first)
      ckpt_detail::write_pod(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(entry.second.data()),
              static_cast<std::streamsize>(entry.second.size() * sizeof(float)));
  }
  require(out.good(), ErrorCode::kIo, "short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  require(in.gcount() == 8 && std::memcmp(magic, ckpt_detail::kMagic, 8) == 0,
          ErrorCode::kIo, path + " is not a checkpoint file");
  std::uint32_t version = 0;
  ckpt_detail::read_pod(in, version, path);
  require(version == Checkpoint::kVersion, ErrorCode::kCheckpointVersion,
          "checkpoint " + path + " has version " + std::to_string(version) +
              ", expected " + std::to_string(Checkpoint::kVersion));
  Checkpoint c;
  std::uint64_t cfg_len = 0;
  ckpt_detail::read_pod(in, cfg_len, path);
  c.config_echo.resize(cfg_len);
  in.read(c.config_echo.data(), static_cast<std::streamsize>(cfg_len));
  require(in.gcount() == static_cast<std::streamsize>(cfg_len),
          ErrorCode::kCheckpointTruncated, "checkpoint " + path +
              " is truncated");
  ckpt_detail::read_pod(in, c.epoch, path);
  ckpt_detail::read_pod(in, c.rng_state, path);
  ckpt_detail::read_pod(in, c.adam_step, path);
  std::uint32_t count = 0;
  ckpt_detail::read_pod(in, count, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = 0;
    ckpt_detail::read_pod(in, name_len, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    require(in.gcount() == static_cast<std::streamsize>(name_len),
            ErrorCode::kCheckpointTruncated,
            "checkpoint " + path + " is truncated");
    std::uint32_t ndim = 0;
    ckpt_detail::read_pod(in, ndim, path);
    Shape shape(ndim);
    for (std::uint32_t d = 0; d < ndim; ++d) {
      std::uint64_t v = 0;
      ckpt_detail::read_pod(in, v, path);
      shape[d] = static_cast<Index>(v);
    }
    std::vector<float> payload(static_cast<std::size_t>(numel_of(shape)));
    in.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
    require(in.gcount() ==
                static_cast<std::streamsize>(payload.size() * sizeof(float)),
            ErrorCode::kCheckpointTruncated,
            "checkpoint " + path + " is truncated");
    c.tensors[name] = {std::move(shape), std::move(payload)};
  }
  return c;
}

}  // namespace suede
