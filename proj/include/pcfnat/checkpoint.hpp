#pragma once

// Checkpoint container: "PCFN" magic, version, a human-readable JSON config
// block, named float32 tensors (parameters, buffers, classifier head),
// optimizer state, and the RNG stream. Round-trips bit-exactly.

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "pcfnat/common.hpp"
#include "pcfnat/tensor.hpp"

namespace pcfnat {

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::string config_json;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  std::vector<std::pair<std::string, Tensor<float>>> optimizer_state;
  std::uint64_t step = 0;
  std::string rng_state;
};

namespace ckpt_detail {

inline void put_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
inline void put_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
inline void put_string(std::ofstream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint32_t get_u32(std::ifstream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline std::uint64_t get_u64(std::ifstream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline std::string get_string(std::ifstream& in) {
  const std::uint32_t len = get_u32(in);
  std::string s(len, '\0');
  in.read(s.data(), len);
  return s;
}

inline void put_tensor_list(std::ofstream& out,
                            const std::vector<std::pair<std::string, Tensor<float>>>& list) {
  put_u32(out, static_cast<std::uint32_t>(list.size()));
  for (const auto& [name, t] : list) {
    put_string(out, name);
    put_u32(out, static_cast<std::uint32_t>(t.ndim()));
    for (index_t d : t.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
}

inline std::vector<std::pair<std::string, Tensor<float>>> get_tensor_list(std::ifstream& in,
                                                                          const std::string& path) {
  const std::uint32_t n = get_u32(in);
  std::vector<std::pair<std::string, Tensor<float>>> list;
  list.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = get_string(in);
    const std::uint32_t ndim = get_u32(in);
    std::vector<index_t> shape(ndim);
    for (auto& d : shape) d = static_cast<index_t>(get_u64(in));
    std::vector<float> data(static_cast<std::size_t>(numel_of(shape)));
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!in) throw parse_error(path + ": truncated checkpoint tensor '" + name + "'");
    list.emplace_back(std::move(name), Tensor<float>::from_data(std::move(shape), std::move(data)));
  }
  return list;
}

}  // namespace ckpt_detail

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw parse_error("cannot write checkpoint: " + path);
  out.write("PCFN", 4);
  ckpt_detail::put_u32(out, Checkpoint::kVersion);
  ckpt_detail::put_string(out, ckpt.config_json);
  ckpt_detail::put_tensor_list(out, ckpt.tensors);
  ckpt_detail::put_tensor_list(out, ckpt.optimizer_state);
  ckpt_detail::put_u64(out, ckpt.step);
  ckpt_detail::put_string(out, ckpt.rng_state);
  if (!out) throw parse_error("short write on checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw parse_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "PCFN")
    throw parse_error(path + ": not a PCFN checkpoint");
  Checkpoint ckpt;
  const std::uint32_t version = ckpt_detail::get_u32(in);
  if (version != Checkpoint::kVersion)
    throw parse_error(strcat_msg(path, ": unsupported checkpoint version ", version));
  ckpt.config_json = ckpt_detail::get_string(in);
  ckpt.tensors = ckpt_detail::get_tensor_list(in, path);
  ckpt.optimizer_state = ckpt_detail::get_tensor_list(in, path);
  ckpt.step = ckpt_detail::get_u64(in);
  ckpt.rng_state = ckpt_detail::get_string(in);
  return ckpt;
}

// Copies checkpoint tensors into an existing named tensor list (shapes must
// match); complains about anything missing.
inline void restore_tensors(const std::vector<std::pair<std::string, Tensor<float>>>& dst,
                            const std::vector<std::pair<std::string, Tensor<float>>>& src,
                            const std::string& what) {
  for (const auto& [name, target] : dst) {
    const Tensor<float>* found = nullptr;
    for (const auto& [sname, s] : src)
      if (sname == name) {
        found = &s;
        break;
      }
    if (!found) throw contract_error("checkpoint missing " + what + " tensor '" + name + "'");
    if (found->shape() != target.shape())
      throw contract_error(strcat_msg("checkpoint tensor '", name, "' has shape ",
                                      shape_str(found->shape()), ", model expects ",
                                      shape_str(target.shape())));
    auto d = const_cast<Tensor<float>&>(target).data();
    auto s = found->data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = s[i];
  }
}

}  // namespace pcfnat
