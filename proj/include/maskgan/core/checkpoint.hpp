#pragma once

// Named-tensor container.
//
//   magic    "MGCKPT01"                      8 bytes
//   version  u32                             currently 1
//   iteration u64
//   meta     u32 count, then (string key, string value) pairs
//   tensors  u32 count, then per tensor:
//              string name, i32 n, i32 c, i32 h, i32 w, f32[n*c*h*w]
//   string = u32 byte length + bytes. All integers and floats little-endian.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include "maskgan/core/tensor.hpp"

namespace maskgan {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::uint64_t iteration = 0;
    std::map<std::string, std::string> meta;  // config echo, palette, rng state, ...
    std::map<std::string, Tensor> tensors;

    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);

    std::string serialize() const;
    static Checkpoint deserialize(const std::string& bytes);

    const std::string& meta_at(const std::string& key) const;
    /// Tensors whose name starts with prefix, with the prefix stripped.
    std::map<std::string, Tensor> with_prefix(const std::string& prefix) const;
    void put_all(const std::map<std::string, Tensor>& values, const std::string& prefix);
};

}  // namespace maskgan
