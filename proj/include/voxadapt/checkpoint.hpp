#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "voxadapt/parameters.hpp"

namespace voxadapt {

class FormatError : public Error {
 public:
  using Error::Error;
};

inline constexpr char kCheckpointMagic[] = "VXADAPT1";

/// Flat record of named tensors and counters.
///
/// On disk: the 8-byte magic, a u32 entry count, then one manifest record per
/// entry (u32 name length, name bytes, u8 dtype, u8 flags, u32 rank, u64 dims),
/// then the payloads in manifest order. dtype 0 is f64 (one value per tensor
/// element), dtype 1 is a single u64 counter with rank 0. Flag bit 0 marks a
/// trainable tensor. All integers and floats are little-endian.
struct Checkpoint {
  struct Entry {
    std::string name;
    Tensor tensor;
    bool trainable = false;
    bool operator==(const Entry&) const = default;
  };
  std::vector<Entry> tensors;  ///< insertion order is preserved on disk
  std::vector<std::pair<std::string, std::uint64_t>> counters;

  void put(const std::string& name, const Tensor& t, bool trainable = false);
  void put_scalar(const std::string& name, double v);
  void put_counter(const std::string& name, std::uint64_t v);

  [[nodiscard]] const Tensor& tensor(const std::string& name) const;
  [[nodiscard]] double scalar(const std::string& name) const;
  [[nodiscard]] std::uint64_t counter(const std::string& name) const;

  /// Stores every entry of `params` under "<prefix>/<entry name>".
  void put_parameters(const std::string& prefix, const ParameterSet& params);
  /// Rebuilds the ParameterSet stored under `prefix`.
  [[nodiscard]] ParameterSet parameters(const std::string& prefix) const;

  void put_adam(const std::string& prefix, const AdamState& state);
  [[nodiscard]] AdamState adam(const std::string& prefix) const;

  bool operator==(const Checkpoint&) const = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Single-network convenience wrappers.
void save_weights(const ParameterSet& params, const std::filesystem::path& path);
ParameterSet load_weights(const std::filesystem::path& path);

}  // namespace voxadapt
