#pragma once

#include <string>

#include "radt/nn.hpp"

namespace radt::nn {

inline constexpr const char* kCheckpointMagic = "radt-ckpt-1\n";

// Named-tensor container, little-endian throughout:
//   magic (12 bytes) | u64 config_len | config JSON | u64 rng_len | rng state
//   | u32 n_tensors | per tensor: u32 name_len, name, u32 rows, u32 cols,
//   u8 dtype (0 = f32), raw values.
// Round-trips bit-exactly; load rejects anything without the magic.
void save_checkpoint(const ParamStore<float>& ps, const std::string& config_json,
                     const std::string& rng_state, const std::string& path);

struct Checkpoint {
  std::string config_json;
  std::string rng_state;
  // tensors are loaded into an existing store (shape-checked by name) or
  // inspected via the raw list
  std::vector<std::pair<std::string, Matrix<float>>> tensors;

  void load_into(ParamStore<float>& ps) const;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace radt::nn
