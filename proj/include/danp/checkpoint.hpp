#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "danp/config.hpp"
#include "danp/params.hpp"
#include "danp/rng.hpp"

namespace danp {

inline constexpr char kCheckpointMagic[8] = {'D', 'A', 'N', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    RunConfig config;
    ParamStore<float> params;
    Rng::State rng_state{};
    std::uint64_t step = 0;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Layout: magic, u32 version, u64 metadata length, metadata JSON (sorted
/// keys; config, parameter index with byte offsets, rng state, step), then
/// little-endian float32 tensors in key order.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace danp
