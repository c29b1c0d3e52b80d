#pragma once

#include <string>

#include "shgvqa/optimizer.hpp"

namespace shgvqa {

// Binary container of named parameter tensors with shape headers:
// magic "SHGC", one format version byte, then per tensor name, rank, dims
// and little-endian f64 data.
inline constexpr char kCheckpointMagic[4] = {'S', 'H', 'G', 'C'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

void save_checkpoint(const NamedParams& params, const std::string& path);

// Loads into existing tensors by name; missing, extra or misshapen entries
// are errors.
void load_checkpoint(NamedParams& params, const std::string& path);

}  // namespace shgvqa
