#pragma once

#include <cstdint>
#include <filesystem>

#include <torch/torch.h>

#include "json.hpp"

namespace frace {

inline constexpr int kCheckpointFormatVersion = 1;

/// Writes `<stem>.pt` (parameters and buffers) and `<stem>.json`. The
/// manifest gains a "format_version" key.
void save_checkpoint(const torch::nn::Module& module, const std::filesystem::path& stem,
                     nlohmann::json manifest);

nlohmann::json read_manifest(const std::filesystem::path& stem);

/// Loads weights into an already constructed module of the right shape.
void load_weights(torch::nn::Module& module, const std::filesystem::path& stem);

/// FNV-1a over the raw bytes of every parameter and buffer, in registration
/// order. Used to prove a model was not modified.
std::uint64_t parameter_checksum(const torch::nn::Module& module);

}  // namespace frace
