#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sskd/model.hpp"

namespace sskd {

// Canonical (sorted-key, compact) JSON text of a model configuration; its
// SHA-256 is the digest stored in checkpoint headers.
std::string canonical_config_text(const ModelConfig& config);
ModelConfig parse_config_text(const std::string& text);
std::array<std::uint8_t, 32> sha256(std::span<const std::uint8_t> bytes);

// "SSKD" checkpoint: header (magic, u16 version, config digest, config text),
// named float32 parameters, optional buffers (batch-norm running statistics
// and input normalization), CRC-32 trailer. Only model parameters are
// written, so training adapters never reach a checkpoint.
std::vector<std::uint8_t> encode_checkpoint(const StagedModel<float>& model, bool with_stats = true);
StagedModel<float> decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const StagedModel<float>& model, const std::filesystem::path& path, bool with_stats = true);
StagedModel<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace sskd
