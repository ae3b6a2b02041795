#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dtr/decoupled.hpp"
#include "dtr/transformer.hpp"

namespace dtr {

/// Little-endian model file: "DTMW", version u16 (1 standard, 2 decoupled),
/// config as u32s (n_layers, hidden, heads, ffn, vocab, max_positions,
/// n_segments, dropout and attention_dropout as f32 bit patterns); decoupled
/// files add x u8, y u8 and the bottleneck width c u32 (0 = none). Named
/// blocks follow until end of file: name length u16, name, rank u8, extents
/// u32 each, f32 values.
enum class CheckpointKind : std::uint16_t { standard = 1, decoupled = 2 };

std::vector<std::uint8_t> serialize(const StandardModel& model);
std::vector<std::uint8_t> serialize(const DecoupledModel& model);

StandardModel deserialize_standard(std::span<const std::uint8_t> bytes);
DecoupledModel deserialize_decoupled(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const StandardModel& model);
void save_checkpoint(const std::filesystem::path& path, const DecoupledModel& model);

CheckpointKind checkpoint_kind(const std::filesystem::path& path);
StandardModel load_standard(const std::filesystem::path& path);
DecoupledModel load_decoupled(const std::filesystem::path& path);

// FNV-1a-64 of the serialized checkpoint bytes.
std::uint64_t model_hash(const StandardModel& model);
std::uint64_t model_hash(const DecoupledModel& model);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes through a temporary file in the same directory and renames it into
// place; the temporary is removed on failure.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace dtr
