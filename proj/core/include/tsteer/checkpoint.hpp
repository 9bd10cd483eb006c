#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "tsteer/binio.hpp"
#include "tsteer/model.hpp"
#include "tsteer/tensor.hpp"

namespace tsteer {

// Checkpoint layout (all integers little-endian):
//   "TTFM" | u32 version | u64 json_len | config JSON bytes |
//   per tensor in declaration order: u64 rank | u64 dims[rank] | f32 payload
// Activation dump layout:
//   "ACTD" | u32 version | u32 layer | u64 N | u64 T_tok | u64 D | f32 payload (row-major)

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kActivationDumpVersion = 1;

std::string encode_checkpoint(const Parameters& params);
Parameters decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Parameters& params, const std::filesystem::path& path);
Parameters load_checkpoint(const std::filesystem::path& path);

/// 16 hex digits of FNV-1a over the encoded checkpoint.
std::string checkpoint_hash(const Parameters& params);

std::string encode_activation(const ActivationTensor& act);
ActivationTensor decode_activation(const std::string& bytes);
void save_activation(const ActivationTensor& act, const std::filesystem::path& path);
ActivationTensor load_activation(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace tsteer
