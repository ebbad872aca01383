#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace aatr {

/// On-disk layout shared by checkpoints and adversarial datasets:
///
///   "AATR1" | u32 LE metadata length | UTF-8 JSON metadata | f32 LE payload
///
/// The metadata always carries "payload_floats", the number of floats that
/// follow, so truncation and trailing garbage are both detectable.
inline constexpr std::string_view kContainerMagic = "AATR1";

struct Container {
  nlohmann::json meta;
  std::vector<float> payload;
};

std::string encode_container(nlohmann::json meta, std::span<const float> payload);

/// Throws BadFormatError on wrong magic, malformed JSON or trailing bytes,
/// TruncatedError when the header, metadata or payload is short.
Container decode_container(std::string_view bytes);

std::string read_binary_file(const std::filesystem::path& path);
/// Creates parent directories as needed.
void write_binary_file(const std::filesystem::path& path, std::string_view bytes);

/// 64-bit FNV-1a as 16 lowercase hex digits. Used for provenance hashes of
/// checkpoints and configs, not for security.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace aatr
