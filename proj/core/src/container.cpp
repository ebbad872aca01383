#include "aatr/container.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "aatr/error.hpp"

namespace aatr {

namespace {

void append_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t read_u32_le(std::string_view bytes) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)]))
         << (8 * i);
  }
  return v;
}

}  // namespace

std::string encode_container(nlohmann::json meta, std::span<const float> payload) {
  meta["payload_floats"] = payload.size();
  const std::string text = meta.dump();
  std::string out;
  out.reserve(kContainerMagic.size() + 4 + text.size() + payload.size() * 4);
  out.append(kContainerMagic);
  append_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out.append(text);
  const std::size_t offset = out.size();
  out.resize(offset + payload.size() * 4);
  if constexpr (std::endian::native == std::endian::little) {
    if (!payload.empty()) std::memcpy(out.data() + offset, payload.data(), payload.size() * 4);
  } else {
    for (std::size_t i = 0; i < payload.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(payload[i]);
      for (int b = 0; b < 4; ++b) {
        out[offset + i * 4 + static_cast<std::size_t>(b)] =
            static_cast<char>((bits >> (8 * b)) & 0xFFu);
      }
    }
  }
  return out;
}

Container decode_container(std::string_view bytes) {
  const std::size_t header = kContainerMagic.size() + 4;
  if (bytes.size() < kContainerMagic.size() ||
      bytes.substr(0, kContainerMagic.size()) != kContainerMagic) {
    throw BadFormatError("bad magic: not an AATR1 container");
  }
  if (bytes.size() < header) throw TruncatedError(header, bytes.size(), "truncated header");
  const std::size_t meta_len = read_u32_le(bytes.substr(kContainerMagic.size(), 4));
  if (bytes.size() < header + meta_len) {
    throw TruncatedError(header + meta_len, bytes.size(), "truncated metadata");
  }
  Container c;
  try {
    c.meta = nlohmann::json::parse(bytes.substr(header, meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw BadFormatError(std::string("malformed metadata: ") + e.what());
  }
  if (!c.meta.is_object() || !c.meta.contains("payload_floats") ||
      !c.meta["payload_floats"].is_number_unsigned()) {
    throw BadFormatError("metadata lacks payload_floats");
  }
  const std::size_t floats = c.meta["payload_floats"].get<std::size_t>();
  const std::size_t expected = header + meta_len + floats * 4;
  if (bytes.size() < expected) throw TruncatedError(expected, bytes.size(), "truncated payload");
  if (bytes.size() > expected) {
    throw BadFormatError("payload length " + std::to_string(bytes.size() - header - meta_len) +
                         " bytes does not match metadata (" + std::to_string(floats * 4) + ")");
  }
  c.payload.resize(floats);
  const char* src = bytes.data() + header + meta_len;
  if constexpr (std::endian::native == std::endian::little) {
    if (floats) std::memcpy(c.payload.data(), src, floats * 4);
  } else {
    for (std::size_t i = 0; i < floats; ++i) {
      c.payload[i] = std::bit_cast<float>(read_u32_le(std::string_view(src + i * 4, 4)));
    }
  }
  c.meta.erase("payload_floats");
  return c;
}

std::string read_binary_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  if (in.bad()) throw IoError("error reading '" + path.string() + "'");
  return std::move(buffer).str();
}

void write_binary_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("error writing '" + path.string() + "'");
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xF];
    h >>= 4;
  }
  return out;
}

}  // namespace aatr
