#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

namespace cmrc {

/// SHA-256 digest of a byte buffer.
std::array<std::uint8_t, 32> sha256(std::span<const std::uint8_t> data);

std::string hex_digest(const std::array<std::uint8_t, 32>& digest);

} // namespace cmrc
