#pragma once

#include <span>
#include <string>
#include <string_view>

namespace ecgadv {

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_hex(std::span<const double> values);

}  // namespace ecgadv
