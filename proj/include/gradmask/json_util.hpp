#pragma once

#include <filesystem>
#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

namespace gradmask {

// Throws ValidationError when `j` is not an object or has a key outside
// `allowed`.
void require_known_keys(const nlohmann::json& j,
                        std::initializer_list<std::string_view> allowed,
                        const std::string& context);

nlohmann::json read_json_file(const std::filesystem::path& path);

// Write to a sibling temp file, then rename over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace gradmask
