#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace dap {

// Writes to a sibling temp file and renames over `path`. Throws IoError.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

}  // namespace dap
