#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace eduloop {

std::string sha256_hex(std::string_view bytes);
// Throws Error(data) when the file cannot be read.
std::string sha256_file(const std::filesystem::path& path);

// Run manifest: the command, its effective configuration and the checksums
// of the files it read and wrote. Missing files are skipped.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;

  nlohmann::json to_json() const;
  void write(const std::filesystem::path& path) const;
};

// Writes `text` to `path` via a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace eduloop
