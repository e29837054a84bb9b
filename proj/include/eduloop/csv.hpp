#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace eduloop::csv {

// RFC 4180 style table: quoted fields may contain commas, doubled quotes and
// newlines. Blank lines are skipped.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Index of a header column, if present.
  std::optional<std::size_t> column(std::string_view name) const;
  // Throws Error(data) naming the column when absent.
  std::size_t require_column(std::string_view name,
                             const std::filesystem::path& source) const;
};

Table parse(std::string_view text);
Table read_file(const std::filesystem::path& path);

// Quotes the field when it holds a comma, quote, or line break.
std::string escape(std::string_view field);
// Always quotes.
std::string quote(std::string_view field);

std::string trim(std::string_view s);

}  // namespace eduloop::csv
