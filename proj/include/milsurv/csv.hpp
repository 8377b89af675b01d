#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace milsurv::csv {

using Row = std::vector<std::string>;

/// RFC 4180-style split of one line (double-quoted fields, "" escapes).
Row split_line(std::string_view line);

/// Reads all non-empty lines; lines starting with '#' are skipped.
std::vector<Row> read_file(const std::filesystem::path& path);

std::string escape(std::string_view field);
std::string join(const Row& fields);

}  // namespace milsurv::csv
