#pragma once

// RFC-4180 CSV, deterministic number formatting and all-or-nothing output
// directories.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mega/cohort_data.hpp"

namespace mega {

using CsvRow = std::vector<std::string>;

std::vector<CsvRow> read_csv(std::istream& in);
std::string csv_field(std::string_view field);
std::string csv_line(const CsvRow& row);

// 12 significant digits, byte-stable across runs. Missing prints as empty.
std::string format_number(double v, int precision = 12);
std::string format_fixed(double v, int decimals);

std::string table_to_csv(const CohortTable& table, bool include_truth = false);
// subject_id plus the truth columns only.
std::string truth_to_csv(const CohortTable& table);

// Plain-text key=value files (simulator configs, run manifests).
std::map<std::string, std::string> parse_key_values(std::istream& in);
std::map<std::string, std::string> read_key_values(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);

// 64-bit FNV-1a, used for config hashes and named random substreams.
std::uint64_t fnv1a(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ull);

// Collects every output of a run in memory and writes them at the end, each
// through a temporary file and a rename. The manifest goes last.
class OutputSet {
 public:
  void add(std::string relative_path, std::string content);
  bool empty() const { return files_.empty(); }
  const std::vector<std::pair<std::string, std::string>>& files() const { return files_; }

  // Returns the written paths in order.
  std::vector<std::filesystem::path> commit(const std::filesystem::path& dir) const;

 private:
  std::vector<std::pair<std::string, std::string>> files_;
};

void write_atomic(const std::filesystem::path& path, std::string_view content);

}  // namespace mega
