#include "mega/io.hpp"

#include <cstdio>
#include <fstream>
#include <istream>
#include <sstream>
#include <system_error>

#include "mega/error.hpp"

namespace mega {

std::vector<CsvRow> read_csv(std::istream& in) {
  std::vector<CsvRow> rows;
  CsvRow row;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  bool any = false;
  char c;
  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    // A bare newline (e.g. trailing) yields one empty field; drop it.
    if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
    row.clear();
  };
  while (in.get(c)) {
    any = true;
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field.push_back('"');
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field_started && field.empty()) {
          in_quotes = true;
          field_started = true;
        } else {
          field.push_back(c);
        }
        break;
      case ',':
        end_field();
        break;
      case '\r':
        if (in.peek() == '\n') in.get(c);
        end_row();
        break;
      case '\n':
        end_row();
        break;
      default:
        field.push_back(c);
        field_started = true;
    }
  }
  if (in_quotes) throw InputError("CSV: unterminated quoted field");
  if (any && (field_started || !field.empty() || !row.empty())) end_row();
  // UTF-8 byte-order mark on the first header cell.
  if (!rows.empty() && !rows[0].empty() && rows[0][0].rfind("\xEF\xBB\xBF", 0) == 0)
    rows[0][0].erase(0, 3);
  return rows;
}

std::string csv_field(std::string_view field) {
  bool quote = field.find_first_of(",\"\r\n") != std::string_view::npos;
  if (!quote) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string csv_line(const CsvRow& row) {
  std::string out;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) out.push_back(',');
    out += csv_field(row[i]);
  }
  out.push_back('\n');
  return out;
}

std::string format_number(double v, int precision) {
  if (is_missing(v)) return {};
  if (v == 0.0) return "0";  // also folds -0
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

std::string format_fixed(double v, int decimals) {
  if (is_missing(v)) return ".";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  // "-0.000" reads as a sign error in tables.
  if (s.front() == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

namespace {

std::string cell_text(const Column& col, std::size_t i) {
  double v = col.values[i];
  if (is_missing(v)) return {};
  if (col.type == ColumnType::Categorical) return col.levels.at(static_cast<std::size_t>(v));
  return format_number(v);
}

}  // namespace

std::string table_to_csv(const CohortTable& table, bool include_truth) {
  std::vector<const Column*> cols;
  for (const auto& c : table.columns())
    if (include_truth || !c.truth) cols.push_back(&c);
  std::string out;
  CsvRow header{"subject_id"};
  for (const auto* c : cols) header.push_back(c->name);
  out += csv_line(header);
  for (std::size_t i = 0; i < table.rows(); ++i) {
    CsvRow row{table.ids()[i]};
    for (const auto* c : cols) row.push_back(cell_text(*c, i));
    out += csv_line(row);
  }
  return out;
}

std::string truth_to_csv(const CohortTable& table) {
  std::vector<const Column*> cols;
  for (const auto& c : table.columns())
    if (c.truth) cols.push_back(&c);
  std::string out;
  CsvRow header{"subject_id"};
  for (const auto* c : cols) header.push_back(c->name);
  out += csv_line(header);
  for (std::size_t i = 0; i < table.rows(); ++i) {
    CsvRow row{table.ids()[i]};
    for (const auto* c : cols) row.push_back(cell_text(*c, i));
    out += csv_line(row);
  }
  return out;
}

namespace {

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

std::map<std::string, std::string> parse_key_values(std::istream& in) {
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw InputError("line " + std::to_string(lineno) + ": expected key=value");
    std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw InputError("line " + std::to_string(lineno) + ": empty key");
    out[key] = trim(std::string_view(t).substr(eq + 1));
  }
  return out;
}

std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return parse_key_values(in);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t fnv1a(std::string_view data, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

void OutputSet::add(std::string relative_path, std::string content) {
  for (auto& [p, c] : files_) {
    if (p == relative_path) {
      c = std::move(content);
      return;
    }
  }
  files_.emplace_back(std::move(relative_path), std::move(content));
}

void write_atomic(const std::filesystem::path& path, std::string_view content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw InputError("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw InputError("cannot rename " + tmp.string() + ": " + ec.message());
  }
}

std::vector<std::filesystem::path> OutputSet::commit(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  // Stage everything first so a failing write leaves no final files behind.
  std::vector<fs::path> staged;
  try {
    for (const auto& [rel, content] : files_) {
      fs::path tmp = dir / rel;
      tmp += ".tmp";
      if (tmp.has_parent_path()) fs::create_directories(tmp.parent_path());
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw InputError("cannot write " + tmp.string());
      out.write(content.data(), static_cast<std::streamsize>(content.size()));
      if (!out) throw InputError("short write to " + tmp.string());
      staged.push_back(tmp);
    }
  } catch (...) {
    for (const auto& t : staged) fs::remove(t);
    throw;
  }
  std::vector<fs::path> written;
  for (std::size_t i = 0; i < files_.size(); ++i) {
    fs::path final_path = dir / files_[i].first;
    fs::rename(staged[i], final_path);
    written.push_back(final_path);
  }
  return written;
}

}  // namespace mega
