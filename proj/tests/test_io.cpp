#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "mega/error.hpp"
#include "mega/io.hpp"

using namespace mega;
namespace fs = std::filesystem;

TEST_CASE("csv quoting round-trips embedded commas, quotes and newlines") {
  CsvRow row{"plain", "a,b", "say \"hi\"", "two\nlines", ""};
  std::istringstream in(csv_line(row) + csv_line({"x", "y", "z", "w", "v"}));
  auto rows = read_csv(in);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0] == row);
  CHECK(csv_field("a,b") == "\"a,b\"");
  CHECK(csv_field("plain") == "plain");
}

TEST_CASE("crlf line endings are accepted") {
  std::istringstream in("a,b\r\n1,2\r\n");
  auto rows = read_csv(in);
  REQUIRE(rows.size() == 2);
  CHECK(rows[1] == CsvRow{"1", "2"});
}

TEST_CASE("number formatting is stable and prints missing as empty") {
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(1.0 / 3.0) == "0.333333333333");
  CHECK(format_number(kMissing).empty());
  CHECK(format_fixed(0.5394, 3) == "0.539");
}

TEST_CASE("key=value files ignore comments and blank lines") {
  std::istringstream in("# comment\n\nn = 448\nclocks=a,b\n");
  auto kv = parse_key_values(in);
  CHECK(kv.at("n") == "448");
  CHECK(kv.at("clocks") == "a,b");
}

TEST_CASE("truth columns stay out of exports unless requested") {
  CohortTable t({"a"});
  t.add_column(Column{"x", ColumnType::Continuous, {1.5}, {}, false});
  t.add_column(Column{"x_true", ColumnType::Continuous, {2.5}, {}, true});
  CHECK(table_to_csv(t).find("x_true") == std::string::npos);
  CHECK(table_to_csv(t, true).find("x_true") != std::string::npos);
  CHECK(truth_to_csv(t) == "subject_id,x_true\na,2.5\n");
}

TEST_CASE("output sets write every file and leave no temporaries") {
  fs::path dir = fs::temp_directory_path() / "mega_io_test";
  fs::remove_all(dir);
  OutputSet out;
  out.add("a.csv", "x\n1\n");
  out.add("manifest.txt", "k=v\n");
  auto written = out.commit(dir);
  CHECK(written.size() == 2);
  CHECK(read_file(dir / "a.csv") == "x\n1\n");
  for (const auto& e : fs::directory_iterator(dir)) CHECK(e.path().extension() != ".tmp");
  fs::remove_all(dir);
}

TEST_CASE("fnv1a matches the published test vector") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cull);
}
