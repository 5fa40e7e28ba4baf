#pragma once

// Cohort tables: typed columns, CSV ingestion, listwise deletion and the
// binary abuse indicators built from caregiver and self reports.

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace mega {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();
inline bool is_missing(double v) { return std::isnan(v); }

enum class ColumnType { Continuous, Binary, Categorical, Likert };

std::string_view to_string(ColumnType t);
ColumnType parse_column_type(std::string_view s);

struct ColumnSpec {
  std::string name;
  ColumnType type = ColumnType::Continuous;
};
using Schema = std::vector<ColumnSpec>;

// Values are stored as doubles with NaN marking a missing cell. Categorical
// cells hold the index into `levels`.
struct Column {
  std::string name;
  ColumnType type = ColumnType::Continuous;
  std::vector<double> values;
  std::vector<std::string> levels;
  // Simulation ground truth; never written by the CSV exporters unless asked.
  bool truth = false;

  std::size_t missing_count() const;
};

class CohortTable {
 public:
  CohortTable() = default;
  explicit CohortTable(std::vector<std::string> subject_ids);

  std::size_t rows() const { return ids_.size(); }
  std::size_t cols() const { return columns_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::vector<Column>& columns() const { return columns_; }

  bool has(std::string_view name) const;
  const Column& column(std::string_view name) const;
  std::span<const double> values(std::string_view name) const;

  // Validates length, name uniqueness and the binary/likert value domains.
  void add_column(Column column);
  void replace_column(Column column);

  CohortTable select_rows(std::span<const std::size_t> rows) const;

  Eigen::VectorXd vector(std::string_view name) const;
  Eigen::MatrixXd matrix(std::span<const std::string> names) const;

 private:
  std::vector<std::string> ids_;
  std::vector<Column> columns_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct LoadOptions {
  std::string id_column = "subject_id";
  std::vector<std::string> missing_tokens{""};
};

struct LoadReport {
  std::size_t rows = 0;
  std::size_t missing_cells = 0;
  std::map<std::string, std::size_t> missing_per_column;
  std::vector<std::string> warnings;

  std::string to_text() const;
};

struct LoadedCohort {
  CohortTable table;
  LoadReport report;
};

LoadedCohort load_cohort(const std::filesystem::path& path, const Schema& schema,
                         const LoadOptions& options = {});
LoadedCohort parse_cohort(std::istream& in, const Schema& schema,
                          const LoadOptions& options = {});

// Reads the header and cells: all-numeric columns become Binary when every
// observed value is 0/1 and Continuous otherwise; anything else Categorical.
Schema infer_schema(const std::filesystem::path& path, const LoadOptions& options = {});

struct Selection {
  CohortTable table;
  std::size_t dropped = 0;
  std::vector<std::string> warnings;
};

// Listwise deletion over `vars`, preserving row order.
Selection select_complete(const CohortTable& table, std::span<const std::string> vars);

// Likert responses: 1 = never, 2 = rarely, 3 = sometimes, 4 = often, 5 = very often.
int likert_code(std::string_view label);

struct AbuseRule {
  std::string item;
  int threshold = 3;  // at-least
};

Column dichotomize(const CohortTable& table, const AbuseRule& rule,
                   std::string output_name = {});

enum class Rater : unsigned { Mother = 1u, Partner = 2u, Child = 4u };

class RaterSet {
 public:
  constexpr RaterSet() = default;
  constexpr RaterSet(Rater r) : bits_(static_cast<unsigned>(r)) {}
  static RaterSet from_bits(unsigned bits);
  static RaterSet parse(std::string_view label);  // "M", "CP", "CMP", ...

  unsigned bits() const { return bits_; }
  bool empty() const { return bits_ == 0; }
  bool contains(RaterSet other) const { return (bits_ & other.bits_) == other.bits_; }
  RaterSet operator|(RaterSet o) const { return from_bits(bits_ | o.bits_); }
  bool operator==(const RaterSet&) const = default;

  // Column-header labels: M, P, C, MP, CM, CP, CMP.
  std::string label() const;

 private:
  unsigned bits_ = 0;
};

// The seven non-empty rater sets in table order.
std::vector<RaterSet> all_rater_sets();

enum class Period { Age0to10, Age11to18 };
enum class AbuseKind { Cruelty, SexAbuse, Any };

std::string_view to_string(Period p);
std::string_view to_string(AbuseKind k);

struct AbuseIndicator {
  RaterSet raters;
  Period period = Period::Age0to10;
  AbuseKind kind = AbuseKind::Cruelty;
  std::vector<double> values;  // 0, 1 or missing

  Column to_column(std::string name) const;
};

AbuseIndicator indicator_from_column(const CohortTable& table, std::string_view column,
                                     RaterSet raters, Period period, AbuseKind kind);

// Per-subject OR over the indicators whose raters fall inside `raters`.
// Subjects with every selected rater missing stay missing; otherwise the OR
// runs over the observed reports only.
AbuseIndicator combine_raters(std::span<const AbuseIndicator> indicators, RaterSet raters,
                              Period period);

// "Any" abuse: cruelty by the given raters OR self-reported sex abuse. Keeps
// the cruelty indicator's rater label.
AbuseIndicator any_abuse(const AbuseIndicator& cruelty, const AbuseIndicator& sex_abuse);

struct PrevalenceRow {
  RaterSet raters;
  Period period = Period::Age0to10;
  AbuseKind kind = AbuseKind::Cruelty;
  std::size_t observed = 0;
  std::size_t exposed = 0;
  double percent = 0.0;
};

struct PersistenceRow {
  RaterSet raters;
  std::size_t observed = 0;
  std::size_t both = 0;
  double percent = 0.0;
};

struct PrevalenceTable {
  std::vector<PrevalenceRow> rows;
  std::vector<PersistenceRow> persistence;

  const PrevalenceRow* find(RaterSet raters, Period period, AbuseKind kind) const;
  std::string to_text() const;
  std::string to_csv() const;
};

PrevalenceTable prevalence_table(std::span<const AbuseIndicator> indicators);

}  // namespace mega
