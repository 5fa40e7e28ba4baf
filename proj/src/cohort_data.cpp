#include "mega/cohort_data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "mega/error.hpp"
#include "mega/io.hpp"

namespace mega {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

bool parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

void check_domain(const Column& c) {
  for (double v : c.values) {
    if (is_missing(v)) continue;
    switch (c.type) {
      case ColumnType::Binary:
        if (v != 0.0 && v != 1.0)
          throw InputError("column '" + c.name + "' is binary but holds " + format_number(v));
        break;
      case ColumnType::Likert:
        if (v != std::floor(v) || v < 1.0 || v > 5.0)
          throw InputError("column '" + c.name + "' is likert(1-5) but holds " +
                           format_number(v));
        break;
      case ColumnType::Categorical:
        if (v < 0 || v != std::floor(v) || v >= static_cast<double>(c.levels.size()))
          throw InputError("column '" + c.name + "' has a category code out of range");
        break;
      case ColumnType::Continuous:
        break;
    }
  }
}

}  // namespace

std::string_view to_string(ColumnType t) {
  switch (t) {
    case ColumnType::Continuous: return "continuous";
    case ColumnType::Binary: return "binary";
    case ColumnType::Categorical: return "categorical";
    case ColumnType::Likert: return "likert";
  }
  return "?";
}

ColumnType parse_column_type(std::string_view s) {
  std::string l = lower(s);
  if (l == "continuous" || l == "numeric") return ColumnType::Continuous;
  if (l == "binary") return ColumnType::Binary;
  if (l == "categorical") return ColumnType::Categorical;
  if (l == "likert" || l == "ordinal") return ColumnType::Likert;
  throw InputError("unknown column type '" + std::string(s) + "'");
}

std::size_t Column::missing_count() const {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), is_missing));
}

CohortTable::CohortTable(std::vector<std::string> subject_ids) : ids_(std::move(subject_ids)) {
  std::set<std::string_view> seen;
  for (const auto& id : ids_) {
    if (id.empty()) throw InputError("empty subject identifier");
    if (!seen.insert(id).second) throw InputError("duplicate subject id '" + id + "'");
  }
}

bool CohortTable::has(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

const Column& CohortTable::column(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw InputError("unknown column '" + std::string(name) + "'");
  return columns_[it->second];
}

std::span<const double> CohortTable::values(std::string_view name) const {
  return column(name).values;
}

void CohortTable::add_column(Column column) {
  if (column.name.empty()) throw InputError("column without a name");
  if (has(column.name)) throw InputError("duplicate column '" + column.name + "'");
  if (column.values.size() != rows())
    throw InputError("column '" + column.name + "' has " + std::to_string(column.values.size()) +
                     " values for " + std::to_string(rows()) + " rows");
  check_domain(column);
  index_.emplace(column.name, columns_.size());
  columns_.push_back(std::move(column));
}

void CohortTable::replace_column(Column column) {
  auto it = index_.find(column.name);
  if (it == index_.end()) {
    add_column(std::move(column));
    return;
  }
  if (column.values.size() != rows())
    throw InputError("column '" + column.name + "' has the wrong length");
  check_domain(column);
  columns_[it->second] = std::move(column);
}

CohortTable CohortTable::select_rows(std::span<const std::size_t> rows) const {
  std::vector<std::string> ids;
  ids.reserve(rows.size());
  for (auto r : rows) ids.push_back(ids_.at(r));
  CohortTable out(std::move(ids));
  for (const auto& c : columns_) {
    Column nc{c.name, c.type, {}, c.levels, c.truth};
    nc.values.reserve(rows.size());
    for (auto r : rows) nc.values.push_back(c.values[r]);
    out.index_.emplace(nc.name, out.columns_.size());
    out.columns_.push_back(std::move(nc));
  }
  return out;
}

Eigen::VectorXd CohortTable::vector(std::string_view name) const {
  auto v = values(name);
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Eigen::MatrixXd CohortTable::matrix(std::span<const std::string> names) const {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(names.size()));
  for (std::size_t j = 0; j < names.size(); ++j) m.col(static_cast<Eigen::Index>(j)) = vector(names[j]);
  return m;
}

std::string LoadReport::to_text() const {
  std::ostringstream os;
  os << "rows=" << rows << "\n";
  os << "missing_cells=" << missing_cells << "\n";
  for (const auto& [name, n] : missing_per_column)
    if (n) os << "missing[" << name << "]=" << n << "\n";
  for (const auto& w : warnings) os << "warning: " << w << "\n";
  return os.str();
}

int likert_code(std::string_view label) {
  static const std::pair<const char*, int> kLabels[] = {
      {"never", 1}, {"rarely", 2}, {"sometimes", 3}, {"often", 4}, {"very often", 5}};
  std::string l = lower(trim(label));
  for (const auto& [name, code] : kLabels)
    if (l == name) return code;
  double v;
  if (parse_double(l, v) && v == std::floor(v) && v >= 1 && v <= 5) return static_cast<int>(v);
  return 0;
}

LoadedCohort parse_cohort(std::istream& in, const Schema& schema, const LoadOptions& options) {
  auto rows = read_csv(in);
  if (rows.empty()) throw InputError("no data rows");
  const auto& header = rows.front();
  if (rows.size() == 1) throw InputError("no data rows");

  std::size_t id_col = header.size();
  for (std::size_t j = 0; j < header.size(); ++j)
    if (header[j] == options.id_column) id_col = j;
  if (id_col == header.size())
    throw InputError("header lacks the subject id column '" + options.id_column + "'");

  // Schema names and header names must match exactly (id column aside).
  std::vector<std::size_t> pos(schema.size(), header.size());
  for (std::size_t s = 0; s < schema.size(); ++s) {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == schema[s].name) pos[s] = j;
    if (pos[s] == header.size())
      throw InputError("schema column '" + schema[s].name + "' not found in header");
  }
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (j == id_col) continue;
    bool known = std::any_of(schema.begin(), schema.end(),
                             [&](const ColumnSpec& c) { return c.name == header[j]; });
    if (!known) throw InputError("header column '" + header[j] + "' not in schema");
  }

  auto is_missing_token = [&](const std::string& cell) {
    std::string t = trim(cell);
    return std::find(options.missing_tokens.begin(), options.missing_tokens.end(), t) !=
           options.missing_tokens.end();
  };

  std::vector<std::string> ids;
  ids.reserve(rows.size() - 1);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != header.size())
      throw InputError("row " + std::to_string(i + 1) + " has " + std::to_string(rows[i].size()) +
                       " fields, header has " + std::to_string(header.size()));
    ids.push_back(trim(rows[i][id_col]));
  }

  LoadedCohort out{CohortTable(std::move(ids)), {}};
  auto& report = out.report;
  report.rows = rows.size() - 1;

  for (std::size_t s = 0; s < schema.size(); ++s) {
    const auto& spec = schema[s];
    Column col{spec.name, spec.type, {}, {}, false};
    col.values.reserve(report.rows);
    std::size_t invalid = 0;
    std::map<std::string, std::size_t> level_index;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const std::string& cell = rows[i][pos[s]];
      if (is_missing_token(cell)) {
        col.values.push_back(kMissing);
        continue;
      }
      std::string t = trim(cell);
      double v = kMissing;
      bool ok = false;
      switch (spec.type) {
        case ColumnType::Continuous:
          ok = parse_double(t, v);
          break;
        case ColumnType::Binary:
          ok = parse_double(t, v) && (v == 0.0 || v == 1.0);
          break;
        case ColumnType::Likert: {
          int code = likert_code(t);
          ok = code != 0;
          v = code;
          break;
        }
        case ColumnType::Categorical: {
          auto [it, inserted] = level_index.emplace(t, col.levels.size());
          if (inserted) col.levels.push_back(t);
          v = static_cast<double>(it->second);
          ok = true;
          break;
        }
      }
      if (!ok) {
        ++invalid;
        if (invalid <= 5)
          report.warnings.push_back("row " + std::to_string(i + 1) + ", column '" + spec.name +
                                    "': value '" + t + "' is not valid " +
                                    std::string(to_string(spec.type)) + "; marked missing");
        v = kMissing;
      }
      col.values.push_back(v);
    }
    if (invalid > 5)
      report.warnings.push_back("column '" + spec.name + "': " + std::to_string(invalid) +
                                " invalid cells in total");
    std::size_t miss = col.missing_count();
    report.missing_per_column[spec.name] = miss;
    report.missing_cells += miss;
    out.table.add_column(std::move(col));
  }
  return out;
}

LoadedCohort load_cohort(const std::filesystem::path& path, const Schema& schema,
                         const LoadOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return parse_cohort(in, schema, options);
}

Schema infer_schema(const std::filesystem::path& path, const LoadOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  auto rows = read_csv(in);
  if (rows.size() < 2) throw InputError("no data rows");
  Schema schema;
  const auto& header = rows.front();
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (header[j] == options.id_column) continue;
    bool numeric = true, binary = true;
    for (std::size_t i = 1; i < rows.size() && numeric; ++i) {
      if (j >= rows[i].size()) continue;
      std::string t = trim(rows[i][j]);
      if (std::find(options.missing_tokens.begin(), options.missing_tokens.end(), t) !=
          options.missing_tokens.end())
        continue;
      double v;
      if (!parse_double(t, v)) numeric = false;
      else if (v != 0.0 && v != 1.0) binary = false;
    }
    ColumnType type = !numeric ? ColumnType::Categorical
                               : (binary ? ColumnType::Binary : ColumnType::Continuous);
    schema.push_back({header[j], type});
  }
  return schema;
}

Selection select_complete(const CohortTable& table, std::span<const std::string> vars) {
  std::vector<const Column*> cols;
  for (const auto& v : vars) cols.push_back(&table.column(v));
  std::vector<std::size_t> keep;
  keep.reserve(table.rows());
  for (std::size_t i = 0; i < table.rows(); ++i) {
    bool ok = std::none_of(cols.begin(), cols.end(),
                           [&](const Column* c) { return is_missing(c->values[i]); });
    if (ok) keep.push_back(i);
  }
  Selection out{table.select_rows(keep), table.rows() - keep.size(), {}};
  if (keep.empty() && table.rows() > 0)
    out.warnings.push_back("listwise deletion removed every row");
  return out;
}

Column dichotomize(const CohortTable& table, const AbuseRule& rule, std::string output_name) {
  if (rule.threshold < 1 || rule.threshold > 5)
    throw InputError("abuse rule threshold must be in [1,5]");
  const Column& item = table.column(rule.item);
  if (item.type != ColumnType::Likert)
    throw InputError("column '" + rule.item + "' is not an ordinal likert item");
  Column out{output_name.empty() ? rule.item + "_ge" + std::to_string(rule.threshold)
                                 : std::move(output_name),
             ColumnType::Binary, {}, {}, false};
  out.values.reserve(item.values.size());
  for (double v : item.values)
    out.values.push_back(is_missing(v) ? kMissing : (v >= rule.threshold ? 1.0 : 0.0));
  return out;
}

RaterSet RaterSet::from_bits(unsigned bits) {
  if (bits > 7u) throw InputError("invalid rater set");
  RaterSet r;
  r.bits_ = bits;
  return r;
}

RaterSet RaterSet::parse(std::string_view label) {
  unsigned bits = 0;
  for (char c : label) {
    switch (std::toupper(static_cast<unsigned char>(c))) {
      case 'M': bits |= 1u; break;
      case 'P': bits |= 2u; break;
      case 'C': bits |= 4u; break;
      default: throw InputError("unknown rater '" + std::string(1, c) + "'");
    }
  }
  return from_bits(bits);
}

std::string RaterSet::label() const {
  // Child first when present, matching the CM/CP/CMP headers.
  std::string s;
  if (bits_ & 4u) s += 'C';
  if (bits_ & 1u) s += 'M';
  if (bits_ & 2u) s += 'P';
  return s;
}

std::vector<RaterSet> all_rater_sets() {
  return {RaterSet::from_bits(1u), RaterSet::from_bits(2u), RaterSet::from_bits(4u),
          RaterSet::from_bits(3u), RaterSet::from_bits(5u), RaterSet::from_bits(6u),
          RaterSet::from_bits(7u)};
}

std::string_view to_string(Period p) {
  return p == Period::Age0to10 ? "0-10" : "11-18";
}

std::string_view to_string(AbuseKind k) {
  switch (k) {
    case AbuseKind::Cruelty: return "cruelty";
    case AbuseKind::SexAbuse: return "sex_abuse";
    case AbuseKind::Any: return "any";
  }
  return "?";
}

Column AbuseIndicator::to_column(std::string name) const {
  return Column{std::move(name), ColumnType::Binary, values, {}, false};
}

AbuseIndicator indicator_from_column(const CohortTable& table, std::string_view column,
                                     RaterSet raters, Period period, AbuseKind kind) {
  const Column& c = table.column(column);
  if (c.type != ColumnType::Binary)
    throw InputError("abuse indicator column '" + c.name + "' must be binary");
  if (raters.empty()) throw InputError("abuse indicator needs at least one rater");
  return AbuseIndicator{raters, period, kind, c.values};
}

namespace {

// OR over observed values; missing only when every input is missing.
std::vector<double> or_observed(std::span<const std::vector<double>* const> inputs) {
  std::size_t n = inputs.front()->size();
  std::vector<double> out(n, kMissing);
  for (std::size_t i = 0; i < n; ++i) {
    bool seen = false, hit = false;
    for (const auto* v : inputs) {
      double x = (*v)[i];
      if (is_missing(x)) continue;
      seen = true;
      if (x == 1.0) hit = true;
    }
    if (seen) out[i] = hit ? 1.0 : 0.0;
  }
  return out;
}

}  // namespace

AbuseIndicator combine_raters(std::span<const AbuseIndicator> indicators, RaterSet raters,
                              Period period) {
  if (raters.empty()) throw InputError("combine_raters: empty rater set");
  std::vector<const std::vector<double>*> chosen;
  unsigned covered = 0;
  const AbuseIndicator* first = nullptr;
  for (const auto& ind : indicators) {
    if (ind.period != period)
      throw InputError("combine_raters: mixed periods (" + std::string(to_string(ind.period)) +
                       " vs " + std::string(to_string(period)) + ")");
    if (!raters.contains(ind.raters)) continue;
    if (first && ind.kind != first->kind)
      throw InputError("combine_raters: mixed abuse kinds");
    if (first && ind.values.size() != first->values.size())
      throw InputError("combine_raters: indicators differ in length");
    if (!first) first = &ind;
    chosen.push_back(&ind.values);
    covered |= ind.raters.bits();
  }
  if ((covered & raters.bits()) != raters.bits())
    throw InputError("combine_raters: no indicator for rater(s) of set " + raters.label());
  return AbuseIndicator{raters, period, first->kind, or_observed(chosen)};
}

AbuseIndicator any_abuse(const AbuseIndicator& cruelty, const AbuseIndicator& sex_abuse) {
  if (cruelty.period != sex_abuse.period) throw InputError("any_abuse: mixed periods");
  if (cruelty.values.size() != sex_abuse.values.size())
    throw InputError("any_abuse: indicators differ in length");
  const std::vector<double>* inputs[] = {&cruelty.values, &sex_abuse.values};
  return AbuseIndicator{cruelty.raters, cruelty.period, AbuseKind::Any, or_observed(inputs)};
}

const PrevalenceRow* PrevalenceTable::find(RaterSet raters, Period period,
                                           AbuseKind kind) const {
  for (const auto& r : rows)
    if (r.raters == raters && r.period == period && r.kind == kind) return &r;
  return nullptr;
}

PrevalenceTable prevalence_table(std::span<const AbuseIndicator> indicators) {
  PrevalenceTable t;
  for (const auto& ind : indicators) {
    PrevalenceRow row{ind.raters, ind.period, ind.kind, 0, 0, 0.0};
    for (double v : ind.values) {
      if (is_missing(v)) continue;
      ++row.observed;
      if (v == 1.0) ++row.exposed;
    }
    row.percent = row.observed ? 100.0 * static_cast<double>(row.exposed) /
                                     static_cast<double>(row.observed)
                               : 0.0;
    t.rows.push_back(row);
  }
  // Persistence: exposed to any abuse in both periods, per rater set.
  for (RaterSet rs : all_rater_sets()) {
    const AbuseIndicator *early = nullptr, *late = nullptr;
    for (const auto& ind : indicators) {
      if (ind.raters != rs || ind.kind != AbuseKind::Any) continue;
      (ind.period == Period::Age0to10 ? early : late) = &ind;
    }
    if (!early || !late || early->values.size() != late->values.size()) continue;
    PersistenceRow p{rs, 0, 0, 0.0};
    for (std::size_t i = 0; i < early->values.size(); ++i) {
      double a = early->values[i], b = late->values[i];
      if (is_missing(a) || is_missing(b)) continue;
      ++p.observed;
      if (a == 1.0 && b == 1.0) ++p.both;
    }
    p.percent = p.observed ? 100.0 * static_cast<double>(p.both) /
                                 static_cast<double>(p.observed)
                           : 0.0;
    t.persistence.push_back(p);
  }
  return t;
}

namespace {

std::string percent_cell(double pct) { return format_fixed(pct, 1) + "%"; }

std::string pad(std::string s, std::size_t w) {
  if (s.size() < w) s.insert(0, w - s.size(), ' ');
  return s;
}

}  // namespace

std::string PrevalenceTable::to_text() const {
  std::vector<RaterSet> sets;
  for (RaterSet rs : all_rater_sets()) {
    bool used = std::any_of(rows.begin(), rows.end(), [&](const auto& r) { return r.raters == rs; });
    if (used) sets.push_back(rs);
  }
  if (sets.empty()) return {};
  const std::size_t label_w = 22, cell_w = 9;
  std::ostringstream os;
  os << std::string(label_w, ' ');
  for (std::size_t j = 0; j < sets.size(); ++j)
    os << pad(sets[j].label() + " (" + std::to_string(j + 1) + ")", cell_w + 2);
  os << "\n";
  const std::pair<AbuseKind, const char*> kinds[] = {{AbuseKind::Cruelty, "Child cruelty"},
                                                     {AbuseKind::SexAbuse, "Sex abuse"},
                                                     {AbuseKind::Any, "Any child abuse"}};
  for (Period p : {Period::Age0to10, Period::Age11to18}) {
    bool any_row = std::any_of(rows.begin(), rows.end(), [&](const auto& r) { return r.period == p; });
    if (!any_row) continue;
    os << "Age " << to_string(p) << "\n";
    for (const auto& [kind, label] : kinds) {
      bool present = std::any_of(rows.begin(), rows.end(),
                                 [&](const auto& r) { return r.period == p && r.kind == kind; });
      if (!present) continue;
      std::string l = label;
      os << l << std::string(label_w - l.size(), ' ');
      for (RaterSet rs : sets) {
        const auto* r = find(rs, p, kind);
        os << pad(r ? percent_cell(r->percent) : "", cell_w + 2);
      }
      os << "\n";
    }
  }
  if (!persistence.empty()) {
    std::string l = "Any abuse, both periods";
    os << l << std::string(label_w > l.size() ? label_w - l.size() : 1, ' ');
    for (RaterSet rs : sets) {
      auto it = std::find_if(persistence.begin(), persistence.end(),
                             [&](const auto& p) { return p.raters == rs; });
      os << pad(it != persistence.end() ? percent_cell(it->percent) : "", cell_w + 2);
    }
    os << "\n";
  }
  return os.str();
}

std::string PrevalenceTable::to_csv() const {
  std::string out = csv_line({"raters", "period", "kind", "observed", "exposed", "percent"});
  for (const auto& r : rows)
    out += csv_line({r.raters.label(), std::string(to_string(r.period)),
                     std::string(to_string(r.kind)), std::to_string(r.observed),
                     std::to_string(r.exposed), format_fixed(r.percent, 1)});
  for (const auto& p : persistence)
    out += csv_line({p.raters.label(), "both", "any", std::to_string(p.observed),
                     std::to_string(p.both), format_fixed(p.percent, 1)});
  return out;
}

}  // namespace mega
