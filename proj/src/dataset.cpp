#include "latentq/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "latentq/csv.hpp"

namespace latentq {

std::string_view to_string(FieldKind kind) { return kind == FieldKind::Binary ? "binary" : "continuous"; }

FieldKind parse_field_kind(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "binary") return FieldKind::Binary;
  if (lower == "continuous") return FieldKind::Continuous;
  throw DataError("unknown field kind '" + std::string(text) + "' (expected binary or continuous)");
}

Cell Cell::binary(int value) {
  if (value != 0 && value != 1) throw DataError("binary value must be 0 or 1, got " + std::to_string(value));
  return Cell(static_cast<double>(value), true);
}

Cell Cell::real(double value) {
  if (!std::isfinite(value)) throw DataError("continuous value must be finite");
  return Cell(value, true);
}

Dataset::Dataset(std::vector<FieldSchema> schema, std::vector<std::string> record_ids, std::vector<Cell> cells,
                 EmptyRows empty_rows)
    : empty_rows_(empty_rows) {
  const std::size_t p = schema.size();
  const std::size_t n = record_ids.size();
  if (p == 0) throw DataError("dataset needs at least one field");
  if (n == 0) throw DataError("dataset needs at least one record");
  if (cells.size() != n * p) throw DataError("cell count does not match records x fields");

  std::unordered_set<std::string> names;
  for (const auto& f : schema) {
    if (f.name.empty()) throw DataError("field names must be nonempty");
    if (!names.insert(f.name).second) throw DataError("duplicate field name '" + f.name + "'");
  }
  std::unordered_set<std::string> ids;
  for (const auto& id : record_ids) {
    if (!ids.insert(id).second) throw DataError("duplicate record id '" + id + "'");
  }

  std::vector<std::size_t> order(p);
  std::iota(order.begin(), order.end(), 0);
  std::stable_partition(order.begin(), order.end(),
                        [&](std::size_t j) { return schema[j].kind == FieldKind::Binary; });

  fields_.reserve(p);
  for (std::size_t j : order) fields_.push_back(schema[j]);
  n_binary_ = static_cast<std::size_t>(
      std::count_if(fields_.begin(), fields_.end(), [](const FieldSchema& f) { return f.kind == FieldKind::Binary; }));

  cells_.resize(n * p, Cell::missing());
  for (std::size_t i = 0; i < n; ++i) {
    bool any_present = false;
    for (std::size_t jj = 0; jj < p; ++jj) {
      const Cell& c = cells[i * p + order[jj]];
      if (!c.is_missing()) {
        any_present = true;
        if (fields_[jj].kind == FieldKind::Binary && c.value() != 0.0 && c.value() != 1.0) {
          throw DataError("record '" + record_ids[i] + "', field '" + fields_[jj].name + "': binary value must be 0 or 1");
        }
        if (!std::isfinite(c.value())) {
          throw DataError("record '" + record_ids[i] + "', field '" + fields_[jj].name + "': value is not finite");
        }
      }
      cells_[i * p + jj] = c;
    }
    if (!any_present && empty_rows == EmptyRows::Reject) throw DataError("record '" + record_ids[i] + "' has every field missing");
  }
  record_ids_ = std::move(record_ids);
}

std::vector<std::string> Dataset::field_names() const {
  std::vector<std::string> names;
  names.reserve(fields_.size());
  for (const auto& f : fields_) names.push_back(f.name);
  return names;
}

Dataset Dataset::select_records(std::span<const std::size_t> records) const {
  const std::size_t p = fields_.size();
  std::vector<std::string> ids;
  std::vector<Cell> cells;
  ids.reserve(records.size());
  cells.reserve(records.size() * p);
  for (std::size_t r : records) {
    if (r >= n_records()) throw DataError("record index out of range");
    ids.push_back(record_ids_[r]);
    auto src = row(r);
    cells.insert(cells.end(), src.begin(), src.end());
  }
  return Dataset(fields_, std::move(ids), std::move(cells), empty_rows_);
}

Dataset Dataset::with_cells(std::vector<Cell> cells) const { return Dataset(fields_, record_ids_, std::move(cells), empty_rows_); }

std::vector<FieldSchema> read_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open schema " + path.string());
  std::vector<FieldSchema> schema;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string t = csv::trim(line);
    if (t.empty() || t.front() == '#') continue;
    auto parts = csv::split_line(t);
    if (parts.size() != 2) {
      throw DataError("schema line " + std::to_string(line_no) + ": expected 'name,kind'");
    }
    try {
      schema.push_back({parts[0], parse_field_kind(parts[1]), schema.size()});
    } catch (const DataError& e) {
      throw DataError("schema line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (schema.empty()) throw DataError("schema " + path.string() + " declares no fields");
  return schema;
}

Dataset load_csv(const std::filesystem::path& csv_path, const std::filesystem::path& schema_path, EmptyRows empty_rows) {
  const std::vector<FieldSchema> declared = read_schema(schema_path);
  std::vector<std::vector<std::string>> rows;
  try {
    rows = csv::read_file(csv_path);
  } catch (const std::runtime_error& e) {
    throw DataError(e.what());
  }
  if (rows.empty()) throw DataError(csv_path.string() + " is empty");

  const auto& header = rows.front();
  if (header.size() < 2) throw DataError("header must hold a record id column and at least one data column");
  const std::size_t p = header.size() - 1;

  std::unordered_map<std::string, std::size_t> by_name;
  for (std::size_t j = 0; j < declared.size(); ++j) by_name.emplace(declared[j].name, j);

  std::vector<FieldSchema> schema;
  schema.reserve(p);
  std::unordered_set<std::string> seen;
  for (std::size_t col = 0; col < p; ++col) {
    const std::string& name = header[col + 1];
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("column '" + name + "' is not declared in the schema");
    if (!seen.insert(name).second) throw DataError("column '" + name + "' appears twice in the header");
    schema.push_back({name, declared[it->second].kind, col});
  }
  if (schema.size() != declared.size()) {
    for (const auto& f : declared) {
      if (!seen.count(f.name)) throw DataError("schema field '" + f.name + "' has no column in the CSV");
    }
  }

  std::vector<std::string> ids;
  std::vector<Cell> cells;
  ids.reserve(rows.size() - 1);
  cells.reserve((rows.size() - 1) * p);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& fields = rows[r];
    const std::string where = "row " + std::to_string(r);
    if (fields.size() != p + 1) {
      throw DataError(where + ": expected " + std::to_string(p + 1) + " columns, found " + std::to_string(fields.size()));
    }
    if (fields[0].empty()) throw DataError(where + ": empty record id");
    ids.push_back(fields[0]);
    for (std::size_t col = 0; col < p; ++col) {
      const std::string& text = fields[col + 1];
      const std::string at = where + ", column '" + schema[col].name + "'";
      if (csv::is_missing_token(text)) {
        cells.push_back(Cell::missing());
      } else if (schema[col].kind == FieldKind::Binary) {
        if (text == "0") {
          cells.push_back(Cell::binary(0));
        } else if (text == "1") {
          cells.push_back(Cell::binary(1));
        } else {
          throw DataError(at + ": binary value must be 0 or 1, got '" + text + "'");
        }
      } else {
        double v = 0.0;
        if (!csv::parse_double(text, v) || !std::isfinite(v)) {
          throw DataError(at + ": cannot parse '" + text + "' as a finite number");
        }
        cells.push_back(Cell::real(v));
      }
    }
  }
  if (ids.empty()) throw DataError(csv_path.string() + " has a header but no records");

  try {
    return Dataset(std::move(schema), std::move(ids), std::move(cells), empty_rows);
  } catch (const DataError& e) {
    throw DataError(csv_path.string() + ": " + e.what());
  }
}

namespace {

std::vector<std::size_t> source_order(const Dataset& data) {
  std::vector<std::size_t> order(data.n_fields());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return data.fields()[a].column_index < data.fields()[b].column_index;
  });
  return order;
}

}  // namespace

void write_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const auto order = source_order(data);
  out << "record_id";
  for (std::size_t j : order) out << ',' << csv::escape(data.fields()[j].name);
  out << '\n';
  for (std::size_t i = 0; i < data.n_records(); ++i) {
    out << csv::escape(data.record_ids()[i]);
    for (std::size_t j : order) {
      const Cell& c = data.at(i, j);
      out << ',';
      if (c.is_missing()) {
        out << "NA";
      } else if (data.fields()[j].kind == FieldKind::Binary) {
        out << (c.value() != 0.0 ? '1' : '0');
      } else {
        out << csv::format_double(c.value());
      }
    }
    out << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

void write_schema(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t j : source_order(data)) {
    out << csv::escape(data.fields()[j].name) << ',' << to_string(data.fields()[j].kind) << '\n';
  }
}

MissingnessSummary missingness_summary(const Dataset& data) {
  MissingnessSummary s;
  s.field_names = data.field_names();
  s.field_fraction.assign(data.n_fields(), 0.0);
  std::size_t total = 0;
  for (std::size_t i = 0; i < data.n_records(); ++i) {
    for (std::size_t j = 0; j < data.n_fields(); ++j) {
      if (data.at(i, j).is_missing()) {
        s.field_fraction[j] += 1.0;
        ++total;
      }
    }
  }
  const double n = static_cast<double>(data.n_records());
  for (double& f : s.field_fraction) f /= n;
  s.overall = static_cast<double>(total) / (n * static_cast<double>(data.n_fields()));
  return s;
}

}  // namespace latentq
