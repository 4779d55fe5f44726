#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace latentq {

/// Raised for malformed or inconsistent input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FieldKind { Binary, Continuous };

std::string_view to_string(FieldKind kind);
FieldKind parse_field_kind(std::string_view text);

struct FieldSchema {
  std::string name;
  FieldKind kind = FieldKind::Binary;
  std::size_t column_index = 0;  ///< position among the data columns of the source CSV

  bool operator==(const FieldSchema&) const = default;
};

/// One observation. Present cells of a binary field hold exactly 0 or 1,
/// present cells of a continuous field hold a finite real.
class Cell {
 public:
  static Cell missing() { return Cell(); }
  static Cell binary(int value);
  static Cell real(double value);

  bool is_missing() const { return !present_; }
  double value() const { return value_; }

  bool operator==(const Cell&) const = default;

 private:
  Cell() = default;
  Cell(double value, bool present) : value_(value), present_(present) {}

  double value_ = 0.0;
  bool present_ = false;
};

/// Whether a record with every cell missing is accepted. Fitting rejects
/// such records; projection and imputation may accept them (their posterior
/// is the prior).
enum class EmptyRows { Reject, Allow };

/// Immutable n x (m+k) table of cells. Fields are stored binary-first, then
/// continuous, each group keeping its source column order; model rows follow
/// the same order.
class Dataset {
 public:
  /// Validates and reorders. `cells` is row-major in the order of `schema`.
  Dataset(std::vector<FieldSchema> schema, std::vector<std::string> record_ids, std::vector<Cell> cells,
          EmptyRows empty_rows = EmptyRows::Reject);

  std::size_t n_records() const { return record_ids_.size(); }
  std::size_t n_fields() const { return fields_.size(); }
  std::size_t n_binary() const { return n_binary_; }
  std::size_t n_continuous() const { return fields_.size() - n_binary_; }

  const std::vector<FieldSchema>& fields() const { return fields_; }
  const std::vector<std::string>& record_ids() const { return record_ids_; }
  std::vector<std::string> field_names() const;

  std::span<const Cell> row(std::size_t record) const {
    return {cells_.data() + record * fields_.size(), fields_.size()};
  }
  const Cell& at(std::size_t record, std::size_t field) const { return cells_[record * fields_.size() + field]; }
  const std::vector<Cell>& cells() const { return cells_; }

  /// New dataset holding the given records, in the given order.
  Dataset select_records(std::span<const std::size_t> records) const;

  /// New dataset with the same records and fields but different cells
  /// (row-major, current field order).
  Dataset with_cells(std::vector<Cell> cells) const;

  bool operator==(const Dataset&) const = default;

 private:
  std::vector<FieldSchema> fields_;
  std::vector<std::string> record_ids_;
  std::vector<Cell> cells_;
  std::size_t n_binary_ = 0;
  EmptyRows empty_rows_ = EmptyRows::Reject;
};

/// Reads a schema sidecar: one `name,kind` line per data column, kind in
/// {binary, continuous}. Blank lines and lines starting with '#' are skipped.
std::vector<FieldSchema> read_schema(const std::filesystem::path& path);

/// Loads a CSV whose first column is the record id and whose header names
/// the data columns. Missing cells are "" or "NA" (any case).
Dataset load_csv(const std::filesystem::path& csv_path, const std::filesystem::path& schema_path,
                 EmptyRows empty_rows = EmptyRows::Reject);

/// Writes the dataset in source column order, missing cells as "NA".
void write_csv(const Dataset& data, const std::filesystem::path& path);
void write_schema(const Dataset& data, const std::filesystem::path& path);

struct MissingnessSummary {
  std::vector<std::string> field_names;
  std::vector<double> field_fraction;
  double overall = 0.0;
};

MissingnessSummary missingness_summary(const Dataset& data);

}  // namespace latentq
