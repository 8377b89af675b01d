#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace milsurv {

struct ReportCell {
  std::string dataset;
  std::vector<double> fold_values;
  bool failed = false;

  double mean() const;
  /// Population standard deviation over the fold values.
  double stddev() const;
};

struct ReportRow {
  std::string head;
  std::string extractors;
  std::vector<ReportCell> cells;  // one per dataset, in ReportTable::datasets order

  const ReportCell* cell(std::string_view dataset) const;
  /// Pools every fold value across datasets; failed if any cell failed.
  ReportCell average() const;
};

/// Concordance results laid out as rows (head, extractor set) by dataset
/// columns plus an average column.
struct ReportTable {
  std::vector<std::string> datasets;
  std::vector<ReportRow> rows;
  std::uint64_t seed = 0;
  std::string config_hash;

  ReportRow& row(const std::string& head, const std::string& extractors);
  void add_cell(const std::string& head, const std::string& extractors, ReportCell cell);
  /// Appends the other table's datasets and cells.
  void merge(const ReportTable& other);
};

enum class ReportFormat { csv, markdown };

ReportFormat parse_report_format(std::string_view name);

/// "0.607 ± 0.071" style, three decimals.
std::string format_mean_std(double mean, double stddev);

std::string render_markdown(const ReportTable& table);
/// Full-precision long format: one line per (row, dataset) with the fold values.
std::string render_csv(const ReportTable& table);
ReportTable parse_report_csv(std::string_view text);

void emit_report(const ReportTable& table, ReportFormat format, const std::filesystem::path& path);
ReportTable read_report_csv(const std::filesystem::path& path);

}  // namespace milsurv
