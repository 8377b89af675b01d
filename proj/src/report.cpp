#include "milsurv/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "milsurv/csv.hpp"
#include "milsurv/error.hpp"

namespace milsurv {
namespace {

std::string full_precision(double v) {
  char buffer[40];
  std::snprintf(buffer, sizeof(buffer), "%.17g", v);
  return buffer;
}

double parse_double(const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (!(used == text.size())) fail(ErrorKind::ingestion, "report: bad number '" + text + "'");
    return v;
  } catch (const std::logic_error&) {
    fail(ErrorKind::ingestion, "report: bad number '" + text + "'");
  }
}

}  // namespace

double ReportCell::mean() const {
  if (fold_values.empty()) return std::nan("");
  double total = 0.0;
  for (double v : fold_values) total += v;
  return total / static_cast<double>(fold_values.size());
}

double ReportCell::stddev() const {
  if (fold_values.empty()) return std::nan("");
  const double mu = mean();
  double acc = 0.0;
  for (double v : fold_values) acc += (v - mu) * (v - mu);
  return std::sqrt(acc / static_cast<double>(fold_values.size()));
}

const ReportCell* ReportRow::cell(std::string_view dataset) const {
  for (const auto& c : cells) {
    if (c.dataset == dataset) return &c;
  }
  return nullptr;
}

ReportCell ReportRow::average() const {
  ReportCell pooled;
  pooled.dataset = "average";
  for (const auto& c : cells) {
    pooled.failed = pooled.failed || c.failed;
    pooled.fold_values.insert(pooled.fold_values.end(), c.fold_values.begin(), c.fold_values.end());
  }
  return pooled;
}

ReportRow& ReportTable::row(const std::string& head, const std::string& extractors) {
  for (auto& r : rows) {
    if (r.head == head && r.extractors == extractors) return r;
  }
  rows.push_back({head, extractors, {}});
  return rows.back();
}

void ReportTable::add_cell(const std::string& head, const std::string& extractors, ReportCell cell) {
  if (std::find(datasets.begin(), datasets.end(), cell.dataset) == datasets.end()) datasets.push_back(cell.dataset);
  auto& r = row(head, extractors);
  for (auto& existing : r.cells) {
    if (existing.dataset == cell.dataset) {
      existing = std::move(cell);
      return;
    }
  }
  r.cells.push_back(std::move(cell));
}

void ReportTable::merge(const ReportTable& other) {
  for (const auto& r : other.rows) {
    for (const auto& c : r.cells) add_cell(r.head, r.extractors, c);
  }
}

ReportFormat parse_report_format(std::string_view name) {
  if (name == "csv") return ReportFormat::csv;
  if (name == "markdown" || name == "md") return ReportFormat::markdown;
  fail(ErrorKind::configuration, "unknown report format '" + std::string(name) + "' (expected csv|markdown)");
}

std::string format_mean_std(double mean, double stddev) {
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), "%.3f ± %.3f", mean, stddev);
  return buffer;
}

std::string render_markdown(const ReportTable& table) {
  std::ostringstream out;
  out << "Concordance index, mean ± std over folds (population std). seed=" << table.seed
      << " config=" << table.config_hash << "\n\n";
  out << "| Extractors | Head |";
  for (const auto& d : table.datasets) out << ' ' << d << " |";
  out << " Average |\n|---|---|";
  for (std::size_t i = 0; i < table.datasets.size(); ++i) out << "---|";
  out << "---|\n";

  bool any_failed = false;
  auto render = [&](const ReportCell* c) {
    if (c == nullptr || c->failed || c->fold_values.empty()) {
      any_failed = any_failed || (c != nullptr && c->failed);
      return std::string("—");
    }
    return format_mean_std(c->mean(), c->stddev());
  };
  for (const auto& r : table.rows) {
    out << "| " << r.extractors << " | " << r.head << " |";
    for (const auto& d : table.datasets) out << ' ' << render(r.cell(d)) << " |";
    const auto avg = r.average();
    out << ' ' << render(&avg) << " |\n";
  }
  if (any_failed) out << "\n— : at least one fold of this cell failed; see the fold logs.\n";
  return out.str();
}

std::string render_csv(const ReportTable& table) {
  std::ostringstream out;
  out << "# seed=" << table.seed << " config_hash=" << table.config_hash << "\n";
  out << "head,extractors,dataset,failed,folds,mean,std,values\n";
  for (const auto& r : table.rows) {
    for (const auto& c : r.cells) {
      std::string values;
      for (std::size_t i = 0; i < c.fold_values.size(); ++i) {
        if (i) values += ';';
        values += full_precision(c.fold_values[i]);
      }
      out << csv::join({r.head, r.extractors, c.dataset, c.failed ? "1" : "0", std::to_string(c.fold_values.size()),
                        full_precision(c.mean()), full_precision(c.stddev()), values})
          << '\n';
    }
  }
  return out.str();
}

ReportTable parse_report_csv(std::string_view text) {
  ReportTable table;
  std::istringstream in{std::string(text)};
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '#') {
      std::istringstream meta(line.substr(1));
      std::string token;
      while (meta >> token) {
        if (token.rfind("seed=", 0) == 0) table.seed = std::stoull(token.substr(5));
        if (token.rfind("config_hash=", 0) == 0) table.config_hash = token.substr(12);
      }
      continue;
    }
    const auto fields = csv::split_line(line);
    if (!header_seen) {
      require(fields.size() == 8 && fields[0] == "head", ErrorKind::ingestion, "report: unexpected header");
      header_seen = true;
      continue;
    }
    if (!(fields.size() == 8)) fail(ErrorKind::ingestion, "report: malformed line '" + line + "'");
    ReportCell cell;
    cell.dataset = fields[2];
    cell.failed = fields[3] == "1";
    for (const auto& v : csv::split_line([&] {
           std::string s = fields[7];
           std::replace(s.begin(), s.end(), ';', ',');
           return s;
         }())) {
      if (!v.empty()) cell.fold_values.push_back(parse_double(v));
    }
    if (!(cell.fold_values.size() == std::stoul(fields[4]))) fail(ErrorKind::ingestion, "report: fold count does not match values for " + fields[0] + "/" + fields[1]);
    table.add_cell(fields[0], fields[1], std::move(cell));
  }
  return table;
}

void emit_report(const ReportTable& table, ReportFormat format, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out.good()) fail(ErrorKind::io, "cannot write " + path.string());
  out << (format == ReportFormat::csv ? render_csv(table) : render_markdown(table));
}

ReportTable read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) fail(ErrorKind::io, "cannot open " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_report_csv(text.str());
}

}  // namespace milsurv
