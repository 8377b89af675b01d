#include "milsurv/features.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "milsurv/csv.hpp"
#include "milsurv/error.hpp"

namespace milsurv {
namespace fs = std::filesystem;

namespace {

constexpr std::uint16_t kMilfVersion = 1;
constexpr char kMagic[4] = {'M', 'I', 'L', 'F'};

class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}
  void need(std::size_t n) const {
    require(pos_ + n <= in_.size(), ErrorKind::corrupt_file, "MILF: truncated file");
  }
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(in_[pos_] | (in_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) fail(ErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_atomically(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out.good()) fail(ErrorKind::io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out.good()) fail(ErrorKind::io, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

void FeatureMatrix::validate() const {
  if (!(patches >= 1)) fail(ErrorKind::dimension, "feature matrix for '" + extractor_id + "' has no patches");
  if (!(dim >= 1)) fail(ErrorKind::dimension, "feature matrix for '" + extractor_id + "' has zero dimension");
  if (!(values.size() == patches * dim)) fail(ErrorKind::dimension, "feature matrix for '" + extractor_id + "': " + std::to_string(values.size()) + " values for " +
              std::to_string(patches) + "x" + std::to_string(dim));
  if (!(coords.empty() || coords.size() == patches)) fail(ErrorKind::dimension, "feature matrix for '" + extractor_id + "': " + std::to_string(coords.size()) + " coordinates for " +
              std::to_string(patches) + " patches");
  require(!extractor_id.empty() && extractor_id.size() <= 255, ErrorKind::dimension,
          "extractor id must be 1..255 bytes");
}

ExtractorRegistry ExtractorRegistry::defaults() {
  ExtractorRegistry registry;
  registry.add("resnet50", 1024);
  registry.add("uni", 1024);
  registry.add("hibou-base", 768);
  return registry;
}

void ExtractorRegistry::add(const std::string& id, std::size_t dim) {
  if (!(!id.empty() && id.find('+') == std::string::npos)) fail(ErrorKind::configuration, "invalid extractor id '" + id + "'");
  if (!(dim >= 1)) fail(ErrorKind::configuration, "extractor '" + id + "' needs a positive dimension");
  dims_[id] = dim;
}

std::optional<std::size_t> ExtractorRegistry::dim(const std::string& id) const {
  if (id.find('+') != std::string::npos) {
    std::size_t total = 0;
    for (const auto& part : split_extractors(id)) {
      auto d = dim(part);
      if (!d) return std::nullopt;
      total += *d;
    }
    return total;
  }
  auto found = dims_.find(id);
  if (found == dims_.end()) return std::nullopt;
  return found->second;
}

void ExtractorRegistry::check(const std::string& id, std::size_t d) const {
  if (auto expected = dim(id); expected && *expected != d) {
    fail(ErrorKind::registry, "extractor '" + id + "' has d=" + std::to_string(d) + ", expected " +
                                  std::to_string(*expected));
  }
}

void ExtractorRegistry::load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in.good()) fail(ErrorKind::io, "cannot open " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::configuration, "registry " + path.string() + ": " + e.what());
  }
  if (!doc.is_object()) fail(ErrorKind::configuration, "registry " + path.string() + " must be a JSON object");
  for (const auto& [id, value] : doc.items()) {
    if (!value.is_number_unsigned()) fail(ErrorKind::configuration, "registry entry '" + id + "' must be a count");
    add(id, value.get<std::size_t>());
  }
}

const ExtractorRegistry& default_registry() {
  static const ExtractorRegistry registry = ExtractorRegistry::defaults();
  return registry;
}

std::vector<std::uint8_t> encode_features(const FeatureMatrix& features) {
  features.validate();
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u16(kMilfVersion);
  w.u8(static_cast<std::uint8_t>(features.extractor_id.size()));
  w.bytes(features.extractor_id.data(), features.extractor_id.size());
  w.u32(static_cast<std::uint32_t>(features.patches));
  w.u32(static_cast<std::uint32_t>(features.dim));
  w.u8(features.has_coords() ? 1 : 0);
  for (const auto& c : features.coords) {
    w.i32(c.x);
    w.i32(c.y);
  }
  for (float v : features.values) w.f32(v);
  w.u32(crc32_of(w.buffer()));
  return std::move(w.buffer());
}

FeatureMatrix decode_features(std::span<const std::uint8_t> bytes, const ExtractorRegistry& registry) {
  require(bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorKind::corrupt_file,
          "MILF: bad magic");
  require(bytes.size() >= 8, ErrorKind::corrupt_file, "MILF: truncated file");
  const auto body = bytes.first(bytes.size() - 4);
  ByteReader tail(bytes.subspan(bytes.size() - 4));
  const std::uint32_t stored = tail.u32();
  require(stored == crc32_of(body), ErrorKind::corrupt_file, "MILF: checksum mismatch");

  ByteReader r(body);
  r.str(4);
  const std::uint16_t version = r.u16();
  if (!(version == kMilfVersion)) fail(ErrorKind::corrupt_file, "MILF: unsupported version " + std::to_string(version));
  FeatureMatrix fm;
  fm.extractor_id = r.str(r.u8());
  fm.patches = r.u32();
  fm.dim = r.u32();
  const std::uint8_t has_coords = r.u8();
  require(has_coords <= 1, ErrorKind::corrupt_file, "MILF: invalid coords flag");
  require(fm.patches >= 1 && fm.dim >= 1, ErrorKind::corrupt_file, "MILF: empty matrix");
  const std::size_t expected = r.position() + (has_coords ? fm.patches * 8 : 0) + fm.patches * fm.dim * 4;
  require(expected == body.size(), ErrorKind::corrupt_file, "MILF: payload size does not match header");
  if (has_coords) {
    fm.coords.resize(fm.patches);
    for (auto& c : fm.coords) {
      c.x = r.i32();
      c.y = r.i32();
    }
  }
  fm.values.resize(fm.patches * fm.dim);
  for (auto& v : fm.values) v = r.f32();
  registry.check(fm.extractor_id, fm.dim);
  return fm;
}

void write_features(const FeatureMatrix& features, const fs::path& path, const ExtractorRegistry& registry) {
  registry.check(features.extractor_id, features.dim);
  const auto bytes = encode_features(features);
  write_atomically(path, bytes);
}

FeatureMatrix read_features(const fs::path& path, const ExtractorRegistry& registry) {
  const auto bytes = read_all(path);
  try {
    return decode_features(bytes, registry);
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

std::size_t EnsembleFeature::offset(std::size_t part) const {
  require(part < part_dims.size(), ErrorKind::contract, "ensemble part index out of range");
  std::size_t off = 0;
  for (std::size_t i = 0; i < part; ++i) off += part_dims[i];
  return off;
}

FeatureMatrix EnsembleFeature::to_matrix() const {
  FeatureMatrix fm;
  fm.extractor_id = join_extractors(parts);
  fm.patches = patches;
  fm.dim = dim;
  fm.coords = coords;
  fm.values = values;
  return fm;
}

EnsembleFeature concat_ensemble(std::span<const FeatureMatrix> parts) {
  require(!parts.empty(), ErrorKind::configuration, "ensemble needs at least one part");
  std::set<std::string> seen;
  for (const auto& part : parts) {
    part.validate();
    for (const auto& id : split_extractors(part.extractor_id)) {
      if (!(seen.insert(id).second)) fail(ErrorKind::configuration, "duplicate extractor '" + id + "' in ensemble");
    }
  }
  const FeatureMatrix& first = parts.front();
  for (const auto& part : parts.subspan(1)) {
    if (!(part.patches == first.patches)) fail(ErrorKind::alignment, "'" + first.extractor_id + "' has " + std::to_string(first.patches) + " patches but '" +
                part.extractor_id + "' has " + std::to_string(part.patches));
    if (!(first.has_coords() && part.has_coords())) fail(ErrorKind::alignment, "'" + first.extractor_id + "' and '" + part.extractor_id + "' cannot be aligned without coordinates");
    if (!(part.coords == first.coords)) fail(ErrorKind::alignment, "'" + first.extractor_id + "' and '" + part.extractor_id + "' have different patch coordinates");
  }

  EnsembleFeature ens;
  ens.patches = first.patches;
  ens.coords = first.coords;
  for (const auto& part : parts) {
    ens.parts.push_back(part.extractor_id);
    ens.part_dims.push_back(part.dim);
    ens.dim += part.dim;
  }
  ens.values.resize(ens.patches * ens.dim);
  for (std::size_t i = 0; i < ens.patches; ++i) {
    float* out = ens.values.data() + i * ens.dim;
    for (const auto& part : parts) {
      const auto row = part.row(i);
      std::copy(row.begin(), row.end(), out);
      out += part.dim;
    }
  }
  return ens;
}

std::string join_extractors(std::span<const std::string> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back('+');
    out += ids[i];
  }
  return out;
}

std::vector<std::string> split_extractors(const std::string& joined, char separator) {
  std::vector<std::string> out;
  std::string current;
  for (char ch : joined) {
    if (ch == separator) {
      if (!current.empty()) out.push_back(current);
      current.clear();
    } else if (ch != ' ') {
      current.push_back(ch);
    }
  }
  if (!current.empty()) out.push_back(current);
  return out;
}

fs::path Manifest::feature_path(const ManifestRow& row, const std::string& extractor) const {
  auto found = row.feature_paths.find(extractor);
  if (!(found != row.feature_paths.end())) fail(ErrorKind::ingestion, "case '" + row.case_id + "' has no '" + extractor + "' features");
  fs::path p(found->second);
  return p.is_absolute() ? p : feature_root / p;
}

ManifestLoad load_manifest(const fs::path& csv_path, const fs::path& feature_root,
                           std::vector<std::string> extractors, const ExtractorRegistry& registry) {
  const auto rows = csv::read_file(csv_path);
  if (!(!rows.empty())) fail(ErrorKind::ingestion, csv_path.string() + ": empty manifest");
  const auto& header = rows.front();
  const std::vector<std::string> fixed{"case_id", "slide_id", "survival_months", "censored"};
  if (!(header.size() >= fixed.size() && std::equal(fixed.begin(), fixed.end(), header.begin()))) fail(ErrorKind::ingestion, csv_path.string() + ": header must start with case_id,slide_id,survival_months,censored");

  ManifestLoad result;
  result.manifest.feature_root = feature_root;
  result.manifest.extractors.assign(header.begin() + 4, header.end());
  if (extractors.empty()) extractors = result.manifest.extractors;
  for (const auto& e : extractors) {
    if (!(std::find(header.begin() + 4, header.end(), e) != header.end())) fail(ErrorKind::ingestion, csv_path.string() + ": no column for extractor '" + e + "'");
  }

  std::set<std::string> seen;
  for (std::size_t line = 1; line < rows.size(); ++line) {
    const auto& fields = rows[line];
    const std::string where = csv_path.string() + " line " + std::to_string(line + 1);
    if (!(fields.size() == header.size())) fail(ErrorKind::ingestion, where + ": expected " + std::to_string(header.size()) + " fields, got " + std::to_string(fields.size()));
    ManifestRow row;
    row.case_id = fields[0];
    row.slide_id = fields[1];
    if (!(!row.case_id.empty())) fail(ErrorKind::ingestion, where + ": empty case_id");
    if (!(seen.insert(row.case_id).second)) fail(ErrorKind::ingestion, where + ": duplicate case_id '" + row.case_id + "'");
    try {
      std::size_t used = 0;
      row.survival_months = std::stod(fields[2], &used);
      if (!(used == fields[2].size())) fail(ErrorKind::ingestion, where + ": bad survival_months");
    } catch (const std::logic_error&) {
      fail(ErrorKind::ingestion, where + ": bad survival_months '" + fields[2] + "'");
    }
    if (!(std::isfinite(row.survival_months) && row.survival_months >= 0.0)) fail(ErrorKind::ingestion, where + ": survival_months must be nonnegative, got " + fields[2]);
    if (!(fields[3] == "0" || fields[3] == "1")) fail(ErrorKind::ingestion, where + ": censored must be 0 or 1, got '" + fields[3] + "'");
    row.censored = fields[3] == "1";
    for (std::size_t c = 4; c < header.size(); ++c) {
      if (!fields[c].empty()) row.feature_paths[header[c]] = fields[c];
    }

    std::string problem;
    for (const auto& e : extractors) {
      auto found = row.feature_paths.find(e);
      if (found == row.feature_paths.end()) {
        problem = "no '" + e + "' feature path";
        break;
      }
      const fs::path path = result.manifest.feature_path(row, e);
      if (!fs::exists(path)) {
        problem = "missing file " + path.string();
        break;
      }
      try {
        (void)read_features(path, registry);
      } catch (const Error& err) {
        problem = err.what();
        break;
      }
    }
    if (!problem.empty()) {
      result.rejected.push_back({line + 1, row.case_id, problem});
      continue;
    }
    result.manifest.rows.push_back(std::move(row));
  }
  return result;
}

void write_manifest(const Manifest& manifest, const fs::path& csv_path) {
  if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
  std::ofstream out(csv_path, std::ios::trunc);
  if (!out.good()) fail(ErrorKind::io, "cannot write " + csv_path.string());
  csv::Row header{"case_id", "slide_id", "survival_months", "censored"};
  header.insert(header.end(), manifest.extractors.begin(), manifest.extractors.end());
  out << csv::join(header) << '\n';
  for (const auto& row : manifest.rows) {
    std::ostringstream months;
    months.precision(17);
    months << row.survival_months;
    csv::Row fields{row.case_id, row.slide_id, months.str(), row.censored ? "1" : "0"};
    for (const auto& e : manifest.extractors) {
      auto found = row.feature_paths.find(e);
      fields.push_back(found == row.feature_paths.end() ? "" : found->second);
    }
    out << csv::join(fields) << '\n';
  }
}

FeatureMatrix load_case_features(const Manifest& manifest, const ManifestRow& row,
                                 std::span<const std::string> extractors, const ExtractorRegistry& registry) {
  require(!extractors.empty(), ErrorKind::configuration, "empty extractor set");
  std::vector<FeatureMatrix> parts;
  parts.reserve(extractors.size());
  for (const auto& e : extractors) parts.push_back(read_features(manifest.feature_path(row, e), registry));
  if (parts.size() == 1) return std::move(parts.front());
  return concat_ensemble(parts).to_matrix();
}

}  // namespace milsurv
