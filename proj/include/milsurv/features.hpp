#pragma once

// Slide feature interchange: MILF files, the extractor dimension registry,
// ensemble construction by per-patch concatenation, and the cohort manifest.
//
// MILF layout (little-endian):
//   "MILF" | u16 version = 1 | u8 id length | id bytes (UTF-8) | u32 m | u32 d |
//   u8 coords flag | [m × (i32 x, i32 y)] | m·d float32 row-major |
//   u32 CRC-32 of every preceding byte

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace milsurv {

struct PatchCoord {
  std::int32_t x = 0;
  std::int32_t y = 0;
  friend bool operator==(const PatchCoord&, const PatchCoord&) = default;
};

/// One slide's patch embeddings from a single extractor.
struct FeatureMatrix {
  std::string extractor_id;
  std::size_t patches = 0;  // m
  std::size_t dim = 0;      // d
  std::vector<PatchCoord> coords;  // empty when the file carries no coordinates
  std::vector<float> values;       // patches × dim, row-major

  bool has_coords() const { return !coords.empty(); }
  std::span<const float> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
  /// Structural checks (sizes, non-empty); throws dimension errors.
  void validate() const;
};

/// Known embedding widths by extractor id. Ids joined with '+' resolve to the
/// sum of their parts when every part is known.
class ExtractorRegistry {
 public:
  /// resnet50 → 1024, uni → 1024, hibou-base → 768.
  static ExtractorRegistry defaults();

  void add(const std::string& id, std::size_t dim);
  std::optional<std::size_t> dim(const std::string& id) const;
  /// Throws a registry error when `id` is known with a different width.
  void check(const std::string& id, std::size_t dim) const;
  /// Merges entries from a JSON object {"id": dim, ...}.
  void load_json(const std::filesystem::path& path);

 private:
  std::map<std::string, std::size_t> dims_;
};

const ExtractorRegistry& default_registry();

void write_features(const FeatureMatrix& features, const std::filesystem::path& path,
                    const ExtractorRegistry& registry = default_registry());
FeatureMatrix read_features(const std::filesystem::path& path,
                            const ExtractorRegistry& registry = default_registry());

std::vector<std::uint8_t> encode_features(const FeatureMatrix& features);
FeatureMatrix decode_features(std::span<const std::uint8_t> bytes,
                              const ExtractorRegistry& registry = default_registry());

/// Per-patch concatenation of several extractors' features for one slide.
struct EnsembleFeature {
  std::vector<std::string> parts;
  std::vector<std::size_t> part_dims;
  std::size_t patches = 0;
  std::size_t dim = 0;  // Σ part_dims
  std::vector<PatchCoord> coords;
  std::vector<float> values;

  /// Column offset of part i.
  std::size_t offset(std::size_t part) const;
  /// Ensemble as a plain FeatureMatrix with extractor id "a+b+...".
  FeatureMatrix to_matrix() const;
};

/// Concatenates along the feature axis in the given part order. Parts must
/// share the patch count and (for two or more parts) identical coordinate
/// lists; extractor ids must be distinct.
EnsembleFeature concat_ensemble(std::span<const FeatureMatrix> parts);

std::string join_extractors(std::span<const std::string> ids);
std::vector<std::string> split_extractors(const std::string& joined, char separator = '+');

struct ManifestRow {
  std::string case_id;
  std::string slide_id;
  double survival_months = 0.0;
  bool censored = false;
  std::map<std::string, std::string> feature_paths;  // extractor id → path relative to the feature root
};

struct Manifest {
  std::filesystem::path feature_root;
  std::vector<std::string> extractors;  // column order
  std::vector<ManifestRow> rows;

  std::filesystem::path feature_path(const ManifestRow& row, const std::string& extractor) const;
};

struct RowRejection {
  std::size_t line = 0;
  std::string case_id;
  std::string reason;
};

struct ManifestLoad {
  Manifest manifest;
  std::vector<RowRejection> rejected;
};

/// Parses and validates a manifest CSV. Duplicate case ids or negative
/// survival abort with an ingestion error; rows whose feature files for
/// `extractors` (all extractor columns when empty) are missing or unreadable
/// are dropped and reported.
ManifestLoad load_manifest(const std::filesystem::path& csv_path, const std::filesystem::path& feature_root,
                           std::vector<std::string> extractors = {},
                           const ExtractorRegistry& registry = default_registry());

void write_manifest(const Manifest& manifest, const std::filesystem::path& csv_path);

/// Loads one case's features for an extractor set, concatenating when the set
/// has more than one member.
FeatureMatrix load_case_features(const Manifest& manifest, const ManifestRow& row,
                                 std::span<const std::string> extractors,
                                 const ExtractorRegistry& registry = default_registry());

}  // namespace milsurv
