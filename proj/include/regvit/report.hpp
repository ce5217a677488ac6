#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "regvit/tensor.hpp"

// File emitters shared by the CLI and library: CSV, 8-bit PGM with a JSON
// sidecar, SHA-256 file hashes and run manifests.
namespace regvit {

// Shortest decimal that round-trips, '.' separator.
std::string format_double(double v);

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);
  CsvWriter& row(const std::vector<std::string>& fields);
  const std::string& str() const { return text_; }
  void save(const std::filesystem::path& path) const;

 private:
  std::size_t width_;
  std::string text_;
};

void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

// How a map was scaled to 8 bits; written as the PGM sidecar JSON.
struct PgmScaling {
  std::string rule;
  double min = 0.0;
  double max = 0.0;
};

// Binary P5, maxval 255. Rows of the rank-2 map become image rows.
std::string encode_pgm(const std::vector<unsigned char>& pixels, std::size_t width, std::size_t height);
// round(255·(v−min)/(max−min)); all zeros when max == min.
PgmScaling write_pgm_minmax(const Tensor& map, const std::filesystem::path& path);
// round(255·v/max) for nonnegative maps such as attention weights.
PgmScaling write_pgm_max(const Tensor& map, const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

// Lists every regular file under root (except the manifest itself) with its
// size and SHA-256, sorted by relative path.
std::string build_manifest(const std::filesystem::path& root);
void write_manifest(const std::filesystem::path& root);
inline constexpr const char* kManifestName = "manifest.json";

}  // namespace regvit
