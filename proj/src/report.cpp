#include "regvit/report.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <memory>

#include "json.hpp"
#include "regvit/errors.hpp"

namespace regvit {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

CsvWriter::CsvWriter(std::vector<std::string> header) : width_(header.size()) { row(header); }

CsvWriter& CsvWriter::row(const std::vector<std::string>& fields) {
  if (fields.size() != width_) {
    throw DataError("csv row has " + std::to_string(fields.size()) + " fields, header has " + std::to_string(width_));
  }
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) text_ += ',';
    text_ += fields[i];
  }
  text_ += '\n';
  return *this;
}

void CsvWriter::save(const std::filesystem::path& path) const { write_text(path, text_); }

void write_text(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::string encode_pgm(const std::vector<unsigned char>& pixels, std::size_t width, std::size_t height) {
  if (pixels.size() != width * height) throw DimensionError("pgm pixel count does not match width x height");
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(pixels.begin(), pixels.end());
  return out;
}

namespace {

void write_pgm_with_sidecar(const Tensor& map, const std::filesystem::path& path, const PgmScaling& scaling,
                            const std::vector<unsigned char>& pixels) {
  write_text(path, encode_pgm(pixels, map.dim(1), map.dim(0)));
  nlohmann::ordered_json side;
  side["scaling"] = scaling.rule;
  side["min"] = scaling.min;
  side["max"] = scaling.max;
  side["width"] = map.dim(1);
  side["height"] = map.dim(0);
  auto json_path = path;
  json_path.replace_extension(".json");
  write_text(json_path, side.dump(2) + "\n");
}

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace

PgmScaling write_pgm_minmax(const Tensor& map, const std::filesystem::path& path) {
  if (map.rank() != 2) throw DimensionError("pgm maps must be rank 2, got " + shape_to_string(map.shape()));
  const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
  PgmScaling scaling{"round(255*(v-min)/(max-min))", *lo, *hi};
  std::vector<unsigned char> pixels(map.numel(), 0);
  if (scaling.max > scaling.min) {
    for (std::size_t i = 0; i < map.numel(); ++i) {
      pixels[i] = to_byte(255.0 * (map[i] - scaling.min) / (scaling.max - scaling.min));
    }
  }
  write_pgm_with_sidecar(map, path, scaling, pixels);
  return scaling;
}

PgmScaling write_pgm_max(const Tensor& map, const std::filesystem::path& path) {
  if (map.rank() != 2) throw DimensionError("pgm maps must be rank 2, got " + shape_to_string(map.shape()));
  const double hi = *std::max_element(map.data().begin(), map.data().end());
  PgmScaling scaling{"round(255*v/max)", 0.0, hi};
  std::vector<unsigned char> pixels(map.numel(), 0);
  if (hi > 0.0) {
    for (std::size_t i = 0; i < map.numel(); ++i) pixels[i] = to_byte(255.0 * map[i] / hi);
  }
  write_pgm_with_sidecar(map, path, scaling, pixels);
  return scaling;
}

std::string sha256_hex(std::string_view bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw IoError("sha256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 0xF];
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text(path)); }

std::string build_manifest(const std::filesystem::path& root) {
  std::vector<std::string> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    const std::string rel = std::filesystem::relative(entry.path(), root).generic_string();
    if (rel == kManifestName) continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  nlohmann::ordered_json manifest;
  manifest["files"] = nlohmann::ordered_json::array();
  for (const auto& rel : files) {
    const std::string bytes = read_text(root / rel);
    nlohmann::ordered_json item;
    item["path"] = rel;
    item["bytes"] = bytes.size();
    item["sha256"] = sha256_hex(bytes);
    manifest["files"].push_back(std::move(item));
  }
  return manifest.dump(2) + "\n";
}

void write_manifest(const std::filesystem::path& root) { write_text(root / kManifestName, build_manifest(root)); }

}  // namespace regvit
