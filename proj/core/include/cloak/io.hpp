#pragma once

// File formats: 16-bit PNG images, the named-array archive with its JSON
// manifest, and small CSV helpers.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cloak/corpus.hpp"
#include "cloak/tensor.hpp"

namespace cloak {

namespace fs = std::filesystem;

// Hex SHA-256 of raw bytes.
std::string sha256_hex(const std::string& bytes);

// tEXt chunks stored alongside the pixels.
using PngText = std::map<std::string, std::string>;

// [3, H, W] in [-1, 1] <-> 16-bit RGB PNG. Values are clipped on write.
void write_png(const fs::path& path, const Tensor& image, const PngText& text = {});
Tensor read_png(const fs::path& path);
PngText read_png_text(const fs::path& path);
// Greyscale [H, W] in [0, 1], 8-bit.
void write_png_gray(const fs::path& path, const Tensor& image, const PngText& text = {});

// Pixel value after a write/read round trip through 16-bit storage.
double quantize16(double v);

using ArrayMap = std::map<std::string, Tensor>;

struct ArchiveManifest {
    std::vector<std::pair<std::string, Shape>> arrays;
    std::string config_hash;
    std::string digest;
    std::map<std::string, std::string> meta;
};

// Writes `<stem>.bin` (arrays) and `<stem>.json` (manifest). Returns the manifest.
ArchiveManifest save_archive(const fs::path& stem, const ArrayMap& arrays, const std::string& config_hash,
                             const std::map<std::string, std::string>& meta = {});
// Throws IntegrityError when the archive bytes do not match the manifest digest.
ArrayMap load_archive(const fs::path& stem, ArchiveManifest* manifest = nullptr);

// Digest over array names, shapes and raw values; identical to the
// manifest digest of an archive holding the same arrays.
std::string arrays_digest(const ArrayMap& arrays);

// Writes every image in the batch as `<prefix>_NNN.png` plus the exact
// values in `<prefix>.bin`/`.json`. When given, `png_pixels` replaces the
// batch pixels in the PNG files only.
void write_image_batch(const fs::path& dir, const std::string& prefix, const ImageBatch& batch,
                       const std::string& config_hash, const std::map<std::string, std::string>& meta = {},
                       const Tensor* png_pixels = nullptr);
ImageBatch read_image_batch(const fs::path& dir, const std::string& prefix);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

// One CSV record; fields are quoted when they hold commas, quotes or newlines.
std::string csv_row(const std::vector<std::string>& fields);
// Splits a single record; throws ParseError(line) on an unterminated quote.
std::vector<std::string> csv_split(const std::string& line, int line_number);

// Shortest decimal that round-trips to the same double.
std::string format_double(double v);

}  // namespace cloak
