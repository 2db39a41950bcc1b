#pragma once

// On-disk formats: the annotations CSV, the DMAP single-plane float
// container, binary PGM images, and small file utilities.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gausscount/density.hpp"

namespace gausscount {

// ============================================================================
// Annotations CSV
// ============================================================================
//
// Header "image_id,x,y", one row per point, coordinates with 9 significant
// digits. Groups keep their insertion order.

using AnnotationGroups =
    std::vector<std::pair<std::string, std::vector<Point>>>;

std::string annotations_to_csv(const AnnotationGroups& groups);
AnnotationGroups annotations_from_csv(const std::string& text);

// ============================================================================
// DMAP container
// ============================================================================
//
// 16-byte magic field ("DMAPf32\n" padded with zero bytes), then height and
// width as little-endian u32, then height*width little-endian f32 values in
// row-major order.

std::vector<std::uint8_t> dmap_encode(const DensityMap& map);
DensityMap dmap_decode(const std::vector<std::uint8_t>& bytes);

// ============================================================================
// PGM
// ============================================================================

struct PgmImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 8 bit
};

std::vector<std::uint8_t> pgm_encode(const PgmImage& image);

// ============================================================================
// Files
// ============================================================================

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);
void write_file(const std::string& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::string& path);
std::string read_text_file(const std::string& path);
void ensure_parent_dir(const std::string& path);

// FNV-1a over the byte content; the manifest's artifact fingerprint.
std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes);

}  // namespace gausscount
