#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dfl/boxgeom.hpp"

namespace dfl {

// Planar RGB raster, values in [0, 1], channel-major (3 x H x W row-major).
// This is the 1x3xHxW tensor layout used by the network.
struct PixelImage {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  double& at(int c, int y, int x) {
    return values[((size_t)c * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return values[((size_t)c * height + y) * width + x];
  }
  static PixelImage filled(int w, int h, double v) {
    return PixelImage{w, h, std::vector<double>((size_t)3 * w * h, v)};
  }
};

struct ImageRecord {
  std::string image_path;  // relative to the manifest directory
  int width = 0;
  int height = 0;
  std::vector<Box> boxes;
};

struct Manifest {
  std::vector<ImageRecord> records;
  int clip_warnings = 0;
  std::filesystem::path base_dir;
};

// JSON array of {"image", "width", "height", "boxes": [[x,y,w,h], ...]}.
// Boxes are clipped to the image bounds; each adjustment counts one warning.
Manifest load_manifest(const std::filesystem::path& path,
                       bool check_images = false);
void save_manifest(std::span<const ImageRecord> records,
                   const std::filesystem::path& path);

struct Tile {
  size_t parent = 0;  // record index
  double x0 = 0;
  double y0 = 0;
  int width = 0;
  int height = 0;
  std::vector<Box> boxes;  // translated into tile coordinates
};

enum class KeepRule { center, any_overlap };

// ceil(W/tile_w) x ceil(H/tile_h) full-size tiles; interior tiles sit at
// multiples of the tile extents, edge tiles are shifted (not shrunk) to end
// at the image border. center rule: a box joins the single tile containing
// its center (lower-index tile wins on boundaries). any_overlap: a box
// joins every tile it overlaps. Assigned boxes are translated by -origin
// and clipped to the tile.
std::vector<Tile> tile_image(const ImageRecord& record, int tile_w = 752,
                             int tile_h = 674,
                             KeepRule rule = KeepRule::center);

struct OrientedBox {
  std::array<std::array<double, 2>, 4> corners;  // in order around the quad
};

// Minimal axis-aligned enclosure of the four corners.
Box oriented_to_axis_aligned(const OrientedBox& ob);

// Helper for center+angle sources.
OrientedBox oriented_from_center_angle(double cx, double cy, double w,
                                       double h, double angle_rad);

struct SynthConfig {
  uint64_t seed = 1;
  int n_images = 4;
  int img_w = 736;
  int img_h = 672;
  int vehicles_min = 2;
  int vehicles_max = 5;
  double distractor_rate = 0.5;
};

// Seeded synthetic scenes: value-noise background, two-tone "vehicle"
// rectangles 24..60 px per side (annotated), and unannotated single-tone
// distractor rectangles in the same size range. Writes P6 PPMs plus a
// manifest and returns the manifest path. Byte-identical for a fixed seed.
std::filesystem::path synth_generate(const SynthConfig& cfg,
                                     const std::filesystem::path& out_dir);

// P6 binary PPM, maxval 255; values scaled to [0, 1] on read. write_ppm
// quantizes round-half-up, so read(write(x)) == quantize(x).
PixelImage read_ppm(const std::filesystem::path& path);
void write_ppm(const PixelImage& img, const std::filesystem::path& path);

// Right/bottom edge replication up to the next multiple; coordinates of
// content pixels are unchanged.
PixelImage pad_to_multiple(const PixelImage& img, int multiple);

// Write-to-temp-then-rename, so failures leave no partial file behind.
void write_text_atomic(const std::filesystem::path& path,
                       const std::string& content);

PixelImage crop(const PixelImage& img, int x0, int y0, int w, int h);

}  // namespace dfl
