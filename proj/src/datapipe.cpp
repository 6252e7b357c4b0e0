#include "dfl/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "dfl/errors.hpp"
#include "dfl/rng.hpp"
#include "json.hpp"

namespace dfl {

using nlohmann::json;

namespace {

void write_file_atomic(const std::filesystem::path& path,
                       const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), (std::streamsize)content.size());
    if (!out) throw IoFailure("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoFailure("rename to " + path.string() + ": " + ec.message());
}

// Clip to [0,w]x[0,h]; returns true when the box was adjusted.
bool clip_box_to(Box& b, double w, double h) {
  double x1 = std::clamp(b.x, 0.0, w);
  double y1 = std::clamp(b.y, 0.0, h);
  double x2 = std::clamp(b.x2(), 0.0, w);
  double y2 = std::clamp(b.y2(), 0.0, h);
  Box nb{x1, y1, std::max(0.0, x2 - x1), std::max(0.0, y2 - y1)};
  bool changed = nb.x != b.x || nb.y != b.y || nb.w != b.w || nb.h != b.h;
  b = nb;
  return changed;
}

}  // namespace

void write_text_atomic(const std::filesystem::path& path,
                       const std::string& content) {
  write_file_atomic(path, content);
}

Manifest load_manifest(const std::filesystem::path& path, bool check_images) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoFailure("cannot open manifest " + path.string());

  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (!doc.is_array())
    throw ParseError(path.string() + ": top-level value must be an array");

  Manifest m;
  m.base_dir = path.parent_path();
  for (size_t i = 0; i < doc.size(); ++i) {
    const json& rec = doc[i];
    auto fail = [&](const std::string& what) -> ParseError {
      return ParseError(path.string() + ": record " + std::to_string(i) +
                        ": " + what);
    };
    if (!rec.is_object()) throw fail("not an object");
    for (const char* key : {"image", "width", "height", "boxes"})
      if (!rec.contains(key)) throw fail(std::string("missing field '") + key + "'");
    if (!rec["image"].is_string()) throw fail("'image' must be a string");
    if (!rec["width"].is_number() || !rec["height"].is_number())
      throw fail("'width'/'height' must be numbers");
    if (!rec["boxes"].is_array()) throw fail("'boxes' must be an array");

    ImageRecord r;
    r.image_path = rec["image"].get<std::string>();
    r.width = rec["width"].get<int>();
    r.height = rec["height"].get<int>();
    if (r.width <= 0 || r.height <= 0) throw fail("non-positive image extents");
    for (size_t b = 0; b < rec["boxes"].size(); ++b) {
      const json& jb = rec["boxes"][b];
      if (!jb.is_array() || jb.size() != 4)
        throw fail("box " + std::to_string(b) + " must be [x,y,w,h]");
      for (const auto& v : jb)
        if (!v.is_number())
          throw fail("box " + std::to_string(b) + " has a non-numeric entry");
      Box box{jb[0].get<double>(), jb[1].get<double>(), jb[2].get<double>(),
              jb[3].get<double>()};
      if (box.w < 0 || box.h < 0)
        throw fail("box " + std::to_string(b) + " has negative extents");
      if (clip_box_to(box, r.width, r.height)) ++m.clip_warnings;
      r.boxes.push_back(box);
    }
    if (check_images && !std::filesystem::exists(m.base_dir / r.image_path))
      throw MissingImage((m.base_dir / r.image_path).string());
    m.records.push_back(std::move(r));
  }
  return m;
}

void save_manifest(std::span<const ImageRecord> records,
                   const std::filesystem::path& path) {
  json doc = json::array();
  for (const ImageRecord& r : records) {
    json boxes = json::array();
    for (const Box& b : r.boxes) boxes.push_back({b.x, b.y, b.w, b.h});
    doc.push_back({{"image", r.image_path},
                   {"width", r.width},
                   {"height", r.height},
                   {"boxes", std::move(boxes)}});
  }
  write_file_atomic(path, doc.dump(2) + "\n");
}

std::vector<Tile> tile_image(const ImageRecord& record, int tile_w, int tile_h,
                             KeepRule rule) {
  if (tile_w > record.width || tile_h > record.height)
    throw TileLargerThanImage(std::to_string(tile_w) + "x" +
                              std::to_string(tile_h) + " tile for " +
                              std::to_string(record.width) + "x" +
                              std::to_string(record.height) + " image");
  if (tile_w < 1 || tile_h < 1)
    throw TileLargerThanImage("tile extents must be >= 1");

  int nx = (record.width + tile_w - 1) / tile_w;
  int ny = (record.height + tile_h - 1) / tile_h;

  std::vector<Tile> tiles;
  tiles.reserve((size_t)nx * ny);
  for (int ty = 0; ty < ny; ++ty) {
    for (int tx = 0; tx < nx; ++tx) {
      Tile t;
      t.x0 = std::min(tx * tile_w, record.width - tile_w);
      t.y0 = std::min(ty * tile_h, record.height - tile_h);
      t.width = tile_w;
      t.height = tile_h;
      tiles.push_back(t);
    }
  }

  for (const Box& b : record.boxes) {
    if (rule == KeepRule::center) {
      for (Tile& t : tiles) {
        if (b.cx() >= t.x0 && b.cx() <= t.x0 + tile_w && b.cy() >= t.y0 &&
            b.cy() <= t.y0 + tile_h) {
          Box local{b.x - t.x0, b.y - t.y0, b.w, b.h};
          clip_box_to(local, tile_w, tile_h);
          t.boxes.push_back(local);
          break;  // lower-index tile wins
        }
      }
    } else {
      for (Tile& t : tiles) {
        Box rect{t.x0, t.y0, (double)tile_w, (double)tile_h};
        if (iou(b, rect) > 0 || (b.area() == 0 && b.x >= rect.x &&
                                 b.x <= rect.x2() && b.y >= rect.y &&
                                 b.y <= rect.y2())) {
          Box local{b.x - t.x0, b.y - t.y0, b.w, b.h};
          clip_box_to(local, tile_w, tile_h);
          if (local.area() > 0) t.boxes.push_back(local);
        }
      }
    }
  }
  return tiles;
}

Box oriented_to_axis_aligned(const OrientedBox& ob) {
  double area2 = 0;  // shoelace, twice the signed area
  for (int i = 0; i < 4; ++i) {
    const auto& p = ob.corners[i];
    const auto& q = ob.corners[(i + 1) % 4];
    area2 += p[0] * q[1] - q[0] * p[1];
  }
  if (area2 == 0)
    throw DegenerateQuadrilateral("corners enclose zero area");

  double xmin = ob.corners[0][0], xmax = xmin;
  double ymin = ob.corners[0][1], ymax = ymin;
  for (const auto& c : ob.corners) {
    xmin = std::min(xmin, c[0]);
    xmax = std::max(xmax, c[0]);
    ymin = std::min(ymin, c[1]);
    ymax = std::max(ymax, c[1]);
  }
  return Box{xmin, ymin, xmax - xmin, ymax - ymin};
}

OrientedBox oriented_from_center_angle(double cx, double cy, double w,
                                       double h, double angle_rad) {
  double c = std::cos(angle_rad), s = std::sin(angle_rad);
  OrientedBox ob;
  const double hx[4] = {-w / 2, w / 2, w / 2, -w / 2};
  const double hy[4] = {-h / 2, -h / 2, h / 2, h / 2};
  for (int i = 0; i < 4; ++i)
    ob.corners[i] = {cx + hx[i] * c - hy[i] * s, cy + hx[i] * s + hy[i] * c};
  return ob;
}

namespace {

// Bilinear value noise on a coarse grid of uniform draws.
class ValueNoise {
 public:
  ValueNoise(int img_w, int img_h, int step, Rng& rng) : step_(step) {
    gw_ = img_w / step + 2;
    gh_ = img_h / step + 2;
    grid_.resize((size_t)gw_ * gh_);
    for (double& v : grid_) v = rng.uniform01();
  }
  double at(int x, int y) const {
    double u = (double)x / step_, v = (double)y / step_;
    int i = (int)u, j = (int)v;
    double fu = u - i, fv = v - j;
    auto g = [&](int a, int b) { return grid_[(size_t)b * gw_ + a]; };
    return (1 - fu) * (1 - fv) * g(i, j) + fu * (1 - fv) * g(i + 1, j) +
           (1 - fu) * fv * g(i, j + 1) + fu * fv * g(i + 1, j + 1);
  }

 private:
  int step_, gw_, gh_;
  std::vector<double> grid_;
};

void fill_rect(PixelImage& img, const Box& b, double r, double g, double bl) {
  int x0 = (int)b.x, y0 = (int)b.y, x1 = (int)b.x2(), y1 = (int)b.y2();
  for (int y = std::max(0, y0); y < std::min(img.height, y1); ++y) {
    for (int x = std::max(0, x0); x < std::min(img.width, x1); ++x) {
      img.at(0, y, x) = r;
      img.at(1, y, x) = g;
      img.at(2, y, x) = bl;
    }
  }
}

}  // namespace

std::filesystem::path synth_generate(const SynthConfig& cfg,
                                     const std::filesystem::path& out_dir) {
  if (cfg.img_w % 32 != 0 || cfg.img_h % 32 != 0)
    throw InvalidGrid("synth extents must be divisible by 32, got " +
                      std::to_string(cfg.img_w) + "x" + std::to_string(cfg.img_h));
  if (cfg.vehicles_min < 0 || cfg.vehicles_max < cfg.vehicles_min)
    throw InvalidGrid("bad vehicle count range");

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoFailure("cannot create " + out_dir.string());

  const int kMinSide = 24, kMaxSide = 60, kMaxTries = 200;
  // Border margin keeps a vehicle's matching anchors inside the image on
  // training-size frames; small frames get what room they have.
  const int kMargin = std::clamp(
      (std::min(cfg.img_w, cfg.img_h) - kMaxSide) / 3, 2, 36);

  std::vector<ImageRecord> records;
  for (int i = 0; i < cfg.n_images; ++i) {
    Rng rng = Rng::derive(cfg.seed, (uint64_t)i);
    PixelImage img = PixelImage::filled(cfg.img_w, cfg.img_h, 0.0);

    ValueNoise coarse(cfg.img_w, cfg.img_h, 64, rng);
    ValueNoise fine(cfg.img_w, cfg.img_h, 16, rng);
    for (int y = 0; y < cfg.img_h; ++y) {
      for (int x = 0; x < cfg.img_w; ++x) {
        double n = 0.6 * coarse.at(x, y) + 0.4 * fine.at(x, y);
        double grain = rng.uniform(-0.015, 0.015);
        double v = 0.35 + 0.22 * n + grain;
        img.at(0, y, x) = v;
        img.at(1, y, x) = v * 0.97;
        img.at(2, y, x) = v * 0.93;
      }
    }

    int n_vehicles =
        (int)rng.uniform_int(cfg.vehicles_min, cfg.vehicles_max);
    int n_distractors =
        (int)std::floor(cfg.distractor_rate * n_vehicles + 0.5);

    auto place = [&](std::span<const Box> avoid) -> Box {
      for (int attempt = 0; attempt < kMaxTries; ++attempt) {
        double w = (double)rng.uniform_int(kMinSide, kMaxSide);
        double h = (double)rng.uniform_int(kMinSide, kMaxSide);
        if (cfg.img_w - (int)w - 2 * kMargin < 1 ||
            cfg.img_h - (int)h - 2 * kMargin < 1)
          continue;
        Box b{(double)rng.uniform_int(kMargin, cfg.img_w - (int)w - kMargin),
              (double)rng.uniform_int(kMargin, cfg.img_h - (int)h - kMargin),
              w, h};
        bool ok = true;
        for (const Box& other : avoid) {
          if (iou(b, other) > 0.3) {
            ok = false;
            break;
          }
        }
        if (ok) return b;
      }
      throw PlacementFailure("image " + std::to_string(i) +
                             ": no room after " + std::to_string(kMaxTries) +
                             " tries");
    };

    std::vector<Box> vehicles;
    for (int v = 0; v < n_vehicles; ++v)
      vehicles.push_back(place(vehicles));

    // Distractors are drawn before the vehicles, so slight overlap only
    // hides distractor pixels, never a vehicle's.
    std::vector<Box> all = vehicles;
    std::vector<Box> distractors;
    for (int d = 0; d < n_distractors; ++d) {
      Box b = place(all);
      distractors.push_back(b);
      all.push_back(b);
    }

    // Distractors: single-tone rectangles in the vehicle brightness range.
    for (const Box& b : distractors) {
      double tone = rng.uniform(0.78, 0.95);
      fill_rect(img, b, tone, tone * 0.98, tone * 0.92);
    }

    // Vehicles: bright body with a dark stripe across the middle third of
    // the long axis.
    for (const Box& b : vehicles) {
      double body = rng.uniform(0.78, 0.95);
      double stripe = rng.uniform(0.05, 0.2);
      fill_rect(img, b, body, body * 0.98, body * 0.92);
      Box s = b;
      if (b.w >= b.h) {
        s.x = b.x + b.w / 3;
        s.w = b.w / 3;
      } else {
        s.y = b.y + b.h / 3;
        s.h = b.h / 3;
      }
      fill_rect(img, s, stripe, stripe, stripe * 1.2);
    }

    char name[32];
    std::snprintf(name, sizeof(name), "img_%03d.ppm", i);
    write_ppm(img, out_dir / name);

    ImageRecord rec;
    rec.image_path = name;
    rec.width = cfg.img_w;
    rec.height = cfg.img_h;
    rec.boxes = vehicles;
    records.push_back(std::move(rec));
  }

  std::filesystem::path manifest = out_dir / "manifest.json";
  save_manifest(records, manifest);
  return manifest;
}

PixelImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingImage(path.string());
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());

  size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < data.size()) {
      char c = data[pos];
      if (c == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
    size_t start = pos;
    while (pos < data.size() && !std::isspace((unsigned char)data[pos])) ++pos;
    if (start == pos) throw TruncatedFile(path.string() + ": header ends early");
    return data.substr(start, pos - start);
  };

  std::string magic = next_token();
  if (magic != "P6")
    throw UnsupportedFormat(path.string() + ": expected P6, got '" + magic + "'");
  int w, h, maxval;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw UnsupportedFormat(path.string() + ": malformed header");
  }
  if (w <= 0 || h <= 0)
    throw UnsupportedFormat(path.string() + ": bad extents");
  if (maxval != 255)
    throw UnsupportedFormat(path.string() + ": maxval must be 255, got " +
                            std::to_string(maxval));
  ++pos;  // single whitespace after maxval
  size_t need = (size_t)w * h * 3;
  if (data.size() - pos < need)
    throw TruncatedFile(path.string() + ": expected " + std::to_string(need) +
                        " pixel bytes, have " + std::to_string(data.size() - pos));

  PixelImage img{w, h, std::vector<double>(need)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        uint8_t b = (uint8_t)data[pos + ((size_t)y * w + x) * 3 + c];
        img.at(c, y, x) = b / 255.0;
      }
    }
  }
  return img;
}

void write_ppm(const PixelImage& img, const std::filesystem::path& path) {
  std::string out = "P6\n" + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + (size_t)img.width * img.height * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        double q = std::floor(img.at(c, y, x) * 255.0 + 0.5);
        out.push_back((char)(uint8_t)std::clamp(q, 0.0, 255.0));
      }
    }
  }
  write_file_atomic(path, out);
}

PixelImage pad_to_multiple(const PixelImage& img, int multiple) {
  int W = (img.width + multiple - 1) / multiple * multiple;
  int H = (img.height + multiple - 1) / multiple * multiple;
  if (W == img.width && H == img.height) return img;
  PixelImage out = PixelImage::filled(W, H, 0.0);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        out.at(c, y, x) = img.at(c, std::min(y, img.height - 1),
                                 std::min(x, img.width - 1));
  return out;
}

PixelImage crop(const PixelImage& img, int x0, int y0, int w, int h) {
  if (x0 < 0 || y0 < 0 || x0 + w > img.width || y0 + h > img.height || w < 1 ||
      h < 1)
    throw ShapeMismatch("crop outside image bounds");
  PixelImage out = PixelImage::filled(w, h, 0.0);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  return out;
}

}  // namespace dfl
