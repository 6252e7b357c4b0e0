// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Criterion 8 trains three small detectors end to end and
// prints a comparison table; only the primary arm's recall floor gates.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "dfl/assigner.hpp"
#include "dfl/boxgeom.hpp"
#include "dfl/config.hpp"
#include "dfl/datapipe.hpp"
#include "dfl/detnet.hpp"
#include "dfl/errors.hpp"
#include "dfl/evalkit.hpp"
#include "dfl/losses.hpp"
#include "dfl/rng.hpp"
#include "dfl/tensor.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace dfl;

namespace {

std::string g_cli = DFL_CLI_PATH;
fs::path g_work;

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void expect(bool ok, const std::string& what) {
  if (!ok) throw Failure(what);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  expect(in.good(), "cannot read " + p.string());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

int run_cli(const std::string& args) {
  std::string cmd = g_cli + " " + args + " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// ---------- criterion 1: focal-loss identities ----------

void criterion_focal_identities() {
  FocalConfig g2;  // gamma = 2
  double r9 = focal_loss(0.9, 1, g2) / ce_loss(0.9, 1, g2);
  expect(std::abs(r9 - 0.01) <= 1e-12, "ratio at p_t=0.9 is not 1%");
  double r968 = focal_loss(0.968, 1, g2) / ce_loss(0.968, 1, g2);
  expect(std::abs(r968 - 0.001024) <= 1e-12, "ratio at p_t=0.968 is off");

  Rng rng(2024);
  for (int i = 0; i < 1000; ++i) {
    FocalConfig cfg;
    cfg.gamma = rng.uniform(0.0, 5.0);
    double p = rng.uniform(1e-5, 1.0 - 1e-5);
    int y = rng.uniform01() < 0.5 ? 1 : -1;
    double pt = y == 1 ? p : 1.0 - p;
    double ratio = focal_loss(p, y, cfg) / ce_loss(p, y, cfg);
    expect(std::abs(ratio - std::pow(1.0 - pt, cfg.gamma)) <= 1e-12,
           "ratio identity violated");
    FocalConfig zero;
    zero.gamma = 0.0;
    expect(std::abs(focal_loss(p, y, zero) - ce_loss(p, y, cfg)) <= 1e-12,
           "gamma=0 does not recover CE");
  }
}

// ---------- criterion 2: gradient suite ----------

void criterion_gradients() {
  using dfl_test::build_split;
  using dfl_test::distinct_values;
  using dfl_test::random_values;

  // primitives at 1e-6
  for (uint64_t s = 0; s < 10; ++s) {
    Rng rng(s + 1);
    {
      std::vector<Shape> shapes = {{1, 2, 6, 6}, {3, 2, 3, 3}, {3}};
      auto x = random_values(rng, 2 * 36 + 54 + 3, -1, 1);
      double err = grad_check(
          [&](Graph& g, std::span<const double> p) {
            return build_split(g, p, shapes,
                               [](Graph& gg, std::vector<Tensor>& in) {
                                 return gg.conv2d(in[0], in[1], in[2], 1, 1);
                               });
          },
          x);
      expect(err <= 1e-6, "conv2d gradient error " + std::to_string(err));
    }
    {
      auto x = distinct_values(rng, 36);
      double err = grad_check(
          [&](Graph& g, std::span<const double> p) {
            return build_split(g, p, {{1, 1, 6, 6}},
                               [](Graph& gg, std::vector<Tensor>& in) {
                                 return gg.maxpool2d(in[0], 2, 2);
                               });
          },
          x);
      expect(err <= 1e-6, "maxpool2d gradient error " + std::to_string(err));
    }
    {
      std::vector<double> x = random_values(rng, 12, 0.05, 1.0);
      for (auto& v : x)
        if (rng.uniform01() < 0.5) v = -v;
      double err = grad_check(
          [&](Graph& g, std::span<const double> p) {
            return build_split(g, p, {{12}},
                               [](Graph& gg, std::vector<Tensor>& in) {
                                 return gg.relu(in[0]);
                               });
          },
          x);
      expect(err <= 1e-6, "relu gradient error " + std::to_string(err));
    }
    for (int variant = 0; variant < 5; ++variant) {
      auto x = random_values(rng, 16, -1.5, 1.5);
      double err = grad_check(
          [&](Graph& g, std::span<const double> p) {
            switch (variant) {
              case 0:
                return build_split(g, p, {{16}},
                                   [](Graph& gg, std::vector<Tensor>& in) {
                                     return gg.sigmoid(in[0]);
                                   });
              case 1:
                return build_split(g, p, {{1, 4, 2, 2}},
                                   [](Graph& gg, std::vector<Tensor>& in) {
                                     return gg.upsample_nearest(in[0], 2);
                                   });
              case 2:
                return build_split(g, p, {{1, 2, 2, 2}, {1, 2, 2, 2}},
                                   [](Graph& gg, std::vector<Tensor>& in) {
                                     return gg.concat_channels(in[0], in[1]);
                                   });
              case 3:
                return build_split(g, p, {{8}, {8}},
                                   [](Graph& gg, std::vector<Tensor>& in) {
                                     return gg.add(in[0], in[1]);
                                   });
              default:
                return build_split(g, p, {{16}},
                                   [](Graph& gg, std::vector<Tensor>& in) {
                                     return gg.mul_scalar(in[0], 2.5);
                                   });
            }
          },
          x);
      expect(err <= 1e-6, "elementwise gradient error " + std::to_string(err));
    }
    {
      std::vector<Shape> shapes = {{6}, {3, 6}, {3}};
      auto x = random_values(rng, 6 + 18 + 3, -1, 1);
      double err = grad_check(
          [&](Graph& g, std::span<const double> p) {
            return build_split(g, p, shapes,
                               [](Graph& gg, std::vector<Tensor>& in) {
                                 return gg.linear(in[0], in[1], in[2]);
                               });
          },
          x);
      expect(err <= 1e-6, "linear gradient error " + std::to_string(err));
    }
  }

  // scalar losses off-kink at 1e-6
  {
    Rng rng(77);
    const double h = 1e-6;
    for (int i = 0; i < 100; ++i) {
      FocalConfig cfg;
      cfg.gamma = rng.uniform01() < 0.3 ? 0.0 : rng.uniform(0.5, 4.0);
      double p = rng.uniform(1e-3, 1.0 - 1e-3);
      int y = rng.uniform01() < 0.5 ? 1 : -1;
      double dce = (ce_loss(p + h, y, cfg) - ce_loss(p - h, y, cfg)) / (2 * h);
      expect(std::abs(dce - ce_loss_dp(p, y, cfg)) /
                     std::max(1.0, std::abs(dce)) <=
                 1e-6,
             "ce derivative mismatch");
      double dfl =
          (focal_loss(p + h, y, cfg) - focal_loss(p - h, y, cfg)) / (2 * h);
      expect(std::abs(dfl - focal_loss_dp(p, y, cfg)) /
                     std::max(1.0, std::abs(dfl)) <=
                 1e-6,
             "focal derivative mismatch");
      double xx = rng.uniform(-3, 3);
      if (std::abs(std::abs(xx) - 1.0) < 1e-3) continue;
      double dsl = (smooth_l1(xx + h) - smooth_l1(xx - h)) / (2 * h);
      expect(std::abs(dsl - smooth_l1_dx(xx)) <= 1e-6,
             "smooth_l1 derivative mismatch");
    }
  }

  // composite losses at 1e-6
  {
    Rng rng(88);
    const int n = 24;
    std::vector<double> point;
    std::vector<RpnSample> samples;
    int n_pos = 0;
    for (int i = 0; i < n; ++i) {
      RpnSample s;
      s.score_index = i;
      s.delta_index = {(size_t)(n + 4 * i), (size_t)(n + 4 * i + 1),
                       (size_t)(n + 4 * i + 2), (size_t)(n + 4 * i + 3)};
      s.label = i % 2 == 0 ? 1 : -1;
      if (s.label == 1) {
        ++n_pos;
        s.target = BoxDelta{rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7),
                            rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7)};
      }
      samples.push_back(s);
    }
    for (int i = 0; i < n; ++i) point.push_back(rng.uniform(0.1, 0.9));
    for (int i = 0; i < 4 * n; ++i) point.push_back(rng.uniform(-0.8, 0.8));
    RpnLossWeights w{15.0, n, n_pos};
    // delta indices in samples refer to positions inside the deltas tensor
    for (auto& s : samples)
      for (auto& d : s.delta_index) d -= n;
    double err = grad_check(
        [&](Graph& g, std::span<const double> p) {
          Tensor st = g.leaf({(size_t)n}, p.subspan(0, n));
          Tensor dt = g.leaf({(size_t)4 * n}, p.subspan(n, 4 * n));
          Tensor l = rpn_loss(g, st, dt, samples, w, FocalConfig{});
          return BuiltScalar{l, {st, dt}};
        },
        point);
    expect(err <= 1e-6, "rpn_loss gradient error " + std::to_string(err));

    for (int label : {1, -1}) {
      std::vector<double> cpoint = {rng.uniform(0.2, 0.8)};
      for (int i = 0; i < 4; ++i) cpoint.push_back(rng.uniform(-0.8, 0.8));
      std::optional<BoxDelta> target;
      if (label == 1)
        target = BoxDelta{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                          rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
      double cerr = grad_check(
          [&](Graph& g, std::span<const double> p) {
            Tensor s = g.leaf({1}, p.subspan(0, 1));
            Tensor d = g.leaf({4}, p.subspan(1, 4));
            Tensor l =
                classifier_loss(g, s, d, label, target, 1.0, FocalConfig{});
            return BuiltScalar{l, {s, d}};
          },
          cpoint);
      expect(cerr <= 1e-6,
             "classifier_loss gradient error " + std::to_string(cerr));
    }
  }

  // skip_fuse and roi_pool at 1e-6
  {
    DetectorConfig cfg;
    ParamSet ps = init_detector_params(cfg);
    Rng rng(5);
    size_t n4 = 32 * 16, n5 = 64 * 4;
    auto point = dfl_test::random_values(rng, n4 + n5, -1, 1);
    double err = grad_check(
        [&](Graph& g, std::span<const double> p) {
          Tensor c4 = g.leaf({1, 32, 4, 4}, p.subspan(0, n4));
          Tensor c5 = g.leaf({1, 64, 2, 2}, p.subspan(n4, n5));
          BoundParams bp = bind_params(g, ps);
          Tensor fused = skip_fuse(g, BackboneOutput{c4, c5}, bp, true);
          return BuiltScalar{g.sum(g.sigmoid(fused)), {c4, c5}};
        },
        point);
    expect(err <= 1e-6, "skip_fuse gradient error " + std::to_string(err));

    auto vals = dfl_test::distinct_values(rng, 2 * 64);
    double rerr = grad_check(
        [&](Graph& g, std::span<const double> p) {
          Tensor feat = g.leaf({1, 2, 8, 8}, p);
          Tensor pooled = roi_pool(g, feat, Box{10, 6, 55, 70}, 4, 16);
          return BuiltScalar{g.sum(g.sigmoid(pooled)), {feat}};
        },
        vals);
    expect(rerr <= 1e-6, "roi_pool gradient error " + std::to_string(rerr));
  }

  // 20 end-to-end parameter coordinates at 1e-5
  {
    DetectorConfig cfg;
    cfg.seed = 42;
    cfg.pre_nms_top_n = 50;
    cfg.post_nms_top_n = 8;
    SamplerConfig scfg;
    scfg.seed = 42;
    scfg.force_gt_match = true;
    FocalConfig fcfg;
    std::vector<Box> gts = {Box{8, 8, 24, 20}};  // off-center so negatives exist
    PixelImage scene = dfl_test::make_scene(64, 64, gts, 7);
    ParamSet params = init_detector_params(cfg);

    TrainPlan plan;
    {
      Graph g;
      Tensor img = g.leaf({1, 3, 64, 64}, scene.values);
      BoundParams bp = bind_params(g, params);
      Rng rng = Rng::derive(scfg.seed, 1);
      build_training_loss(g, img, gts, bp, cfg, scfg, fcfg, rng, plan);
    }

    Rng pick(99);
    struct Coord {
      size_t param, offset;
    };
    std::vector<Coord> coords;
    auto all = params.all();
    while (coords.size() < 20) {
      size_t pi = (size_t)pick.uniform_int(0, (int64_t)all.size() - 1);
      size_t off =
          (size_t)pick.uniform_int(0, (int64_t)all[pi].value.size() - 1);
      bool dup = false;
      for (const Coord& c : coords)
        dup = dup || (c.param == pi && c.offset == off);
      if (!dup) coords.push_back({pi, off});
    }

    std::vector<double> analytic;
    {
      ParamSet local = init_detector_params(cfg);
      Graph g;
      Tensor img = g.leaf({1, 3, 64, 64}, scene.values);
      BoundParams bp = bind_params(g, local);
      Rng rng = Rng::derive(scfg.seed, 1);
      TrainPlan reuse = plan;
      Tensor loss =
          build_training_loss(g, img, gts, bp, cfg, scfg, fcfg, rng, reuse);
      g.backward(loss);
      for (const Coord& c : coords)
        analytic.push_back(bp.entries[c.param].second.grad()[c.offset]);
    }

    auto value_at = [&](size_t i, double v) {
      ParamSet local = init_detector_params(cfg);
      auto la = local.all();
      la[coords[i].param].value[coords[i].offset] = v;
      Graph g;
      Tensor img = g.leaf({1, 3, 64, 64}, scene.values);
      BoundParams bp = bind_params(g, local);
      Rng rng = Rng::derive(scfg.seed, 1);
      TrainPlan reuse = plan;
      Tensor loss =
          build_training_loss(g, img, gts, bp, cfg, scfg, fcfg, rng, reuse);
      return loss.value()[0];
    };

    const double h = 1e-5;
    for (size_t i = 0; i < coords.size(); ++i) {
      double base = all[coords[i].param].value[coords[i].offset];
      double numeric = (value_at(i, base + h) - value_at(i, base - h)) / (2 * h);
      double err = std::abs(analytic[i] - numeric) /
                   std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      expect(err <= 1e-5,
             "end-to-end gradient error " + std::to_string(err) + " at coord " +
                 std::to_string(i));
    }
  }
}

// ---------- criterion 3: oracle equivalence ----------

void criterion_oracles() {
  Rng rng(42);
  for (int i = 0; i < 500; ++i) {
    Box a{(double)rng.uniform_int(0, 40), (double)rng.uniform_int(0, 40),
          (double)rng.uniform_int(1, 25), (double)rng.uniform_int(1, 25)};
    Box b{(double)rng.uniform_int(0, 40), (double)rng.uniform_int(0, 40),
          (double)rng.uniform_int(1, 25), (double)rng.uniform_int(1, 25)};
    expect(iou(a, b) == dfl_test::raster_iou(a, b),
           "iou differs from rasterization");
  }

  Rng nrng(99);
  for (int trial = 0; trial < 200; ++trial) {
    size_t n = (size_t)nrng.uniform_int(0, 20);
    std::vector<Detection> dets;
    for (size_t i = 0; i < n; ++i)
      dets.push_back(Detection{Box{nrng.uniform(0, 80), nrng.uniform(0, 80),
                                   nrng.uniform(4, 40), nrng.uniform(4, 40)},
                               nrng.uniform(0, 1)});
    double thr = nrng.uniform(0.1, 0.9);
    auto kept = nms(dets, thr);
    auto ref = dfl_test::nms_reference(dets, thr);
    expect(kept.size() == ref.size(), "nms keep-set size differs");
    for (size_t i = 0; i < ref.size(); ++i)
      expect(kept[i].score == dets[ref[i]].score &&
                 kept[i].box.x == dets[ref[i]].box.x,
             "nms keep-set differs");
  }

  Rng mrng(314);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Detection> dets;
    std::vector<Box> gts;
    size_t nd = (size_t)mrng.uniform_int(0, 15);
    size_t ng = (size_t)mrng.uniform_int(0, 15);
    for (size_t i = 0; i < nd; ++i)
      dets.push_back(Detection{Box{mrng.uniform(0, 60), mrng.uniform(0, 60),
                                   mrng.uniform(4, 30), mrng.uniform(4, 30)},
                               mrng.uniform(0, 1)});
    for (size_t i = 0; i < ng; ++i)
      gts.push_back(Box{mrng.uniform(0, 60), mrng.uniform(0, 60),
                        mrng.uniform(4, 30), mrng.uniform(4, 30)});
    double thr = mrng.uniform(0.1, 0.8);
    MatchResult m = match_detections(dets, gts, thr);
    dfl_test::RefMatch ref = dfl_test::match_reference(dets, gts, thr);
    expect(m.tp == ref.tp && m.fp == ref.fp && m.fn == ref.fn,
           "matching counts differ from the exhaustive oracle");
  }
}

// ---------- criterion 4: encode/decode roundtrip ----------

void criterion_roundtrip() {
  Rng rng(1234);
  for (int i = 0; i < 1000; ++i) {
    Anchor a{rng.uniform(0, 700), rng.uniform(0, 700), rng.uniform(5, 90),
             rng.uniform(5, 90)};
    Box p{rng.uniform(0, 700), rng.uniform(0, 700), rng.uniform(1, 90),
          rng.uniform(1, 90)};
    Box back = decode(encode(p, a), a);
    expect(std::abs(back.x - p.x) < 1e-9 && std::abs(back.y - p.y) < 1e-9 &&
               std::abs(back.w - p.w) < 1e-9 && std::abs(back.h - p.h) < 1e-9,
           "decode(encode) drifted");
    BoxDelta t{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1),
               rng.uniform(-1, 1)};
    BoxDelta t2 = encode(decode(t, a), a);
    expect(std::abs(t2.tx - t.tx) < 1e-9 && std::abs(t2.ty - t.ty) < 1e-9 &&
               std::abs(t2.tw - t.tw) < 1e-9 && std::abs(t2.th - t.th) < 1e-9,
           "encode(decode) drifted");
  }
  for (int i = 0; i < 100; ++i) {
    Box b{rng.uniform(-50, 400), rng.uniform(-50, 400), rng.uniform(0.5, 90),
          rng.uniform(0.5, 90)};
    BoxDelta t = encode(b, Anchor::from_box(b));
    expect(t.tx == 0.0 && t.ty == 0.0 && t.tw == 0.0 && t.th == 0.0,
           "self-encode is not exactly zero");
  }
}

// ---------- criterion 5: anchor grid ----------

void criterion_anchors() {
  for (auto [h, w] : {std::pair{3, 5}, std::pair{12, 9}}) {
    expect(generate_anchors(h, w).size() == (size_t)9 * h * w,
           "anchor count is not 9HW");
  }
  auto paper_grid = generate_anchors(47, 42);
  expect(paper_grid.size() == 17766, "47x42 grid must give 17766 anchors");
  auto t = generate_anchors(1, 1);
  expect(t[0].w == 30.0 && t[0].h == 30.0, "1:1 template side 30 inexact");
  expect(t[3].w == 50.0 && t[3].h == 50.0, "1:1 template side 50 inexact");
  expect(t[6].w == 70.0 && t[6].h == 70.0, "1:1 template side 70 inexact");
}

// ---------- criterion 6: Table 2 F1 arithmetic ----------

void criterion_f1() {
  struct Row {
    int tp, fn, fp;
    double rr, pr, f1;
  };
  const Row rows[] = {
      {277823, 32802, 152177, 0.8944, 0.6461, 0.7502},
      {6447321, 847679, 4600179, 0.8838, 0.5836, 0.7030},
      {2119, 7881, 30381, 0.2119, 0.0652, 0.0997},
  };
  for (const Row& row : rows) {
    MatchResult m;
    m.tp = row.tp;
    m.fn = row.fn;
    m.fp = row.fp;
    Rates r = prf1(m);
    expect(std::abs(r.rr - row.rr) < 1e-9 && std::abs(r.pr - row.pr) < 1e-9,
           "counts do not realize the published rates");
    expect(std::abs(r.f1 - row.f1) < 5e-4, "F1 outside 5e-4 of the table");
  }
}

// ---------- criterion 7: tiling ----------

void criterion_tiling() {
  ImageRecord rec;
  rec.width = 5616;
  rec.height = 3744;
  rec.boxes = {Box{1000, 1000, 40, 30}, Box{3000, 2000, 55, 28},
               Box{800, 3000, 30, 48}};
  auto tiles = tile_image(rec, 752, 674);
  expect(tiles.size() == 48, "tile count is not 48");

  std::vector<bool> xcov(rec.width, false), ycov(rec.height, false);
  for (const Tile& t : tiles) {
    expect(t.width == 752 && t.height == 674, "tile not full size");
    expect(t.x0 >= 0 && t.y0 >= 0 && t.x0 + t.width <= rec.width &&
               t.y0 + t.height <= rec.height,
           "tile leaves the image");
    for (int x = (int)t.x0; x < (int)t.x0 + t.width; ++x) xcov[x] = true;
    for (int y = (int)t.y0; y < (int)t.y0 + t.height; ++y) ycov[y] = true;
  }
  expect(std::all_of(xcov.begin(), xcov.end(), [](bool b) { return b; }) &&
             std::all_of(ycov.begin(), ycov.end(), [](bool b) { return b; }),
         "tiles do not cover every pixel");

  size_t held = 0;
  for (const Tile& t : tiles) {
    for (const Box& b : t.boxes) {
      ++held;
      bool matched = false;
      for (const Box& src : rec.boxes)
        matched = matched || (b.x + t.x0 == src.x && b.y + t.y0 == src.y &&
                              b.w == src.w && b.h == src.h);
      expect(matched, "remap+unmap is not the identity for an interior box");
    }
  }
  expect(held == rec.boxes.size(), "center rule must place each box once");
}

// ---------- criterion 8: desk-scale end-to-end ----------

// Fixed dataset and run configuration for the end-to-end gate.
constexpr uint64_t kE2eSeed = 20250809;
constexpr int kTrainImages = 32;
constexpr int kTestImages = 8;
constexpr int kImgW = 320;
constexpr int kImgH = 288;
constexpr int kSteps = 200;
constexpr double kLearningRate = 2e-3;
constexpr double kScoreThresh = 0.35;

struct ArmResult {
  std::string name;
  double first20 = 0;
  double last20 = 0;
  double recall = 0;
  double precision = 0;
  double mean_matched_iou = 0;
};

ArmResult run_arm(const std::string& name, bool use_focal, bool use_skip,
                  const Manifest& manifest) {
  DetectorConfig cfg;
  cfg.seed = 7;
  cfg.steps = kSteps;
  cfg.learning_rate = kLearningRate;
  cfg.score_thresh = kScoreThresh;
  cfg.use_focal_rpn = use_focal;
  cfg.use_focal_cls = use_focal;
  cfg.use_skip = use_skip;
  SamplerConfig scfg;
  scfg.seed = 7;
  scfg.force_gt_match = true;
  FocalConfig fcfg;

  Detector det(cfg, scfg, fcfg);
  std::vector<double> losses;
  for (int step = 0; step < kSteps; ++step) {
    const ImageRecord& rec = manifest.records[step % kTrainImages];
    PixelImage img = read_ppm(manifest.base_dir / rec.image_path);
    losses.push_back(det.train_step(img, rec.boxes));
  }

  ArmResult out;
  out.name = name;
  for (int i = 0; i < 20; ++i) {
    out.first20 += losses[i] / 20.0;
    out.last20 += losses[kSteps - 20 + i] / 20.0;
  }

  int tp = 0, fp = 0, fn = 0;
  double iou_sum = 0;
  for (int i = 0; i < kTestImages; ++i) {
    const ImageRecord& rec = manifest.records[kTrainImages + i];
    PixelImage img = read_ppm(manifest.base_dir / rec.image_path);
    auto dets = det.detect(img);
    MatchResult m = match_detections(dets, rec.boxes, 0.3);
    tp += m.tp;
    fp += m.fp;
    fn += m.fn;
    for (size_t d = 0; d < dets.size(); ++d)
      if (m.det_is_tp[d])
        iou_sum += iou(dets[d].box, rec.boxes[(size_t)m.det_gt[d]]);
  }
  out.recall = tp + fn > 0 ? (double)tp / (tp + fn) : 0.0;
  out.precision = tp + fp > 0 ? (double)tp / (tp + fp) : 0.0;
  out.mean_matched_iou = tp > 0 ? iou_sum / tp : 0.0;
  return out;
}

void criterion_end_to_end() {
  fs::path data = g_work / "e2e_data";
  SynthConfig synth;
  synth.seed = kE2eSeed;
  synth.n_images = kTrainImages + kTestImages;
  synth.img_w = kImgW;
  synth.img_h = kImgH;
  synth.vehicles_min = 2;
  synth.vehicles_max = 4;
  synth.distractor_rate = 0.5;
  fs::path manifest_path = synth_generate(synth, data);
  Manifest manifest = load_manifest(manifest_path, true);

  ArmResult dfl_arm = run_arm("DFL (focal+skip)", true, true, manifest);
  ArmResult ce_arm = run_arm("CE baseline (skip)", false, true, manifest);
  ArmResult noskip_arm = run_arm("focal, no skip", true, false, manifest);

  std::cout << "  arm                   first20   last20    recall  precision"
               "  matched-IoU\n";
  for (const ArmResult& a : {dfl_arm, ce_arm, noskip_arm}) {
    char line[160];
    std::snprintf(line, sizeof(line),
                  "  %-20s  %8.4f  %8.4f  %6.4f  %9.4f  %11.4f\n",
                  a.name.c_str(), a.first20, a.last20, a.recall, a.precision,
                  a.mean_matched_iou);
    std::cout << line;
  }

  expect(dfl_arm.last20 < 0.5 * dfl_arm.first20,
         "final 20-step mean loss " + std::to_string(dfl_arm.last20) +
             " is not below half of " + std::to_string(dfl_arm.first20));
  expect(dfl_arm.recall >= 0.7, "DFL recall at IoU 0.3 is " +
                                    std::to_string(dfl_arm.recall) +
                                    ", below the 0.7 floor");
}

// ---------- criterion 9: determinism across CLI runs ----------

void criterion_determinism() {
  fs::path dir = g_work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string small =
      " --set synth.img_w=128 --set synth.img_h=128"
      " --set synth.vehicles_min=1 --set synth.vehicles_max=2";

  auto same_file = [&](const fs::path& a, const fs::path& b) {
    return slurp(a) == slurp(b);
  };

  fs::path sa = dir / "synth_a", sb = dir / "synth_b";
  expect(run_cli("synth --seed 3 --n 2 --out " + sa.string() + small) == 0,
         "synth run failed");
  expect(run_cli("synth --seed 3 --n 2 --out " + sb.string() + small) == 0,
         "synth rerun failed");
  for (const char* f : {"manifest.json", "img_000.ppm", "img_001.ppm"})
    expect(same_file(sa / f, sb / f), std::string("synth output differs: ") + f);

  std::string train_tail = " --seed 3 --steps 10" + small +
                           " --set sampler.force_gt_match=true --manifest " +
                           (sa / "manifest.json").string() + " --out ";
  fs::path ta = dir / "train_a", tb = dir / "train_b";
  expect(run_cli("train" + train_tail + ta.string()) == 0, "train run failed");
  expect(run_cli("train" + train_tail + tb.string()) == 0, "train rerun failed");
  expect(same_file(ta / "loss.csv", tb / "loss.csv"), "loss logs differ");
  expect(same_file(ta / "checkpoint.dflw", tb / "checkpoint.dflw"),
         "checkpoints differ");

  std::string detect_head = "detect --checkpoint " +
                            (ta / "checkpoint.dflw").string() + " --manifest " +
                            (sa / "manifest.json").string() + " --out ";
  expect(run_cli(detect_head + (dir / "d1.json").string()) == 0,
         "detect run failed");
  expect(run_cli(detect_head + (dir / "d2.json").string()) == 0,
         "detect rerun failed");
  expect(same_file(dir / "d1.json", dir / "d2.json"), "detections differ");

  std::string curves_head = "curves --detections " + (dir / "d1.json").string() +
                            " --manifest " + (sa / "manifest.json").string();
  expect(run_cli(curves_head + " --out-csv " + (dir / "c1.csv").string() +
                 " --out-svg " + (dir / "c1.svg").string()) == 0,
         "curves run failed");
  expect(run_cli(curves_head + " --out-csv " + (dir / "c2.csv").string() +
                 " --out-svg " + (dir / "c2.svg").string()) == 0,
         "curves rerun failed");
  expect(same_file(dir / "c1.csv", dir / "c2.csv"), "curve CSVs differ");
  expect(same_file(dir / "c1.svg", dir / "c2.svg"), "curve SVGs differ");
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 1; i + 1 < argc; i += 2) {
    std::string flag = argv[i];
    if (flag == "--cli") g_cli = argv[i + 1];
    if (flag == "--workdir") g_work = argv[i + 1];
  }
  if (g_work.empty()) g_work = fs::temp_directory_path() / "dfl_acceptance";
  fs::create_directories(g_work);

  struct Criterion {
    int id;
    const char* name;
    std::function<void()> fn;
  };
  const Criterion criteria[] = {
      {1, "focal-loss identities", criterion_focal_identities},
      {2, "gradient suite", criterion_gradients},
      {3, "oracle equivalence", criterion_oracles},
      {4, "encode/decode roundtrip", criterion_roundtrip},
      {5, "anchor grid", criterion_anchors},
      {6, "Table-2 F1 arithmetic", criterion_f1},
      {7, "tiling", criterion_tiling},
      {8, "desk-scale end-to-end", criterion_end_to_end},
      {9, "determinism", criterion_determinism},
  };

  int failures = 0;
  for (const Criterion& c : criteria) {
    try {
      c.fn();
      std::cout << "PASS " << c.id << " " << c.name << "\n";
    } catch (const std::exception& e) {
      ++failures;
      std::cout << "FAIL " << c.id << " " << c.name << ": " << e.what() << "\n";
    }
  }
  return failures == 0 ? 0 : 1;
}
