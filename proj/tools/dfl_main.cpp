// dfl: synthetic-scene vehicle detection pipeline.
// Subcommands: synth, tile, train, detect, eval, curves.

#include <charconv>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dfl/config.hpp"
#include "dfl/datapipe.hpp"
#include "dfl/detnet.hpp"
#include "dfl/errors.hpp"
#include "dfl/evalkit.hpp"
#include "json.hpp"

namespace {

using nlohmann::json;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
};

void add_common(CLI::App* sub, CommonOpts& opts) {
  sub->add_option("--config", opts.config_path, "JSON config file (flat dotted keys)");
  sub->add_option("--set", opts.sets,
                  "Override a config key, e.g. --set detector.steps=50")
      ->type_name("KEY=VALUE");
}

dfl::RunConfig resolve_config(const CommonOpts& opts) {
  dfl::RunConfig cfg = opts.config_path.empty()
                           ? dfl::RunConfig()
                           : dfl::RunConfig::from_file(opts.config_path);
  cfg.apply_env();
  for (const std::string& kv : opts.sets) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw dfl::ParseError("--set expects KEY=VALUE, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

void echo_config(const dfl::RunConfig& cfg, const std::filesystem::path& dir) {
  dfl::write_text_atomic(dir / "config.json", cfg.to_json());
}

std::string fmt_shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string fmt_fixed6(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, 6);
  return std::string(buf, res.ptr);
}

json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw dfl::IoFailure("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw dfl::ParseError(path.string() + ": " + e.what());
  }
}

std::map<std::string, std::vector<dfl::Detection>> load_detections(
    const std::filesystem::path& path) {
  json doc = load_json_file(path);
  if (!doc.is_array())
    throw dfl::ParseError(path.string() + ": expected a JSON array");
  std::map<std::string, std::vector<dfl::Detection>> out;
  for (size_t i = 0; i < doc.size(); ++i) {
    const json& rec = doc[i];
    if (!rec.is_object() || !rec.contains("image") || !rec.contains("boxes") ||
        !rec["image"].is_string() || !rec["boxes"].is_array())
      throw dfl::ParseError(path.string() + ": record " + std::to_string(i) +
                            " must be {\"image\", \"boxes\"}");
    std::vector<dfl::Detection> dets;
    for (const json& jb : rec["boxes"]) {
      if (!jb.is_array() || jb.size() != 5)
        throw dfl::ParseError(path.string() + ": record " + std::to_string(i) +
                              ": boxes entries must be [x,y,w,h,score]");
      dets.push_back(dfl::Detection{
          dfl::Box{jb[0].get<double>(), jb[1].get<double>(),
                   jb[2].get<double>(), jb[3].get<double>()},
          jb[4].get<double>()});
    }
    out[rec["image"].get<std::string>()] = std::move(dets);
  }
  return out;
}

// Parallel per-image arrays for evaluate_dataset, keyed by manifest order.
struct DatasetArrays {
  std::vector<std::vector<dfl::Detection>> dets;
  std::vector<std::vector<dfl::Box>> gts;
};

DatasetArrays pair_with_manifest(
    const dfl::Manifest& manifest,
    std::map<std::string, std::vector<dfl::Detection>> dets) {
  DatasetArrays out;
  for (const dfl::ImageRecord& r : manifest.records) {
    out.gts.push_back(r.boxes);
    auto it = dets.find(r.image_path);
    if (it == dets.end()) {
      out.dets.emplace_back();
    } else {
      out.dets.push_back(std::move(it->second));
      dets.erase(it);
    }
  }
  if (!dets.empty())
    throw dfl::ParseError("detections reference image '" +
                          dets.begin()->first + "' absent from the manifest");
  return out;
}

dfl::PixelImage load_image_padded(const dfl::Manifest& m,
                                  const dfl::ImageRecord& rec) {
  return dfl::pad_to_multiple(dfl::read_ppm(m.base_dir / rec.image_path), 32);
}

int cmd_synth(const dfl::RunConfig& cfg, const std::string& out_dir) {
  std::filesystem::path manifest = dfl::synth_generate(cfg.synth(), out_dir);
  echo_config(cfg, out_dir);
  std::cout << manifest.string() << "\n";
  return 0;
}

int cmd_tile(const dfl::RunConfig& cfg, const std::string& manifest_path,
             const std::string& out_dir) {
  dfl::Manifest m = dfl::load_manifest(manifest_path, true);
  dfl::TileConfig tc = cfg.tile();

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw dfl::IoFailure("cannot create " + out_dir);

  std::vector<dfl::ImageRecord> out_records;
  for (const dfl::ImageRecord& rec : m.records) {
    dfl::PixelImage img = dfl::read_ppm(m.base_dir / rec.image_path);
    std::vector<dfl::Tile> tiles =
        dfl::tile_image(rec, tc.width, tc.height, tc.keep_rule);
    int nx = (rec.width + tc.width - 1) / tc.width;
    std::string stem = std::filesystem::path(rec.image_path).stem().string();
    for (size_t ti = 0; ti < tiles.size(); ++ti) {
      const dfl::Tile& t = tiles[ti];
      std::string name = stem + "_r" + std::to_string(ti / nx) + "_c" +
                         std::to_string(ti % nx) + ".ppm";
      dfl::write_ppm(dfl::crop(img, (int)t.x0, (int)t.y0, t.width, t.height),
                     std::filesystem::path(out_dir) / name);
      dfl::ImageRecord orec;
      orec.image_path = name;
      orec.width = t.width;
      orec.height = t.height;
      orec.boxes = t.boxes;
      out_records.push_back(std::move(orec));
    }
  }
  std::filesystem::path out_manifest =
      std::filesystem::path(out_dir) / "manifest.json";
  dfl::save_manifest(out_records, out_manifest);
  echo_config(cfg, out_dir);
  std::cout << out_manifest.string() << "\n";
  return 0;
}

int cmd_train(const dfl::RunConfig& cfg, const std::string& manifest_path,
              const std::string& out_dir) {
  dfl::Manifest m = dfl::load_manifest(manifest_path, true);
  if (m.records.empty())
    throw dfl::ParseError(manifest_path + ": manifest has no images");

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw dfl::IoFailure("cannot create " + out_dir);

  dfl::DetectorConfig dcfg = cfg.detector();
  dfl::Detector det(dcfg, cfg.sampler(), cfg.focal());

  std::string loss_csv = "step,loss\n";
  for (int step = 0; step < dcfg.steps; ++step) {
    const dfl::ImageRecord& rec = m.records[step % m.records.size()];
    dfl::PixelImage img = load_image_padded(m, rec);
    double loss = det.train_step(img, rec.boxes);
    loss_csv += std::to_string(step) + "," + fmt_shortest(loss) + "\n";
    if (step % 10 == 0)
      std::cerr << "step " << step << " loss " << loss << "\n";
  }

  std::filesystem::path out(out_dir);
  dfl::write_text_atomic(out / "loss.csv", loss_csv);
  std::filesystem::path ckpt = out / "checkpoint.dflw";
  dfl::save_checkpoint(ckpt, det.params().to_records());
  echo_config(cfg, out);
  std::cout << ckpt.string() << "\n";
  return 0;
}

int cmd_detect(const dfl::RunConfig& cfg, const std::string& checkpoint,
               const std::string& manifest_path, const std::string& out_file,
               bool tiled) {
  dfl::Manifest m = dfl::load_manifest(manifest_path, true);
  dfl::Detector det(cfg.detector(), cfg.sampler(), cfg.focal());
  det.params().load_records(dfl::load_checkpoint(checkpoint));
  dfl::TileConfig tc = cfg.tile();

  json doc = json::array();
  for (const dfl::ImageRecord& rec : m.records) {
    std::vector<dfl::Detection> dets;
    if (tiled) {
      dfl::PixelImage img = dfl::read_ppm(m.base_dir / rec.image_path);
      dets = dfl::detect_tiled(det, img, tc.width, tc.height);
    } else {
      dets = det.detect(load_image_padded(m, rec));
    }
    json boxes = json::array();
    for (const dfl::Detection& d : dets)
      boxes.push_back({d.box.x, d.box.y, d.box.w, d.box.h, d.score});
    doc.push_back({{"image", rec.image_path}, {"boxes", std::move(boxes)}});
  }
  dfl::write_text_atomic(out_file, doc.dump(2) + "\n");
  std::cout << out_file << "\n";
  return 0;
}

int cmd_eval(const std::string& detections_path,
             const std::string& manifest_path, const std::string& counts_path,
             double iou_thr, const std::string& out_file) {
  int tp = 0, fp = 0, fn = 0;
  if (!counts_path.empty()) {
    json doc = load_json_file(counts_path);
    for (const char* key : {"tp", "fp", "fn"})
      if (!doc.contains(key) || !doc[key].is_number_integer())
        throw dfl::ParseError(counts_path + ": expected integer field '" +
                              std::string(key) + "'");
    tp = doc["tp"].get<int>();
    fp = doc["fp"].get<int>();
    fn = doc["fn"].get<int>();
  } else {
    dfl::Manifest m = dfl::load_manifest(manifest_path, false);
    DatasetArrays data =
        pair_with_manifest(m, load_detections(detections_path));
    for (size_t i = 0; i < data.dets.size(); ++i) {
      dfl::MatchResult r =
          dfl::match_detections(data.dets[i], data.gts[i], iou_thr);
      tp += r.tp;
      fp += r.fp;
      fn += r.fn;
    }
  }

  dfl::MatchResult total;
  total.tp = tp;
  total.fp = fp;
  total.fn = fn;
  dfl::Rates r = dfl::prf1(total);
  std::cout << "RR " << fmt_fixed6(r.rr) << "  PR " << fmt_fixed6(r.pr)
            << "  F1 " << fmt_fixed6(r.f1) << "\n";

  if (!out_file.empty()) {
    json report = {{"iou", iou_thr}, {"tp", tp},    {"fp", fp},
                   {"fn", fn},       {"rr", r.rr},  {"pr", r.pr},
                   {"f1", r.f1}};
    dfl::write_text_atomic(out_file, report.dump(2) + "\n");
  }
  return 0;
}

int cmd_curves(const std::string& detections_path,
               const std::string& manifest_path, const std::string& out_csv,
               const std::string& out_svg) {
  dfl::Manifest m = dfl::load_manifest(manifest_path, false);
  DatasetArrays data = pair_with_manifest(m, load_detections(detections_path));
  std::vector<double> thresholds = dfl::default_iou_thresholds();
  dfl::EvalReport report =
      dfl::evaluate_dataset(data.dets, data.gts, 0.3, thresholds);
  dfl::write_curve_csv(report, out_csv);
  dfl::write_curve_svg(report, out_svg);
  std::cout << out_csv << "\n" << out_svg << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage vehicle detector on synthetic aerial-style scenes"};
  app.require_subcommand(1);

  CommonOpts synth_common, tile_common, train_common, detect_common;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  add_common(synth, synth_common);
  std::string synth_out;
  uint64_t synth_seed = 0;
  int synth_n = 0;
  synth->add_option("--out", synth_out, "Output directory")->required();
  auto* synth_seed_opt =
      synth->add_option("--seed", synth_seed, "Generator seed (synth.seed)");
  auto* synth_n_opt =
      synth->add_option("--n", synth_n, "Image count (synth.n_images)");

  auto* tile = app.add_subcommand("tile", "Tile large frames into patches");
  add_common(tile, tile_common);
  std::string tile_manifest, tile_out;
  int tile_w = 0, tile_h = 0;
  tile->add_option("--manifest", tile_manifest, "Input manifest")->required();
  tile->add_option("--out", tile_out, "Output directory")->required();
  auto* tile_w_opt = tile->add_option("--tile-w", tile_w, "Tile width (tile.width)");
  auto* tile_h_opt = tile->add_option("--tile-h", tile_h, "Tile height (tile.height)");

  auto* train = app.add_subcommand("train", "Train a detector");
  add_common(train, train_common);
  std::string train_manifest, train_out;
  uint64_t train_seed = 0;
  int train_steps = 0;
  train->add_option("--manifest", train_manifest, "Training manifest")->required();
  train->add_option("--out", train_out, "Output directory")->required();
  auto* train_seed_opt = train->add_option(
      "--seed", train_seed, "Seed (detector.seed and sampler.seed)");
  auto* train_steps_opt =
      train->add_option("--steps", train_steps, "Step count (detector.steps)");

  auto* detect = app.add_subcommand("detect", "Run inference over a manifest");
  add_common(detect, detect_common);
  std::string det_ckpt, det_manifest, det_out;
  bool det_tiled = false;
  detect->add_option("--checkpoint", det_ckpt, "DFLW1 checkpoint")->required();
  detect->add_option("--manifest", det_manifest, "Image manifest")->required();
  detect->add_option("--out", det_out, "Detections JSON path")->required();
  detect->add_flag("--tiled", det_tiled,
                   "Tile each frame with tile.width x tile.height before detection");

  auto* eval = app.add_subcommand("eval", "Score detections against ground truth");
  std::string eval_dets, eval_manifest, eval_counts, eval_out;
  double eval_iou = 0.3;
  eval->add_option("--detections", eval_dets, "Detections JSON");
  eval->add_option("--manifest", eval_manifest, "Ground-truth manifest");
  eval->add_option("--counts", eval_counts, "JSON {\"tp\",\"fp\",\"fn\"} instead of matching");
  eval->add_option("--iou", eval_iou, "Matching IoU threshold")
      ->capture_default_str();
  eval->add_option("--out", eval_out, "Report JSON path");

  auto* curves = app.add_subcommand("curves", "Write IoU-sweep CSV and SVG");
  std::string cur_dets, cur_manifest, cur_csv, cur_svg;
  curves->add_option("--detections", cur_dets, "Detections JSON")->required();
  curves->add_option("--manifest", cur_manifest, "Ground-truth manifest")->required();
  curves->add_option("--out-csv", cur_csv, "CSV output path")->required();
  curves->add_option("--out-svg", cur_svg, "SVG output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }

  try {
    if (synth->parsed()) {
      dfl::RunConfig cfg = resolve_config(synth_common);
      if (*synth_seed_opt) cfg.set_uint("synth.seed", synth_seed);
      if (*synth_n_opt) cfg.set_int("synth.n_images", synth_n);
      return cmd_synth(cfg, synth_out);
    }
    if (tile->parsed()) {
      dfl::RunConfig cfg = resolve_config(tile_common);
      if (*tile_w_opt) cfg.set_int("tile.width", tile_w);
      if (*tile_h_opt) cfg.set_int("tile.height", tile_h);
      return cmd_tile(cfg, tile_manifest, tile_out);
    }
    if (train->parsed()) {
      dfl::RunConfig cfg = resolve_config(train_common);
      if (*train_seed_opt) {
        cfg.set_uint("detector.seed", train_seed);
        cfg.set_uint("sampler.seed", train_seed);
      }
      if (*train_steps_opt) cfg.set_int("detector.steps", train_steps);
      return cmd_train(cfg, train_manifest, train_out);
    }
    if (detect->parsed()) {
      dfl::RunConfig cfg = resolve_config(detect_common);
      return cmd_detect(cfg, det_ckpt, det_manifest, det_out, det_tiled);
    }
    if (eval->parsed()) {
      if (!(eval_iou > 0 && eval_iou < 1)) {
        std::cerr << "--iou must lie strictly between 0 and 1\n";
        return 1;
      }
      if (eval_counts.empty() && (eval_dets.empty() || eval_manifest.empty())) {
        std::cerr << "eval needs either --counts or both --detections and --manifest\n";
        return 1;
      }
      return cmd_eval(eval_dets, eval_manifest, eval_counts, eval_iou, eval_out);
    }
    if (curves->parsed())
      return cmd_curves(cur_dets, cur_manifest, cur_csv, cur_svg);
  } catch (const dfl::Error& e) {
    std::cerr << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
