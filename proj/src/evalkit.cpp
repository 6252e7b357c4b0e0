#include "dfl/evalkit.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <string>

#include "dfl/errors.hpp"

namespace dfl {

MatchResult match_detections(std::span<const Detection> dets,
                             std::span<const Box> gts, double iou_threshold) {
  MatchResult m;
  m.det_is_tp.assign(dets.size(), false);
  m.det_gt.assign(dets.size(), -1);
  m.gt_matched.assign(gts.size(), false);

  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return a < b;
  });

  for (size_t i : order) {
    double best = -1;
    size_t best_g = gts.size();
    for (size_t g = 0; g < gts.size(); ++g) {
      if (m.gt_matched[g]) continue;
      double v = iou(dets[i].box, gts[g]);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best_g < gts.size() && best >= iou_threshold) {
      m.gt_matched[best_g] = true;
      m.det_is_tp[i] = true;
      m.det_gt[i] = (int)best_g;
      ++m.tp;
    } else {
      ++m.fp;
    }
  }
  m.fn = (int)gts.size() - m.tp;
  return m;
}

Rates prf1(const MatchResult& m) {
  Rates r;
  double det = m.tp + m.fn;
  double pos = m.tp + m.fp;
  r.rr = det > 0 ? m.tp / det : 0.0;
  r.pr = pos > 0 ? m.tp / pos : 0.0;
  r.f1 = (r.rr + r.pr) > 0 ? 2.0 * r.rr * r.pr / (r.rr + r.pr) : 0.0;
  return r;
}

std::vector<CurveRow> iou_sweep(std::span<const Detection> dets,
                                std::span<const Box> gts,
                                std::span<const double> thresholds) {
  for (size_t i = 1; i < thresholds.size(); ++i)
    if (!(thresholds[i] > thresholds[i - 1]))
      throw InvalidThresholds("iou_sweep thresholds must increase");
  std::vector<CurveRow> rows;
  rows.reserve(thresholds.size());
  for (double t : thresholds) {
    Rates r = prf1(match_detections(dets, gts, t));
    rows.push_back(CurveRow{t, r.rr, r.pr});
  }
  return rows;
}

std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 1; i <= 19; ++i) t.push_back(i * 0.05);
  return t;
}

EvalReport evaluate_dataset(std::span<const std::vector<Detection>> dets,
                            std::span<const std::vector<Box>> gts,
                            double operating_iou,
                            std::span<const double> thresholds) {
  if (dets.size() != gts.size())
    throw InvalidThresholds("evaluate_dataset: image count mismatch");

  auto totals = [&](double thr) {
    MatchResult sum;
    for (size_t i = 0; i < dets.size(); ++i) {
      MatchResult m = match_detections(dets[i], gts[i], thr);
      sum.tp += m.tp;
      sum.fp += m.fp;
      sum.fn += m.fn;
    }
    return sum;
  };

  EvalReport report;
  report.operating_iou = operating_iou;
  Rates op = prf1(totals(operating_iou));
  report.rr = op.rr;
  report.pr = op.pr;
  report.f1 = op.f1;
  for (double t : thresholds) {
    Rates r = prf1(totals(t));
    report.curve.push_back(CurveRow{t, r.rr, r.pr});
  }
  return report;
}

namespace {

// Locale-independent fixed formatting.
std::string fmt_fixed(double v, int precision) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed,
                           precision);
  return std::string(buf, res.ptr);
}

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

}  // namespace

void write_curve_csv(const EvalReport& report,
                     const std::filesystem::path& path) {
  if (report.curve.empty()) throw IoFailure("empty curve");
  std::string out = "iou,recall,precision\n";
  for (const CurveRow& r : report.curve) {
    out += fmt_fixed(r.iou, 6);
    out += ",";
    out += fmt_fixed(r.rr, 6);
    out += ",";
    out += fmt_fixed(r.pr, 6);
    out += "\n";
  }
  write_file_atomic(path, out);
}

void write_curve_svg(const EvalReport& report,
                     const std::filesystem::path& path) {
  if (report.curve.empty()) throw IoFailure("empty curve");

  const double W = 640, H = 480, ml = 60, mr = 20, mt = 20, mb = 45;
  const double pw = W - ml - mr, ph = H - mt - mb;
  auto px = [&](double iou_v) { return ml + iou_v * pw; };
  auto py = [&](double rate) { return mt + (1.0 - rate) * ph; };

  auto polyline = [&](auto get, const char* color) {
    std::string s = "  <polyline fill=\"none\" stroke=\"";
    s += color;
    s += "\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < report.curve.size(); ++i) {
      if (i) s += " ";
      s += fmt_fixed(px(report.curve[i].iou), 2) + "," +
           fmt_fixed(py(get(report.curve[i])), 2);
    }
    s += "\"/>\n";
    return s;
  };

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" "
         "height=\"480\" viewBox=\"0 0 640 480\">\n";
  svg += "  <rect width=\"640\" height=\"480\" fill=\"white\"/>\n";
  // axes
  svg += "  <line x1=\"" + fmt_fixed(ml, 2) + "\" y1=\"" + fmt_fixed(mt, 2) +
         "\" x2=\"" + fmt_fixed(ml, 2) + "\" y2=\"" + fmt_fixed(H - mb, 2) +
         "\" stroke=\"black\"/>\n";
  svg += "  <line x1=\"" + fmt_fixed(ml, 2) + "\" y1=\"" + fmt_fixed(H - mb, 2) +
         "\" x2=\"" + fmt_fixed(W - mr, 2) + "\" y2=\"" +
         fmt_fixed(H - mb, 2) + "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 10; i += 2) {
    double v = i / 10.0;
    svg += "  <text x=\"" + fmt_fixed(px(v) - 8, 2) + "\" y=\"" +
           fmt_fixed(H - mb + 18, 2) + "\" font-size=\"12\">" +
           fmt_fixed(v, 1) + "</text>\n";
    svg += "  <text x=\"" + fmt_fixed(ml - 32, 2) + "\" y=\"" +
           fmt_fixed(py(v) + 4, 2) + "\" font-size=\"12\">" + fmt_fixed(v, 1) +
           "</text>\n";
  }
  svg += "  <text x=\"300\" y=\"470\" font-size=\"13\">IoU threshold</text>\n";
  svg += polyline([](const CurveRow& r) { return r.rr; }, "#2a7e2a");
  svg += polyline([](const CurveRow& r) { return r.pr; }, "#c23b3b");
  svg += "  <text x=\"540\" y=\"35\" font-size=\"13\" fill=\"#2a7e2a\">"
         "recall</text>\n";
  svg += "  <text x=\"540\" y=\"52\" font-size=\"13\" fill=\"#c23b3b\">"
         "precision</text>\n";
  svg += "</svg>\n";

  write_file_atomic(path, svg);
}

}  // namespace dfl
