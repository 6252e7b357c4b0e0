#include "dfl/config.hpp"

#include <cstdlib>
#include <fstream>

#include "dfl/errors.hpp"

namespace dfl {

using nlohmann::json;

RunConfig::RunConfig() {
  values_ = json{
      {"focal.gamma", 2.0},
      {"focal.prob_epsilon", 1e-7},
      {"sampler.rpn_pos", 64},
      {"sampler.rpn_neg", 64},
      {"sampler.cls_neg_per_pos", 3},
      {"sampler.cls_batch", 128},
      {"sampler.seed", 1},
      {"sampler.pos_iou", 0.7},
      {"sampler.neg_iou", 0.1},
      {"sampler.cls_pos_iou", 0.7},
      {"sampler.cls_neg_iou", 0.1},
      {"sampler.force_gt_match", false},
      {"detector.pre_nms_top_n", 1000},
      {"detector.post_nms_top_n", 100},
      {"detector.proposal_nms_iou", 0.7},
      {"detector.final_nms_iou", 0.3},
      {"detector.score_thresh", 0.5},
      {"detector.roi_pool_size", 7},
      {"detector.learning_rate", 1e-3},
      {"detector.momentum", 0.9},
      {"detector.steps", 200},
      {"detector.seed", 1},
      {"detector.use_focal_rpn", true},
      {"detector.use_focal_cls", true},
      {"detector.use_skip", true},
      {"detector.lambda_rpn", 15.0},
      {"detector.lambda_cls", 1.0},
      {"synth.seed", 1},
      {"synth.n_images", 4},
      {"synth.img_w", 736},
      {"synth.img_h", 672},
      {"synth.vehicles_min", 2},
      {"synth.vehicles_max", 5},
      {"synth.distractor_rate", 0.5},
      {"tile.width", 752},
      {"tile.height", 674},
      {"tile.keep_rule", "center"},
  };
}

void RunConfig::merge(const json& doc, const std::string& origin) {
  if (!doc.is_object())
    throw ParseError(origin + ": config must be a JSON object");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (!values_.contains(it.key()))
      throw ParseError(origin + ": unknown config key '" + it.key() + "'");
    const json& cur = values_[it.key()];
    const json& nv = it.value();
    bool ok = (cur.is_boolean() && nv.is_boolean()) ||
              (cur.is_string() && nv.is_string()) ||
              (cur.is_number() && nv.is_number());
    if (!ok)
      throw ParseError(origin + ": key '" + it.key() + "' expects a " +
                       std::string(cur.type_name()) + ", got " +
                       std::string(nv.type_name()));
    values_[it.key()] = nv;
  }
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoFailure("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  RunConfig cfg;
  cfg.merge(doc, path.string());
  return cfg;
}

RunConfig RunConfig::from_json_text(const std::string& text,
                                    const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(origin + ": " + e.what());
  }
  RunConfig cfg;
  cfg.merge(doc, origin);
  return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  json v;
  try {
    v = json::parse(value);
  } catch (const json::parse_error&) {
    v = value;  // bare word, treat as string
  }
  merge(json{{key, v}}, "--set " + key);
}

void RunConfig::apply_env() {
  const char* env = std::getenv("DFL_SEED");
  if (!env) return;
  char* end = nullptr;
  unsigned long long seed = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0')
    throw ParseError(std::string("DFL_SEED is not an unsigned integer: '") +
                     env + "'");
  set_uint("detector.seed", seed);
  set_uint("sampler.seed", seed);
  set_uint("synth.seed", seed);
}

std::string RunConfig::to_json() const {
  return values_.dump(2) + "\n";  // nlohmann objects keep sorted key order
}

bool RunConfig::get_bool(const std::string& key) const {
  if (!values_.contains(key) || !values_[key].is_boolean())
    throw ParseError("config key '" + key + "' is not a boolean");
  return values_[key].get<bool>();
}

int64_t RunConfig::get_int(const std::string& key) const {
  if (!values_.contains(key) || !values_[key].is_number_integer())
    throw ParseError("config key '" + key + "' is not an integer");
  return values_[key].get<int64_t>();
}

uint64_t RunConfig::get_uint(const std::string& key) const {
  if (!values_.contains(key) || !values_[key].is_number_integer())
    throw ParseError("config key '" + key + "' is not an integer");
  int64_t v = values_[key].get<int64_t>();
  if (values_[key].is_number_unsigned())
    return values_[key].get<uint64_t>();
  if (v < 0) throw ParseError("config key '" + key + "' must be >= 0");
  return (uint64_t)v;
}

double RunConfig::get_double(const std::string& key) const {
  if (!values_.contains(key) || !values_[key].is_number())
    throw ParseError("config key '" + key + "' is not a number");
  return values_[key].get<double>();
}

std::string RunConfig::get_string(const std::string& key) const {
  if (!values_.contains(key) || !values_[key].is_string())
    throw ParseError("config key '" + key + "' is not a string");
  return values_[key].get<std::string>();
}

void RunConfig::set_uint(const std::string& key, uint64_t v) {
  if (!values_.contains(key))
    throw ParseError("unknown config key '" + key + "'");
  values_[key] = v;
}

void RunConfig::set_int(const std::string& key, int64_t v) {
  if (!values_.contains(key))
    throw ParseError("unknown config key '" + key + "'");
  values_[key] = v;
}

FocalConfig RunConfig::focal() const {
  FocalConfig f;
  f.gamma = get_double("focal.gamma");
  f.prob_epsilon = get_double("focal.prob_epsilon");
  if (f.gamma < 0) throw InvalidThresholds("focal.gamma must be >= 0");
  if (!(f.prob_epsilon > 0 && f.prob_epsilon < 0.5))
    throw InvalidThresholds("focal.prob_epsilon must lie in (0, 0.5)");
  return f;
}

SamplerConfig RunConfig::sampler() const {
  SamplerConfig s;
  s.rpn_pos = (int)get_int("sampler.rpn_pos");
  s.rpn_neg = (int)get_int("sampler.rpn_neg");
  s.cls_neg_per_pos = (int)get_int("sampler.cls_neg_per_pos");
  s.cls_batch = (int)get_int("sampler.cls_batch");
  s.seed = get_uint("sampler.seed");
  s.pos_iou = get_double("sampler.pos_iou");
  s.neg_iou = get_double("sampler.neg_iou");
  s.cls_pos_iou = get_double("sampler.cls_pos_iou");
  s.cls_neg_iou = get_double("sampler.cls_neg_iou");
  s.force_gt_match = get_bool("sampler.force_gt_match");
  if (s.rpn_pos < 1 || s.rpn_neg < 1 || s.cls_neg_per_pos < 1 || s.cls_batch < 1)
    throw InvalidThresholds("sampler counts must be >= 1");
  return s;
}

DetectorConfig RunConfig::detector() const {
  DetectorConfig d;
  d.pre_nms_top_n = (int)get_int("detector.pre_nms_top_n");
  d.post_nms_top_n = (int)get_int("detector.post_nms_top_n");
  d.proposal_nms_iou = get_double("detector.proposal_nms_iou");
  d.final_nms_iou = get_double("detector.final_nms_iou");
  d.score_thresh = get_double("detector.score_thresh");
  d.roi_pool_size = (int)get_int("detector.roi_pool_size");
  d.learning_rate = get_double("detector.learning_rate");
  d.momentum = get_double("detector.momentum");
  d.steps = (int)get_int("detector.steps");
  d.seed = get_uint("detector.seed");
  d.use_focal_rpn = get_bool("detector.use_focal_rpn");
  d.use_focal_cls = get_bool("detector.use_focal_cls");
  d.use_skip = get_bool("detector.use_skip");
  d.lambda_rpn = get_double("detector.lambda_rpn");
  d.lambda_cls = get_double("detector.lambda_cls");
  for (double t : {d.proposal_nms_iou, d.final_nms_iou, d.score_thresh})
    if (!(t > 0 && t < 1))
      throw InvalidThresholds("detector IoU/score thresholds must lie in (0, 1)");
  if (d.roi_pool_size < 1)
    throw InvalidThresholds("detector.roi_pool_size must be >= 1");
  return d;
}

SynthConfig RunConfig::synth() const {
  SynthConfig s;
  s.seed = get_uint("synth.seed");
  s.n_images = (int)get_int("synth.n_images");
  s.img_w = (int)get_int("synth.img_w");
  s.img_h = (int)get_int("synth.img_h");
  s.vehicles_min = (int)get_int("synth.vehicles_min");
  s.vehicles_max = (int)get_int("synth.vehicles_max");
  s.distractor_rate = get_double("synth.distractor_rate");
  return s;
}

TileConfig RunConfig::tile() const {
  TileConfig t;
  t.width = (int)get_int("tile.width");
  t.height = (int)get_int("tile.height");
  std::string rule = get_string("tile.keep_rule");
  if (rule == "center") {
    t.keep_rule = KeepRule::center;
  } else if (rule == "any_overlap") {
    t.keep_rule = KeepRule::any_overlap;
  } else {
    throw ParseError("tile.keep_rule must be 'center' or 'any_overlap', got '" +
                     rule + "'");
  }
  return t;
}

}  // namespace dfl
