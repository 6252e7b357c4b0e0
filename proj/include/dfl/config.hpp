#pragma once

#include <filesystem>
#include <string>

#include "dfl/assigner.hpp"
#include "dfl/datapipe.hpp"
#include "dfl/detnet.hpp"
#include "dfl/losses.hpp"
#include "json.hpp"

namespace dfl {

struct TileConfig {
  int width = 752;
  int height = 674;
  KeepRule keep_rule = KeepRule::center;
};

// Flat dotted-key configuration shared by every CLI command. Unknown keys
// are a hard error; the resolved form serializes to canonical JSON (sorted
// keys) and reparses to the identical document.
class RunConfig {
 public:
  RunConfig();

  static RunConfig from_file(const std::filesystem::path& path);
  static RunConfig from_json_text(const std::string& text,
                                  const std::string& origin = "<string>");

  // key=value with the value parsed as a JSON scalar; bare words that are
  // not valid JSON are taken as strings.
  void set(const std::string& key, const std::string& value);

  // DFL_SEED, when present, replaces detector.seed, sampler.seed and
  // synth.seed. Callers apply flags afterwards, so flags win.
  void apply_env();

  std::string to_json() const;

  FocalConfig focal() const;
  SamplerConfig sampler() const;
  DetectorConfig detector() const;
  SynthConfig synth() const;
  TileConfig tile() const;

  bool get_bool(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  uint64_t get_uint(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::string get_string(const std::string& key) const;

  void set_uint(const std::string& key, uint64_t v);
  void set_int(const std::string& key, int64_t v);

 private:
  void merge(const nlohmann::json& doc, const std::string& origin);
  nlohmann::json values_;
};

}  // namespace dfl
