#pragma once

#include <array>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "geomamba/losses.hpp"
#include "geomamba/model.hpp"
#include "geomamba/png_io.hpp"
#include "geomamba/synthdata.hpp"

namespace geomamba {

/// Invalid user input (bad flag, config key or value); the CLI maps it to exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every knob of a run. Serialized as `key = value` lines; the same keys are
/// accepted from config files and the command line.
struct RunConfig {
  // data
  std::string data_dir = "data";
  std::size_t image_size = 64;
  std::size_t train_count = 384;
  std::size_t query_count = 128;
  std::size_t gallery_count = 384;
  double rotation_range_deg = 20.0;
  double speckle_looks = 4.0;
  std::size_t clutter = 6;
  bool pseudo_from_preprocessed = true;
  double sobel_quantile = 0.85;
  double harris_quantile = 0.99;

  // schedule
  std::uint64_t seed = 1;
  std::size_t epochs = 20;
  std::size_t p_classes = 8;
  std::size_t k_instances = 2;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double warmup_fraction = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t checkpoint_every = 0;  // epochs; 0 = only the final checkpoint
  bool deterministic = true;

  // losses and variants
  losses::LossWeights loss{0.1};
  bool use_gfi = true;
  bool use_gcc = true;
  bool freeze_prior = false;
  double gfi_self_pair_prob = 0.5;

  // model
  std::array<std::size_t, 4> channels{16, 32, 64, 128};
  std::array<std::size_t, 4> strides{4, 2, 2, 2};
  std::array<std::size_t, 4> blocks{1, 1, 1, 1};
  std::size_t embed_dim = 1024;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t ssm_state = 8;
  bool separate_streams = true;

  // evaluation and experiments
  std::string protocol = "all";
  std::size_t eval_block_size = 256;
  std::size_t ranked_dump = 10;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<double> sweep_values{1, 5, 10, 15, 20};

  std::size_t batch_size() const { return p_classes * k_instances * 2; }

  template <class F>
  void visit(F&& f) {
    f("data_dir", data_dir);
    f("image_size", image_size);
    f("train_count", train_count);
    f("query_count", query_count);
    f("gallery_count", gallery_count);
    f("rotation_range_deg", rotation_range_deg);
    f("speckle_looks", speckle_looks);
    f("clutter", clutter);
    f("pseudo_from_preprocessed", pseudo_from_preprocessed);
    f("sobel_quantile", sobel_quantile);
    f("harris_quantile", harris_quantile);
    f("seed", seed);
    f("epochs", epochs);
    f("p_classes", p_classes);
    f("k_instances", k_instances);
    f("lr", lr);
    f("weight_decay", weight_decay);
    f("warmup_fraction", warmup_fraction);
    f("beta1", beta1);
    f("beta2", beta2);
    f("adam_eps", adam_eps);
    f("checkpoint_every", checkpoint_every);
    f("deterministic", deterministic);
    f("lambda_tri", loss.lambda_tri);
    f("margin", loss.margin);
    f("lambda_gcc", loss.lambda_gcc);
    f("lambda_deep", loss.lambda_deep);
    f("lambda_shallow", loss.lambda_shallow);
    f("focal_alpha", loss.focal_alpha);
    f("focal_gamma", loss.focal_gamma);
    f("label_smoothing", loss.label_smoothing);
    f("use_gfi", use_gfi);
    f("use_gcc", use_gcc);
    f("freeze_prior", freeze_prior);
    f("gfi_self_pair_prob", gfi_self_pair_prob);
    f("channels", channels);
    f("strides", strides);
    f("blocks", blocks);
    f("embed_dim", embed_dim);
    f("heads", heads);
    f("mlp_ratio", mlp_ratio);
    f("ssm_state", ssm_state);
    f("separate_streams", separate_streams);
    f("protocol", protocol);
    f("eval_block_size", eval_block_size);
    f("ranked_dump", ranked_dump);
    f("seeds", seeds);
    f("sweep_values", sweep_values);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<RunConfig*>(this)->visit([&](const char* k, const auto& v) { f(k, v); });
  }

  void set(const std::string& key, const std::string& value);
  std::string to_text() const;
  void validate() const;

  model::ModelConfig model_config(std::size_t num_classes) const {
    model::ModelConfig m;
    m.stages.channels = channels;
    m.stages.strides = strides;
    m.stages.blocks = blocks;
    m.image_size = image_size;
    m.num_classes = num_classes;
    m.embed_dim = embed_dim;
    m.heads = heads;
    m.mlp_ratio = mlp_ratio;
    m.ssm_state = ssm_state;
    m.separate_streams = separate_streams;
    return m;
  }

  synth::RenderParams render_params() const {
    synth::RenderParams p;
    p.image_size = image_size;
    p.rotation_range_deg = rotation_range_deg;
    p.speckle_looks = speckle_looks;
    p.clutter = clutter;
    return p;
  }

  bool operator==(const RunConfig& o) const { return to_text() == o.to_text(); }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::stringstream ss(s);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw UsageError("config key '" + key + "': cannot parse '" + text + "'");
  return v;
}

inline void parse_into(const std::string&, const std::string& text, std::string& v) { v = text; }
inline void parse_into(const std::string& key, const std::string& text, double& v) { v = parse_number<double>(key, text); }
template <class T>
  requires(std::is_unsigned_v<T> && !std::is_same_v<T, bool>)
void parse_into(const std::string& key, const std::string& text, T& v) {
  v = parse_number<T>(key, text);
}
inline void parse_into(const std::string& key, const std::string& text, bool& v) {
  if (text == "true" || text == "1" || text == "yes") v = true;
  else if (text == "false" || text == "0" || text == "no") v = false;
  else throw UsageError("config key '" + key + "': expected true/false, got '" + text + "'");
}
template <class T, std::size_t N>
void parse_into(const std::string& key, const std::string& text, std::array<T, N>& v) {
  const auto items = split_list(text);
  if (items.size() != N) throw UsageError("config key '" + key + "': expected " + std::to_string(N) + " comma-separated values");
  for (std::size_t i = 0; i < N; ++i) parse_into(key, items[i], v[i]);
}
template <class T>
void parse_into(const std::string& key, const std::string& text, std::vector<T>& v) {
  v.clear();
  for (const auto& item : split_list(text)) {
    T x{};
    parse_into(key, item, x);
    v.push_back(x);
  }
  if (v.empty()) throw UsageError("config key '" + key + "': empty list");
}

inline std::string format(const std::string& v) { return v; }
inline std::string format(bool v) { return v ? "true" : "false"; }
inline std::string format(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
template <class T>
  requires(std::is_unsigned_v<T> && !std::is_same_v<T, bool>)
std::string format(T v) {
  return std::to_string(v);
}
template <class Seq>
  requires requires(const Seq& s) { s.begin(); s.size(); }
std::string format(const Seq& seq) {
  std::string out;
  for (const auto& x : seq) {
    if (!out.empty()) out += ",";
    out += format(x);
  }
  return out;
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  bool found = false;
  visit([&](const char* k, auto& v) {
    if (key == k) {
      detail::parse_into(key, detail::trim(value), v);
      found = true;
    }
  });
  if (!found) throw UsageError("unknown config key '" + key + "'");
}

inline std::string RunConfig::to_text() const {
  std::string out;
  visit([&](const char* k, const auto& v) { out += std::string(k) + " = " + detail::format(v) + "\n"; });
  return out;
}

inline void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw UsageError("invalid config: " + m); };
  if (!(lr >= 0)) fail("lr must be non-negative");
  if (epochs == 0) fail("epochs must be positive");
  if (p_classes < 2) fail("p_classes must be at least 2 (triplets need negatives)");
  if (k_instances < 1) fail("k_instances must be positive");
  if (image_size == 0 || image_size % 32 != 0) fail("image_size must be a positive multiple of 32");
  if (warmup_fraction < 0 || warmup_fraction >= 1) fail("warmup_fraction must lie in [0,1)");
  if (gfi_self_pair_prob < 0 || gfi_self_pair_prob > 1) fail("gfi_self_pair_prob must lie in [0,1]");
  if (sobel_quantile <= 0 || sobel_quantile >= 1 || harris_quantile <= 0 || harris_quantile >= 1)
    fail("quantiles must lie in (0,1)");
  if (eval_block_size == 0) fail("eval_block_size must be positive");
  try {
    loss.validate();
    model_config(synth::kNumCategories).stages.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

/// Applies `key = value` lines; '#' starts a comment.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "config") {
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    cfg.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  apply_config_text(base, ss.str(), path);
  return base;
}

inline RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  apply_config_text(cfg, text);
  return cfg;
}

}  // namespace geomamba
