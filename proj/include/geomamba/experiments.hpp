#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "geomamba/config.hpp"
#include "geomamba/eval.hpp"
#include "geomamba/svg.hpp"
#include "geomamba/trainer.hpp"

namespace geomamba::experiments {

struct Variant {
  std::string name;  // as written to CSV
  std::string dir;   // run sub-directory stem
  bool use_gfi = false;
  bool use_gcc = false;
};

inline std::vector<Variant> ablation_variants() {
  return {{"baseline", "baseline", false, false},
          {"+GFI", "gfi", true, false},
          {"+GCC", "gcc", false, true},
          {"full", "full", true, true}};
}

inline RunConfig variant_config(const RunConfig& base, const Variant& v, std::uint64_t seed) {
  RunConfig cfg = base;
  cfg.use_gfi = v.use_gfi;
  cfg.use_gcc = v.use_gcc;
  cfg.seed = seed;
  return cfg;
}

/// Picks the metrics of the configured protocol out of a run result.
inline eval::Metrics protocol_metrics(const std::vector<eval::Metrics>& all, const std::string& protocol) {
  const std::string name = eval::protocol_spec(eval::parse_protocol(protocol)).name;
  for (const auto& m : all)
    if (m.protocol == name) return m;
  throw std::invalid_argument("no metrics for protocol '" + name + "'");
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string metric_cells(const eval::Metrics& m) {
  return fmt(m.map) + "," + fmt(m.rank1) + "," + fmt(m.rank3) + "," + fmt(m.rank5);
}

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  eval::Metrics metrics;
  std::string checkpoint_hash;
};

struct VariantSummary {
  std::string variant;
  double mean_map = 0.0, std_map = 0.0;
  double mean_rank1 = 0.0, mean_rank3 = 0.0, mean_rank5 = 0.0;
  std::size_t runs = 0;
};

/// Mean and sample standard deviation per variant, in first-appearance order.
inline std::vector<VariantSummary> summarize(const std::vector<AblationRow>& rows) {
  std::vector<VariantSummary> out;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const VariantSummary& s) { return s.variant == r.variant; });
    if (it == out.end()) {
      out.push_back({r.variant});
      it = out.end() - 1;
    }
    it->mean_map += r.metrics.map;
    it->mean_rank1 += r.metrics.rank1;
    it->mean_rank3 += r.metrics.rank3;
    it->mean_rank5 += r.metrics.rank5;
    ++it->runs;
  }
  for (auto& s : out) {
    const double n = static_cast<double>(s.runs);
    s.mean_map /= n;
    s.mean_rank1 /= n;
    s.mean_rank3 /= n;
    s.mean_rank5 /= n;
    double ss = 0.0;
    for (const auto& r : rows)
      if (r.variant == s.variant) ss += (r.metrics.map - s.mean_map) * (r.metrics.map - s.mean_map);
    s.std_map = s.runs > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  }
  return out;
}

inline const char* ablation_csv_header() { return "variant,seed,mAP,rank1,rank3,rank5,random_mAP,checkpoint_fnv1a"; }

inline void write_ablation(const std::string& out_dir, const std::vector<AblationRow>& rows) {
  namespace fs = std::filesystem;
  const fs::path dir(out_dir);
  std::ofstream f(dir / "ablation.csv");
  if (!f) throw IoError("cannot write '" + (dir / "ablation.csv").string() + "'");
  f << ablation_csv_header() << '\n';
  for (const auto& r : rows)
    f << r.variant << ',' << r.seed << ',' << metric_cells(r.metrics) << ',' << fmt(r.metrics.random_map) << ','
      << r.checkpoint_hash << '\n';

  const auto summary = summarize(rows);
  std::ofstream s(dir / "ablation_summary.csv");
  if (!s) throw IoError("cannot write '" + (dir / "ablation_summary.csv").string() + "'");
  s << "variant,runs,mean_mAP,std_mAP,mean_rank1,mean_rank3,mean_rank5\n";
  std::vector<std::string> labels;
  std::vector<double> means, stds;
  for (const auto& v : summary) {
    s << v.variant << ',' << v.runs << ',' << fmt(v.mean_map) << ',' << fmt(v.std_map) << ',' << fmt(v.mean_rank1) << ','
      << fmt(v.mean_rank3) << ',' << fmt(v.mean_rank5) << '\n';
    labels.push_back(v.variant);
    means.push_back(v.mean_map);
    stds.push_back(v.std_map);
  }
  svg::write_file((dir / "ablation_map.svg").string(), svg::bar_chart("Ablation: mean mAP over seeds", "mAP", labels, means, stds));
}

/// Trains every variant for every seed in `base.seeds` on the same data;
/// each run lives in `<out>/<variant>_seed<k>/`.
inline std::vector<AblationRow> run_ablation(const RunConfig& base, const train::Dataset& ds, const std::string& out_dir,
                                             const train::RunOptions& ro = {}, const std::vector<Variant>& variants = ablation_variants()) {
  std::filesystem::create_directories(out_dir);
  std::vector<AblationRow> rows;
  for (const auto& v : variants)
    for (auto seed : base.seeds) {
      const RunConfig cfg = variant_config(base, v, seed);
      const std::string run_dir = (std::filesystem::path(out_dir) / (v.dir + "_seed" + std::to_string(seed))).string();
      if (!ro.quiet) std::fprintf(stderr, "[ablate] %s seed %llu -> %s\n", v.name.c_str(), static_cast<unsigned long long>(seed), run_dir.c_str());
      const auto res = train::run_training(cfg, ds, run_dir, ro);
      rows.push_back({v.name, seed, protocol_metrics(res.metrics, cfg.protocol), res.checkpoint_hash});
      write_ablation(out_dir, rows);
    }
  return rows;
}

struct SweepRow {
  double lambda_gcc = 0.0;
  eval::Metrics metrics;
  std::string checkpoint_hash;
};

inline const char* sweep_csv_header() { return "lambda_gcc,mAP,rank1,rank3,rank5,random_mAP,checkpoint_fnv1a"; }

inline std::string lambda_dir(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "lambda_%g", v);
  return buf;
}

inline void write_sweep(const std::string& out_dir, const std::vector<SweepRow>& rows) {
  namespace fs = std::filesystem;
  const fs::path dir(out_dir);
  std::ofstream f(dir / "sweep.csv");
  if (!f) throw IoError("cannot write '" + (dir / "sweep.csv").string() + "'");
  f << sweep_csv_header() << '\n';
  svg::Series map{"mAP", {}, {}}, r1{"Rank-1", {}, {}};
  for (const auto& r : rows) {
    f << fmt(r.lambda_gcc) << ',' << metric_cells(r.metrics) << ',' << fmt(r.metrics.random_map) << ',' << r.checkpoint_hash << '\n';
    map.x.push_back(r.lambda_gcc);
    map.y.push_back(r.metrics.map);
    r1.x.push_back(r.lambda_gcc);
    r1.y.push_back(r.metrics.rank1);
  }
  svg::write_file((dir / "sweep_map.svg").string(), svg::line_chart("GCC weight sweep", "lambda_GCC", "score", {map, r1}));
}

/// One run per value of lambda_GCC (variant flags taken from `base`); at
/// lambda_GCC = 0 the consistency branch is skipped entirely.
inline std::vector<SweepRow> run_sweep(const RunConfig& base, const train::Dataset& ds, const std::string& out_dir,
                                       const train::RunOptions& ro = {}) {
  std::filesystem::create_directories(out_dir);
  std::vector<SweepRow> rows;
  for (double v : base.sweep_values) {
    RunConfig cfg = base;
    cfg.loss.lambda_gcc = v;
    const std::string run_dir = (std::filesystem::path(out_dir) / lambda_dir(v)).string();
    if (!ro.quiet) std::fprintf(stderr, "[sweep] lambda_gcc %g -> %s\n", v, run_dir.c_str());
    const auto res = train::run_training(cfg, ds, run_dir, ro);
    rows.push_back({v, protocol_metrics(res.metrics, cfg.protocol), res.checkpoint_hash});
    write_sweep(out_dir, rows);
  }
  return rows;
}

}  // namespace geomamba::experiments
