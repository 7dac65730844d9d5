// geomamba: data synthesis, preprocessing, training, evaluation, ablations and
// gradient checks from one binary.
//
// Exit codes: 0 ok, 1 usage, 2 numerical failure, 3 IO.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "geomamba/geomamba.hpp"

namespace fs = std::filesystem;
using namespace geomamba;

namespace {

/// Flags shared by the run-oriented subcommands. Each maps onto a RunConfig
/// key; they are applied after the config file, so they take precedence.
struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> image_size, epochs;
  std::optional<double> lambda_gcc;
  std::optional<std::string> protocol, data;
  bool no_gfi = false, no_gcc = false, deterministic = false, resume = false, quiet = false;
  std::vector<std::string> overrides;

  void attach(CLI::App* app, bool training) {
    app->add_option("--config", config_path, "key = value config file (see `geomamba config`)");
    app->add_option("--seed", seed, "seed for every rng stream");
    app->add_option("--image-size", image_size, "image side in pixels (multiple of 32)");
    app->add_option("--data", data, "dataset root holding manifest.jsonl");
    app->add_option("--protocol", protocol, "retrieval protocol: all, o2s or s2o");
    app->add_option("--set", overrides, "extra config override, key=value (repeatable)");
    app->add_flag("--deterministic", deterministic, "single-threaded BLAS for bit-reproducible runs");
    app->add_flag("--quiet", quiet, "suppress progress output");
    if (training) {
      app->add_option("--epochs", epochs, "training epochs");
      app->add_option("--lambda-gcc", lambda_gcc, "weight of the geometric consistency loss");
      app->add_flag("--no-gfi", no_gfi, "disable geometric feature injection");
      app->add_flag("--no-gcc", no_gcc, "disable geometric consistency supervision");
      app->add_flag("--resume", resume, "continue an interrupted run in the same directory");
    }
  }

  RunConfig build() const {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (image_size) cfg.image_size = *image_size;
    if (epochs) cfg.epochs = *epochs;
    if (lambda_gcc) cfg.loss.lambda_gcc = *lambda_gcc;
    if (protocol) {
      eval::parse_protocol(*protocol);
      cfg.protocol = *protocol;
    }
    if (data) cfg.data_dir = *data;
    if (no_gfi) cfg.use_gfi = false;
    if (no_gcc) cfg.use_gcc = false;
    if (deterministic) cfg.deterministic = true;
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
      cfg.set(detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
  }

  train::RunOptions run_options() const { return {resume, quiet}; }
};

train::Dataset load_data(const RunConfig& cfg, bool quiet) {
  const auto t0 = std::chrono::steady_clock::now();
  auto ds = train::load_dataset(cfg.data_dir, cfg);
  if (!quiet)
    std::fprintf(stderr, "[data] %zu samples, %zu classes from %s (%.1fs)\n", ds.samples.size(), ds.num_classes,
                 cfg.data_dir.c_str(), std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return ds;
}

void print_metrics(const std::vector<eval::Metrics>& all) {
  std::printf("%-12s %8s %8s %8s %8s %8s %10s\n", "protocol", "mAP", "rank1", "rank3", "rank5", "queries", "random_mAP");
  for (const auto& m : all)
    std::printf("%-12s %8.4f %8.4f %8.4f %8.4f %8zu %10.4f\n", m.protocol.c_str(), m.map, m.rank1, m.rank3, m.rank5,
                m.queries, m.random_map);
}

void refuse_existing(const fs::path& p, const std::string& what) {
  if (fs::exists(p)) throw UsageError(what + " '" + p.string() + "' already exists; remove it or choose another --out");
}

int cmd_synth(const CommonFlags& f, const std::string& out) {
  RunConfig cfg = f.build();
  const fs::path root = out.empty() ? fs::path(cfg.data_dir) : fs::path(out);
  const fs::path manifest = root / "manifest.jsonl";
  if (fs::exists(manifest)) {
    if (!f.resume) throw UsageError("dataset '" + root.string() + "' already exists; pass --resume to keep it or choose another --out");
    std::printf("dataset %s already present, nothing to do\n", root.string().c_str());
    return 0;
  }
  const synth::SplitCounts counts{cfg.train_count, cfg.query_count, cfg.gallery_count};
  const auto t0 = std::chrono::steady_clock::now();
  const auto records = synth::build_manifest(root.string(), counts, cfg.seed, cfg.render_params());
  std::printf("wrote %zu images and %s (%.1fs)\n", records.size(), manifest.string().c_str(),
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return 0;
}

/// Writes the preprocessed image and its pseudo-label mask for every record.
int cmd_preprocess(const CommonFlags& f, const std::string& out) {
  const RunConfig cfg = f.build();
  if (out.empty()) throw UsageError("preprocess needs --out");
  const fs::path root(out);
  refuse_existing(root / "manifest.jsonl", "output");
  const auto records = synth::read_manifest((fs::path(cfg.data_dir) / "manifest.jsonl").string());
  imgproc::PreprocessParams pp;
  imgproc::HarrisParams hp;
  hp.quantile = cfg.harris_quantile;
  for (const auto& r : records) {
    const fs::path src = fs::path(cfg.data_dir) / r.path, dst = root / r.path;
    fs::create_directories(dst.parent_path());
    const fs::path mask_path = fs::path(dst).replace_filename(dst.stem().string() + "_mask.png");
    if (r.modality == "optical") {
      const auto raw = imgproc::read_rgb_png(src.string());
      const auto pre = imgproc::preprocess_optical(raw, pp);
      imgproc::write_png(dst.string(), pre);
      imgproc::write_png(mask_path.string(),
                         imgproc::sobel_mask(imgproc::luma(cfg.pseudo_from_preprocessed ? pre : raw), cfg.sobel_quantile));
    } else {
      const auto raw = imgproc::read_gray_png(src.string());
      const auto pre = imgproc::preprocess_sar(raw, pp);
      imgproc::write_png(dst.string(), pre);
      imgproc::write_png(mask_path.string(), imgproc::harris_mask(cfg.pseudo_from_preprocessed ? pre : raw, hp));
    }
  }
  synth::write_manifest((root / "manifest.jsonl").string(), records);
  std::printf("preprocessed %zu images into %s\n", records.size(), root.string().c_str());
  return 0;
}

int cmd_train(const CommonFlags& f, const std::string& out) {
  const RunConfig cfg = f.build();
  if (out.empty()) throw UsageError("train needs --out <run dir>");
  const auto ds = load_data(cfg, f.quiet);
  const auto res = train::run_training(cfg, ds, out, f.run_options());
  print_metrics(res.metrics);
  std::printf("steps %zu%s, final checkpoint fnv1a %s\n", res.steps, res.resumed ? " (resumed)" : "", res.checkpoint_hash.c_str());
  return 0;
}

struct EvalSource {
  std::string run, checkpoint;
};

/// Model and config from --checkpoint, or from <run>/checkpoint_final.ckpt.
std::pair<model::GeoMamba, RunConfig> load_trained(const EvalSource& src) {
  const std::string path = !src.checkpoint.empty() ? src.checkpoint : (fs::path(src.run) / "checkpoint_final.ckpt").string();
  if (src.checkpoint.empty() && src.run.empty()) throw UsageError("pass --run <dir> or --checkpoint <file>");
  RunConfig cfg;
  auto net = train::load_model(ckpt::load(path), &cfg);
  return {std::move(net), cfg};
}

int cmd_eval(const CommonFlags& f, const EvalSource& src, const std::string& out, bool from_embeddings) {
  fs::path out_dir = out.empty() ? fs::path(src.run.empty() ? "." : src.run) / "eval" : fs::path(out);
  refuse_existing(out_dir / "metrics.csv", "evaluation output");
  fs::create_directories(out_dir);
  eval::EmbeddingSet query, gallery;
  RunConfig cfg;
  if (from_embeddings) {
    if (src.run.empty()) throw UsageError("--from-embeddings needs --run <dir>");
    const fs::path run(src.run);
    cfg = load_config((run / "config.txt").string());
    query = eval::read_embeddings((run / "query_embeddings.bin").string(), (run / "query_embeddings.jsonl").string());
    gallery = eval::read_embeddings((run / "gallery_embeddings.bin").string(), (run / "gallery_embeddings.jsonl").string());
  } else {
    auto [net, stored] = load_trained(src);
    cfg = stored;
    if (f.data) cfg.data_dir = *f.data;
    if (cfg.deterministic) openblas_set_num_threads(1);
    const auto ds = load_data(cfg, f.quiet);
    query = train::embed_split(net, ds, synth::Split::kQuery, cfg, cfg.use_gfi);
    gallery = train::embed_split(net, ds, synth::Split::kGallery, cfg, cfg.use_gfi);
  }
  if (f.protocol) cfg.protocol = *f.protocol;
  const auto all = train::evaluate_all(query, gallery, cfg.eval_block_size);
  eval::write_metrics((out_dir / "metrics.json").string(), (out_dir / "metrics.csv").string(), all);
  std::vector<eval::QueryResult> details;
  const auto proto = eval::protocol_spec(eval::parse_protocol(cfg.protocol));
  eval::evaluate(query, gallery, proto, {cfg.eval_block_size, std::max<std::size_t>(cfg.ranked_dump, 1)}, &details);
  eval::write_ranked_lists((out_dir / ("ranked_" + proto.name + ".jsonl")).string(), query, gallery, details);
  print_metrics(all);
  std::printf("wrote %s\n", (out_dir / "metrics.csv").string().c_str());
  return 0;
}

int cmd_export(const CommonFlags& f, const EvalSource& src, const std::string& out, const std::string& split_name) {
  if (out.empty()) throw UsageError("export-embeddings needs --out");
  auto [net, cfg] = load_trained(src);
  if (f.data) cfg.data_dir = *f.data;
  if (cfg.deterministic) openblas_set_num_threads(1);
  const auto ds = load_data(cfg, f.quiet);
  std::vector<synth::Split> splits;
  if (split_name == "all") splits = {synth::Split::kTrain, synth::Split::kQuery, synth::Split::kGallery};
  else splits = {synth::parse_split(split_name)};
  fs::create_directories(out);
  for (auto s : splits) {
    const std::string stem = (fs::path(out) / (std::string(synth::split_name(s)) + "_embeddings")).string();
    refuse_existing(stem + ".bin", "embedding file");
    const auto set = train::embed_split(net, ds, s, cfg, cfg.use_gfi);
    eval::write_embeddings(stem + ".bin", stem + ".jsonl", set);
    std::printf("%s: %zu x %zu -> %s.bin\n", synth::split_name(s), set.size(), set.dim, stem.c_str());
  }
  return 0;
}

int cmd_ablate(const CommonFlags& f, const std::string& out, const std::vector<std::uint64_t>& seeds) {
  RunConfig cfg = f.build();
  if (!seeds.empty()) cfg.seeds = seeds;
  if (out.empty()) throw UsageError("ablate needs --out");
  const auto ds = load_data(cfg, f.quiet);
  const auto rows = experiments::run_ablation(cfg, ds, out, f.run_options());
  std::printf("%-10s %6s %8s %8s %8s %8s\n", "variant", "seed", "mAP", "rank1", "rank3", "rank5");
  for (const auto& r : rows)
    std::printf("%-10s %6llu %8.4f %8.4f %8.4f %8.4f\n", r.variant.c_str(), static_cast<unsigned long long>(r.seed),
                r.metrics.map, r.metrics.rank1, r.metrics.rank3, r.metrics.rank5);
  for (const auto& s : experiments::summarize(rows))
    std::printf("mean %-10s mAP %.4f +- %.4f over %zu seeds\n", s.variant.c_str(), s.mean_map, s.std_map, s.runs);
  std::printf("wrote %s\n", (fs::path(out) / "ablation.csv").string().c_str());
  return 0;
}

int cmd_sweep(const CommonFlags& f, const std::string& out, const std::vector<double>& values) {
  RunConfig cfg = f.build();
  if (!values.empty()) cfg.sweep_values = values;
  if (out.empty()) throw UsageError("sweep-lambda needs --out");
  for (double v : cfg.sweep_values)
    if (!(v >= 0)) throw UsageError("lambda values must be non-negative");
  const auto ds = load_data(cfg, f.quiet);
  const auto rows = experiments::run_sweep(cfg, ds, out, f.run_options());
  std::printf("%10s %8s %8s %8s %8s\n", "lambda_gcc", "mAP", "rank1", "rank3", "rank5");
  for (const auto& r : rows)
    std::printf("%10g %8.4f %8.4f %8.4f %8.4f\n", r.lambda_gcc, r.metrics.map, r.metrics.rank1, r.metrics.rank3, r.metrics.rank5);
  std::printf("wrote %s\n", (fs::path(out) / "sweep.csv").string().c_str());
  return 0;
}

int cmd_gradcheck(const std::string& report, bool with_corrupted) {
  using namespace gradcheck_suite;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<CaseReport> reports;
  for (const auto& c : op_cases()) reports.push_back(run_case(c));
  reports.push_back(end_to_end_case());
  if (with_corrupted) reports.push_back(run_case(corrupted_case()));
  bool ok = true;
  std::printf("%-26s %12s %10s %7s  %s\n", "case", "max_rel_err", "tolerance", "coords", "result");
  for (const auto& r : reports) {
    std::printf("%-26s %12.3e %10.0e %7zu  %s\n", r.name.c_str(), r.max_rel_error, r.tolerance, r.coordinates,
                r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
  }
  if (!report.empty()) {
    std::ofstream f(report);
    if (!f) throw IoError("cannot write '" + report + "'");
    f << "case,max_rel_error,tolerance,coordinates,passed\n";
    for (const auto& r : reports)
      f << r.name << ',' << experiments::fmt(r.max_rel_error) << ',' << r.tolerance << ',' << r.coordinates << ','
        << (r.passed ? "true" : "false") << '\n';
  }
  std::printf("%zu cases, %s, %.1fs\n", reports.size(), ok ? "all passed" : "FAILURES",
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"geomamba: geometry-driven optical/SAR retrieval at desk scale"};
  app.require_subcommand(1);

  CommonFlags common;
  std::string out;

  auto* synth = app.add_subcommand("synth", "render the synthetic optical/SAR dataset");
  common.attach(synth, false);
  synth->add_option("--out", out, "dataset root (default: data_dir)");
  synth->add_flag("--resume", common.resume, "keep an existing dataset instead of refusing");

  auto* pre = app.add_subcommand("preprocess", "write preprocessed images and pseudo-label masks");
  common.attach(pre, false);
  pre->add_option("--out", out, "output root");

  auto* tr = app.add_subcommand("train", "train one model into a run directory");
  common.attach(tr, true);
  tr->add_option("--out", out, "run directory");

  EvalSource src;
  bool from_embeddings = false;
  auto* ev = app.add_subcommand("eval", "evaluate a trained model under the three protocols");
  common.attach(ev, false);
  ev->add_option("--run", src.run, "run directory");
  ev->add_option("--checkpoint", src.checkpoint, "checkpoint file (overrides --run)");
  ev->add_flag("--from-embeddings", from_embeddings, "use the embeddings stored in the run directory");
  ev->add_option("--out", out, "output directory (default: <run>/eval)");

  std::string split = "all";
  auto* ex = app.add_subcommand("export-embeddings", "write embeddings of dataset splits");
  common.attach(ex, false);
  ex->add_option("--run", src.run, "run directory");
  ex->add_option("--checkpoint", src.checkpoint, "checkpoint file (overrides --run)");
  ex->add_option("--split", split, "train, query, gallery or all")->check(CLI::IsMember({"train", "query", "gallery", "all"}));
  ex->add_option("--out", out, "output directory");

  std::vector<std::uint64_t> seeds;
  auto* ab = app.add_subcommand("ablate", "baseline / +GFI / +GCC / full over several seeds");
  common.attach(ab, true);
  ab->add_option("--out", out, "experiment directory");
  ab->add_option("--seeds", seeds, "seeds (default from config)")->delimiter(',');

  std::vector<double> values;
  auto* sw = app.add_subcommand("sweep-lambda", "one run per lambda_GCC value");
  common.attach(sw, true);
  sw->add_option("--out", out, "experiment directory");
  sw->add_option("--values", values, "lambda_GCC values (default 1,5,10,15,20)")->delimiter(',');

  std::string report;
  bool with_corrupted = false;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op, loss and the full objective");
  gc->add_option("--out", report, "CSV report path");
  gc->add_flag("--with-corrupted", with_corrupted, "include a deliberately wrong backward rule (must fail)");

  auto* cf = app.add_subcommand("config", "print the effective config (defaults, file, flags)");
  common.attach(cf, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(common, out);
    if (pre->parsed()) return cmd_preprocess(common, out);
    if (tr->parsed()) return cmd_train(common, out);
    if (ev->parsed()) return cmd_eval(common, src, out, from_embeddings);
    if (ex->parsed()) return cmd_export(common, src, out, split);
    if (ab->parsed()) return cmd_ablate(common, out, seeds);
    if (sw->parsed()) return cmd_sweep(common, out, values);
    if (gc->parsed()) return cmd_gradcheck(report, with_corrupted);
    if (cf->parsed()) {
      std::cout << common.build().to_text();
      return 0;
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
