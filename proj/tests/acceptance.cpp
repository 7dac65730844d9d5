// Acceptance harness: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: acceptance --work DIR [--reuse]
//   --reuse keeps finished training runs found under DIR instead of retraining.

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "CLI11.hpp"
#include "geomamba/geomamba.hpp"

using namespace geomamba;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::stringstream in(read_text(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Criterion 1

Outcome gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name, failed;
  for (const auto& c : gradcheck_suite::op_cases()) {
    const auto r = gradcheck_suite::run_case(c);
    if (r.max_rel_error > worst) worst = r.max_rel_error, worst_name = r.name;
    if (!r.passed || r.max_rel_error >= 1e-4) failed += " " + r.name;
  }
  const auto e2e = gradcheck_suite::end_to_end_case();
  const double secs = seconds_since(t0);
  const bool ok = failed.empty() && e2e.max_rel_error < 1e-3 && secs < 120.0;
  return {ok, fmt("ops max rel err %.2e (%s), end-to-end %.2e, %.1fs%s", worst, worst_name.c_str(), e2e.max_rel_error,
                  secs, failed.empty() ? "" : (" failing:" + failed).c_str())};
}

// ---------------------------------------------------------------------------
// Criterion 2

double brute_force_triplet(const Tensor& f, const std::vector<int>& y, double margin) {
  const std::size_t n = y.size(), d = f.dim(1);
  auto dist = [&](std::size_t i, std::size_t j) {
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = f[i * d + c] - f[j * d + c];
      acc += diff * diff;
    }
    return std::sqrt(acc);
  };
  double sum = 0.0;
  std::size_t anchors = 0;
  for (std::size_t a = 0; a < n; ++a) {
    double worst = -1.0;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || y[p] != y[a]) continue;
      for (std::size_t q = 0; q < n; ++q)
        if (y[q] != y[a]) worst = std::max(worst, std::max(0.0, dist(a, p) - dist(a, q) + margin));
    }
    if (worst < 0.0) continue;
    sum += worst;
    ++anchors;
  }
  return anchors ? sum * (1.0 / static_cast<double>(anchors)) : 0.0;
}

struct OracleMetrics {
  double map = 0, r1 = 0, r3 = 0, r5 = 0;
};

OracleMetrics metric_oracle(const eval::EmbeddingSet& q, const eval::EmbeddingSet& g, const eval::ProtocolSpec& p) {
  OracleMetrics m;
  double n = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (!p.query_modality.empty() && q.modalities[i] != p.query_modality) continue;
    std::vector<std::tuple<double, std::string, bool>> items;
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!p.gallery_modality.empty() && g.modalities[j] != p.gallery_modality) continue;
      if (g.ids[j] == q.ids[i]) continue;
      double d = 0.0;
      for (std::size_t k = 0; k < g.dim; ++k) d += (q.row(i)[k] - g.row(j)[k]) * (q.row(i)[k] - g.row(j)[k]);
      items.emplace_back(std::sqrt(d), g.ids[j], g.labels[j] == q.labels[i]);
    }
    std::sort(items.begin(), items.end());
    double hits = 0, ap = 0, first = -1;
    for (std::size_t k = 0; k < items.size(); ++k)
      if (std::get<2>(items[k])) {
        hits += 1;
        ap += hits / static_cast<double>(k + 1);
        if (first < 0) first = static_cast<double>(k);
      }
    if (hits == 0) continue;
    m.map += ap / hits;
    m.r1 += first < 1;
    m.r3 += first < 3;
    m.r5 += first < 5;
    n += 1;
  }
  m.map /= n;
  m.r1 /= n;
  m.r3 /= n;
  m.r5 /= n;
  return m;
}

Outcome exact_oracles() {
  Rng rng = make_stream(2024, 1);
  // Batch-hard triplet loss against enumeration of all triples.
  std::size_t triplet_mismatch = 0;
  std::uniform_int_distribution<int> label(0, 4);
  for (int b = 0; b < 200; ++b) {
    const Tensor f = Tensor::randn({16, 8}, rng);
    std::vector<int> y(16);
    for (auto& v : y) v = label(rng);
    triplet_mismatch += losses::triplet_loss(f, y, 0.3).loss.item() != brute_force_triplet(f, y, 0.3);
  }
  // mAP and Rank-k against the definition.
  double metric_err = 0.0;
  std::normal_distribution<double> nd;
  for (int fx = 0; fx < 100; ++fx) {
    eval::EmbeddingSet q, g;
    q.dim = g.dim = 1 + static_cast<std::size_t>(fx % 6);
    const int classes = 2 + fx % 5;
    std::uniform_int_distribution<int> lab(0, classes - 1);
    std::vector<double> f(q.dim);
    const std::size_t nq = 5 + static_cast<std::size_t>(fx % 11), ng = 10 + static_cast<std::size_t>(fx % 23);
    for (std::size_t i = 0; i < nq + ng; ++i) {
      for (auto& v : f) v = std::round(nd(rng) * 4.0) / 4.0;  // coarse values produce distance ties
      auto& set = i < nq ? q : g;
      const std::string id = "s" + std::to_string(i < nq ? i : i - nq + (fx % 2 ? 0 : 1000));
      set.push_back(id, lab(rng), i % 2 ? "sar" : "optical", i < nq ? "query" : "gallery", f.data());
    }
    for (auto proto : {eval::Protocol::kAllToAll, eval::Protocol::kOptToSar, eval::Protocol::kSarToOpt}) {
      const auto spec = eval::protocol_spec(proto);
      const auto got = eval::evaluate(q, g, spec, {3, 0});
      if (got.queries == 0) continue;
      const auto want = metric_oracle(q, g, spec);
      metric_err = std::max({metric_err, std::abs(got.map - want.map), std::abs(got.rank1 - want.r1),
                             std::abs(got.rank3 - want.r3), std::abs(got.rank5 - want.r5)});
    }
  }
  // Selective scan against the plain recurrence for every length up to 64.
  double scan_err = 0.0;
  const std::size_t e = 2, s = 3;
  for (std::size_t len = 1; len <= 64; ++len) {
    const Tensor x = Tensor::randn({1, len, e}, rng), dt = Tensor::uniform({1, len, e}, rng, 0.01, 1.0);
    const Tensor a = Tensor::uniform({e, s}, rng, -2.0, -0.1), b = Tensor::randn({1, len, s}, rng);
    const Tensor c = Tensor::randn({1, len, s}, rng), d = Tensor::randn({e}, rng);
    for (bool reverse : {false, true}) {
      const Tensor y = selective_scan(x, dt, a, b, c, d, reverse);
      for (std::size_t ch = 0; ch < e; ++ch) {
        std::vector<double> h(s, 0.0);
        for (std::size_t step = 0; step < len; ++step) {
          const std::size_t t = reverse ? len - 1 - step : step;
          const double xt = x[t * e + ch], dtt = dt[t * e + ch];
          double out = d[ch] * xt;
          for (std::size_t k = 0; k < s; ++k) {
            h[k] = std::exp(dtt * a[ch * s + k]) * h[k] + dtt * b[t * s + k] * xt;
            out += c[t * s + k] * h[k];
          }
          scan_err = std::max(scan_err, std::abs(out - y[t * e + ch]));
        }
      }
    }
  }
  const bool ok = triplet_mismatch == 0 && metric_err <= 1e-12 && scan_err <= 1e-12;
  return {ok, fmt("triplet mismatches %zu/200, metric max err %.1e over 100 fixtures, scan max err %.1e (L<=64)",
                  triplet_mismatch, metric_err, scan_err)};
}

// ---------------------------------------------------------------------------
// Criterion 3

Outcome goldens() {
  using namespace imgproc;
  GrayImage step(3, 3);
  for (std::size_t y = 0; y < 3; ++y) step.at(y, 2) = 255.0;
  const auto g = sobel_gradients(step);
  const bool sobel_ok = g.gx[4] == 1020.0 && g.gy[4] == 0.0;

  const bool constant_zero = harris_mask(GrayImage(32, 32, 100.0)).count() == 0;
  GrayImage edge(32, 32);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 16; x < 32; ++x) edge.at(y, x) = 200.0;
  const bool edge_zero = harris_mask(edge).count() == 0;
  GrayImage board(64, 64);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) board.at(y, x) = ((y / 16 + x / 16) % 2) ? 255.0 : 0.0;
  const auto resp = harris_response(board, 0.04, 5, 1.0);
  const auto mask = harris_mask(board);
  std::size_t corners_hit = 0;
  for (std::size_t cy : {16u, 32u, 48u})
    for (std::size_t cx : {16u, 32u, 48u}) {
      bool hit = false;
      for (std::size_t y = cy - 2; y <= cy + 1; ++y)
        for (std::size_t x = cx - 2; x <= cx + 1; ++x) hit = hit || (mask.at(y, x) && resp[y * 64 + x] > 0.0);
      corners_hit += hit;
    }

  const double focal = losses::focal_loss(Tensor::from({1}, {0.0}), {1.0}, 0.25, 2.0).item();

  Rng rng = make_stream(3, 3);
  std::bernoulli_distribution coin(0.1);
  bool pool_ok = true;
  for (std::size_t factor : {2u, 4u, 8u, 32u}) {
    BinaryMask m(64, 64);
    for (auto& b : m.bits) b = coin(rng);
    const auto d = downsample_mask(m, factor);
    for (std::size_t y = 0; y < 64 / factor; ++y)
      for (std::size_t x = 0; x < 64 / factor; ++x) {
        std::uint8_t v = 0;
        for (std::size_t dy = 0; dy < factor; ++dy)
          for (std::size_t dx = 0; dx < factor; ++dx) v = std::max(v, m.at(y * factor + dy, x * factor + dx));
        pool_ok = pool_ok && d.at(y, x) == v;
      }
  }
  const bool ok = sobel_ok && constant_zero && edge_zero && corners_hit == 9 && std::abs(focal - 0.043322) <= 1e-6 && pool_ok;
  return {ok, fmt("sobel Gx %.0f Gy %.0f; harris constant %s, edge %s, corners %zu/9; focal %.7f; max-pool %s", g.gx[4],
                  g.gy[4], constant_zero ? "0" : "nonzero", edge_zero ? "0" : "nonzero", corners_hit, focal,
                  pool_ok ? "equal" : "differs")};
}

// ---------------------------------------------------------------------------
// Criterion 4

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Outcome identity_and_isolation() {
  model::GeoMamba net(RunConfig{}.model_config(8), 1);
  Rng rng = make_stream(4, 4);
  const Tensor o = Tensor::randn({4, 3, 64, 64}, rng), s = Tensor::randn({4, 3, 64, 64}, rng);
  const Tensor s2 = Tensor::randn({4, 3, 64, 64}, rng), p = Tensor::randn({4, 2, 64, 64}, rng);
  double deviation = 0.0;
  for (auto pairing : {model::GfiPairing::kCross, model::GfiPairing::kSelf}) {
    const auto on = net.forward({&o, &s, &p}, {false, true, true, pairing});
    const auto off = net.forward({&o, &s, &p}, {false, false, true, pairing});
    for (std::size_t i = 0; i < 4; ++i)
      deviation = std::max({deviation, max_abs_diff(on.optical->stages[i], off.optical->stages[i]),
                            max_abs_diff(on.sar->stages[i], off.sar->stages[i])});
    deviation = std::max({deviation, max_abs_diff(on.optical->embedding, off.optical->embedding),
                          max_abs_diff(on.sar->embedding, off.sar->embedding)});
  }
  const model::ForwardOptions no_gfi{false, false, true, model::GfiPairing::kCross};
  const auto a = net.forward({&o, &s, &p}, no_gfi), b = net.forward({&o, &s2, &p}, no_gfi);
  double leak = 0.0;
  for (std::size_t i = 0; i < 4; ++i) leak = std::max(leak, max_abs_diff(a.optical->stages[i], b.optical->stages[i]));
  leak = std::max({leak, max_abs_diff(a.optical->embedding, b.optical->embedding),
                   max_abs_diff(a.optical->mask_deep, b.optical->mask_deep)});
  return {deviation == 0.0 && leak == 0.0,
          fmt("GFI on/off deviation at init %.3g; optical change under SAR perturbation (GFI off) %.3g", deviation, leak)};
}

// ---------------------------------------------------------------------------
// Training-based criteria

struct TrainedRun {
  eval::Metrics all_to_all;
  std::string hash;
  double seconds = 0.0;
  fs::path dir;
};

eval::Metrics read_all_to_all(const fs::path& csv) {
  for (const auto& r : read_csv(csv))
    if (!r.empty() && r[0] == "all_to_all" && r.size() >= 8) {
      eval::Metrics m;
      m.protocol = r[0];
      m.map = std::stod(r[1]);
      m.rank1 = std::stod(r[2]);
      m.rank3 = std::stod(r[3]);
      m.rank5 = std::stod(r[4]);
      m.queries = std::stoul(r[5]);
      m.excluded = std::stoul(r[6]);
      m.random_map = std::stod(r[7]);
      return m;
    }
  throw IoError("no all_to_all row in " + csv.string());
}

TrainedRun train_or_reuse(const RunConfig& cfg, const train::Dataset& ds, const fs::path& dir, bool reuse) {
  TrainedRun r;
  r.dir = dir;
  if (reuse && fs::exists(dir / "checkpoint_final.fnv1a") && fs::exists(dir / "wall_seconds.txt")) {
    r.all_to_all = read_all_to_all(dir / "metrics.csv");
    r.hash = read_text(dir / "checkpoint_final.fnv1a");
    r.hash.erase(r.hash.find_last_not_of("\n") + 1);
    r.seconds = std::stod(read_text(dir / "wall_seconds.txt"));
    return r;
  }
  fs::remove_all(dir);
  const auto t0 = Clock::now();
  const auto res = train::run_training(cfg, ds, dir.string(), {false, true});
  r.seconds = seconds_since(t0);
  std::ofstream(dir / "wall_seconds.txt") << fmt("%.3f\n", r.seconds);
  r.all_to_all = experiments::protocol_metrics(res.metrics, "all");
  r.hash = res.checkpoint_hash;
  return r;
}

Outcome logged_total(const std::vector<TrainedRun>& runs, const RunConfig& base) {
  double worst = 0.0;
  std::size_t steps = 0;
  bool weights_ok = base.loss.lambda_gcc == 10.0 && base.loss.lambda_deep == 1.0 && base.loss.lambda_shallow == 0.5;
  for (const auto& r : runs) {
    const auto rows = read_csv(r.dir / "metrics_steps.csv");
    for (std::size_t i = 1; i < rows.size(); ++i) {
      auto v = [&](std::size_t c) { return std::stod(rows[i][c]); };
      worst = std::max(worst, std::abs(v(8) - (v(3) + v(6) * v(4) + v(7) * v(5))));
      weights_ok = weights_ok && v(7) == base.loss.lambda_gcc && v(6) == base.loss.lambda_tri;
      ++steps;
    }
  }
  return {worst <= 1e-10 && weights_ok && steps > 0,
          fmt("max |total - (L_id + %g L_tri + %g L_GCC)| = %.2e over %zu logged steps (lambda_deep %g, lambda_shallow %g)",
              base.loss.lambda_tri, base.loss.lambda_gcc, worst, steps, base.loss.lambda_deep, base.loss.lambda_shallow)};
}

Outcome learns(const std::vector<TrainedRun>& full, const RunConfig& base, std::size_t classes) {
  double secs = 0.0;
  bool ok = classes == 8 && base.image_size == 64 && base.epochs == 20 && full.size() == 3;
  std::string per_seed;
  for (const auto& r : full) {
    const auto& m = r.all_to_all;
    secs += r.seconds;
    ok = ok && m.map >= 3.0 * m.random_map && m.rank1 <= m.rank3 && m.rank3 <= m.rank5;
    per_seed += fmt(" [mAP %.3f vs 3x random %.3f, R1/3/5 %.3f/%.3f/%.3f]", m.map, 3.0 * m.random_map, m.rank1, m.rank3, m.rank5);
  }
  ok = ok && secs < 1800.0;
  return {ok, fmt("%zu classes, %zux%zu, %zu epochs, %zu seeds, %.0fs training:", classes, base.image_size,
                  base.image_size, base.epochs, full.size(), secs) + per_seed};
}

Outcome full_beats_baseline(const std::vector<TrainedRun>& full, const std::vector<TrainedRun>& baseline) {
  auto mean = [](const std::vector<TrainedRun>& v) {
    double s = 0.0;
    for (const auto& r : v) s += r.all_to_all.map;
    return s / static_cast<double>(v.size());
  };
  const double f = mean(full), b = mean(baseline);
  return {f >= b, fmt("mean mAP full %.4f vs baseline %.4f over %zu seeds", f, b, full.size())};
}

Outcome reproducible(const TrainedRun& reference, const RunConfig& cfg, const train::Dataset& ds, const fs::path& dir) {
  fs::remove_all(dir);
  const auto again = train::run_training(cfg, ds, dir.string(), {false, true});
  const bool same_hash = again.checkpoint_hash == reference.hash;
  const bool same_csv = read_text(dir / "metrics.csv") == read_text(reference.dir / "metrics.csv");
  return {same_hash && same_csv, fmt("checkpoint %s vs %s, metrics.csv %s", again.checkpoint_hash.c_str(),
                                     reference.hash.c_str(), same_csv ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string work = "acceptance_work";
  bool reuse = false;
  app.add_option("--work", work, "scratch directory for data and runs");
  app.add_flag("--reuse", reuse, "keep finished runs from a previous invocation");
  CLI11_PARSE(app, argc, argv);

  std::size_t passed = 0, total = 0;
  auto report = [&](int id, const char* title, const std::function<Outcome()>& check, double limit = INFINITY) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (seconds_since(t0) >= limit) o = {false, o.detail + fmt(", over the %.0fs limit", limit)};
    ++total;
    passed += o.pass;
    std::printf("[%s] C%d %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, title, o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  };

  report(1, "gradients", gradients);
  report(2, "exact oracles", exact_oracles, 60.0);
  report(3, "goldens", goldens, 30.0);
  report(4, "identity at init and stream isolation", identity_and_isolation);

  const fs::path root(work);
  RunConfig base;
  base.data_dir = (root / "data").string();
  base.deterministic = true;
  std::vector<TrainedRun> full, baseline;
  std::optional<train::Dataset> ds;
  std::string setup_error;
  try {
    if (!reuse || !fs::exists(root / "data" / "manifest.jsonl")) {
      fs::remove_all(root / "data");
      synth::build_manifest(base.data_dir, {base.train_count, base.query_count, base.gallery_count}, base.seed,
                            base.render_params());
    }
    ds = train::load_dataset(base.data_dir, base);
    std::vector<experiments::AblationRow> rows;
    for (const auto& v : experiments::ablation_variants())
      for (auto seed : base.seeds) {
        const RunConfig cfg = experiments::variant_config(base, v, seed);
        const auto r = train_or_reuse(cfg, *ds, root / "ablation" / (v.dir + "_seed" + std::to_string(seed)), reuse);
        std::fprintf(stderr, "[acceptance] %s seed %llu: mAP %.4f (%.0fs)\n", v.name.c_str(),
                     static_cast<unsigned long long>(seed), r.all_to_all.map, r.seconds);
        rows.push_back({v.name, seed, r.all_to_all, r.hash});
        if (v.dir == "full") full.push_back(r);
        if (v.dir == "baseline") baseline.push_back(r);
      }
    experiments::write_ablation((root / "ablation").string(), rows);
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  auto needs_runs = [&](auto fn) {
    return [&, fn]() -> Outcome {
      if (!setup_error.empty()) return {false, "training failed: " + setup_error};
      return fn();
    };
  };
  report(5, "logged total", needs_runs([&] { return logged_total(full, base); }));
  report(6, "retrieval above chance", needs_runs([&] { return learns(full, base, ds->num_classes); }));
  report(7, "full model vs baseline", needs_runs([&] { return full_beats_baseline(full, baseline); }));
  report(8, "reproducibility", needs_runs([&] {
           return reproducible(full.front(), experiments::variant_config(base, experiments::ablation_variants()[3], base.seeds[0]),
                               *ds, root / "repro");
         }));

  std::printf("%zu/%zu criteria passed\n", passed, total);
  return passed == total ? 0 : 1;
}
