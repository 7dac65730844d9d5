#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>

#include "geomamba/eval.hpp"
#include "geomamba/rng.hpp"

using namespace geomamba;
using namespace geomamba::eval;

namespace {

EmbeddingSet random_set(std::size_t n, std::size_t dim, int classes, const std::string& role, Rng& rng,
                        const std::string& prefix) {
  EmbeddingSet s;
  s.dim = dim;
  std::normal_distribution<double> nd;
  std::uniform_int_distribution<int> label(0, classes - 1);
  std::vector<double> f(dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : f) v = nd(rng);
    s.push_back(prefix + std::to_string(i), label(rng), i % 2 ? "sar" : "optical", role, f.data());
  }
  return s;
}

struct OracleMetrics {
  double map = 0, r1 = 0, r3 = 0, r5 = 0;
  std::size_t queries = 0;
};

// Definition-level metrics: full sort of every eligible gallery item, AP as
// the mean of precision at each relevant rank.
OracleMetrics oracle(const EmbeddingSet& q, const EmbeddingSet& g, const ProtocolSpec& p) {
  OracleMetrics m;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (!p.query_modality.empty() && q.modalities[i] != p.query_modality) continue;
    std::vector<std::pair<double, std::string>> items;
    std::vector<int> labels;
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!p.gallery_modality.empty() && g.modalities[j] != p.gallery_modality) continue;
      if (g.ids[j] == q.ids[i]) continue;
      double d = 0.0;
      for (std::size_t k = 0; k < g.dim; ++k) d += (q.row(i)[k] - g.row(j)[k]) * (q.row(i)[k] - g.row(j)[k]);
      items.push_back({std::sqrt(d), g.ids[j]});
    }
    std::sort(items.begin(), items.end());
    std::vector<bool> rel;
    for (const auto& it : items) {
      const auto j = static_cast<std::size_t>(std::find(g.ids.begin(), g.ids.end(), it.second) - g.ids.begin());
      rel.push_back(g.labels[j] == q.labels[i]);
    }
    const auto total = static_cast<double>(std::count(rel.begin(), rel.end(), true));
    if (total == 0) continue;
    double hits = 0, ap = 0;
    std::size_t first = rel.size();
    for (std::size_t k = 0; k < rel.size(); ++k)
      if (rel[k]) {
        hits += 1;
        ap += hits / static_cast<double>(k + 1);
        first = std::min(first, k);
      }
    m.map += ap / total;
    m.r1 += first < 1;
    m.r3 += first < 3;
    m.r5 += first < 5;
    ++m.queries;
  }
  const double n = static_cast<double>(m.queries);
  m.map /= n;
  m.r1 /= n;
  m.r3 /= n;
  m.r5 /= n;
  return m;
}

void expect_matches_oracle(const EmbeddingSet& q, const EmbeddingSet& g, Protocol proto, std::size_t block) {
  const auto spec = protocol_spec(proto);
  EvalOptions opt;
  opt.block_size = block;
  const auto got = evaluate(q, g, spec, opt);
  const auto want = oracle(q, g, spec);
  EXPECT_EQ(got.queries, want.queries);
  EXPECT_NEAR(got.map, want.map, 1e-12);
  EXPECT_NEAR(got.rank1, want.r1, 1e-12);
  EXPECT_NEAR(got.rank3, want.r3, 1e-12);
  EXPECT_NEAR(got.rank5, want.r5, 1e-12);
}

}  // namespace

TEST(AveragePrecision, HandValues) {
  EXPECT_DOUBLE_EQ(average_precision({1, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(average_precision({1, 0, 1, 0}), 5.0 / 6.0);
  EXPECT_DOUBLE_EQ(average_precision({0, 0, 1}), 1.0 / 3.0);
}

TEST(AveragePrecision, RandomBaselineMatchesEnumeration) {
  for (std::size_t n : {3u, 5u, 7u})
    for (std::size_t r = 1; r <= n; ++r) {
      std::vector<std::uint8_t> rel(n, 0);
      std::fill(rel.end() - static_cast<std::ptrdiff_t>(r), rel.end(), 1);
      double sum = 0.0, count = 0.0;
      do {
        sum += average_precision(rel);
        count += 1;
      } while (std::next_permutation(rel.begin(), rel.end()));
      EXPECT_NEAR(expected_random_ap(n, r), sum / count, 1e-12) << n << "," << r;
    }
}

TEST(Ranking, DuplicateWithDifferentIdRanksFirst) {
  EmbeddingSet q, g;
  q.dim = g.dim = 2;
  const double a[2] = {1.0, 2.0}, b[2] = {1.5, 2.0}, c[2] = {-3.0, 0.0};
  q.push_back("s1", 0, "optical", "query", a);
  g.push_back("s1", 0, "optical", "gallery", a);
  g.push_back("s9", 1, "sar", "gallery", b);
  g.push_back("s2", 0, "sar", "gallery", a);
  g.push_back("s3", 0, "optical", "gallery", c);
  const auto r = rank_gallery(q.row(0), "s1", g, protocol_spec(Protocol::kAllToAll));
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(g.ids[r[0]], "s2");
  EXPECT_EQ(g.ids[r[1]], "s9");
}

TEST(Ranking, OptToSarExcludesOpticalGallery) {
  Rng rng = make_stream(31, 4);
  const auto g = random_set(20, 3, 3, "gallery", rng, "g");
  const auto r = rank_gallery(g.row(0), "q", g, protocol_spec(Protocol::kOptToSar));
  EXPECT_EQ(r.size(), 10u);
  for (auto j : r) EXPECT_EQ(g.modalities[j], "sar");
}

TEST(Evaluate, TenItemGalleryMatchesFullSortOracle) {
  Rng rng = make_stream(32, 4);
  const auto q = random_set(6, 4, 3, "query", rng, "q"), g = random_set(10, 4, 3, "gallery", rng, "g");
  for (auto p : {Protocol::kAllToAll, Protocol::kOptToSar, Protocol::kSarToOpt}) expect_matches_oracle(q, g, p, 256);
}

TEST(Evaluate, OneHotEmbeddingsGivePerfectRankOne) {
  EmbeddingSet q, g;
  q.dim = g.dim = 4;
  for (int c = 0; c < 4; ++c) {
    double e[4] = {0, 0, 0, 0};
    e[c] = 1.0;
    q.push_back("q" + std::to_string(c), c, "optical", "query", e);
    g.push_back("g" + std::to_string(c), c, "sar", "gallery", e);
    g.push_back("h" + std::to_string(c), c, "optical", "gallery", e);
  }
  const auto m = evaluate(q, g, protocol_spec(Protocol::kAllToAll));
  EXPECT_EQ(m.rank1, 1.0);
  EXPECT_EQ(m.map, 1.0);
}

TEST(Evaluate, RankKMonotoneAndFiftyQueryOracle) {
  Rng rng = make_stream(33, 4);
  const auto q = random_set(50, 8, 5, "query", rng, "q"), g = random_set(120, 8, 5, "gallery", rng, "g");
  const auto m = evaluate(q, g, protocol_spec(Protocol::kAllToAll));
  EXPECT_LE(m.rank1, m.rank3);
  EXPECT_LE(m.rank3, m.rank5);
  for (std::size_t block : {1u, 7u, 256u}) expect_matches_oracle(q, g, Protocol::kAllToAll, block);
}

TEST(Evaluate, QueriesWithoutRelevantItemsAreExcluded) {
  EmbeddingSet q, g;
  q.dim = g.dim = 1;
  const double x = 0.0, y = 1.0;
  q.push_back("q0", 0, "optical", "query", &x);
  q.push_back("q1", 7, "optical", "query", &x);
  g.push_back("g0", 0, "sar", "gallery", &y);
  const auto m = evaluate(q, g, protocol_spec(Protocol::kAllToAll));
  EXPECT_EQ(m.queries, 1u);
  EXPECT_EQ(m.excluded, 1u);
  EXPECT_EQ(m.map, 1.0);
}

TEST(Evaluate, RejectsMismatchedDimensions) {
  EmbeddingSet q, g;
  q.dim = 2;
  g.dim = 3;
  EXPECT_THROW(evaluate(q, g, protocol_spec(Protocol::kAllToAll)), std::invalid_argument);
  EXPECT_THROW(parse_protocol("x2y"), std::invalid_argument);
  EXPECT_EQ(parse_protocol("s2o"), Protocol::kSarToOpt);
}

TEST(Files, EmbeddingRoundTripAndMetricsCsv) {
  Rng rng = make_stream(34, 4);
  const auto s = random_set(5, 3, 2, "query", rng, "q");
  const auto dir = std::filesystem::temp_directory_path() / "geomamba_eval_test";
  std::filesystem::create_directories(dir);
  write_embeddings((dir / "e.bin").string(), (dir / "e.jsonl").string(), s);
  const auto back = read_embeddings((dir / "e.bin").string(), (dir / "e.jsonl").string());
  EXPECT_EQ(back.features, s.features);
  EXPECT_EQ(back.ids, s.ids);
  EXPECT_EQ(back.labels, s.labels);
  EXPECT_EQ(back.modalities, s.modalities);
  EXPECT_THROW(read_embeddings((dir / "e.jsonl").string(), (dir / "e.jsonl").string()), IoError);
  std::filesystem::remove_all(dir);

  Metrics m;
  m.protocol = "all_to_all";
  m.map = 0.5;
  EXPECT_EQ(metrics_csv_row(m).rfind("all_to_all,0.5,", 0), 0u);
}
