#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "geomamba/png_io.hpp"

namespace geomamba::eval {

/// Row-aligned embeddings with their metadata.
struct EmbeddingSet {
  std::size_t dim = 0;
  std::vector<double> features;  // size() * dim, row-major
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<std::string> modalities;  // "optical" | "sar"
  std::vector<std::string> roles;       // "query" | "gallery"

  std::size_t size() const { return ids.size(); }
  const double* row(std::size_t i) const { return features.data() + i * dim; }

  void push_back(const std::string& id, int label, const std::string& modality, const std::string& role,
                 const double* f) {
    ids.push_back(id);
    labels.push_back(label);
    modalities.push_back(modality);
    roles.push_back(role);
    features.insert(features.end(), f, f + dim);
  }

  void validate() const {
    const std::size_t n = ids.size();
    if (labels.size() != n || modalities.size() != n || roles.size() != n || features.size() != n * dim)
      throw std::invalid_argument("EmbeddingSet: fields are not row-aligned");
    for (double v : features)
      if (!std::isfinite(v)) throw std::invalid_argument("EmbeddingSet: non-finite feature value");
  }

  /// Rows whose modality/role match (empty string matches anything).
  EmbeddingSet select(const std::string& modality, const std::string& role) const {
    EmbeddingSet out;
    out.dim = dim;
    for (std::size_t i = 0; i < size(); ++i)
      if ((modality.empty() || modalities[i] == modality) && (role.empty() || roles[i] == role))
        out.push_back(ids[i], labels[i], modalities[i], roles[i], row(i));
    return out;
  }
};

enum class Protocol { kAllToAll, kOptToSar, kSarToOpt };

struct ProtocolSpec {
  Protocol protocol = Protocol::kAllToAll;
  std::string name;
  std::string query_modality;    // empty = any
  std::string gallery_modality;  // empty = any
  bool exclude_self = true;      // drop gallery rows carrying the query's sample id
};

inline ProtocolSpec protocol_spec(Protocol p) {
  switch (p) {
    case Protocol::kAllToAll: return {p, "all_to_all", "", "", true};
    case Protocol::kOptToSar: return {p, "opt_to_sar", "optical", "sar", true};
    default: return {p, "sar_to_opt", "sar", "optical", true};
  }
}

/// Accepts the short CLI names (all, o2s, s2o) and the long names.
inline Protocol parse_protocol(const std::string& s) {
  if (s == "all" || s == "all_to_all") return Protocol::kAllToAll;
  if (s == "o2s" || s == "opt_to_sar") return Protocol::kOptToSar;
  if (s == "s2o" || s == "sar_to_opt") return Protocol::kSarToOpt;
  throw std::invalid_argument("unknown protocol '" + s + "' (expected all, o2s or s2o)");
}

inline double euclidean(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t k = 0; k < dim; ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return std::sqrt(s);
}

/// Gallery indices eligible under the protocol, ordered by ascending distance
/// with ties broken by sample id.
inline std::vector<std::size_t> rank_gallery(const double* q, const std::string& query_id, const EmbeddingSet& gallery,
                                             const ProtocolSpec& proto, std::vector<double>* distances = nullptr) {
  std::vector<std::size_t> idx;
  std::vector<double> dist(gallery.size(), 0.0);
  for (std::size_t j = 0; j < gallery.size(); ++j) {
    if (!proto.gallery_modality.empty() && gallery.modalities[j] != proto.gallery_modality) continue;
    if (proto.exclude_self && gallery.ids[j] == query_id) continue;
    dist[j] = euclidean(q, gallery.row(j), gallery.dim);
    idx.push_back(j);
  }
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (dist[a] != dist[b]) return dist[a] < dist[b];
    return gallery.ids[a] < gallery.ids[b];
  });
  if (distances) {
    distances->clear();
    for (auto j : idx) distances->push_back(dist[j]);
  }
  return idx;
}

/// (1/R) * sum over relevant positions k of (#relevant in top k) / k.
/// Requires at least one relevant item.
inline double average_precision(const std::vector<std::uint8_t>& relevant) {
  double hits = 0.0, sum = 0.0;
  for (std::size_t k = 0; k < relevant.size(); ++k)
    if (relevant[k]) {
      hits += 1.0;
      sum += hits / static_cast<double>(k + 1);
    }
  if (hits == 0.0) throw std::invalid_argument("average_precision: no relevant item");
  return sum / hits;
}

/// Expected AP of a uniformly random ranking of n items of which r are relevant:
/// (r-1)/(n-1) + (H_n / n) * (1 - (r-1)/(n-1)).
inline double expected_random_ap(std::size_t n, std::size_t r) {
  if (r == 0 || r > n) throw std::invalid_argument("expected_random_ap: need 1 <= r <= n");
  if (n == 1) return 1.0;
  double harmonic = 0.0;
  for (std::size_t k = 1; k <= n; ++k) harmonic += 1.0 / static_cast<double>(k);
  const double rho = static_cast<double>(r - 1) / static_cast<double>(n - 1);
  return rho + harmonic / static_cast<double>(n) * (1.0 - rho);
}

struct Metrics {
  std::string protocol;
  double map = 0.0;
  double rank1 = 0.0, rank3 = 0.0, rank5 = 0.0;
  std::size_t queries = 0;   // queries contributing to the metrics
  std::size_t excluded = 0;  // queries without any relevant gallery item
  double random_map = 0.0;   // expected mAP of a random ranking over the same queries
};

struct QueryResult {
  std::size_t query = 0;
  std::vector<std::size_t> ranking;
  std::vector<double> distances;
  double ap = 0.0;
  bool valid = false;
};

struct EvalOptions {
  std::size_t block_size = 256;   // queries ranked per block
  std::size_t keep_ranked = 0;    // ranked entries retained per query (0 = none)
};

/// mAP and Rank-1/3/5 of `query` against `gallery`; relevance is label
/// equality, whatever the modality.
inline Metrics evaluate(const EmbeddingSet& query, const EmbeddingSet& gallery, const ProtocolSpec& proto,
                        const EvalOptions& opt = {}, std::vector<QueryResult>* details = nullptr) {
  if (query.dim != gallery.dim) throw std::invalid_argument("evaluate: query and gallery dimensions differ");
  if (opt.block_size == 0) throw std::invalid_argument("evaluate: block size must be positive");
  Metrics m;
  m.protocol = proto.name;
  double sum_ap = 0.0, r1 = 0.0, r3 = 0.0, r5 = 0.0, random_sum = 0.0;
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < query.size(); ++i)
    if (proto.query_modality.empty() || query.modalities[i] == proto.query_modality) order.push_back(i);

  for (std::size_t start = 0; start < order.size(); start += opt.block_size) {
    const std::size_t end = std::min(order.size(), start + opt.block_size);
    for (std::size_t b = start; b < end; ++b) {
      const std::size_t i = order[b];
      std::vector<double> dist;
      const auto ranking = rank_gallery(query.row(i), query.ids[i], gallery, proto, &dist);
      std::vector<std::uint8_t> rel(ranking.size());
      std::size_t first_hit = ranking.size();
      for (std::size_t k = 0; k < ranking.size(); ++k) {
        rel[k] = gallery.labels[ranking[k]] == query.labels[i];
        if (rel[k] && first_hit == ranking.size()) first_hit = k;
      }
      QueryResult qr;
      qr.query = i;
      if (first_hit == ranking.size()) {
        ++m.excluded;
      } else {
        qr.valid = true;
        qr.ap = average_precision(rel);
        random_sum += expected_random_ap(rel.size(), static_cast<std::size_t>(std::count(rel.begin(), rel.end(), 1)));
        sum_ap += qr.ap;
        r1 += first_hit < 1;
        r3 += first_hit < 3;
        r5 += first_hit < 5;
        ++m.queries;
      }
      if (details) {
        const std::size_t keep = std::min(opt.keep_ranked, ranking.size());
        qr.ranking.assign(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(keep));
        qr.distances.assign(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(keep));
        details->push_back(std::move(qr));
      }
    }
  }
  if (m.queries > 0) {
    const double n = static_cast<double>(m.queries);
    m.map = sum_ap / n;
    m.rank1 = r1 / n;
    m.rank3 = r3 / n;
    m.rank5 = r5 / n;
    m.random_map = random_sum / n;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Files

inline constexpr char kEmbeddingMagic[8] = {'G', 'M', 'E', 'M', 'B', '0', '0', '1'};

/// Binary matrix: 8-byte magic, u64 rows, u64 cols, rows*cols little-endian f64;
/// metadata goes to a JSON-lines sidecar, one object per row.
inline void write_embeddings(const std::string& bin_path, const std::string& jsonl_path, const EmbeddingSet& set) {
  set.validate();
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot write '" + bin_path + "'");
  const std::uint64_t rows = set.size(), cols = set.dim;
  bin.write(kEmbeddingMagic, sizeof kEmbeddingMagic);
  bin.write(reinterpret_cast<const char*>(&rows), sizeof rows);
  bin.write(reinterpret_cast<const char*>(&cols), sizeof cols);
  bin.write(reinterpret_cast<const char*>(set.features.data()), static_cast<std::streamsize>(set.features.size() * sizeof(double)));
  if (!bin) throw IoError("write failed for '" + bin_path + "'");
  std::ofstream side(jsonl_path);
  if (!side) throw IoError("cannot write '" + jsonl_path + "'");
  for (std::size_t i = 0; i < set.size(); ++i)
    side << nlohmann::json{{"id", set.ids[i]}, {"label", set.labels[i]}, {"modality", set.modalities[i]},
                           {"role", set.roles[i]}}.dump()
         << '\n';
}

inline EmbeddingSet read_embeddings(const std::string& bin_path, const std::string& jsonl_path) {
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot read '" + bin_path + "'");
  char magic[8];
  std::uint64_t rows = 0, cols = 0;
  bin.read(magic, sizeof magic);
  bin.read(reinterpret_cast<char*>(&rows), sizeof rows);
  bin.read(reinterpret_cast<char*>(&cols), sizeof cols);
  if (!bin || std::memcmp(magic, kEmbeddingMagic, sizeof magic) != 0) throw IoError("'" + bin_path + "' is not an embedding file");
  EmbeddingSet set;
  set.dim = cols;
  set.features.resize(rows * cols);
  bin.read(reinterpret_cast<char*>(set.features.data()), static_cast<std::streamsize>(rows * cols * sizeof(double)));
  if (!bin) throw IoError("'" + bin_path + "' is truncated");

  std::ifstream side(jsonl_path);
  if (!side) throw IoError("cannot read '" + jsonl_path + "'");
  std::string line;
  while (std::getline(side, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      set.ids.push_back(j.at("id").get<std::string>());
      set.labels.push_back(j.at("label").get<int>());
      set.modalities.push_back(j.at("modality").get<std::string>());
      set.roles.push_back(j.at("role").get<std::string>());
    } catch (const std::exception& e) {
      throw IoError("'" + jsonl_path + "': " + e.what());
    }
  }
  if (set.ids.size() != rows) throw IoError("'" + jsonl_path + "' row count does not match the matrix");
  set.validate();
  return set;
}

inline nlohmann::json to_json(const Metrics& m) {
  return {{"protocol", m.protocol}, {"mAP", m.map},         {"rank1", m.rank1},      {"rank3", m.rank3},
          {"rank5", m.rank5},       {"queries", m.queries}, {"excluded", m.excluded}, {"random_mAP", m.random_map}};
}

inline const char* metrics_csv_header() { return "protocol,mAP,rank1,rank3,rank5,queries,excluded,random_mAP"; }

inline std::string metrics_csv_row(const Metrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g,%zu,%zu,%.17g", m.protocol.c_str(), m.map, m.rank1, m.rank3,
                m.rank5, m.queries, m.excluded, m.random_map);
  return buf;
}

inline void write_metrics(const std::string& json_path, const std::string& csv_path, const std::vector<Metrics>& all) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& m : all) j.push_back(to_json(m));
  std::ofstream fj(json_path);
  if (!fj) throw IoError("cannot write '" + json_path + "'");
  fj << j.dump(2) << '\n';
  std::ofstream fc(csv_path);
  if (!fc) throw IoError("cannot write '" + csv_path + "'");
  fc << metrics_csv_header() << '\n';
  for (const auto& m : all) fc << metrics_csv_row(m) << '\n';
}

/// One JSON line per query with its top-ranked gallery entries.
inline void write_ranked_lists(const std::string& path, const EmbeddingSet& query, const EmbeddingSet& gallery,
                               const std::vector<QueryResult>& results) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write '" + path + "'");
  for (const auto& r : results) {
    nlohmann::json top = nlohmann::json::array();
    for (std::size_t k = 0; k < r.ranking.size(); ++k) {
      const auto j = r.ranking[k];
      top.push_back({{"id", gallery.ids[j]},
                     {"label", gallery.labels[j]},
                     {"modality", gallery.modalities[j]},
                     {"distance", r.distances[k]},
                     {"correct", gallery.labels[j] == query.labels[r.query]}});
    }
    f << nlohmann::json{{"query", query.ids[r.query]},
                        {"label", query.labels[r.query]},
                        {"modality", query.modalities[r.query]},
                        {"ap", r.valid ? nlohmann::json(r.ap) : nlohmann::json(nullptr)},
                        {"ranked", top}}
             .dump()
      << '\n';
  }
}

}  // namespace geomamba::eval
