// Renders a tiny synthetic dataset, trains a small model for two epochs and
// prints retrieval metrics. Usage: quickstart [work dir]

#include <cstdio>
#include <filesystem>

#include "geomamba/geomamba.hpp"

int main(int argc, char** argv) {
  namespace fs = std::filesystem;
  using namespace geomamba;
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "geomamba_quickstart";
  fs::remove_all(work);

  RunConfig cfg;
  cfg.data_dir = (work / "data").string();
  cfg.image_size = 32;
  cfg.train_count = 128;
  cfg.query_count = 32;
  cfg.gallery_count = 64;
  cfg.epochs = 2;
  cfg.embed_dim = 64;
  cfg.validate();

  synth::build_manifest(cfg.data_dir, {cfg.train_count, cfg.query_count, cfg.gallery_count}, 7, cfg.render_params());
  const auto ds = train::load_dataset(cfg.data_dir, cfg);
  const auto result = train::run_training(cfg, ds, (work / "run").string());

  for (const auto& m : result.metrics)
    std::printf("%-11s mAP %.3f  rank1 %.3f  (random ranking: %.3f)\n", m.protocol.c_str(), m.map, m.rank1, m.random_map);
  std::printf("checkpoint %s\n", result.checkpoint_hash.c_str());
}
