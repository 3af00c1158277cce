#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "cqa/meta_train.hpp"
#include "cqa/oracle.hpp"

namespace cqa {

struct SyntheticSpec {
  int32_t num_entities = 500;
  int32_t num_relations = 8;
  int32_t edges_per_relation = 400;
  double holdout = 0.2;
};

// Fully determines a run; serialized alongside every output directory.
struct ExperimentManifest {
  Setting setting = Setting::MultiHop;
  std::optional<std::string> graph_dir;  // load a split instead of synthesizing
  SyntheticSpec synthetic;
  int32_t dim = 32;
  int32_t depth_cap = 3;
  int pool_size = 10000;
  double ratio = 0.001;
  int eval_size = 400;
  uint64_t data_seed = 1;
  TrainConfig train;
  int repro_seeds = 3;
  std::string out_dir;
  bool force = false;
  std::optional<std::string> resume_checkpoint;
  std::optional<std::string> checkpoint;  // eval input
};

ExperimentManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path,
                   const ExperimentManifest& m);

// make-data: synthesize or load the graph split, build the few-shot dataset,
// write graph/ and data/ under out_dir plus a manifest copy.
void cmd_make_data(const ExperimentManifest& m);

// train: run the configured algorithm for train.steps steps over the dataset
// in out_dir/data, checkpointing every 500 steps and at the end, with a
// JSON-lines training log.
void cmd_train(const ExperimentManifest& m);

// eval: load a checkpoint, run test-time adaptation when it was trained with
// maml/mamo, and write results.csv / results.txt.
void cmd_eval(const ExperimentManifest& m);

// repro: one-command pipeline, averaged over repro_seeds seeds: synthesize,
// build data, train vanilla + maml + mamo per scheme, evaluate everything and
// emit a comparative table.
void cmd_repro(const ExperimentManifest& m);

}  // namespace cqa
