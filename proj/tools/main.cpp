#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cqa/commands.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::string setting;
  std::string algorithm;
  std::string scheme;
  std::optional<uint64_t> seed;
  std::string out;
  bool force = false;
  std::optional<int64_t> steps;
  std::string checkpoint;
  std::string resume;
  std::string graph;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "manifest/config file (JSON)");
  cmd->add_option("--setting", f.setting, "multihop|epfo|efo1");
  cmd->add_option("--algorithm", f.algorithm, "vanilla|maml|mamo");
  cmd->add_option("--scheme", f.scheme, "R|L|I|O|BI|BO");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_flag("--force", f.force, "overwrite existing outputs");
}

cqa::ExperimentManifest build_manifest(const CommonFlags& f) {
  cqa::ExperimentManifest m;
  if (!f.config.empty()) m = cqa::load_manifest(f.config);
  if (!f.setting.empty()) {
    auto s = cqa::parse_setting(f.setting);
    if (!s) throw cqa::ConfigError("unknown setting: " + f.setting);
    m.setting = *s;
  }
  if (!f.algorithm.empty()) {
    auto a = cqa::parse_algorithm(f.algorithm);
    if (!a) throw cqa::ConfigError("unknown algorithm: " + f.algorithm);
    m.train.algorithm = *a;
  }
  if (!f.scheme.empty()) {
    auto s = cqa::parse_scheme(f.scheme);
    if (!s) throw cqa::ConfigError("unknown scheme: " + f.scheme);
    m.train.scheme = *s;
  }
  if (f.seed) {
    m.train.seed = *f.seed;
    m.data_seed = *f.seed;
  }
  if (!f.out.empty()) m.out_dir = f.out;
  if (f.force) m.force = true;
  if (f.steps) m.train.steps = *f.steps;
  if (!f.checkpoint.empty()) m.checkpoint = f.checkpoint;
  if (!f.resume.empty()) m.resume_checkpoint = f.resume;
  if (!f.graph.empty()) m.graph_dir = f.graph;
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot complex query answering over knowledge graphs: "
               "dataset generation, meta-operator training and filtered-MRR "
               "evaluation"};
  app.require_subcommand(1);

  CommonFlags make_f, train_f, eval_f, repro_f;

  CLI::App* make = app.add_subcommand("make-data", "generate a graph split and few-shot query dataset");
  add_common(make, make_f);
  make->add_option("--graph", make_f.graph, "load a split directory instead of synthesizing");

  CLI::App* train = app.add_subcommand("train", "train on a dataset produced by make-data");
  add_common(train, train_f);
  train->add_option("--steps", train_f.steps, "training steps");
  train->add_option("--resume", train_f.resume, "checkpoint to resume from");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint (filtered MRR per query type)");
  add_common(eval, eval_f);
  eval->add_option("--checkpoint", eval_f.checkpoint, "checkpoint path (default: <out>/checkpoint_final.bin)");

  CLI::App* repro = app.add_subcommand("repro", "full pipeline: data + all algorithms + comparison table");
  add_common(repro, repro_f);
  repro->add_option("--steps", repro_f.steps, "training steps per run");

  CLI11_PARSE(app, argc, argv);

  try {
    if (make->parsed()) cqa::cmd_make_data(build_manifest(make_f));
    if (train->parsed()) cqa::cmd_train(build_manifest(train_f));
    if (eval->parsed()) cqa::cmd_eval(build_manifest(eval_f));
    if (repro->parsed()) cqa::cmd_repro(build_manifest(repro_f));
  } catch (const cqa::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const cqa::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const cqa::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
