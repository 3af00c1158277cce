#include "cqa/commands.hpp"

#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cqa/eval.hpp"

namespace cqa {

namespace {

using nlohmann::json;

constexpr int64_t kCheckpointCadence = 500;

json train_to_json(const TrainConfig& c) {
  json j;
  j["algorithm"] = to_string(c.algorithm);
  j["scheme"] = c.scheme ? json(to_string(*c.scheme)) : json(nullptr);
  j["support_batch"] = c.support_batch;
  j["target_batch"] = c.target_batch;
  j["adaptation_lr"] = c.adaptation_lr;
  j["outer_lr"] = c.outer_lr;
  j["entity_lr"] = c.entity_lr;
  j["second_order"] = c.second_order;
  j["steps"] = c.steps;
  j["seed"] = c.seed;
  j["inference_support"] = c.inference_support;
  j["inference_steps"] = c.inference_steps;
  j["inference_lr"] = c.inference_lr;
  j["negatives_per_query"] = c.negatives_per_query;
  j["margin"] = c.margin;
  return j;
}

TrainConfig train_from_json(const json& j, TrainConfig base) {
  TrainConfig c = base;
  if (j.contains("algorithm")) {
    auto a = parse_algorithm(j.at("algorithm").get<std::string>());
    if (!a) throw ConfigError("unknown algorithm in config");
    c.algorithm = *a;
  }
  if (j.contains("scheme") && !j.at("scheme").is_null()) {
    auto s = parse_scheme(j.at("scheme").get<std::string>());
    if (!s) throw ConfigError("unknown scheme in config");
    c.scheme = *s;
  }
  c.support_batch = j.value("support_batch", c.support_batch);
  c.target_batch = j.value("target_batch", c.target_batch);
  c.adaptation_lr = j.value("adaptation_lr", c.adaptation_lr);
  c.outer_lr = j.value("outer_lr", c.outer_lr);
  c.entity_lr = j.value("entity_lr", c.entity_lr);
  c.second_order = j.value("second_order", c.second_order);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  c.inference_support = j.value("inference_support", c.inference_support);
  c.inference_steps = j.value("inference_steps", c.inference_steps);
  c.inference_lr = j.value("inference_lr", c.inference_lr);
  c.negatives_per_query = j.value("negatives_per_query", c.negatives_per_query);
  c.margin = j.value("margin", c.margin);
  return c;
}

}  // namespace

ExperimentManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError("bad config file " + path.string() + ": " + e.what());
  }
  ExperimentManifest m;
  if (j.contains("setting")) {
    auto s = parse_setting(j.at("setting").get<std::string>());
    if (!s) throw ConfigError("unknown setting in config");
    m.setting = *s;
  }
  if (j.contains("graph_dir") && !j.at("graph_dir").is_null()) {
    m.graph_dir = j.at("graph_dir").get<std::string>();
  }
  if (j.contains("synthetic")) {
    const json& s = j.at("synthetic");
    m.synthetic.num_entities = s.value("num_entities", m.synthetic.num_entities);
    m.synthetic.num_relations = s.value("num_relations", m.synthetic.num_relations);
    m.synthetic.edges_per_relation =
        s.value("edges_per_relation", m.synthetic.edges_per_relation);
    m.synthetic.holdout = s.value("holdout", m.synthetic.holdout);
  }
  m.dim = j.value("dim", m.dim);
  m.depth_cap = j.value("depth_cap", m.depth_cap);
  m.pool_size = j.value("pool_size", m.pool_size);
  m.ratio = j.value("ratio", m.ratio);
  m.eval_size = j.value("eval_size", m.eval_size);
  m.data_seed = j.value("data_seed", m.data_seed);
  m.repro_seeds = j.value("repro_seeds", m.repro_seeds);
  m.out_dir = j.value("out_dir", m.out_dir);
  if (j.contains("resume_checkpoint") && !j.at("resume_checkpoint").is_null()) {
    m.resume_checkpoint = j.at("resume_checkpoint").get<std::string>();
  }
  if (j.contains("checkpoint") && !j.at("checkpoint").is_null()) {
    m.checkpoint = j.at("checkpoint").get<std::string>();
  }
  if (j.contains("train")) m.train = train_from_json(j.at("train"), m.train);
  return m;
}

void save_manifest(const std::filesystem::path& path,
                   const ExperimentManifest& m) {
  json j;
  j["setting"] = to_string(m.setting);
  j["graph_dir"] = m.graph_dir ? json(*m.graph_dir) : json(nullptr);
  j["synthetic"] = {{"num_entities", m.synthetic.num_entities},
                    {"num_relations", m.synthetic.num_relations},
                    {"edges_per_relation", m.synthetic.edges_per_relation},
                    {"holdout", m.synthetic.holdout}};
  j["dim"] = m.dim;
  j["depth_cap"] = m.depth_cap;
  j["pool_size"] = m.pool_size;
  j["ratio"] = m.ratio;
  j["eval_size"] = m.eval_size;
  j["data_seed"] = m.data_seed;
  j["repro_seeds"] = m.repro_seeds;
  j["train"] = train_to_json(m.train);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest: " + path.string());
  out << j.dump(2) << '\n';
}

namespace {

std::filesystem::path require_out_dir(const ExperimentManifest& m) {
  if (m.out_dir.empty()) throw ConfigError("an output directory is required");
  return m.out_dir;
}

void refuse_existing(const std::filesystem::path& dir, bool force) {
  if (std::filesystem::exists(dir) && !std::filesystem::is_empty(dir) && !force) {
    throw ConfigError("output directory " + dir.string() +
                      " exists; pass --force to overwrite");
  }
}

GraphSplit obtain_split(const ExperimentManifest& m, uint64_t seed) {
  if (m.graph_dir) return load_split(*m.graph_dir);
  return generate_synthetic_kg(m.synthetic.num_entities,
                               m.synthetic.num_relations,
                               m.synthetic.edges_per_relation,
                               m.synthetic.holdout, seed);
}

ModelDims dims_from(const ExperimentManifest& m, const GraphSplit& split) {
  ModelDims dims;
  dims.dim = m.dim;
  dims.hidden = m.dim;
  dims.num_entities = split.test.num_entities();
  dims.num_relations = split.test.num_relations();
  dims.depth_cap = m.depth_cap;
  return dims;
}

ModelDims dims_from_meta(const ExperimentManifest& m,
                         const std::filesystem::path& graph_dir) {
  std::ifstream in(graph_dir / "meta.json");
  if (!in) throw DataError("missing graph metadata: " + (graph_dir / "meta.json").string());
  json meta = json::parse(in);
  ModelDims dims;
  dims.dim = m.dim;
  dims.hidden = m.dim;
  dims.num_entities = meta.at("num_entities").get<int32_t>();
  dims.num_relations = meta.at("num_relations").get<int32_t>();
  dims.depth_cap = m.depth_cap;
  return dims;
}

std::string norms_json(const std::map<OperatorTypeKey, double>& norms) {
  json j = json::object();
  for (const auto& [key, n] : norms) j[to_string(key)] = n;
  return j.dump();
}

Checkpoint run_training(const FewShotDataset& dataset, const ModelDims& dims,
                        const TrainConfig& config, std::ostream* log,
                        const Checkpoint* resume,
                        const std::filesystem::path* checkpoint_dir) {
  config.validate();
  TrainData data(dataset, dims,
                 config.algorithm == Algorithm::MAMO ? config.scheme
                                                     : std::nullopt);
  if (data.flat().empty()) throw DataError("training split is empty");
  if (config.algorithm == Algorithm::MAMO && data.categories_present().empty()) {
    throw DataError("dataset contains no operator sites for the configured scheme");
  }

  Checkpoint ck;
  if (resume != nullptr) {
    ck = *resume;
    if (ck.algorithm != config.algorithm || ck.scheme != config.scheme) {
      throw ConfigError("checkpoint algorithm/scheme does not match the config");
    }
    if (!(ck.store.dims == dims)) {
      throw ConfigError("checkpoint dimensions do not match the dataset/config");
    }
  } else {
    ck.store = ParameterStore::init(dims, config.seed);
    ck.adam = AdamState::init(dims);
    ck.algorithm = config.algorithm;
    ck.scheme = config.scheme;
    ck.run_seed = config.seed;
    ck.step = 0;
  }

  for (int64_t step = ck.step; step < config.steps; ++step) {
    StepResult r;
    switch (config.algorithm) {
      case Algorithm::Vanilla:
        r = vanilla_step(data, ck.store, ck.adam, config, step);
        break;
      case Algorithm::MAML:
        r = maml_step(data, ck.store, ck.adam, config, step);
        break;
      case Algorithm::MAMO:
        r = mamo_step(data, ck.store, ck.adam, config, step);
        break;
    }
    ck.step = step + 1;
    if (log != nullptr) {
      *log << "{\"step\":" << ck.step << ",\"algorithm\":\""
           << to_string(config.algorithm) << "\",\"outer_loss\":" << r.loss;
      if (config.algorithm == Algorithm::MAMO) {
        *log << ",\"inner_grad_norms\":" << norms_json(r.inner_grad_norms);
      }
      *log << "}\n";
    }
    if (checkpoint_dir != nullptr && ck.step % kCheckpointCadence == 0 &&
        ck.step < config.steps) {
      save_checkpoint(*checkpoint_dir /
                          ("checkpoint_step" + std::to_string(ck.step) + ".bin"),
                      ck);
    }
  }
  return ck;
}

// Evaluation-ready parameters for one trained checkpoint: runs test-time
// adaptation for mamo, per-template fine-tuning for maml.
class PreparedEval {
 public:
  PreparedEval(Checkpoint ck, const FewShotDataset& dataset,
               const TrainConfig& config, std::vector<std::string>* log)
      : store_(std::move(ck.store)), algorithm_(ck.algorithm) {
    TrainConfig cfg = config;
    cfg.algorithm = ck.algorithm;
    cfg.scheme = ck.scheme;
    if (ck.algorithm == Algorithm::MAMO) {
      scheme_ = ck.scheme;
      TrainData data(dataset, store_.dims, ck.scheme);
      inference_adapt(store_, data, cfg, log);
    } else if (ck.algorithm == Algorithm::MAML) {
      TrainData data(dataset, store_.dims, std::nullopt);
      for (const std::string& name : eval_templates(dataset.setting)) {
        per_template_.emplace(
            name, maml_adapt_for_template(store_, data, cfg, name, log));
      }
    }
  }

  LabeledStore labeled(const std::string& label) const {
    LabeledStore ls;
    ls.label = label;
    ls.scheme = scheme_;
    if (algorithm_ == Algorithm::MAML) {
      ls.provider = [this](const std::string& name) -> const ParameterStore& {
        return per_template_.at(name);
      };
    } else {
      ls.store = &store_;
    }
    return ls;
  }

 private:
  ParameterStore store_;
  Algorithm algorithm_;
  std::optional<Scheme> scheme_;
  std::map<std::string, ParameterStore> per_template_;
};

std::string row_label(Algorithm a, std::optional<Scheme> scheme) {
  if (a == Algorithm::MAMO && scheme) {
    return "mamo(" + to_string(*scheme) + ")";
  }
  return to_string(a);
}

const std::vector<Scheme>& repro_schemes(Setting setting) {
  static const std::vector<Scheme> multihop = {Scheme::R, Scheme::L, Scheme::I,
                                               Scheme::O};
  static const std::vector<Scheme> epfo = {Scheme::R, Scheme::L, Scheme::I,
                                           Scheme::O, Scheme::BO};
  static const std::vector<Scheme> efo1 = {Scheme::R,  Scheme::L, Scheme::I,
                                           Scheme::O,  Scheme::BI,
                                           Scheme::BO};
  switch (setting) {
    case Setting::MultiHop: return multihop;
    case Setting::EPFO: return epfo;
    case Setting::EFO1: return efo1;
  }
  throw ContractViolation("unreachable setting");
}

}  // namespace

void cmd_make_data(const ExperimentManifest& m) {
  auto out = require_out_dir(m);
  refuse_existing(out / "data", m.force);
  GraphSplit split = obtain_split(m, m.data_seed);
  save_split(out / "graph", split);
  FewShotDataset ds = build_fewshot_dataset(split, m.setting, m.pool_size,
                                            m.ratio, m.data_seed, m.eval_size);
  save_dataset(out / "data", ds);
  save_manifest(out / "manifest.json", m);
}

void cmd_train(const ExperimentManifest& m) {
  auto out = require_out_dir(m);
  FewShotDataset dataset = load_dataset(out / "data");
  ModelDims dims = dims_from_meta(m, out / "graph");

  std::optional<Checkpoint> resume;
  if (m.resume_checkpoint) resume = load_checkpoint(*m.resume_checkpoint);

  std::ofstream log(out / "train_log.jsonl",
                    resume ? std::ios::app : std::ios::trunc);
  if (!log) throw DataError("cannot write training log in " + out.string());

  Checkpoint ck = run_training(dataset, dims, m.train, &log,
                               resume ? &*resume : nullptr, &out);
  save_checkpoint(out / "checkpoint_final.bin", ck);
  save_manifest(out / "manifest.json", m);
}

void cmd_eval(const ExperimentManifest& m) {
  auto out = require_out_dir(m);
  std::filesystem::path ck_path =
      m.checkpoint ? std::filesystem::path(*m.checkpoint)
                   : out / "checkpoint_final.bin";
  Checkpoint ck = load_checkpoint(ck_path);
  if (m.train.scheme && ck.scheme && *m.train.scheme != *ck.scheme) {
    throw ConfigError("requested scheme does not match the checkpoint");
  }
  FewShotDataset dataset = load_dataset(out / "data");

  std::vector<std::string> log;
  std::string label = row_label(ck.algorithm, ck.scheme);
  PreparedEval prepared(std::move(ck), dataset, m.train, &log);
  ResultTable table = mrr_table(dataset, {prepared.labeled(label)});

  std::ofstream csv(out / "results.csv");
  write_csv(csv, table);
  std::ofstream txt(out / "results.txt");
  write_text(txt, table);
  if (!log.empty()) {
    std::ofstream lg(out / "adaptation_log.txt");
    for (const std::string& line : log) lg << line << '\n';
  }
}

void cmd_repro(const ExperimentManifest& m) {
  auto out = require_out_dir(m);
  refuse_existing(out, m.force);
  std::filesystem::create_directories(out);

  struct RowSpec {
    Algorithm algorithm;
    std::optional<Scheme> scheme;
  };
  std::vector<RowSpec> rows = {{Algorithm::Vanilla, std::nullopt},
                               {Algorithm::MAML, std::nullopt}};
  if (m.train.scheme) {
    rows.push_back({Algorithm::MAMO, m.train.scheme});
  } else {
    for (Scheme s : repro_schemes(m.setting)) {
      rows.push_back({Algorithm::MAMO, s});
    }
  }

  ResultTable table;
  table.setting = to_string(m.setting);
  table.columns = eval_templates(m.setting);
  std::vector<std::vector<double>> sums(
      rows.size(), std::vector<double>(table.columns.size(), 0.0));

  for (int s = 0; s < m.repro_seeds; ++s) {
    GraphSplit split = obtain_split(m, m.data_seed + s);
    FewShotDataset ds = build_fewshot_dataset(split, m.setting, m.pool_size,
                                              m.ratio, m.data_seed + s,
                                              m.eval_size);
    ModelDims dims = dims_from(m, split);
    auto seed_dir = out / ("seed" + std::to_string(s));
    std::filesystem::create_directories(seed_dir);

    ResultTable seed_table;
    seed_table.setting = table.setting;
    seed_table.columns = table.columns;

    for (size_t r = 0; r < rows.size(); ++r) {
      TrainConfig cfg = m.train;
      cfg.algorithm = rows[r].algorithm;
      cfg.scheme = rows[r].scheme;
      cfg.seed = m.train.seed + s;
      Checkpoint ck = run_training(ds, dims, cfg, nullptr, nullptr, nullptr);
      PreparedEval prepared(std::move(ck), ds, cfg, nullptr);
      std::string label = row_label(cfg.algorithm, cfg.scheme);
      ResultTable one = mrr_table(ds, {prepared.labeled(label)});
      seed_table.rows.push_back(one.rows[0]);
      for (size_t c = 0; c < table.columns.size(); ++c) {
        sums[r][c] += one.rows[0].mrr[c];
      }
    }
    std::ofstream seed_csv(seed_dir / "table.csv");
    write_csv(seed_csv, seed_table);
  }

  for (size_t r = 0; r < rows.size(); ++r) {
    ResultTable::Row row;
    row.label = row_label(rows[r].algorithm, rows[r].scheme);
    double total = 0.0;
    for (double sum : sums[r]) {
      row.mrr.push_back(sum / m.repro_seeds);
      total += row.mrr.back();
    }
    row.avg = total / static_cast<double>(table.columns.size());
    table.rows.push_back(std::move(row));
  }

  std::ofstream csv(out / "table.csv");
  write_csv(csv, table);
  std::ofstream txt(out / "table.txt");
  write_text(txt, table);
  save_manifest(out / "manifest.json", m);
}

}  // namespace cqa
