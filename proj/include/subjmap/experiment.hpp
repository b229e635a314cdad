#pragma once

// Config-driven experiment runner behind the `subjmap` command line tool.
// Every command writes results.json, a resolved copy of its config and
// command-specific CSVs, datasets and checkpoints into one output directory.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "subjmap/analysis.hpp"
#include "subjmap/checkpoint.hpp"
#include "subjmap/config_types.hpp"
#include "subjmap/datagen.hpp"
#include "subjmap/dataset.hpp"
#include "subjmap/eval.hpp"
#include "subjmap/optim.hpp"
#include "subjmap/stats.hpp"

namespace subjmap {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct SplitSection {
  std::string scheme = "timestep_fraction";  // timestep_fraction | first_half | subject_holdout | none
  double test_fraction = 0.8;
  double val_fraction = 0.1;
  std::size_t count = 0;  // subject_holdout
};

struct DataSection {
  std::string source = "half_moons";  // half_moons | group | file
  HalfMoonsBenchmark half_moons;
  std::optional<std::uint64_t> angle_seed;  // default: derived from the global seed
  GroupDatasetParams group;
  std::string path;
  std::string format = "auto";  // auto | binary | manifest
  SplitSection split;
};

struct EvalSection {
  std::string checkpoint;
  std::string baseline_checkpoint;
  std::size_t n_folds = 5;
  std::size_t subject_n_folds = 20;
  std::optional<double> gamma;
  double ridge = 1e-3;
  std::size_t embedding_max_rows = 2000;
};

struct AnalysisSection {
  std::string checkpoint;
  TraversalGrid grid;
  std::size_t k = 8;
  double q = 0.05;
  std::size_t max_iter = 1000;
  double tol = 1e-8;
};

struct SweepSection {
  std::vector<std::string> variants;  // default: the model section's variant
  std::vector<double> lr = {1e-3, 3e-3, 1e-2};
  std::vector<std::size_t> first_layer_width = {8, 16};
  std::vector<std::vector<std::size_t>> trunk_widths = {{16}, {16, 16}};
  std::vector<std::size_t> batch_size = {32, 128};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3};
};

struct FinetuneSection {
  std::string checkpoint;           // empty: train a base model on the kept subjects first
  std::string baseline_checkpoint;  // Group baseline when `checkpoint` is given
  std::size_t holdout = 20;
  std::vector<double> fractions = {0.01, 0.05, 0.25, 0.5};
  bool compare_group = true;
};

struct ParamcountSection {
  std::uint64_t input_size = 150000;
  std::uint64_t hidden_size = 10;
  std::uint64_t n_subjects = 1200;
  bool double_count = true;  // encoder + decoder
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "subjmap_out";
  DataSection data;
  ModelSpec model;  // zero sizes are filled in from the data
  TrainConfig train;
  bool train_seed_set = false;
  EvalSection eval;
  AnalysisSection analysis;
  SweepSection sweep;
  FinetuneSection finetune;
  ParamcountSection paramcount;
  fs::path base_dir;  // relative paths resolve against the config file's directory
};

inline ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.model.variant = LayerVariant::Decomposed;
  c.model.objective = Objective::Classifier;
  c.model.first_layer_width = 8;
  c.model.trunk_widths = {16};
  c.model.latent_size = 0;
  return c;
}

namespace detail {

inline void parse_split(const json& j, SplitSection& s) {
  reject_unknown_keys(j, "data.split", {"scheme", "test_fraction", "val_fraction", "count"});
  read_key(j, "data.split", "scheme", s.scheme);
  read_key(j, "data.split", "test_fraction", s.test_fraction);
  read_key(j, "data.split", "val_fraction", s.val_fraction);
  read_key(j, "data.split", "count", s.count);
  if (s.scheme != "timestep_fraction" && s.scheme != "first_half" && s.scheme != "subject_holdout" &&
      s.scheme != "none")
    throw ConfigError("unknown split scheme '" + s.scheme + "' in data.split.scheme");
}

inline void parse_data(const json& j, DataSection& d) {
  reject_unknown_keys(j, "data", {"source", "half_moons", "group", "path", "format", "split"});
  read_key(j, "data", "source", d.source);
  read_key(j, "data", "path", d.path);
  read_key(j, "data", "format", d.format);
  if (d.source != "half_moons" && d.source != "group" && d.source != "file")
    throw ConfigError("unknown data source '" + d.source + "' in data.source");
  if (d.format != "auto" && d.format != "binary" && d.format != "manifest")
    throw ConfigError("unknown format '" + d.format + "' in data.format");
  if (j.contains("half_moons")) {
    const auto& h = j.at("half_moons");
    reject_unknown_keys(h, "data.half_moons", {"n_samples", "noise", "sample_seed", "n_subjects", "angle_seed", "center"});
    read_key(h, "data.half_moons", "n_samples", d.half_moons.n_samples);
    read_key(h, "data.half_moons", "noise", d.half_moons.noise);
    read_key(h, "data.half_moons", "sample_seed", d.half_moons.sample_seed);
    read_key(h, "data.half_moons", "n_subjects", d.half_moons.n_subjects);
    read_key(h, "data.half_moons", "center", d.half_moons.center);
    if (h.contains("angle_seed")) {
      std::uint64_t v = 0;
      read_key(h, "data.half_moons", "angle_seed", v);
      d.angle_seed = v;
    }
  }
  if (j.contains("group")) {
    const auto& g = j.at("group");
    reject_unknown_keys(g, "data.group",
                        {"n_subjects", "timesteps", "n_features", "latent_size", "hidden_size", "group_effect",
                         "subject_spread", "noise", "smoothness", "group_axis"});
    read_key(g, "data.group", "n_subjects", d.group.n_subjects);
    read_key(g, "data.group", "timesteps", d.group.timesteps);
    read_key(g, "data.group", "n_features", d.group.n_features);
    read_key(g, "data.group", "latent_size", d.group.latent_size);
    read_key(g, "data.group", "hidden_size", d.group.hidden_size);
    read_key(g, "data.group", "group_effect", d.group.group_effect);
    read_key(g, "data.group", "subject_spread", d.group.subject_spread);
    read_key(g, "data.group", "noise", d.group.noise);
    read_key(g, "data.group", "smoothness", d.group.smoothness);
    read_key(g, "data.group", "group_axis", d.group.group_axis);
  }
  if (j.contains("split")) parse_split(j.at("split"), d.split);
  if (d.source == "file" && d.path.empty()) throw ConfigError("data.path is required when data.source is 'file'");
}

inline void parse_eval(const json& j, EvalSection& e) {
  reject_unknown_keys(j, "eval", {"checkpoint", "baseline_checkpoint", "n_folds", "subject_n_folds", "gamma", "ridge",
                                  "embedding_max_rows"});
  read_key(j, "eval", "checkpoint", e.checkpoint);
  read_key(j, "eval", "baseline_checkpoint", e.baseline_checkpoint);
  read_key(j, "eval", "n_folds", e.n_folds);
  read_key(j, "eval", "subject_n_folds", e.subject_n_folds);
  read_key(j, "eval", "ridge", e.ridge);
  read_key(j, "eval", "embedding_max_rows", e.embedding_max_rows);
  if (j.contains("gamma") && !j.at("gamma").is_null()) {
    double g = 0.0;
    read_key(j, "eval", "gamma", g);
    e.gamma = g;
  }
}

inline void parse_analysis(const json& j, AnalysisSection& a) {
  reject_unknown_keys(j, "analysis", {"checkpoint", "grid", "k", "q", "max_iter", "tol"});
  read_key(j, "analysis", "checkpoint", a.checkpoint);
  read_key(j, "analysis", "k", a.k);
  read_key(j, "analysis", "q", a.q);
  read_key(j, "analysis", "max_iter", a.max_iter);
  read_key(j, "analysis", "tol", a.tol);
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    reject_unknown_keys(g, "analysis.grid", {"lo", "hi", "points"});
    read_key(g, "analysis.grid", "lo", a.grid.lo);
    read_key(g, "analysis.grid", "hi", a.grid.hi);
    read_key(g, "analysis.grid", "points", a.grid.points);
  }
  if (!(a.q > 0.0 && a.q < 1.0)) throw ConfigError("analysis.q must be in (0, 1)");
}

inline void parse_sweep(const json& j, SweepSection& s) {
  reject_unknown_keys(j, "sweep", {"variants", "lr", "first_layer_width", "trunk_widths", "batch_size", "seeds"});
  read_key(j, "sweep", "variants", s.variants);
  read_key(j, "sweep", "lr", s.lr);
  read_key(j, "sweep", "first_layer_width", s.first_layer_width);
  read_key(j, "sweep", "trunk_widths", s.trunk_widths);
  read_key(j, "sweep", "batch_size", s.batch_size);
  read_key(j, "sweep", "seeds", s.seeds);
  for (const auto& v : s.variants) {
    try {
      parse_variant(v);
    } catch (const Error&) {
      throw ConfigError("unknown variant '" + v + "' in sweep.variants");
    }
  }
}

inline void parse_finetune(const json& j, FinetuneSection& f) {
  reject_unknown_keys(j, "finetune", {"checkpoint", "baseline_checkpoint", "holdout", "fractions", "compare_group"});
  read_key(j, "finetune", "checkpoint", f.checkpoint);
  read_key(j, "finetune", "baseline_checkpoint", f.baseline_checkpoint);
  read_key(j, "finetune", "holdout", f.holdout);
  read_key(j, "finetune", "fractions", f.fractions);
  read_key(j, "finetune", "compare_group", f.compare_group);
  for (double v : f.fractions)
    if (!(v > 0.0 && v <= 0.5))
      throw ConfigError("finetune.fractions entries must be in (0, 0.5]; the second half is held out");
}

inline void parse_paramcount(const json& j, ParamcountSection& p) {
  reject_unknown_keys(j, "paramcount", {"input_size", "hidden_size", "n_subjects", "double_count"});
  read_key(j, "paramcount", "input_size", p.input_size);
  read_key(j, "paramcount", "hidden_size", p.hidden_size);
  read_key(j, "paramcount", "n_subjects", p.n_subjects);
  read_key(j, "paramcount", "double_count", p.double_count);
}

inline ModelSpec parse_model(const json& j, ModelSpec s) {
  try {
    return model_spec_from_json(j, s, "model");
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const json& j, const fs::path& base_dir = {}) {
  ExperimentConfig c = default_experiment_config();
  c.base_dir = base_dir;
  detail::reject_unknown_keys(j, "",
                              {"seed", "output_dir", "data", "model", "train", "eval", "analysis", "sweep",
                               "finetune", "paramcount"});
  detail::read_key(j, "", "seed", c.seed);
  detail::read_key(j, "", "output_dir", c.output_dir);
  if (j.contains("data")) detail::parse_data(j.at("data"), c.data);
  if (j.contains("model")) c.model = detail::parse_model(j.at("model"), c.model);
  if (j.contains("train")) {
    c.train = train_config_from_json(j.at("train"), c.train, "train");
    c.train_seed_set = j.at("train").contains("seed");
  }
  if (j.contains("eval")) detail::parse_eval(j.at("eval"), c.eval);
  if (j.contains("analysis")) detail::parse_analysis(j.at("analysis"), c.analysis);
  if (j.contains("sweep")) detail::parse_sweep(j.at("sweep"), c.sweep);
  if (j.contains("finetune")) detail::parse_finetune(j.at("finetune"), c.finetune);
  if (j.contains("paramcount")) detail::parse_paramcount(j.at("paramcount"), c.paramcount);
  return c;
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j, path.parent_path());
}

/// Fully explicit form of a config; parsing it again yields the same config.
inline json to_json(const ExperimentConfig& c) {
  json data = {{"source", c.data.source},
               {"path", c.data.path},
               {"format", c.data.format},
               {"half_moons",
                {{"n_samples", c.data.half_moons.n_samples},
                 {"noise", c.data.half_moons.noise},
                 {"sample_seed", c.data.half_moons.sample_seed},
                 {"n_subjects", c.data.half_moons.n_subjects},
                 {"center", c.data.half_moons.center}}},
               {"group",
                {{"n_subjects", c.data.group.n_subjects},
                 {"timesteps", c.data.group.timesteps},
                 {"n_features", c.data.group.n_features},
                 {"latent_size", c.data.group.latent_size},
                 {"hidden_size", c.data.group.hidden_size},
                 {"group_effect", c.data.group.group_effect},
                 {"subject_spread", c.data.group.subject_spread},
                 {"noise", c.data.group.noise},
                 {"smoothness", c.data.group.smoothness},
                 {"group_axis", c.data.group.group_axis}}},
               {"split",
                {{"scheme", c.data.split.scheme},
                 {"test_fraction", c.data.split.test_fraction},
                 {"val_fraction", c.data.split.val_fraction},
                 {"count", c.data.split.count}}}};
  if (c.data.angle_seed) data["half_moons"]["angle_seed"] = *c.data.angle_seed;
  json train = to_json(c.train);
  if (!c.train_seed_set) train.erase("seed");
  json eval = {{"checkpoint", c.eval.checkpoint},
               {"baseline_checkpoint", c.eval.baseline_checkpoint},
               {"n_folds", c.eval.n_folds},
               {"subject_n_folds", c.eval.subject_n_folds},
               {"ridge", c.eval.ridge},
               {"embedding_max_rows", c.eval.embedding_max_rows}};
  eval["gamma"] = c.eval.gamma ? json(*c.eval.gamma) : json(nullptr);
  return {{"seed", c.seed},
          {"output_dir", c.output_dir},
          {"data", data},
          {"model", to_json(c.model)},
          {"train", train},
          {"eval", eval},
          {"analysis",
           {{"checkpoint", c.analysis.checkpoint},
            {"grid", {{"lo", c.analysis.grid.lo}, {"hi", c.analysis.grid.hi}, {"points", c.analysis.grid.points}}},
            {"k", c.analysis.k},
            {"q", c.analysis.q},
            {"max_iter", c.analysis.max_iter},
            {"tol", c.analysis.tol}}},
          {"sweep",
           {{"variants", c.sweep.variants},
            {"lr", c.sweep.lr},
            {"first_layer_width", c.sweep.first_layer_width},
            {"trunk_widths", c.sweep.trunk_widths},
            {"batch_size", c.sweep.batch_size},
            {"seeds", c.sweep.seeds}}},
          {"finetune",
           {{"checkpoint", c.finetune.checkpoint},
            {"baseline_checkpoint", c.finetune.baseline_checkpoint},
            {"holdout", c.finetune.holdout},
            {"fractions", c.finetune.fractions},
            {"compare_group", c.finetune.compare_group}}},
          {"paramcount",
           {{"input_size", c.paramcount.input_size},
            {"hidden_size", c.paramcount.hidden_size},
            {"n_subjects", c.paramcount.n_subjects},
            {"double_count", c.paramcount.double_count}}}};
}

/// Hash of the resolved config. The output directory is not part of the
/// experiment's meaning and is left out.
inline std::string experiment_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  return canonical_hash(j);
}

// ---------------------------------------------------------------------------
// Results

struct ExperimentResult {
  std::string command;
  std::string config_hash;
  std::string started_at;
  std::string finished_at;
  json metrics = json::object();
  std::vector<std::string> files;  // relative to the output directory
};

inline json to_json(const ExperimentResult& r) {
  return {{"command", r.command},   {"config_hash", r.config_hash}, {"started_at", r.started_at},
          {"finished_at", r.finished_at}, {"metrics", r.metrics},     {"files", r.files}};
}

struct RunOptions {
  fs::path output_dir;
  std::size_t workers = 1;
  std::ostream* log = nullptr;
};

/// Precedence: explicit flag, then SUBJMAP_OUT, then the config's output_dir.
inline fs::path resolve_output_dir(const ExperimentConfig& c, const std::optional<std::string>& flag) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv("SUBJMAP_OUT"); env && *env) return env;
  const fs::path p = c.output_dir;
  return p.is_absolute() || c.base_dir.empty() ? p : c.base_dir / p;
}

namespace detail {

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline fs::path resolve_path(const ExperimentConfig& c, const std::string& p) {
  const fs::path path = p;
  return path.is_absolute() || c.base_dir.empty() ? path : c.base_dir / path;
}

class Artifacts {
 public:
  Artifacts(fs::path dir, ExperimentResult& result) : dir_(std::move(dir)), result_(result) {
    fs::create_directories(dir_);
  }
  fs::path path(const std::string& name) const { return dir_ / name; }
  void text(const std::string& name, const std::string& content) {
    std::ofstream out(path(name), std::ios::binary);
    if (!out) throw Error("cannot write " + path(name).string());
    out << content;
    add(name);
  }
  void json_file(const std::string& name, const json& j) { text(name, j.dump(2) + "\n"); }
  void add(const std::string& name) {
    if (std::find(result_.files.begin(), result_.files.end(), name) == result_.files.end())
      result_.files.push_back(name);
  }
  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  ExperimentResult& result_;
};

struct DataBundle {
  MultiSubjectDataset data;
  std::optional<RotationGroundTruth> angles;
  std::optional<GroupGroundTruth> group;
};

inline DataBundle load_experiment_data(const ExperimentConfig& c) {
  DataBundle b;
  if (c.data.source == "half_moons") {
    HalfMoonsBenchmark hm = c.data.half_moons;
    hm.angle_seed = c.data.angle_seed.value_or(derive_seed(c.seed, "angles"));
    auto [data, truth] = rotated_half_moons(hm);
    b.data = std::move(data);
    b.angles = std::move(truth);
  } else if (c.data.source == "group") {
    GroupDatasetParams p = c.data.group;
    p.seed = derive_seed(c.seed, "data");
    try {
      auto g = synth_group_dataset(p);
      b.data = std::move(g.data);
      b.group = std::move(g.truth);
    } catch (const DimensionError& e) {
      throw ConfigError(std::string("data.group: ") + e.what());
    }
  } else {
    const fs::path path = resolve_path(c, c.data.path);
    b.data = c.data.format == "auto"     ? load_dataset(path)
             : c.data.format == "binary" ? load_dataset(path, DatasetFormat::Binary)
                                         : load_dataset(path, DatasetFormat::CsvManifest);
  }
  return b;
}

inline SplitScheme split_scheme(const ExperimentConfig& c) {
  const auto& s = c.data.split;
  if (s.scheme == "first_half") return FirstHalfSplit{};
  if (s.scheme == "subject_holdout") return SubjectHoldoutSplit{s.count, derive_seed(c.seed, "holdout")};
  return TimestepFractionSplit{s.test_fraction, s.val_fraction, derive_seed(c.seed, "split")};
}

inline DatasetSplit split_data(const ExperimentConfig& c, const MultiSubjectDataset& data) {
  if (c.data.split.scheme == "none") return {data, {}, {}, {}, {}, {}};
  try {
    return split(data, split_scheme(c));
  } catch (const InvalidFraction& e) {
    throw ConfigError(std::string("data.split: ") + e.what());
  }
}

inline int max_label(const MultiSubjectDataset& data) {
  int m = -1;
  for (const auto& s : data.subjects)
    if (s.labels)
      for (int l : *s.labels) m = std::max(m, l);
  return m;
}

/// Fills data-dependent model sizes left at zero.
inline ModelSpec complete_spec(ModelSpec s, const MultiSubjectDataset& data) {
  if (s.input_size == 0) s.input_size = data.n_features;
  if (s.n_subjects == 0) s.n_subjects = data.size();
  if (s.objective == Objective::Classifier) {
    if (!data.has_labels()) throw ConfigError("model.objective 'classifier' needs timestep labels in the data");
    if (s.n_classes == 0) s.n_classes = static_cast<std::size_t>(std::max(2, max_label(data) + 1));
    if (s.latent_size == 0) s.latent_size = s.n_classes;
  } else if (s.latent_size == 0) {
    s.latent_size = s.trunk_widths.empty() ? s.first_layer_width : 2;
  }
  try {
    s.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return s;
}

inline TrainConfig resolved_train(const ExperimentConfig& c) {
  TrainConfig t = c.train;
  if (!c.train_seed_set) t.seed = derive_seed(c.seed, "train");
  return t;
}

inline json metrics_json(const EvalSummary& e, Objective o) {
  json j = {{"loss", e.loss}, {"rows", e.rows}};
  if (o == Objective::Classifier) j["accuracy"] = e.accuracy;
  else j["mse"] = e.mse;
  return j;
}

inline void log_line(const RunOptions& opt, const std::string& line) {
  if (opt.log) *opt.log << line << "\n";
}

inline std::string label_string(const json& label) { return label.dump(); }

// --- commands --------------------------------------------------------------

inline void run_simulate(const ExperimentConfig& c, const RunOptions& opt, Artifacts& art, ExperimentResult& r) {
  const DataBundle b = load_experiment_data(c);
  save_dataset(b.data, art.path("dataset.smds"), DatasetFormat::Binary);
  art.add("dataset.smds");
  r.metrics["n_subjects"] = b.data.size();
  r.metrics["total_timesteps"] = b.data.total_timesteps();
  r.metrics["n_features"] = b.data.n_features;
  r.metrics["timesteps_per_subject"] = b.data.size() ? b.data.subjects[0].timesteps() : 0;
  const auto bytes = read_file_bytes(art.path("dataset.smds"));
  r.metrics["dataset_sha256"] = sha256_hex(bytes.data(), bytes.size());

  std::string csv = "subject_id,group,timesteps,angle\n";
  for (std::size_t i = 0; i < b.data.size(); ++i) {
    const auto& s = b.data.subjects[i];
    csv += s.subject_id + "," + (s.group ? std::to_string(*s.group) : "") + "," + std::to_string(s.timesteps()) +
           "," + (b.angles ? format_double(b.angles->angles[i]) : "") + "\n";
  }
  art.text("subjects.csv", csv);

  json truth = {{"generator", b.data.metadata.generator}};
  if (b.angles) truth["angles"] = b.angles->angles;
  if (b.group) {
    truth["groups"] = b.group->groups;
    truth["spatial_direction"] = b.group->spatial_direction.values();
    truth["group_direction"] = b.group->group_direction.values();
    std::vector<std::vector<double>> s;
    for (std::size_t i = 0; i < b.group->singular.rows(); ++i) {
      auto row = b.group->singular.row(i);
      s.emplace_back(row.begin(), row.end());
    }
    truth["singular"] = s;
  }
  art.json_file("ground_truth.json", truth);
  log_line(opt, "simulated " + std::to_string(b.data.size()) + " subjects x " +
                    std::to_string(r.metrics["timesteps_per_subject"].get<std::size_t>()) + " samples");
}

inline void run_train(const ExperimentConfig& c, const RunOptions& opt, Artifacts& art, ExperimentResult& r) {
  const DataBundle b = load_experiment_data(c);
  const DatasetSplit sp = split_data(c, b.data);
  const ModelSpec spec = complete_spec(c.model, sp.train);
  const TrainConfig tc = resolved_train(c);
  const Model init = make_model(spec, derive_seed(c.seed, "init"));
  const TrainResult tr = train(init, sp.train, sp.val, tc);

  save_checkpoint(tr.model, art.path("model.smck"), tr.history.config_hash);
  art.add("model.smck");
  art.text("history.csv", history_csv(tr.history));

  json h = to_json(tr.history);
  h.erase("wall_clock_seconds");
  r.metrics["history"] = h;
  r.metrics["param_count"] = total_param_count(tr.model);
  r.metrics["model_sha256"] = parameter_digest(tr.model, tr.model.spec.n_subjects);
  if (sp.val.size()) r.metrics["val"] = metrics_json(evaluate(tr.model, stack_rows(sp.val)), spec.objective);
  const bool same_subjects = c.data.split.scheme != "subject_holdout";
  if (same_subjects && sp.test.size() && sp.test.total_timesteps())
    r.metrics["test"] = metrics_json(evaluate(tr.model, stack_rows(sp.test)), spec.objective);
  log_line(opt, "trained " + std::string(to_string(spec.variant)) + " " + std::string(to_string(spec.objective)) +
                    " for " + std::to_string(tr.history.epochs.size()) + " epochs");
}

inline void run_sweep(const ExperimentConfig& c, const RunOptions& opt, Artifacts& art, ExperimentResult& r) {
  const DataBundle b = load_experiment_data(c);
  const DatasetSplit sp = split_data(c, b.data);
  if (c.data.split.scheme == "subject_holdout") throw ConfigError("sweep needs a timestep split in data.split.scheme");
  const TrainConfig base_train = resolved_train(c);
  std::vector<std::string> variants = c.sweep.variants;
  if (variants.empty()) variants.push_back(std::string(to_string(c.model.variant)));

  std::string csv = "variant,setting,seed,lr,first_layer_width,trunk_widths,batch_size,ok,val_metric,val_loss,test_metric,epochs_run,error\n";
  for (const auto& vname : variants) {
    std::vector<SweepSetting> grid;
    for (double lr : c.sweep.lr)
      for (auto width : c.sweep.first_layer_width)
        for (const auto& trunk : c.sweep.trunk_widths)
          for (auto batch : c.sweep.batch_size) {
            ModelSpec s = c.model;
            s.variant = parse_variant(vname);
            s.first_layer_width = width;
            s.trunk_widths = trunk;
            s = complete_spec(s, sp.train);
            TrainConfig t = base_train;
            t.lr = lr;
            t.batch_size = batch;
            grid.push_back({s, t, {{"lr", lr}, {"first_layer_width", width}, {"trunk_widths", trunk}, {"batch_size", batch}}});
          }

    // Best-validation model per setting; ties go to the earlier seed so the
    // choice does not depend on thread scheduling.
    struct Keep {
      bool set = false;
      double metric = 0.0;
      std::size_t seed_index = 0;
      Model model;
    };
    std::vector<Keep> keep(grid.size());
    std::mutex mu;
    const bool hib = grid.front().spec.objective == Objective::Classifier;
    const auto& seeds = c.sweep.seeds;
    auto on_cell = [&](const SweepCell& cell, const TrainResult& tr) {
      const auto idx = static_cast<std::size_t>(std::find(seeds.begin(), seeds.end(), cell.seed) - seeds.begin());
      std::lock_guard lock(mu);
      Keep& k = keep[cell.setting];
      const bool better = !k.set || (hib ? cell.val_metric > k.metric : cell.val_metric < k.metric) ||
                          (cell.val_metric == k.metric && idx < k.seed_index);
      if (better) k = {true, cell.val_metric, idx, tr.model};
    };
    const SweepTable table =
        hyperparameter_sweep(grid, seeds, SweepData{&sp.train, &sp.val, sp.test.size() ? &sp.test : nullptr},
                             opt.workers, on_cell);

    for (const auto& cell : table.cells) {
      const auto& s = grid[cell.setting];
      std::string trunk;
      for (std::size_t i = 0; i < s.spec.trunk_widths.size(); ++i)
        trunk += (i ? "x" : "") + std::to_string(s.spec.trunk_widths[i]);
      std::string err = cell.error;
      std::replace(err.begin(), err.end(), ',', ';');
      csv += vname + "," + std::to_string(cell.setting) + "," + std::to_string(cell.seed) + "," +
             format_double(s.train.lr) + "," + std::to_string(s.spec.first_layer_width) + "," + trunk + "," +
             std::to_string(s.train.batch_size) + "," + (cell.ok ? "1" : "0") + "," + format_double(cell.val_metric) +
             "," + format_double(cell.val_loss) + "," + format_double(cell.test_metric) + "," +
             std::to_string(cell.epochs_run) + "," + err + "\n";
    }

    const SweepRanking& best = table.ranking.front();
    json per_seed = json::array();
    for (std::size_t j = 0; j < seeds.size(); ++j) {
      const auto& cell = table.cells[table.winner * seeds.size() + j];
      per_seed.push_back({{"seed", cell.seed}, {"ok", cell.ok}, {"val_metric", cell.val_metric},
                          {"test_metric", cell.test_metric}});
    }
    std::size_t failed = 0;
    for (const auto& cell : table.cells) failed += cell.ok ? 0 : 1;
    r.metrics["variants"][vname] = {{"winner_setting", table.winner},
                                    {"winner", grid[table.winner].label},
                                    {"mean_val_metric", best.mean_val_metric},
                                    {"mean_test_metric", best.mean_test_metric},
                                    {"successful_seeds", best.successful_seeds},
                                    {"winner_cells", per_seed},
                                    {"failed_cells", failed},
                                    {"cells", table.cells.size()}};
    if (keep[table.winner].set) {
      const std::string name = "best_" + vname + ".smck";
      const Model& m = keep[table.winner].model;
      save_checkpoint(m, art.path(name), config_hash(grid[table.winner].train, m.spec));
      art.add(name);
      r.metrics["variants"][vname]["checkpoint"] = name;
      r.metrics["variants"][vname]["checkpoint_seed"] = seeds[keep[table.winner].seed_index];
    }
    log_line(opt, "sweep " + vname + ": winner " + label_string(grid[table.winner].label) +
                      " mean test metric " + format_double(best.mean_test_metric));
  }
  art.text("sweep.csv", csv);
  r.metrics["higher_is_better"] = c.model.objective == Objective::Classifier;
}

inline EvalSummary evaluate_heldout(const Model& m, const MultiSubjectDataset& held, SubjectIndex offset) {
  return evaluate(m, stack_rows(held, offset));
}

inline void run_finetune(const ExperimentConfig& c, const RunOptions& opt, Artifacts& art, ExperimentResult& r) {
  const DataBundle b = load_experiment_data(c);
  const TrainConfig tc = resolved_train(c);

  Model base;
  std::optional<Model> group_model;
  MultiSubjectDataset new_subjects;
  if (!c.finetune.checkpoint.empty()) {
    base = load_checkpoint(resolve_path(c, c.finetune.checkpoint)).model;
    new_subjects = b.data;
    if (!c.finetune.baseline_checkpoint.empty())
      group_model = load_checkpoint(resolve_path(c, c.finetune.baseline_checkpoint)).model;
  } else {
    if (c.finetune.holdout == 0 || c.finetune.holdout >= b.data.size())
      throw ConfigError("finetune.holdout must be between 1 and the number of subjects - 1");
    const DatasetSplit hs = split(b.data, SubjectHoldoutSplit{c.finetune.holdout, derive_seed(c.seed, "holdout")});
    new_subjects = hs.test;
    const double val_fraction = c.data.split.val_fraction;
    const DatasetSplit tv =
        split(hs.train, TimestepFractionSplit{0.0, val_fraction, derive_seed(c.seed, "split")});
    const ModelSpec spec = complete_spec(c.model, tv.train);
    base = train(make_model(spec, derive_seed(c.seed, "init")), tv.train, tv.val, tc).model;
    if (c.finetune.compare_group && spec.variant != LayerVariant::Group) {
      ModelSpec gs = spec;
      gs.variant = LayerVariant::Group;
      group_model = train(make_model(gs, derive_seed(c.seed, "init")), tv.train, tv.val, tc).model;
    }
  }
  if (base.spec.variant == LayerVariant::Group) throw ConfigError("fine-tuning needs a Subject or Decomposed model");

  const MultiSubjectDataset held = split(new_subjects, FirstHalfSplit{}).test;
  const auto offset = static_cast<SubjectIndex>(base.spec.n_subjects);
  const Objective o = base.spec.objective;
  save_checkpoint(base, art.path("base.smck"));
  art.add("base.smck");

  std::optional<double> baseline;
  if (group_model) {
    // A Group map ignores subject ids; appending makes the ids valid.
    Model g = *group_model;
    append_subjects(g, new_subjects.size());
    baseline = evaluate_heldout(g, held, offset).metric(o);
    r.metrics["group_baseline"] = *baseline;
  }

  const std::string frozen = parameter_digest(base, base.spec.n_subjects);
  std::string csv = "fraction,steps,heldout_metric,improvement_pct\n";
  std::vector<double> fractions, values;
  bool frozen_ok = true;
  json rows = json::array();
  for (double f : c.finetune.fractions) {
    const FinetuneResult ft = finetune_subjects(base, new_subjects, f, tc);
    const bool same = parameter_digest(ft.model, ft.first_new_subject) == frozen;
    frozen_ok = frozen_ok && same;
    const double v = evaluate_heldout(ft.model, held, offset).metric(o);
    fractions.push_back(f);
    values.push_back(v);
    json row = {{"fraction", f}, {"steps", ft.history.steps}, {"heldout_metric", v}, {"frozen_digest_unchanged", same}};
    std::string imp;
    if (baseline && o != Objective::Classifier) {
      row["improvement_pct"] = recon_improvement(v, *baseline);
      imp = format_double(row["improvement_pct"].get<double>());
    }
    rows.push_back(row);
    csv += format_double(f) + "," + std::to_string(ft.history.steps) + "," + format_double(v) + "," + imp + "\n";
    std::ostringstream name;
    name << "finetuned_" << f << ".smck";
    save_checkpoint(ft.model, art.path(name.str()));
    art.add(name.str());
  }
  art.text("finetune.csv", csv);
  r.metrics["fractions"] = rows;
  r.metrics["frozen_digest"] = frozen;
  r.metrics["frozen_digest_unchanged"] = frozen_ok;
  r.metrics["heldout_metric"] = o == Objective::Classifier ? "accuracy" : "mse";
  if (fractions.size() >= 2) r.metrics["spearman_fraction_vs_metric"] = spearman(fractions, values);
  log_line(opt, "fine-tuned " + std::to_string(new_subjects.size()) + " new subjects at " +
                    std::to_string(fractions.size()) + " fractions");
}

inline void run_evaluate(const ExperimentConfig& c, const RunOptions& opt, Artifacts& art, ExperimentResult& r) {
  if (c.eval.checkpoint.empty()) throw ConfigError("eval.checkpoint is required for 'evaluate'");
  const DataBundle b = load_experiment_data(c);
  const Model model = load_checkpoint(resolve_path(c, c.eval.checkpoint)).model;
  const DatasetSplit sp = split_data(c, b.data);
  const bool same_subjects = c.data.split.scheme != "subject_holdout";
  const MultiSubjectDataset& test = same_subjects && sp.test.size() ? sp.test : sp.train;
  const Objective o = model.spec.objective;
  if (test.size() != model.spec.n_subjects)
    throw ShapeMismatch("evaluation data has " + std::to_string(test.size()) + " subjects, model has " +
                        std::to_string(model.spec.n_subjects));

  const EvalSummary te = evaluate(model, stack_rows(test));
  r.metrics["test"] = metrics_json(te, o);
  if (!c.eval.baseline_checkpoint.empty()) {
    const Model baseline = load_checkpoint(resolve_path(c, c.eval.baseline_checkpoint)).model;
    const EvalSummary be = evaluate(baseline, stack_rows(test));
    r.metrics["baseline_test"] = metrics_json(be, baseline.spec.objective);
    if (o != Objective::Classifier) r.metrics["recon_improvement_pct"] = recon_improvement(te.mse, be.mse);
  }

  if (model.spec.variant != LayerVariant::Group) {
    const Matrix w = subject_weights(model.encoder_map);
    try {
      const Matrix coords = subject_weight_pca(w);
      std::string csv = "subject_id,pc1,pc2,angle_true\n";
      for (std::size_t i = 0; i < coords.rows(); ++i)
        csv += b.data.subjects[i].subject_id + "," + format_double(coords(i, 0)) + "," + format_double(coords(i, 1)) +
               "," + (b.angles ? format_double(b.angles->angles[i]) : "") + "\n";
      art.text("subject_pca.csv", csv);
      try {
        const CircleFit fit = circle_fit(coords);
        r.metrics["circle"] = to_json(fit);
        if (b.angles) {
          const auto recovered = angles_around(coords, fit.center_x, fit.center_y);
          r.metrics["circle"]["circular_correlation"] = circular_correlation(recovered, b.angles->angles);
        }
      } catch (const DegenerateGeometry& e) {
        r.metrics["circle"] = {{"error", e.what()}};
      }
    } catch (const DimensionError& e) {
      r.metrics["subject_pca_error"] = e.what();
    }
  }

  if (b.data.has_groups() && model.spec.variant != LayerVariant::Group) {
    std::vector<int> groups;
    for (const auto& s : b.data.subjects) groups.push_back(*s.group);
    ProbeOptions po{c.eval.subject_n_folds, c.eval.gamma, c.eval.ridge, derive_seed(c.seed, "probe"), "group"};
    try {
      r.metrics["subject_probe"] = to_json(probe_classify(subject_fingerprints(model), groups, po));
    } catch (const DegenerateFold& e) {
      r.metrics["subject_probe"] = {{"error", e.what()}};
    }
  }

  if (o != Objective::Classifier && test.has_labels()) {
    StackedRows rows = stack_rows(test);
    std::vector<std::size_t> idx(rows.x.rows());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > c.eval.embedding_max_rows) {
      SeededRng rng(derive_seed(c.seed, "embedding-subsample"));
      rng.shuffle(idx);
      idx.resize(c.eval.embedding_max_rows);
      std::sort(idx.begin(), idx.end());
    }
    const Matrix x = rows.x.rows_subset(idx);
    std::vector<SubjectIndex> ids;
    std::vector<int> labels;
    for (auto i : idx) {
      ids.push_back(rows.ids[i]);
      labels.push_back(rows.labels[i]);
    }
    const Matrix mu = encode(model, x, ids).mu;
    ProbeOptions po{c.eval.n_folds, c.eval.gamma, c.eval.ridge, derive_seed(c.seed, "probe"), "timestep"};
    try {
      r.metrics["embedding_probe"] = to_json(probe_classify(mu, labels, po));
    } catch (const DegenerateFold& e) {
      r.metrics["embedding_probe"] = {{"error", e.what()}};
    }
  }
  log_line(opt, "evaluated " + std::string(to_string(model.spec.variant)) + " model on " +
                    std::to_string(test.size()) + " subjects");
}

inline void run_analyze(const ExperimentConfig& c, const RunOptions& opt, Artifacts& art, ExperimentResult& r) {
  if (c.analysis.checkpoint.empty()) throw ConfigError("analysis.checkpoint is required for 'analyze'");
  const DataBundle b = load_experiment_data(c);
  const Model model = load_checkpoint(resolve_path(c, c.analysis.checkpoint)).model;
  PipelineOptions po;
  po.grid = c.analysis.grid;
  po.q = c.analysis.q;
  po.ica = {c.analysis.k, derive_seed(c.seed, "ica"), c.analysis.max_iter, c.analysis.tol};
  const GroupDiffResult res = group_difference_pipeline(model, b.data, po);

  art.text("group_difference.csv", report_csv(res.report));
  save_dataset(spatial_maps_dataset(res.ica), art.path("spatial_maps.smds"), DatasetFormat::Binary);
  art.add("spatial_maps.smds");
  r.metrics["report"] = to_json(res.report);
  r.metrics["ica_converged"] = res.ica.converged;
  r.metrics["ica_iterations"] = res.ica.iterations.empty() ? 0 : res.ica.iterations.front();
  if (b.group) {
    json corr = json::array();
    double best_rejected = 0.0;
    for (std::size_t k = 0; k < res.ica.sources.rows(); ++k) {
      const double v = std::abs(pearson(res.ica.sources.row(k), b.group->spatial_direction.row(0)));
      corr.push_back(v);
      if (res.report.sources[k].reject) best_rejected = std::max(best_rejected, v);
    }
    r.metrics["planted_map_abs_correlation"] = corr;
    r.metrics["best_rejected_planted_correlation"] = best_rejected;
  }
  log_line(opt, "analysis: " + std::to_string(res.report.rejections()) + " of " +
                    std::to_string(res.report.sources.size()) + " sources rejected at q=" + format_double(po.q));
}

inline std::string sci(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", static_cast<double>(v));
  return buf;
}

inline void run_paramcount(const ExperimentConfig& c, const RunOptions& opt, Artifacts& art, ExperimentResult& r) {
  const ParamRegime reg{c.paramcount.input_size, c.paramcount.hidden_size, c.paramcount.n_subjects};
  const std::uint64_t factor = c.paramcount.double_count ? 2 : 1;
  std::string csv = "variant,params\n";
  for (auto v : {LayerVariant::Subject, LayerVariant::Decomposed, LayerVariant::Group}) {
    std::uint64_t n = 0;
    try {
      n = factor * param_count(v, reg);
    } catch (const DimensionError& e) {
      throw ConfigError(std::string("paramcount: ") + e.what());
    }
    const std::string name(to_string(v));
    r.metrics["counts"][name] = n;
    csv += name + "," + std::to_string(n) + "\n";
    log_line(opt, name + " " + std::to_string(n) + " (" + sci(n) + ")");
  }
  r.metrics["double_count"] = c.paramcount.double_count;
  if (c.paramcount.double_count) log_line(opt, "counts include the x2 encoder+decoder convention");
  art.text("paramcount.csv", csv);
}

}  // namespace detail

inline constexpr std::string_view kCommands[] = {"simulate", "train",   "sweep",     "finetune",
                                                 "evaluate", "analyze", "paramcount"};

/// Runs one command and writes its artifacts into `opt.output_dir`.
inline ExperimentResult run_experiment(std::string_view command, const ExperimentConfig& c, const RunOptions& opt) {
  ExperimentResult r;
  r.command = std::string(command);
  r.config_hash = experiment_hash(c);
  r.started_at = detail::utc_now();
  detail::Artifacts art(opt.output_dir, r);

  json resolved = to_json(c);
  resolved["output_dir"] = opt.output_dir.string();
  art.json_file("config.resolved.json", resolved);

  if (command == "simulate") detail::run_simulate(c, opt, art, r);
  else if (command == "train") detail::run_train(c, opt, art, r);
  else if (command == "sweep") detail::run_sweep(c, opt, art, r);
  else if (command == "finetune") detail::run_finetune(c, opt, art, r);
  else if (command == "evaluate") detail::run_evaluate(c, opt, art, r);
  else if (command == "analyze") detail::run_analyze(c, opt, art, r);
  else if (command == "paramcount") detail::run_paramcount(c, opt, art, r);
  else throw ConfigError("unknown command '" + std::string(command) + "'");

  r.finished_at = detail::utc_now();
  art.add("results.json");
  std::ofstream out(art.path("results.json"));
  out << to_json(r).dump(2) << "\n";
  if (!out) throw Error("cannot write " + art.path("results.json").string());
  return r;
}

}  // namespace subjmap
