#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "subjmap/experiment.hpp"

using namespace subjmap;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("subjmap_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig parse(const std::string& text) {
  return parse_experiment_config(nlohmann::json::parse(text));
}

// Small half-moons classifier run that finishes in well under a second.
const char* kTinyTrain = R"({
  "seed": 3,
  "data": {"source": "half_moons", "half_moons": {"n_samples": 100, "n_subjects": 4}},
  "model": {"variant": "decomposed", "first_layer_width": 4, "trunk_widths": [6]},
  "train": {"epochs": 3, "batch_size": 16, "lr": 0.01}
})";

Model tiny_model(LayerVariant v) {
  ModelSpec s;
  s.variant = v;
  s.input_size = 5;
  s.first_layer_width = 3;
  s.trunk_widths = {4};
  s.latent_size = 2;
  s.objective = Objective::VAE;
  s.n_subjects = 3;
  return make_model(s, 11);
}

}  // namespace

TEST(Config, HashIgnoresWhitespaceAndKeyOrder) {
  const auto a = parse(R"({"seed": 1, "train": {"lr": 0.01, "epochs": 5}, "model": {"variant": "subject"}})");
  const auto b = parse("{\n  \"model\":{\"variant\":\"subject\"},\n\t\"train\":{ \"epochs\" : 5,\"lr\":0.01 },\"seed\":1}");
  EXPECT_EQ(experiment_hash(a), experiment_hash(b));
  EXPECT_EQ(experiment_hash(a).size(), 64u);
}

TEST(Config, HashTracksMeaningfulFields) {
  const auto base = parse(R"({"seed": 1})");
  EXPECT_NE(experiment_hash(base), experiment_hash(parse(R"({"seed": 2})")));
  EXPECT_NE(experiment_hash(base), experiment_hash(parse(R"({"seed": 1, "train": {"lr": 0.5}})")));
  EXPECT_NE(experiment_hash(base), experiment_hash(parse(R"({"seed": 1, "model": {"variant": "group"}})")));
  // Where results go does not change what is computed.
  EXPECT_EQ(experiment_hash(base), experiment_hash(parse(R"({"seed": 1, "output_dir": "elsewhere"})")));
  // Spelling out a default is the same config.
  EXPECT_EQ(experiment_hash(base), experiment_hash(parse(R"({"seed": 1, "eval": {"n_folds": 5}})")));
}

TEST(Config, ResolvedFormRoundTrips) {
  const auto c = parse(kTinyTrain);
  const auto again = parse_experiment_config(to_json(c));
  EXPECT_EQ(to_json(c), to_json(again));
}

TEST(Config, UnknownKeysNamed) {
  const std::pair<const char*, const char*> cases[] = {
      {R"({"sed": 1})", "'sed'"},
      {R"({"train": {"learning_rate": 0.1}})", "'train.learning_rate'"},
      {R"({"data": {"half_moons": {"samples": 3}}})", "'data.half_moons.samples'"},
      {R"({"model": {"width": 3}})", "'model.width'"},
  };
  for (const auto& [text, key] : cases) {
    try {
      parse(text);
      ADD_FAILURE() << text;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(key), std::string::npos) << e.what();
    }
  }
  EXPECT_THROW(parse(R"({"train": {"lr": "fast"}})"), ConfigError);
  EXPECT_THROW(parse(R"({"model": {"variant": "huge"}})"), ConfigError);
}

TEST(Config, MissingFileIsConfigError) {
  EXPECT_THROW(load_experiment_config("/nonexistent/subjmap.json"), ConfigError);
  const fs::path dir = scratch_dir("badjson");
  write_text(dir / "c.json", "{ not json");
  EXPECT_THROW(load_experiment_config(dir / "c.json"), ConfigError);
}

TEST(Config, OutputDirPrecedence) {
  auto c = parse(R"({"output_dir": "from_config"})");
  ::unsetenv("SUBJMAP_OUT");
  EXPECT_EQ(resolve_output_dir(c, std::nullopt), fs::path("from_config"));
  ::setenv("SUBJMAP_OUT", "from_env", 1);
  EXPECT_EQ(resolve_output_dir(c, std::nullopt), fs::path("from_env"));
  EXPECT_EQ(resolve_output_dir(c, std::string("from_flag")), fs::path("from_flag"));
  ::unsetenv("SUBJMAP_OUT");
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const fs::path dir = scratch_dir("ckpt");
  for (auto v : {LayerVariant::Group, LayerVariant::Subject, LayerVariant::Decomposed}) {
    const Model m = tiny_model(v);
    save_checkpoint(m, dir / "a.smck", "abc");
    const Checkpoint back = load_checkpoint(dir / "a.smck");
    save_checkpoint(back.model, dir / "b.smck", back.config_hash);
    EXPECT_EQ(detail::read_file_bytes(dir / "a.smck"), detail::read_file_bytes(dir / "b.smck"));
    EXPECT_EQ(back.config_hash, "abc");
    EXPECT_EQ(parameter_digest(back.model, 3), parameter_digest(m, 3));
  }
}

TEST(Checkpoint, CorruptBlobNamed) {
  auto raw = encode_checkpoint(tiny_model(LayerVariant::Decomposed));
  raw[raw.size() - 3] ^= 0x40;
  try {
    decode_checkpoint(raw);
    FAIL() << "expected ChecksumMismatch";
  } catch (const ChecksumMismatch& e) {
    EXPECT_NE(std::string(e.what()).find("blob '"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, ArchitectureMismatch) {
  const auto raw = encode_checkpoint(tiny_model(LayerVariant::Subject));
  const ModelSpec want = tiny_model(LayerVariant::Decomposed).spec;
  EXPECT_THROW(decode_checkpoint(raw, want), ShapeMismatch);
  EXPECT_NO_THROW(decode_checkpoint(raw, tiny_model(LayerVariant::Subject).spec));
}

TEST(Checkpoint, VersionAndMagic) {
  auto raw = encode_checkpoint(tiny_model(LayerVariant::Group));
  std::string text(raw.begin(), raw.end());
  const auto pos = text.find("\"format_version\":1");
  ASSERT_NE(pos, std::string::npos);
  raw[pos + 17] = '7';
  EXPECT_THROW(decode_checkpoint(raw), VersionUnsupported);
  auto bad = encode_checkpoint(tiny_model(LayerVariant::Group));
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), ParseError);
  auto shortened = encode_checkpoint(tiny_model(LayerVariant::Group));
  shortened.resize(shortened.size() - 8);
  EXPECT_THROW(decode_checkpoint(shortened), ParseError);
}

TEST(Commands, Paramcount) {
  const fs::path dir = scratch_dir("paramcount");
  const auto r = run_experiment("paramcount", parse("{}"), {.output_dir = dir});
  EXPECT_EQ(r.metrics["counts"]["subject"].get<std::uint64_t>(), 3'600'000'000ull);
  EXPECT_EQ(r.metrics["counts"]["group"].get<std::uint64_t>(), 3'000'000ull);
  EXPECT_EQ(r.metrics["counts"]["decomposed"].get<std::uint64_t>(), 3'024'200ull);
  EXPECT_TRUE(fs::exists(dir / "paramcount.csv"));
  EXPECT_THROW(run_experiment("paramcount", parse(R"({"paramcount": {"hidden_size": 0}})"), {.output_dir = dir}),
               ConfigError);
}

TEST(Commands, SimulateDefaultBenchmark) {
  const fs::path dir = scratch_dir("simulate");
  const auto r = run_experiment("simulate", parse("{}"), {.output_dir = dir});
  EXPECT_EQ(r.metrics["n_subjects"].get<std::size_t>(), 100u);
  EXPECT_EQ(r.metrics["timesteps_per_subject"].get<std::size_t>(), 1000u);
  const auto data = load_dataset(dir / "dataset.smds");
  EXPECT_EQ(data.size(), 100u);
  EXPECT_EQ(data.subjects[99].timesteps(), 1000u);
  const auto again = run_experiment("simulate", parse("{}"), {.output_dir = scratch_dir("simulate2")});
  EXPECT_EQ(r.metrics["dataset_sha256"], again.metrics["dataset_sha256"]);
}

TEST(Commands, TrainIsReproducible) {
  const auto c = parse(kTinyTrain);
  const fs::path a = scratch_dir("train_a"), b = scratch_dir("train_b");
  const auto ra = run_experiment("train", c, {.output_dir = a});
  const auto rb = run_experiment("train", c, {.output_dir = b});
  EXPECT_EQ(ra.metrics.dump(), rb.metrics.dump());
  EXPECT_EQ(ra.config_hash, rb.config_hash);
  for (const char* f : {"config.resolved.json", "results.json", "model.smck", "history.csv"})
    EXPECT_TRUE(fs::exists(a / f)) << f;
  EXPECT_EQ(detail::read_file_bytes(a / "model.smck"), detail::read_file_bytes(b / "model.smck"));
  const auto results = nlohmann::json::parse(read_text(a / "results.json"));
  EXPECT_EQ(results["metrics"], ra.metrics);
  EXPECT_EQ(results["command"], "train");
  // The resolved config reproduces the same hash.
  auto resolved = parse_experiment_config(nlohmann::json::parse(read_text(a / "config.resolved.json")));
  EXPECT_EQ(experiment_hash(resolved), ra.config_hash);
}

TEST(Commands, UnknownCommand) {
  EXPECT_THROW(run_experiment("dance", parse("{}"), {.output_dir = scratch_dir("unknown")}), ConfigError);
}

TEST(Binary, ExitCodesAndOutput) {
  const fs::path dir = scratch_dir("binary");
  write_text(dir / "ok.json", R"({"paramcount": {"double_count": false}})");
  write_text(dir / "bad.json", R"({"paramcount": {"double": false}})");
  const std::string exe = SUBJMAP_CLI_PATH;
  const std::string out = (dir / "out").string();
  EXPECT_EQ(std::system((exe + " paramcount --config " + (dir / "ok.json").string() + " --out " + out +
                         " > /dev/null").c_str()),
            0);
  const auto results = nlohmann::json::parse(read_text(dir / "out" / "results.json"));
  EXPECT_EQ(results["metrics"]["counts"]["subject"].get<std::uint64_t>(), 1'800'000'000ull);
  const int bad = std::system((exe + " paramcount --config " + (dir / "bad.json").string() + " --out " + out +
                               " 2> /dev/null").c_str());
  EXPECT_EQ(WEXITSTATUS(bad), 1);
  const int missing = std::system((exe + " paramcount > /dev/null 2>&1").c_str());
  EXPECT_NE(WEXITSTATUS(missing), 0);
}
