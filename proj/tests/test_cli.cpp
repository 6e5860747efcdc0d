#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "dsmstcn/cli.hpp"

using namespace dsmstcn;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(std::move(args), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("dsmstcn_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  std::string path(const std::string& name) const { return (root_ / name).string(); }

  std::string write_config(const std::string& name, const std::string& text) const {
    write_file(path(name), text);
    return path(name);
  }

  // Three short subjects and a small model: every command finishes in about a second.
  std::string tiny_config(std::size_t subjects = 3) const {
    return write_config("tiny.json", R"({
      "scenario": {"subjects": )" + std::to_string(subjects) + R"(, "seed": 4, "background_s": [8, 10],
                   "confusers_per_block": 1, "confuser_gap_s": 1.5,
                   "reps": {"ankle_plantarflexors": 2, "knee_bends": 2, "abdominal_muscles": 2, "chair_rising": 1}},
      "model": {"num_layers": 3, "num_filters": 4},
      "train": {"epochs": 1, "batch_size": 3, "slice_length": 1000, "slice_hop": 500},
      "adam": {"lr": 0.005}
    })");
  }

  std::string synth_tiny(std::size_t subjects = 3) {
    const auto cfg = tiny_config(subjects);
    const auto r = run({"synth", "--config", cfg, "--out", path("data")});
    EXPECT_EQ(r.code, 0) << r.err;
    return path("data");
  }

  fs::path root_;
};

std::size_t count_files(const fs::path& dir, const std::string& suffix) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().string().ends_with(suffix);
  return n;
}

}  // namespace

TEST_F(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(run({}).code, cli::kExitInvalid);
  EXPECT_EQ(run({"bake"}).code, cli::kExitInvalid);
  EXPECT_EQ(run({"synth", "--no-such-flag"}).code, cli::kExitInvalid);
  EXPECT_EQ(run({"protocol", "--jobs", "0"}).code, cli::kExitInvalid);
  EXPECT_EQ(run({"--help"}).code, cli::kExitOk);
}

TEST_F(Cli, ConfigProblemsExitWithOne) {
  EXPECT_EQ(run({"synth", "--config", path("absent.json"), "--out", path("o")}).code, cli::kExitInvalid);
  const auto bad_json = write_config("bad.json", "{\"scenario\": ");
  EXPECT_EQ(run({"synth", "--config", bad_json, "--out", path("o")}).code, cli::kExitInvalid);
  const auto unknown = write_config("unknown.json", R"({"optimizer": {}})");
  const auto r = run({"synth", "--config", unknown, "--out", path("o")});
  EXPECT_EQ(r.code, cli::kExitInvalid);
  EXPECT_NE(r.err.find("unknown section 'optimizer'"), std::string::npos) << r.err;
  const auto bad_spec = write_config("spec.json", R"({"scenario": {"subjects": 1}})");
  EXPECT_EQ(run({"synth", "--config", bad_spec, "--out", path("o")}).code, cli::kExitInvalid);
  EXPECT_EQ(run({"train", "--config", tiny_config(), "--out", path("t")}).code, cli::kExitInvalid);  // no data
  EXPECT_EQ(run({"train", "--config", tiny_config(), "--data", path("nowhere"), "--out", path("t")}).code,
            cli::kExitInvalid);
}

TEST_F(Cli, SynthIsDeterministicAndCreatesOutputDirectory) {
  const auto cfg = tiny_config(6);
  const auto a = run({"synth", "--config", cfg, "--out", path("a/nested"), "--seed", "7"});
  const auto b = run({"synth", "--config", cfg, "--out", path("b"), "--seed", "7"});
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(a.out, path("a/nested") + "/manifest.json\n");
  EXPECT_EQ(read_file(path("a/nested/manifest.json")), read_file(path("b/manifest.json")));
  EXPECT_EQ(read_file(path("a/nested/run_manifest.json")), read_file(path("b/run_manifest.json")));
  EXPECT_EQ(count_files(path("b"), ".csv"), 6u);
  EXPECT_EQ(count_files(path("b"), ".annotations.jsonl"), 6u);

  const auto manifest = nlohmann::json::parse(read_file(path("b/run_manifest.json")));
  EXPECT_EQ(manifest.at("command"), "synth");
  EXPECT_EQ(manifest.at("seeds").at("master"), 7);
  EXPECT_EQ(manifest.at("seeds").size(), 7u);
  EXPECT_EQ(manifest.at("config_hash").get<std::string>().size(), 64u);

  const auto c = run({"synth", "--config", cfg, "--out", path("c"), "--seed", "8"});
  EXPECT_NE(read_file(path("c/manifest.json")), read_file(path("b/manifest.json")));
}

TEST_F(Cli, TrainWithZeroEpochsWritesInitialization) {
  const auto data = synth_tiny();
  const auto r = run({"train", "--config", tiny_config(), "--data", data, "--out", path("t"), "--epochs", "0", "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ckpt = load_checkpoint(path("t/checkpoint.bin"));
  EXPECT_EQ(ckpt.params, init_parameters(ckpt.config, mix_seed(fold_seed(3, "all"), "init")));
  EXPECT_TRUE(fs::exists(path("t/run_manifest.json")));
  EXPECT_EQ(ckpt.extras.count(kNormMean), 1u);
}

TEST_F(Cli, TrainThenEvaluate) {
  const auto data = synth_tiny();
  const auto cfg = tiny_config();
  ASSERT_EQ(run({"train", "--config", cfg, "--data", data, "--out", path("t"), "--fold", "S02"}).code, 0);
  const auto log = read_file(path("t/run.log"));
  EXPECT_NE(log.find("fold=S02 epoch=0 step=1 "), std::string::npos);
  EXPECT_NE(log.find("fold=S02 epoch=0 mean_loss="), std::string::npos);

  const auto r = run({"eval", "--config", cfg, "--data", data, "--checkpoint", path("t/checkpoint.bin"), "--fold",
                      "S02", "--out", path("e")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("# final macro"), std::string::npos);
  const auto report = report_from_tsv(read_file(path("e/report.tsv")), Scale::macro);
  EXPECT_EQ(report_to_tsv(report), read_file(path("e/report.tsv")));

  EXPECT_EQ(run({"train", "--config", cfg, "--data", data, "--out", path("x"), "--fold", "S09"}).code,
            cli::kExitInvalid);
}

TEST_F(Cli, EvalRefusesCheckpointOfAnotherModel) {
  const auto data = synth_tiny();
  const auto cfg = tiny_config();
  ASSERT_EQ(run({"train", "--config", cfg, "--data", data, "--out", path("t"), "--epochs", "0"}).code, 0);
  const auto r = run({"eval", "--config", cfg, "--data", data, "--checkpoint", path("t/checkpoint.bin"), "--mode",
                      "ablation_no_micro", "--out", path("e")});
  EXPECT_EQ(r.code, cli::kExitInvalid);
  EXPECT_FALSE(fs::exists(path("e/report.tsv")));
  EXPECT_EQ(run({"eval", "--config", cfg, "--data", data, "--out", path("e")}).code, cli::kExitInvalid);
  EXPECT_EQ(run({"eval", "--config", cfg, "--data", data, "--checkpoint", path("none.bin"), "--out", path("e")}).code,
            cli::kExitInvalid);
  write_file(path("junk.bin"), "not a checkpoint");
  EXPECT_EQ(run({"eval", "--config", cfg, "--data", data, "--checkpoint", path("junk.bin"), "--out", path("e")}).code,
            cli::kExitRuntime);
}

TEST_F(Cli, ProtocolRunsAreByteIdenticalAndModesComparable) {
  const auto data = synth_tiny();
  const auto cfg = tiny_config();
  const auto a = run({"protocol", "--config", cfg, "--data", data, "--out", path("p1")});
  const auto b = run({"protocol", "--config", cfg, "--data", data, "--out", path("p2"), "--jobs", "2"});
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(read_file(path("p1/aggregate.tsv")), read_file(path("p2/aggregate.tsv")));
  EXPECT_EQ(read_file(path("p1/aggregate_evaluation.txt")), read_file(path("p2/aggregate_evaluation.txt")));
  for (const char* s : {"S01", "S02", "S03"}) {
    const auto dir = path("p1/folds/") + s;
    EXPECT_TRUE(fs::exists(dir + "/checkpoint.bin")) << s;
    EXPECT_TRUE(fs::exists(dir + "/report.tsv")) << s;
  }
  const auto manifest = nlohmann::json::parse(read_file(path("p1/run_manifest.json")));
  EXPECT_EQ(manifest.at("config").at("protocol"), "lab_losocv");
  EXPECT_EQ(manifest.at("seeds").size(), 4u);

  const auto c = run({"protocol", "--config", cfg, "--data", data, "--out", path("p3"), "--mode", "ablation_no_micro"});
  ASSERT_EQ(c.code, 0) << c.err;
  const auto ra = report_from_tsv(read_file(path("p1/aggregate.tsv")), Scale::macro);
  const auto rc = report_from_tsv(read_file(path("p3/aggregate.tsv")), Scale::macro);
  std::uint64_t true_a = 0, true_c = 0;
  for (std::size_t k = 1; k < 5; ++k) {
    true_a += ra.segment[k].tp + ra.segment[k].fn;
    true_c += rc.segment[k].tp + rc.segment[k].fn;
  }
  EXPECT_EQ(true_a, true_c);  // same dataset, same folds
  EXPECT_NE(manifest.at("config_hash"),
            nlohmann::json::parse(read_file(path("p3/run_manifest.json"))).at("config_hash"));
}

TEST_F(Cli, HomeProtocolNeedsHomeSubjects) {
  const auto data = synth_tiny();
  const auto r = run({"protocol", "--config", tiny_config(), "--data", data, "--out", path("p"), "--protocol",
                      "home_generalization"});
  EXPECT_EQ(r.code, cli::kExitInvalid) << r.err;
  EXPECT_EQ(run({"protocol", "--config", tiny_config(), "--data", data, "--out", path("p"), "--protocol", "field"}).code,
            cli::kExitInvalid);
}

TEST_F(Cli, OutputsStayInsideOutputDirectory) {
  const auto data = synth_tiny();
  const auto cwd = fs::current_path();
  fs::create_directories(path("cwd"));
  fs::current_path(path("cwd"));
  const auto r = run({"protocol", "--config", tiny_config(), "--data", data, "--out", path("p")});
  fs::current_path(cwd);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::is_empty(path("cwd")));
  std::set<std::string> top;
  for (const auto& e : fs::directory_iterator(root_)) top.insert(e.path().filename().string());
  EXPECT_EQ(top, (std::set<std::string>{"cwd", "data", "p", "tiny.json"}));
}

TEST_F(Cli, SelfcheckListsFourFamiliesAndPasses) {
  const auto r = run({"selfcheck", "--out", path("s")});
  EXPECT_EQ(r.code, cli::kExitOk) << r.out;
  std::istringstream lines(r.out);
  std::vector<std::string> names;
  for (std::string line; std::getline(lines, line);) {
    EXPECT_EQ(line.rfind("PASS ", 0), 0u) << line;
    names.push_back(line.substr(5, line.find(' ', 5) - 5));
  }
  EXPECT_EQ(names, (std::vector<std::string>{"gradient_check", "receptive_field", "metrics_oracle", "tmse_hand_values"}));
  EXPECT_EQ(read_file(path("s/selfcheck.txt")), r.out);
}

TEST_F(Cli, SelfcheckDetectsInjectedGradientFault) {
  const auto r = run({"selfcheck", "--inject-gradient-fault", "0.01"});
  EXPECT_EQ(r.code, cli::kExitRuntime);
  EXPECT_EQ(r.out.rfind("FAIL gradient_check", 0), 0u) << r.out;
  EXPECT_NE(r.out.find("PASS receptive_field"), std::string::npos);
}
