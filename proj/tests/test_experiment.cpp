#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "json.hpp"

#include "h2tune/errors.hpp"
#include "h2tune/experiment.hpp"

namespace {

using namespace h2tune;
using json = nlohmann::json;
namespace fs = std::filesystem;

json small_doc() {
  return json::parse(R"({
    "rank": 2, "rounds": 2, "epochs": 1, "seed": 3,
    "hyper": {"eta": 0.1, "eta_shared": 0.1, "batch_size": 8},
    "clients": [
      {"arch": {"layer_dims": [[4, 4], [4, 3]], "activation": "tanh"},
       "task": {"num_classes": 3, "n_train": 16, "n_test": 20, "shared_seed": 1, "private_seed": 2, "shared_weight": 0.7},
       "resource": {"sparsity_ratio": 0.5, "declared_rank": 2}},
      {"arch": {"layer_dims": [[5, 5], [5, 5], [5, 3]]},
       "task": {"num_classes": 3, "n_train": 16, "n_test": 20, "shared_seed": 1, "private_seed": 3, "shared_weight": 0.7},
       "resource": {"sparsity_ratio": 1.0, "declared_rank": 2},
       "hyper": {"eta": 0.05}}
    ]
  })");
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / name) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

fs::path write_doc(const fs::path& dir, const json& doc) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << doc.dump(2);
  return p;
}

json read(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

TEST(GitBlobHash, KnownValues) {
  EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST(ParseConfig, ReadsFieldsAndDefaults) {
  const FederationConfig cfg = parse_config(small_doc());
  EXPECT_EQ(cfg.rank, 2);
  EXPECT_EQ(cfg.rounds, 2);
  EXPECT_EQ(cfg.seed, 3u);
  ASSERT_EQ(cfg.clients.size(), 2u);
  EXPECT_EQ(cfg.clients[1].arch.activation, Activation::kTanh);
  EXPECT_EQ(cfg.clients[1].arch.depth(), 3);
  EXPECT_EQ(cfg.clients[1].task.input_dim, 5);
  EXPECT_DOUBLE_EQ(cfg.clients[0].hyper.eta, 0.1);
  EXPECT_DOUBLE_EQ(cfg.clients[1].hyper.eta, 0.05);
  EXPECT_EQ(cfg.clients[1].hyper.batch_size, 8);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(ParseConfig, RejectsUnknownKeysAndBadValues) {
  json doc = small_doc();
  doc["learning_rate"] = 1;
  EXPECT_THROW(parse_config(doc), ConfigError);
  doc = small_doc();
  doc["clients"][0]["arch"]["activation"] = "relu";
  EXPECT_THROW(parse_config(doc), ConfigError);
  doc = small_doc();
  doc["clients"][0]["task"]["colour"] = 1;
  EXPECT_THROW(parse_config(doc), ConfigError);
  doc = small_doc();
  doc["rank"] = "two";
  EXPECT_THROW(parse_config(doc), ConfigError);
  doc = small_doc();
  doc.erase("clients");
  EXPECT_THROW(parse_config(doc), ConfigError);
}

TEST(Arms, ParseAndApply) {
  EXPECT_EQ(parse_arm("LOCAL"), Arm::kLocal);
  EXPECT_EQ(to_string(Arm::kNoDisentangle), "NO_DISENTANGLE");
  EXPECT_THROW(parse_arm("FEDAVG"), ConfigError);
  const FederationConfig base = parse_config(small_doc());
  const FederationConfig local = apply_arm(base, Arm::kLocal);
  EXPECT_FALSE(local.communicate);
  for (const ClientConfig& c : local.clients) EXPECT_EQ(c.hyper.kl_weight, 0.0);
  EXPECT_FALSE(apply_arm(base, Arm::kNoDisentangle).mode.disentangle);
  for (const ClientConfig& c : apply_arm(base, Arm::kNoMask).clients) EXPECT_EQ(c.resource.sparsity_ratio, 1.0);
}

TEST(MetricsCsv, HeaderAndRows) {
  const ArmResult r = run_arm(parse_config(small_doc()), Arm::kH2Tune);
  const std::string csv = metrics_csv(r.history);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "t,k,share_loss,specific_loss,eval_acc,gg_norm");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 4);
  EXPECT_EQ(csv.substr(csv.find('\n') + 1, 4), "1,0,");
}

TEST(RunExperiment, WritesOutputsAndIsDeterministic) {
  TempDir tmp("h2tune_run_experiment");
  const fs::path config = write_doc(tmp.path(), small_doc());
  RunOptions opt;
  opt.config_path = config;
  opt.arms = {Arm::kH2Tune, Arm::kLocal};
  opt.out_dir = tmp.path() / "a";
  std::ostringstream out, err;
  ASSERT_EQ(run_experiment(opt, out, err), kExitOk) << err.str();
  for (const char* f : {"metrics.csv", "summary.json", "rg_final.r2g"}) EXPECT_TRUE(fs::exists(opt.out_dir / "H2TUNE" / f));
  const json s = read(opt.out_dir / "LOCAL" / "summary.json");
  EXPECT_EQ(s.at("arm"), "LOCAL");
  EXPECT_EQ(s.at("config_hash").get<std::string>().size(), 40u);
  EXPECT_TRUE(fs::exists(opt.out_dir / "manifest.json"));

  opt.out_dir = tmp.path() / "b";
  ASSERT_EQ(run_experiment(opt, out, err), kExitOk);
  std::ostringstream table;
  ASSERT_EQ(compare_arms({tmp.path() / "a" / "H2TUNE", tmp.path() / "b" / "H2TUNE"}, table, err), kExitOk);
  std::istringstream rows(table.str());
  std::string line;
  std::getline(rows, line);
  while (std::getline(rows, line)) EXPECT_EQ(line.substr(line.rfind(',') + 1), "0.000000") << line;
}

TEST(RunExperiment, ZeroRoundsReportsUntrainedEval) {
  TempDir tmp("h2tune_zero_rounds");
  RunOptions opt;
  opt.config_path = write_doc(tmp.path(), small_doc());
  opt.rounds = 0;
  opt.out_dir = tmp.path() / "out";
  std::ostringstream out, err;
  ASSERT_EQ(run_experiment(opt, out, err), kExitOk) << err.str();
  const json s = read(opt.out_dir / "H2TUNE" / "summary.json");
  EXPECT_EQ(s.at("rounds"), 0);
  EXPECT_EQ(s.at("initial_accuracy"), s.at("final_accuracy"));
  std::ifstream csv(opt.out_dir / "H2TUNE" / "metrics.csv");
  std::string header, extra;
  std::getline(csv, header);
  EXPECT_FALSE(std::getline(csv, extra));
}

TEST(RunExperiment, ExitCodes) {
  TempDir tmp("h2tune_exit_codes");
  std::ostringstream out, err;
  RunOptions opt;
  opt.config_path = tmp.path() / "missing.json";
  opt.out_dir = tmp.path() / "o1";
  EXPECT_EQ(run_experiment(opt, out, err), kExitParse);

  json bad = small_doc();
  bad["rank"] = 9;
  opt.config_path = write_doc(tmp.path(), bad);
  EXPECT_EQ(run_experiment(opt, out, err), kExitParse);

  json wild = small_doc();
  wild["hyper"]["eta"] = 1e150;
  wild["hyper"]["eta_shared"] = 1e150;
  opt.config_path = write_doc(tmp.path(), wild);
  opt.out_dir = tmp.path() / "o2";
  EXPECT_EQ(run_experiment(opt, out, err), kExitDivergence);

  opt.config_path = write_doc(tmp.path(), small_doc());
  opt.out_dir = tmp.path() / "o2";  // already holds files
  EXPECT_EQ(run_experiment(opt, out, err), kExitParse);

  opt.out_dir = tmp.path() / "o3";
  opt.check_grads = true;
  EXPECT_EQ(run_experiment(opt, out, err), kExitOk) << err.str();
}

TEST(CompareArms, HashMismatchIsParseError) {
  TempDir tmp("h2tune_compare_mismatch");
  std::ostringstream out, err;
  RunOptions opt;
  opt.config_path = write_doc(tmp.path(), small_doc());
  opt.out_dir = tmp.path() / "a";
  ASSERT_EQ(run_experiment(opt, out, err), kExitOk);
  json other = small_doc();
  other["description"] = "different bytes";
  fs::create_directories(tmp.path() / "c2");
  opt.config_path = write_doc(tmp.path() / "c2", other);
  opt.out_dir = tmp.path() / "b";
  ASSERT_EQ(run_experiment(opt, out, err), kExitOk);
  EXPECT_EQ(compare_arms({tmp.path() / "a" / "H2TUNE", tmp.path() / "b" / "H2TUNE"}, out, err), kExitParse);
}

TEST(DumpData, WritesClientCsvs) {
  TempDir tmp("h2tune_dump_data");
  std::ostringstream err;
  const fs::path config = write_doc(tmp.path(), small_doc());
  ASSERT_EQ(dump_data(config, std::nullopt, tmp.path() / "data", err), kExitOk) << err.str();
  EXPECT_TRUE(fs::exists(tmp.path() / "data" / "client_1_test.csv"));
  std::ifstream in(tmp.path() / "data" / "client_0_train.csv");
  std::string line;
  int rows = -1;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 16);
}

}  // namespace
