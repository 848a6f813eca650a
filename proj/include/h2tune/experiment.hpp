#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "h2tune/federation.hpp"

namespace h2tune {

// Ablation arms of an experiment.
//   H2TUNE          full protocol
//   LOCAL           no communication and kl_weight = 0
//   NO_DISENTANGLE  one joint step on share loss + weight penalty per batch
//   NO_MASK         sparsity ratio 1 for every client
enum class Arm { kH2Tune, kLocal, kNoDisentangle, kNoMask };

std::string to_string(Arm arm);
Arm parse_arm(std::string_view name);  // throws ConfigError

FederationConfig apply_arm(FederationConfig config, Arm arm);

// Git blob object id: sha1("blob <size>\0" + bytes), lowercase hex.
std::string git_blob_hash(std::string_view bytes);

// Parses the JSON experiment document (see README for the schema). Throws ConfigError.
FederationConfig parse_config(const nlohmann::json& doc);

struct LoadedConfig {
  FederationConfig config;
  std::string hash;  // git_blob_hash of the file bytes
};

LoadedConfig load_config_file(const std::filesystem::path& path);

// Exit codes shared by the CLI entry points.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitParse = 2;
inline constexpr int kExitDivergence = 3;
inline constexpr int kExitInvariant = 4;

struct RunOptions {
  std::filesystem::path config_path;
  std::optional<int> rounds;
  std::optional<std::uint64_t> seed;
  std::vector<Arm> arms{Arm::kH2Tune};
  std::filesystem::path out_dir;  // must not exist or be empty
  bool check_grads = false;
  std::optional<Transport> transport;
  std::optional<bool> proximal;
};

struct ArmResult {
  Arm arm = Arm::kH2Tune;
  std::vector<double> initial_accuracy;
  std::vector<double> final_accuracy;
  std::vector<RoundRecord> history;
  SharedStack final_global;
  double runtime_seconds = 0.0;

  double mean_final_accuracy() const;
};

// Runs one arm in memory; no files are written unless the transport is file exchange.
ArmResult run_arm(const FederationConfig& config, Arm arm);

// Writes metrics.csv, summary.json and rg_final.r2g for one arm into `dir`.
void write_arm_outputs(const std::filesystem::path& dir, const ArmResult& result,
                       const std::string& config_hash, std::uint64_t seed);

// metrics.csv text: header plus one row per round per client.
std::string metrics_csv(const std::vector<RoundRecord>& history);

// Full `run` subcommand. Returns an exit code; diagnostics go to `err`.
int run_experiment(const RunOptions& options, std::ostream& out, std::ostream& err);

// `compare` subcommand: CSV of per-client final accuracies and deltas against
// the first directory. Mismatched scenario hashes return kExitParse.
int compare_arms(const std::vector<std::filesystem::path>& dirs, std::ostream& out, std::ostream& err);

// Writes client_<k>_{train,test}.csv with the generated data of every client.
int dump_data(const std::filesystem::path& config_path, std::optional<std::uint64_t> seed,
              const std::filesystem::path& out_dir, std::ostream& err);

}  // namespace h2tune
