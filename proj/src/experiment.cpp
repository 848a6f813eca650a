#include "h2tune/experiment.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <openssl/evp.h>

#include "h2tune/errors.hpp"
#include "h2tune/serialization.hpp"

namespace h2tune {

using json = nlohmann::json;

std::string to_string(Arm arm) {
  switch (arm) {
    case Arm::kH2Tune:
      return "H2TUNE";
    case Arm::kLocal:
      return "LOCAL";
    case Arm::kNoDisentangle:
      return "NO_DISENTANGLE";
    case Arm::kNoMask:
      return "NO_MASK";
  }
  return "UNKNOWN";
}

Arm parse_arm(std::string_view name) {
  for (Arm arm : {Arm::kH2Tune, Arm::kLocal, Arm::kNoDisentangle, Arm::kNoMask}) {
    if (to_string(arm) == name) return arm;
  }
  throw ConfigError(fmt::format("unknown baseline '{}'", name));
}

FederationConfig apply_arm(FederationConfig config, Arm arm) {
  switch (arm) {
    case Arm::kH2Tune:
      break;
    case Arm::kLocal:
      config.communicate = false;
      for (ClientConfig& c : config.clients) c.hyper.kl_weight = 0.0;
      break;
    case Arm::kNoDisentangle:
      config.mode.disentangle = false;
      break;
    case Arm::kNoMask:
      for (ClientConfig& c : config.clients) c.resource.sparsity_ratio = 1.0;
      break;
  }
  return config;
}

std::string git_blob_hash(std::string_view bytes) {
  const std::string header = fmt::format("blob {}", bytes.size());
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw Error("cannot allocate digest context");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size() + 1) == 1 &&  // includes the NUL
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &length) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw Error("sha1 digest failed");
  std::string hex;
  for (unsigned int i = 0; i < length; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

namespace {

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(fmt::format("{} must be an object", where));
  for (const auto& [key, value] : obj.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (!known) throw ConfigError(fmt::format("unknown key '{}' in {}", key, where));
  }
}

template <typename T>
void read_optional(const json& obj, const char* key, T& target) {
  if (obj.contains(key)) target = obj.at(key).get<T>();
}

Hyperparameters parse_hyper(const json& obj, Hyperparameters h) {
  reject_unknown_keys(obj,
                      {"eta", "eta_shared", "weight_decay", "kl_weight", "divergence_weight",
                       "divergence_clamp", "batch_size"},
                      "hyper");
  read_optional(obj, "eta", h.eta);
  read_optional(obj, "eta_shared", h.eta_shared);
  read_optional(obj, "weight_decay", h.weight_decay);
  read_optional(obj, "kl_weight", h.kl_weight);
  read_optional(obj, "divergence_weight", h.divergence_weight);
  read_optional(obj, "divergence_clamp", h.divergence_clamp);
  read_optional(obj, "batch_size", h.batch_size);
  return h;
}

ClientConfig parse_client(const json& obj, const Hyperparameters& defaults, std::size_t k) {
  const std::string where = fmt::format("clients[{}]", k);
  reject_unknown_keys(obj, {"arch", "task", "resource", "hyper"}, where);
  ClientConfig c;

  const json& arch = obj.at("arch");
  reject_unknown_keys(arch, {"layer_dims", "activation"}, where + ".arch");
  for (const json& pair : arch.at("layer_dims")) {
    if (!pair.is_array() || pair.size() != 2) throw ConfigError(where + ".arch.layer_dims entries must be [in, out]");
    c.arch.layer_dims.emplace_back(pair[0].get<int>(), pair[1].get<int>());
  }
  const std::string activation = arch.value("activation", std::string("tanh"));
  if (activation == "tanh") {
    c.arch.activation = Activation::kTanh;
  } else if (activation == "identity") {
    c.arch.activation = Activation::kIdentity;
  } else {
    throw ConfigError(fmt::format("{}.arch.activation '{}' is not tanh or identity", where, activation));
  }

  const json& task = obj.at("task");
  reject_unknown_keys(task,
                      {"input_dim", "num_classes", "n_train", "n_test", "shared_seed", "private_seed",
                       "shared_weight", "score_noise", "label_flip"},
                      where + ".task");
  c.task.num_classes = task.at("num_classes").get<int>();
  c.task.input_dim = task.value("input_dim", c.arch.layer_dims.empty() ? 0 : c.arch.layer_dims.front().first);
  read_optional(task, "n_train", c.task.n_train);
  read_optional(task, "n_test", c.task.n_test);
  read_optional(task, "shared_seed", c.task.shared_seed);
  read_optional(task, "private_seed", c.task.private_seed);
  read_optional(task, "shared_weight", c.task.shared_weight);
  read_optional(task, "score_noise", c.task.score_noise);
  read_optional(task, "label_flip", c.task.label_flip);
  c.arch.num_classes = c.task.num_classes;

  if (obj.contains("resource")) {
    const json& res = obj.at("resource");
    reject_unknown_keys(res, {"sparsity_ratio", "declared_rank"}, where + ".resource");
    read_optional(res, "sparsity_ratio", c.resource.sparsity_ratio);
    read_optional(res, "declared_rank", c.resource.declared_rank);
  }
  c.hyper = obj.contains("hyper") ? parse_hyper(obj.at("hyper"), defaults) : defaults;
  return c;
}

}  // namespace

FederationConfig parse_config(const json& doc) {
  try {
    reject_unknown_keys(doc,
                        {"rank", "rounds", "epochs", "seed", "transport", "proximal", "proximal_inner_steps",
                         "hyper", "clients", "description"},
                        "config");
    FederationConfig config;
    config.rank = doc.at("rank").get<int>();
    config.rounds = doc.at("rounds").get<int>();
    read_optional(doc, "epochs", config.epochs);
    read_optional(doc, "seed", config.seed);
    const std::string transport = doc.value("transport", std::string("inproc"));
    if (transport == "inproc") {
      config.transport = Transport::kInProcess;
    } else if (transport == "files") {
      config.transport = Transport::kFileExchange;
    } else {
      throw ConfigError(fmt::format("transport '{}' is not inproc or files", transport));
    }
    read_optional(doc, "proximal", config.mode.proximal);
    read_optional(doc, "proximal_inner_steps", config.mode.proximal_inner_steps);
    const Hyperparameters defaults = doc.contains("hyper") ? parse_hyper(doc.at("hyper"), {}) : Hyperparameters{};
    const json& clients = doc.at("clients");
    if (!clients.is_array()) throw ConfigError("clients must be an array");
    for (std::size_t k = 0; k < clients.size(); ++k) config.clients.push_back(parse_client(clients[k], defaults, k));
    return config;
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config: {}", e.what()));
  }
}

LoadedConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot open config {}", path.string()));
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  json doc;
  try {
    doc = json::parse(bytes);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return LoadedConfig{parse_config(doc), git_blob_hash(bytes)};
}

double ArmResult::mean_final_accuracy() const {
  if (final_accuracy.empty()) return 0.0;
  double sum = 0.0;
  for (double a : final_accuracy) sum += a;
  return sum / static_cast<double>(final_accuracy.size());
}

ArmResult run_arm(const FederationConfig& config, Arm arm) {
  const auto started = std::chrono::steady_clock::now();
  Federation federation(apply_arm(config, arm));
  ArmResult result;
  result.arm = arm;
  result.initial_accuracy = federation.evaluate();
  federation.run();
  federation.check_invariants();
  result.final_accuracy = federation.evaluate();
  result.history = federation.history();
  result.final_global = federation.global_stack();
  result.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

std::string metrics_csv(const std::vector<RoundRecord>& history) {
  std::string out = "t,k,share_loss,specific_loss,eval_acc,gg_norm\n";
  for (const RoundRecord& r : history) {
    for (const ClientRoundMetrics& m : r.clients) {
      out += fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.round + 1, m.client, m.share_loss,
                         m.specific_loss, m.eval_accuracy, std::sqrt(m.gg_sq));
    }
  }
  return out;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(fmt::format("cannot write {}", path.string()));
  out << text;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open {}", path.string()));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

bool usable_out_dir(const std::filesystem::path& dir) {
  return !std::filesystem::exists(dir) ||
         (std::filesystem::is_directory(dir) && std::filesystem::is_empty(dir));
}

}  // namespace

void write_arm_outputs(const std::filesystem::path& dir, const ArmResult& result, const std::string& config_hash,
                       std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  write_text(dir / "metrics.csv", metrics_csv(result.history));
  write_stack_file(dir / "rg_final.r2g", result.final_global);
  json gg = json::array();
  for (const RoundRecord& r : result.history) gg.push_back(r.gg_sq_mean);
  const json summary = {
      {"arm", to_string(result.arm)},
      {"config_hash", config_hash},
      {"scenario_hash", config_hash},
      {"seed", seed},
      {"rounds", result.history.size()},
      {"clients", result.final_accuracy.size()},
      {"initial_accuracy", result.initial_accuracy},
      {"final_accuracy", result.final_accuracy},
      {"mean_final_accuracy", result.mean_final_accuracy()},
      {"gg_sq_mean_by_round", gg},
      {"runtime_seconds", result.runtime_seconds},
      {"checkpoint", "rg_final.r2g"},
  };
  write_text(dir / "summary.json", summary.dump(2) + "\n");
}

int run_experiment(const RunOptions& options, std::ostream& out, std::ostream& err) {
  const auto started = std::chrono::steady_clock::now();
  try {
    LoadedConfig loaded = load_config_file(options.config_path);
    FederationConfig& config = loaded.config;
    if (options.rounds) config.rounds = *options.rounds;
    if (options.seed) config.seed = *options.seed;
    if (options.transport) config.transport = *options.transport;
    if (options.proximal) config.mode.proximal = *options.proximal;
    if (options.arms.empty()) throw ConfigError("no baseline selected");
    if (options.out_dir.empty()) throw ConfigError("--out is required");
    if (!usable_out_dir(options.out_dir)) {
      throw ConfigError(fmt::format("output directory {} already holds files", options.out_dir.string()));
    }
    config.validate();

    std::filesystem::create_directories(options.out_dir);
    json arms = json::array();
    for (Arm arm : options.arms) arms.push_back(to_string(arm));
    const json manifest = {{"config_path", std::filesystem::absolute(options.config_path).string()},
                           {"config_hash", loaded.hash},
                           {"seed", config.seed},
                           {"rounds", config.rounds},
                           {"arms", arms},
                           {"out_dir", std::filesystem::absolute(options.out_dir).string()}};
    write_text(options.out_dir / "manifest.json", manifest.dump(2) + "\n");

    if (options.check_grads) {
      Federation probe(config);
      double worst = 0.0;
      for (const ClientState& c : probe.clients()) {
        const Batch batch = full_batch(*c.data);
        const int n = std::min(batch.size(), c.hyper.batch_size);
        const Batch head{batch.x.topRows(n), std::vector<int>(batch.y.begin(), batch.y.begin() + n)};
        worst = std::max(worst, check_gradients(c, probe.global_stack(), head));
      }
      out << fmt::format("gradient check: worst relative error {:.3e}\n", worst);
      if (!(worst <= 1e-5)) {
        err << fmt::format("gradient check failed: {:.3e} > 1e-5\n", worst);
        return kExitInvariant;
      }
    }

    json summary_arms = json::object();
    for (Arm arm : options.arms) {
      FederationConfig arm_config = config;
      if (arm_config.transport == Transport::kFileExchange) {
        arm_config.exchange_dir = options.out_dir / to_string(arm) / "exchange";
      }
      const ArmResult result = run_arm(arm_config, arm);
      write_arm_outputs(options.out_dir / to_string(arm), result, loaded.hash, config.seed);
      summary_arms[to_string(arm)] = {{"final_accuracy", result.final_accuracy},
                                      {"mean_final_accuracy", result.mean_final_accuracy()},
                                      {"runtime_seconds", result.runtime_seconds}};
      out << fmt::format("{}: mean final accuracy {:.4f} over {} rounds\n", to_string(arm),
                         result.mean_final_accuracy(), result.history.size());
    }
    const json summary = {
        {"config_hash", loaded.hash},
        {"seed", config.seed},
        {"arms", summary_arms},
        {"runtime_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()}};
    write_text(options.out_dir / "summary.json", summary.dump(2) + "\n");
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitParse;
  } catch (const DivergenceError& e) {
    err << fmt::format("numeric divergence in round {} client {} ({}): {}\n", e.round(), e.client(), e.term(),
                       e.what());
    return kExitDivergence;
  } catch (const NumericError& e) {
    err << "numeric divergence (" << e.term() << "): " << e.what() << "\n";
    return kExitDivergence;
  } catch (const InvariantError& e) {
    err << "invariant violation: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const ProtocolError& e) {
    err << "invariant violation: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const SolverError& e) {
    err << "invariant violation: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

int compare_arms(const std::vector<std::filesystem::path>& dirs, std::ostream& out, std::ostream& err) {
  try {
    if (dirs.size() < 2) throw ConfigError("compare needs at least two metric directories");
    std::vector<json> summaries;
    for (const auto& dir : dirs) summaries.push_back(read_json(dir / "summary.json"));
    const std::string hash = summaries.front().at("scenario_hash").get<std::string>();
    const std::size_t clients = summaries.front().at("final_accuracy").size();
    for (std::size_t i = 1; i < summaries.size(); ++i) {
      if (summaries[i].at("scenario_hash").get<std::string>() != hash) {
        throw ConfigError(fmt::format("scenario hash of {} differs from {}", dirs[i].string(), dirs[0].string()));
      }
      if (summaries[i].at("final_accuracy").size() != clients) {
        throw ConfigError(fmt::format("{} has a different client count", dirs[i].string()));
      }
    }

    std::vector<std::vector<double>> acc;
    for (const json& s : summaries) acc.push_back(s.at("final_accuracy").get<std::vector<double>>());

    std::string header = "client";
    for (std::size_t i = 0; i < summaries.size(); ++i) {
      header += fmt::format(",acc_{}_{}", i, summaries[i].at("arm").get<std::string>());
    }
    for (std::size_t i = 1; i < summaries.size(); ++i) header += fmt::format(",delta_{}", i);
    out << header << "\n";

    std::vector<double> mean(summaries.size(), 0.0);
    for (std::size_t k = 0; k < clients; ++k) {
      std::string row = std::to_string(k);
      for (std::size_t i = 0; i < acc.size(); ++i) {
        row += fmt::format(",{:.6f}", acc[i][k]);
        mean[i] += acc[i][k] / static_cast<double>(clients);
      }
      for (std::size_t i = 1; i < acc.size(); ++i) row += fmt::format(",{:.6f}", acc[i][k] - acc[0][k]);
      out << row << "\n";
    }
    std::string row = "mean";
    for (double m : mean) row += fmt::format(",{:.6f}", m);
    for (std::size_t i = 1; i < mean.size(); ++i) row += fmt::format(",{:.6f}", mean[i] - mean[0]);
    out << row << "\n";
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "compare: " << e.what() << "\n";
    return kExitParse;
  } catch (const json::exception& e) {
    err << "compare: malformed summary: " << e.what() << "\n";
    return kExitParse;
  }
}

int dump_data(const std::filesystem::path& config_path, std::optional<std::uint64_t> seed,
              const std::filesystem::path& out_dir, std::ostream& err) {
  try {
    LoadedConfig loaded = load_config_file(config_path);
    if (seed) loaded.config.seed = *seed;
    loaded.config.validate();
    std::filesystem::create_directories(out_dir);
    for (int k = 0; k < static_cast<int>(loaded.config.clients.size()); ++k) {
      const ClientState client = make_client(loaded.config, k);
      auto dump = [&](const Matrix& x, const std::vector<int>& y, const std::string& name) {
        std::string text;
        for (Eigen::Index j = 0; j < x.cols(); ++j) text += fmt::format("x{},", j);
        text += "y\n";
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
          for (Eigen::Index j = 0; j < x.cols(); ++j) text += fmt::format("{:.17g},", x(i, j));
          text += fmt::format("{}\n", y[static_cast<std::size_t>(i)]);
        }
        write_text(out_dir / fmt::format("client_{}_{}.csv", k, name), text);
      };
      dump(client.data->x_train, client.data->y_train, "train");
      dump(client.data->x_test, client.data->y_test, "test");
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitParse;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace h2tune
