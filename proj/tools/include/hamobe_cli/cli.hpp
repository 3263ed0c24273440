#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "hamobe/config.hpp"
#include "hamobe/evaluator.hpp"
#include "hamobe/synthetic.hpp"

namespace hamobe::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;

// Everything a subcommand needs. Loaded from a JSON file (strict keys), then
// overridden by flags. Model keys sit at the top level next to run keys;
// synthetic-data keys live under "synthetic".
struct RunConfig {
  ModelConfig model;
  std::optional<std::filesystem::path> manifest;
  std::optional<std::filesystem::path> checkpoint;
  std::filesystem::path out = ".";
  Protocol protocol = Protocol::General;
  std::size_t steps = 200;
  std::size_t batch_identities = 0;
  std::size_t single_per_dual = 1;
  bool dual_training = true;
  std::size_t checkpoint_every = 0;
  SyntheticSpec synthetic;
  // Model keys present in the file; they must agree with the data.
  std::vector<std::string> explicit_model_keys;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Runs one subcommand; argv[0] is the program name.
int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace hamobe::cli
