#pragma once

// Experiment specs and the run / trace / onboard commands behind the CLI.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pvfl/dataset.hpp"
#include "pvfl/federation.hpp"
#include "pvfl/model.hpp"

namespace pvfl {

struct CsvCenter {
  int center_id = -1;
  std::filesystem::path irradiance;
};

struct CsvSource {
  std::filesystem::path meter;
  std::vector<CsvCenter> centers;
  CenterAssignment assignment;
};

struct ExperimentSpec {
  std::optional<SynthConfig> synthetic;
  std::optional<CsvSource> csv;
  /// Centers held back from `run` and introduced by `onboard`.
  std::vector<int> onboard_centers;
  ModelConfig model;
  std::string strategy = "all";
  std::size_t rounds = 10;
  std::size_t onboard_rounds = 5;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  std::size_t threads = 1;
  /// The spec as given, embedded in every output.
  nlohmann::json source;

  std::vector<Strategy> strategies() const;
};

/// Parses a spec; relative CSV paths resolve against `base_dir`.
ExperimentSpec parse_spec(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentSpec load_spec(const std::filesystem::path& path);

struct ExperimentData {
  std::vector<ProsumerSeries> series;
  std::vector<PreparedCenter> centers;    // federation members, by id
  std::vector<PreparedCenter> newcomers;  // onboarding centers, by id
  std::map<std::string, int> center_of;   // prosumer -> center
};

ExperimentData load_data(const ExperimentSpec& spec);

RunOptions run_options(const ExperimentSpec& spec);

/// Final per-center metrics of one strategy, raw and with negative PV clipped.
nlohmann::json strategy_report(const FederationState& state);

/// Result of `cmd_run` without touching the file system.
struct RunOutput {
  std::map<Strategy, FederationState> states;
  nlohmann::json report;
};
RunOutput run_experiment(const ExperimentSpec& spec, const ExperimentData& data);

/// Writes round_log.csv, timing.csv, report.json and checkpoints/ under `out`.
void cmd_run(const ExperimentSpec& spec, const std::filesystem::path& out);

/// Writes `date,slot,y_true,pred_<strategy>...` for one prosumer over an
/// inclusive date range, from the checkpoints under `run_dir`.
void cmd_trace(const ExperimentSpec& spec, const std::filesystem::path& run_dir, const std::string& prosumer_id,
               const std::string& from_date, const std::string& to_date, const std::vector<Strategy>& strategies,
               const std::filesystem::path& csv_out);

/// Restores the run under `run_dir`, onboards the held-back center for
/// `rounds` rounds per strategy, appends to round_log.csv and writes
/// onboard_report.json. Returns the report.
nlohmann::json cmd_onboard(const ExperimentSpec& spec, const std::filesystem::path& run_dir, std::size_t rounds);

// Checkpoint persistence of a whole federation.
void save_federation(const FederationState& state, const std::filesystem::path& dir);
FederationState restore_federation(Strategy strategy, const std::filesystem::path& dir,
                                   const std::vector<PreparedCenter>& centers, const ModelConfig& config,
                                   const RunOptions& options);

}  // namespace pvfl
