#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pvfl/numeric.hpp"

namespace pvfl {

/// Half-hourly slots per day.
inline constexpr std::size_t kSlotsPerDay = 48;

/// Row order of every model input.
enum class Variate : std::size_t { Net = 0, Dhi = 1, Dni = 2, Ghi = 3 };
inline constexpr std::size_t kVariates = 4;
inline constexpr std::array<std::string_view, kVariates> kVariateNames{"net", "dhi", "dni", "ghi"};

/// Days since 1970-01-01.
using DayNumber = std::int64_t;

DayNumber parse_date(std::string_view iso_date);
std::string format_date(DayNumber day);

/// Aligned half-hourly history of one prosumer. Every array holds days * 48
/// values; `actual_consumption` is empty when the source does not provide it.
struct ProsumerSeries {
  std::string prosumer_id;
  int center_id = -1;
  DayNumber first_day = 0;
  std::size_t days = 0;
  std::vector<double> net_load;            // kWh
  std::vector<double> pv_generation;       // kWh
  std::vector<double> actual_consumption;  // kWh, optional
  std::vector<double> dhi;                 // W/m^2
  std::vector<double> dni;                 // W/m^2
  std::vector<double> ghi;                 // W/m^2

  DayNumber last_day() const { return first_day + static_cast<DayNumber>(days) - 1; }
  /// Throws ValidationError when lengths, signs or the net-load identity are off.
  void validate() const;
};

/// One training example: a 4 x (window_days * 48) input and the target day's PV.
struct WindowSample {
  Matrix input;
  std::vector<double> target;
  std::string prosumer_id;
  DayNumber target_day = 0;
};

/// Per-variate min/max from a training split, plus the PV scale for targets.
struct NormStats {
  std::array<double, kVariates> min{};
  std::array<double, kVariates> max{};
  double pv_max = 1.0;

  double normalize(Variate v, double x) const;
  double denormalize(Variate v, double x) const;
  double normalize_target(double y) const { return y / pv_max; }
  double denormalize_target(double y) const { return y * pv_max; }
};

struct CenterDataset {
  int center_id = -1;
  std::vector<std::string> prosumers;
  std::vector<WindowSample> samples;
  std::optional<NormStats> stats;

  std::size_t size() const noexcept { return samples.size(); }
};

/// A center ready for training: normalised splits sharing training-split stats.
struct PreparedCenter {
  int center_id = -1;
  CenterDataset train;
  CenterDataset test;
  NormStats stats;
};

// --- ingestion ---------------------------------------------------------------

/// Reads `prosumer_id,category,date,t00..t47`. Categories GC and CL are summed
/// into consumption, GG is gross PV generation.
std::vector<ProsumerSeries> load_meter_csv(const std::filesystem::path& path);

struct IrradianceReading {
  double dhi = 0.0;
  double dni = 0.0;
  double ghi = 0.0;
};

class IrradianceTable {
 public:
  void set(DayNumber day, int slot, IrradianceReading r);
  const IrradianceReading* find(DayNumber day, int slot) const;
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  std::map<std::pair<DayNumber, int>, IrradianceReading> entries_;
};

/// Reads `date,slot,dhi,dni,ghi` (column order free).
IrradianceTable load_irradiance_csv(const std::filesystem::path& path);

/// Fills the irradiance arrays of `series` from `table`; every half hour of
/// every meter day must be present.
void attach_irradiance(ProsumerSeries& series, const IrradianceTable& table);

// --- synthetic data ----------------------------------------------------------

/// Daily consumption shape, values in kWh per half hour.
struct ConsumptionArchetype {
  double base = 0.15;
  double morning_peak = 0.35;
  double morning_hour = 7.5;
  double evening_peak = 0.6;
  double evening_hour = 19.0;
  double midday = 0.05;
  double noise = 0.15;  // relative slot-level noise
};

struct SynthCenter {
  int center_id = 0;
  std::size_t prosumers = 10;
  std::size_t days = 0;  // 0: use SynthConfig::days; otherwise the most recent `days`
  double irradiance_amplitude = 1.0;
  double irradiance_variability = 0.3;
  double panel_kw_mean = 3.0;
  double panel_kw_spread = 0.5;
  /// Panel facing: -1 east (morning-heavy output), 0 north, +1 west.
  double panel_orientation = 0.0;
  ConsumptionArchetype consumption;
  bool onboard = false;  // held back until a new-center onboarding run
};

struct SynthConfig {
  std::string start_date = "2012-07-01";
  std::size_t days = 60;
  double pv_noise = 0.03;  // kWh per kW of panel, per half hour
  std::vector<SynthCenter> centers;

  void validate() const;
};

/// Deterministic multi-center data. Each center draws from its own stream, so
/// adding or removing a center leaves the others unchanged.
std::vector<ProsumerSeries> synthesize(const SynthConfig& config, std::uint64_t seed);

// --- samples ----------------------------------------------------------------

std::vector<WindowSample> make_windows(const ProsumerSeries& series, std::size_t window_days);

/// (prosumer_id, center_id) pairs; each prosumer must appear exactly once.
using CenterAssignment = std::vector<std::pair<std::string, int>>;

/// Builds one dataset per distinct center id, ordered by id.
std::vector<CenterDataset> partition_centers(const std::vector<ProsumerSeries>& series,
                                             const CenterAssignment& assignment,
                                             std::size_t window_days);

/// Chronological split: every train target day precedes every test target day,
/// with the train share as close to `fraction` as whole days allow.
std::pair<CenterDataset, CenterDataset> split_train_test(const CenterDataset& center, double fraction);

/// Fits min-max stats on `train` and returns the normalised copy (stats set).
CenterDataset normalize(const CenterDataset& train);
/// Applies previously fitted stats.
CenterDataset apply_normalization(const CenterDataset& data, const NormStats& stats);

/// split_train_test + normalize for every center.
std::vector<PreparedCenter> prepare_centers(const std::vector<CenterDataset>& centers,
                                            double train_fraction);

}  // namespace pvfl
