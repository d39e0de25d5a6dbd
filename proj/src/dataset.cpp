#include "pvfl/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "pvfl/error.hpp"

namespace pvfl {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '"')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '"'))
    s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(trim(line.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

std::optional<double> parse_number(std::string_view s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::ifstream open_or_throw(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  return in;
}

std::unordered_map<std::string, std::size_t> index_header(std::string_view header) {
  std::unordered_map<std::string, std::size_t> idx;
  auto fields = split_fields(header);
  for (std::size_t i = 0; i < fields.size(); ++i) {
    std::string name(fields[i]);
    std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
    idx.emplace(std::move(name), i);
  }
  return idx;
}

std::size_t require_column(const std::unordered_map<std::string, std::size_t>& idx, const std::string& name,
                           const std::filesystem::path& path) {
  auto it = idx.find(name);
  if (it == idx.end()) throw FormatError(path.string() + ": missing column '" + name + "'");
  return it->second;
}

std::string slot_column(std::size_t t) {
  std::string s = "t";
  if (t < 10) s += '0';
  return s + std::to_string(t);
}

double gauss(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return std::exp(-0.5 * z * z);
}

}  // namespace

DayNumber parse_date(std::string_view iso_date) {
  using namespace std::chrono;
  iso_date = trim(iso_date);
  int y = 0;
  unsigned m = 0, d = 0;
  auto bad = [&] { return FormatError("invalid date '" + std::string(iso_date) + "', expected YYYY-MM-DD"); };
  if (iso_date.size() != 10 || iso_date[4] != '-' || iso_date[7] != '-') throw bad();
  auto p = iso_date.data();
  if (std::from_chars(p, p + 4, y).ec != std::errc() || std::from_chars(p + 5, p + 7, m).ec != std::errc() ||
      std::from_chars(p + 8, p + 10, d).ec != std::errc()) {
    throw bad();
  }
  year_month_day ymd{year{y}, month{m}, day{d}};
  if (!ymd.ok()) throw bad();
  return sys_days{ymd}.time_since_epoch().count();
}

std::string format_date(DayNumber day) {
  using namespace std::chrono;
  year_month_day ymd{sys_days{days{day}}};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  return buf;
}

void ProsumerSeries::validate() const {
  const std::size_t n = days * kSlotsPerDay;
  auto check_len = [&](const std::vector<double>& v, const char* name) {
    if (v.size() != n) {
      throw ValidationError(prosumer_id + ": " + name + " has " + std::to_string(v.size()) + " values, expected " +
                            std::to_string(n));
    }
  };
  check_len(net_load, "net_load");
  check_len(pv_generation, "pv_generation");
  check_len(dhi, "dhi");
  check_len(dni, "dni");
  check_len(ghi, "ghi");
  if (!actual_consumption.empty()) check_len(actual_consumption, "actual_consumption");
  for (std::size_t i = 0; i < n; ++i) {
    if (pv_generation[i] < 0.0) throw ValidationError(prosumer_id + ": negative PV generation");
    if (dhi[i] < 0.0 || dni[i] < 0.0 || ghi[i] < 0.0) throw ValidationError(prosumer_id + ": negative irradiance");
    if (!actual_consumption.empty() &&
        std::abs(net_load[i] - (actual_consumption[i] - pv_generation[i])) > 1e-6) {
      throw ValidationError(prosumer_id + ": net load differs from consumption minus PV on " +
                            format_date(first_day + static_cast<DayNumber>(i / kSlotsPerDay)));
    }
  }
}

double NormStats::normalize(Variate v, double x) const {
  const auto i = static_cast<std::size_t>(v);
  return (x - min[i]) / (max[i] - min[i]);
}

double NormStats::denormalize(Variate v, double x) const {
  const auto i = static_cast<std::size_t>(v);
  return x * (max[i] - min[i]) + min[i];
}

// --- meter / irradiance files -----------------------------------------------

std::vector<ProsumerSeries> load_meter_csv(const std::filesystem::path& path) {
  auto in = open_or_throw(path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file");
  const auto idx = index_header(line);
  const std::size_t c_id = require_column(idx, "prosumer_id", path);
  const std::size_t c_cat = require_column(idx, "category", path);
  const std::size_t c_date = require_column(idx, "date", path);
  std::array<std::size_t, kSlotsPerDay> c_slot{};
  for (std::size_t t = 0; t < kSlotsPerDay; ++t) c_slot[t] = require_column(idx, slot_column(t), path);

  struct Day {
    std::array<double, kSlotsPerDay> consumption{};
    std::array<double, kSlotsPerDay> generation{};
    bool has_consumption = false;
    bool has_generation = false;
  };
  std::map<std::string, std::map<DayNumber, Day>> by_prosumer;

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto f = split_fields(line);
    const std::string id(c_id < f.size() ? f[c_id] : std::string_view{});
    const std::string date_text(c_date < f.size() ? f[c_date] : std::string_view{});
    if (id.empty() || date_text.empty()) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": missing prosumer_id or date");
    }
    const DayNumber day = parse_date(date_text);
    const std::string_view cat = c_cat < f.size() ? f[c_cat] : std::string_view{};
    Day& d = by_prosumer[id][day];
    for (std::size_t t = 0; t < kSlotsPerDay; ++t) {
      std::optional<double> v;
      if (c_slot[t] < f.size()) v = parse_number(f[c_slot[t]]);
      if (!v) {
        throw GapError("prosumer " + id + " on " + date_text + ": missing or unreadable half-hour " +
                       slot_column(t) + " (" + std::string(cat) + ")");
      }
      if (cat == "GC" || cat == "CL") {
        d.consumption[t] += *v;
      } else if (cat == "GG") {
        if (*v < 0.0) throw ValidationError("prosumer " + id + " on " + date_text + ": negative generation");
        d.generation[t] = *v;
      } else {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": unknown category '" +
                          std::string(cat) + "'");
      }
    }
    if (cat == "GG") {
      d.has_generation = true;
    } else {
      d.has_consumption = true;
    }
  }

  std::vector<ProsumerSeries> out;
  for (auto& [id, days] : by_prosumer) {
    ProsumerSeries s;
    s.prosumer_id = id;
    s.first_day = days.begin()->first;
    DayNumber expected = s.first_day;
    for (auto& [day, d] : days) {
      if (day != expected) {
        throw GapError("prosumer " + id + ": no readings for " + format_date(expected));
      }
      if (!d.has_consumption || !d.has_generation) {
        throw GapError("prosumer " + id + " on " + format_date(day) + ": missing " +
                       (d.has_consumption ? "generation (GG)" : "consumption (GC)") + " row");
      }
      for (std::size_t t = 0; t < kSlotsPerDay; ++t) {
        s.actual_consumption.push_back(d.consumption[t]);
        s.pv_generation.push_back(d.generation[t]);
        s.net_load.push_back(d.consumption[t] - d.generation[t]);
      }
      ++expected;
    }
    s.days = days.size();
    const std::size_t n = s.days * kSlotsPerDay;
    s.dhi.assign(n, 0.0);
    s.dni.assign(n, 0.0);
    s.ghi.assign(n, 0.0);
    out.push_back(std::move(s));
  }
  return out;
}

void IrradianceTable::set(DayNumber day, int slot, IrradianceReading r) { entries_[{day, slot}] = r; }

const IrradianceReading* IrradianceTable::find(DayNumber day, int slot) const {
  auto it = entries_.find({day, slot});
  return it == entries_.end() ? nullptr : &it->second;
}

IrradianceTable load_irradiance_csv(const std::filesystem::path& path) {
  auto in = open_or_throw(path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file");
  const auto idx = index_header(line);
  const std::size_t c_date = require_column(idx, "date", path);
  const std::size_t c_slot = require_column(idx, "slot", path);
  const std::size_t c_dhi = require_column(idx, "dhi", path);
  const std::size_t c_dni = require_column(idx, "dni", path);
  const std::size_t c_ghi = require_column(idx, "ghi", path);

  IrradianceTable table;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto f = split_fields(line);
    auto where = [&] { return path.string() + ":" + std::to_string(line_no); };
    auto field = [&](std::size_t c) -> std::optional<double> {
      return c < f.size() ? parse_number(f[c]) : std::nullopt;
    };
    if (c_date >= f.size()) throw FormatError(where() + ": missing date");
    const DayNumber day = parse_date(f[c_date]);
    const auto slot = field(c_slot);
    const auto dhi = field(c_dhi), dni = field(c_dni), ghi = field(c_ghi);
    if (!slot || !dhi || !dni || !ghi) throw FormatError(where() + ": unreadable value");
    if (*slot < 0 || *slot >= static_cast<double>(kSlotsPerDay) || *slot != std::floor(*slot)) {
      throw FormatError(where() + ": slot must be an integer in 0..47");
    }
    if (*dhi < 0.0 || *dni < 0.0 || *ghi < 0.0) {
      throw ValidationError(where() + ": negative irradiance");
    }
    table.set(day, static_cast<int>(*slot), IrradianceReading{*dhi, *dni, *ghi});
  }
  return table;
}

void attach_irradiance(ProsumerSeries& series, const IrradianceTable& table) {
  const std::size_t n = series.days * kSlotsPerDay;
  series.dhi.assign(n, 0.0);
  series.dni.assign(n, 0.0);
  series.ghi.assign(n, 0.0);
  for (std::size_t d = 0; d < series.days; ++d) {
    const DayNumber day = series.first_day + static_cast<DayNumber>(d);
    for (std::size_t t = 0; t < kSlotsPerDay; ++t) {
      const IrradianceReading* r = table.find(day, static_cast<int>(t));
      if (r == nullptr) {
        throw GapError("irradiance missing for " + format_date(day) + " slot " + std::to_string(t) +
                       " (prosumer " + series.prosumer_id + ")");
      }
      const std::size_t i = d * kSlotsPerDay + t;
      series.dhi[i] = r->dhi;
      series.dni[i] = r->dni;
      series.ghi[i] = r->ghi;
    }
  }
}

// --- synthetic data ----------------------------------------------------------

void SynthConfig::validate() const {
  if (days == 0) throw ConfigError("synthetic data: days must be positive");
  if (centers.empty()) throw ConfigError("synthetic data: at least one center is required");
  std::set<int> ids;
  for (const SynthCenter& c : centers) {
    const std::string tag = "synthetic center " + std::to_string(c.center_id);
    if (c.prosumers == 0) throw ConfigError(tag + ": prosumers must be positive");
    if (c.days > days) throw ConfigError(tag + ": days exceeds the configured horizon");
    if (!(c.irradiance_amplitude > 0.0)) throw ConfigError(tag + ": irradiance_amplitude must be positive");
    if (!(c.panel_orientation >= -1.0 && c.panel_orientation <= 1.0)) {
      throw ConfigError(tag + ": panel_orientation must lie in [-1, 1]");
    }
    if (c.irradiance_variability < 0.0) throw ConfigError(tag + ": irradiance_variability must be >= 0");
    if (!(c.panel_kw_mean > 0.0) || c.panel_kw_spread < 0.0 || c.panel_kw_spread >= c.panel_kw_mean) {
      throw ConfigError(tag + ": panel_kw_mean must be positive and exceed panel_kw_spread");
    }
    if (!ids.insert(c.center_id).second) throw ConfigError(tag + ": duplicate center id");
  }
  if (pv_noise < 0.0) throw ConfigError("synthetic data: pv_noise must be >= 0");
}

std::vector<ProsumerSeries> synthesize(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  const DayNumber start = parse_date(config.start_date);
  std::vector<ProsumerSeries> out;

  for (const SynthCenter& c : config.centers) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(c.center_id), 0x5EED}));
    const std::size_t days = c.days == 0 ? config.days : c.days;
    const DayNumber first = start + static_cast<DayNumber>(config.days - days);
    const std::size_t n = days * kSlotsPerDay;

    // Regional weather shared by every prosumer of the center.
    std::vector<double> ghi(n, 0.0), dhi(n, 0.0), dni(n, 0.0);
    for (std::size_t d = 0; d < days; ++d) {
      const double clearness = std::clamp(1.0 - c.irradiance_variability * std::abs(rng.normal()), 0.15, 1.0);
      const double diffuse_share = 0.12 + 0.6 * (1.0 - clearness);
      for (std::size_t t = 0; t < kSlotsPerDay; ++t) {
        const double hour = 0.5 * static_cast<double>(t) + 0.25;
        const double noise = 1.0 + 0.25 * c.irradiance_variability * rng.normal();
        if (hour <= 6.0 || hour >= 18.0) continue;
        const double elevation = std::sin(M_PI * (hour - 6.0) / 12.0);
        const double g = std::max(0.0, 1000.0 * c.irradiance_amplitude * std::pow(elevation, 1.3) * clearness * noise);
        const std::size_t i = d * kSlotsPerDay + t;
        ghi[i] = g;
        dhi[i] = g * diffuse_share;
        dni[i] = (g - dhi[i]) / std::max(elevation, 0.15);
      }
    }

    for (std::size_t p = 0; p < c.prosumers; ++p) {
      ProsumerSeries s;
      s.prosumer_id = "c" + std::to_string(c.center_id) + "_p" + std::to_string(p);
      s.center_id = c.center_id;
      s.first_day = first;
      s.days = days;
      s.ghi = ghi;
      s.dhi = dhi;
      s.dni = dni;
      s.pv_generation.resize(n);
      s.actual_consumption.resize(n);
      s.net_load.resize(n);

      const double panel_kw = rng.uniform(c.panel_kw_mean - c.panel_kw_spread, c.panel_kw_mean + c.panel_kw_spread);
      const double scale = rng.uniform(0.7, 1.3);
      const ConsumptionArchetype& a = c.consumption;
      for (std::size_t d = 0; d < days; ++d) {
        const double day_factor = std::max(0.3, 1.0 + 0.1 * rng.normal());
        for (std::size_t t = 0; t < kSlotsPerDay; ++t) {
          const std::size_t i = d * kSlotsPerDay + t;
          const double hour = 0.5 * static_cast<double>(t) + 0.25;
          // Half-hour energy of a panel at 80% derate.
          double pv = 0.0;
          const double noise = rng.normal();
          if (ghi[i] > 0.0) {
            const double facing = std::max(0.0, 1.0 + 0.6 * c.panel_orientation * (hour - 12.0) / 6.0);
            pv = std::max(0.0, panel_kw * 0.5 * 0.8 * facing * ghi[i] / 1000.0 + config.pv_noise * panel_kw * noise);
          }
          const double shape = a.base + a.morning_peak * gauss(hour, a.morning_hour, 1.2) +
                               a.evening_peak * gauss(hour, a.evening_hour, 1.5) + a.midday * gauss(hour, 13.0, 2.5);
          const double consumption = std::max(0.01, scale * day_factor * shape * (1.0 + a.noise * rng.normal()));
          s.pv_generation[i] = pv;
          s.actual_consumption[i] = consumption;
          s.net_load[i] = consumption - pv;
        }
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

// --- samples ----------------------------------------------------------------

std::vector<WindowSample> make_windows(const ProsumerSeries& series, std::size_t window_days) {
  if (window_days == 0) throw ConfigError("window_days must be positive");
  if (series.days < window_days) {
    throw ContractError("prosumer " + series.prosumer_id + ": " + std::to_string(series.days) +
                        " days of history, window needs " + std::to_string(window_days));
  }
  const std::size_t width = window_days * kSlotsPerDay;
  const std::array<const std::vector<double>*, kVariates> rows{&series.net_load, &series.dhi, &series.dni,
                                                               &series.ghi};
  for (const auto* r : rows) {
    if (r->size() != series.days * kSlotsPerDay) {
      throw DimensionError("prosumer " + series.prosumer_id + ": series arrays are not days * 48 long");
    }
  }
  std::vector<WindowSample> out;
  out.reserve(series.days - window_days + 1);
  for (std::size_t end = window_days; end <= series.days; ++end) {
    WindowSample w;
    w.prosumer_id = series.prosumer_id;
    w.target_day = series.first_day + static_cast<DayNumber>(end - 1);
    w.input = Matrix(kVariates, width);
    const std::size_t begin = (end - window_days) * kSlotsPerDay;
    for (std::size_t v = 0; v < kVariates; ++v) {
      std::copy_n(rows[v]->begin() + static_cast<std::ptrdiff_t>(begin), width, w.input.row(v).begin());
    }
    const auto tb = series.pv_generation.begin() + static_cast<std::ptrdiff_t>((end - 1) * kSlotsPerDay);
    w.target.assign(tb, tb + kSlotsPerDay);
    out.push_back(std::move(w));
  }
  return out;
}

std::vector<CenterDataset> partition_centers(const std::vector<ProsumerSeries>& series,
                                             const CenterAssignment& assignment, std::size_t window_days) {
  std::map<std::string, int> center_of;
  for (const auto& [prosumer, center] : assignment) {
    if (!center_of.emplace(prosumer, center).second) {
      throw AssignmentError("prosumer " + prosumer + " is assigned more than once");
    }
  }
  std::set<std::string> known;
  for (const ProsumerSeries& s : series) known.insert(s.prosumer_id);
  for (const auto& [prosumer, center] : center_of) {
    if (!known.count(prosumer)) throw AssignmentError("assignment names unknown prosumer " + prosumer);
  }

  std::map<int, CenterDataset> centers;
  for (const ProsumerSeries& s : series) {
    auto it = center_of.find(s.prosumer_id);
    if (it == center_of.end()) throw AssignmentError("prosumer " + s.prosumer_id + " is not assigned to a center");
    CenterDataset& c = centers[it->second];
    c.center_id = it->second;
    c.prosumers.push_back(s.prosumer_id);
    auto windows = make_windows(s, window_days);
    c.samples.insert(c.samples.end(), std::make_move_iterator(windows.begin()),
                     std::make_move_iterator(windows.end()));
  }
  std::vector<CenterDataset> out;
  for (auto& [id, c] : centers) out.push_back(std::move(c));
  return out;
}

std::pair<CenterDataset, CenterDataset> split_train_test(const CenterDataset& center, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ConfigError("train fraction must lie strictly between 0 and 1");
  }
  std::vector<const WindowSample*> order;
  for (const auto& s : center.samples) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(),
                   [](const WindowSample* a, const WindowSample* b) { return a->target_day < b->target_day; });

  // Cut only between distinct days; pick the boundary closest to the target share.
  const double want = fraction * static_cast<double>(order.size());
  std::size_t best = 0;
  double best_gap = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (order[i]->target_day == order[i - 1]->target_day) continue;
    const double gap = std::abs(static_cast<double>(i) - want);
    if (gap < best_gap) {
      best_gap = gap;
      best = i;
    }
  }
  if (best == 0 || best == order.size()) {
    throw ConfigError("center " + std::to_string(center.center_id) + ": split at " + std::to_string(fraction) +
                      " leaves the train or test side empty");
  }
  CenterDataset train{center.center_id, center.prosumers, {}, center.stats};
  CenterDataset test{center.center_id, center.prosumers, {}, center.stats};
  for (std::size_t i = 0; i < order.size(); ++i) (i < best ? train : test).samples.push_back(*order[i]);
  return {std::move(train), std::move(test)};
}

CenterDataset normalize(const CenterDataset& train) {
  if (train.samples.empty()) throw ContractError("normalize: empty training split");
  NormStats st;
  st.min.fill(std::numeric_limits<double>::infinity());
  st.max.fill(-std::numeric_limits<double>::infinity());
  double pv_max = 0.0;
  for (const WindowSample& s : train.samples) {
    for (std::size_t v = 0; v < kVariates; ++v) {
      for (double x : s.input.row(v)) {
        st.min[v] = std::min(st.min[v], x);
        st.max[v] = std::max(st.max[v], x);
      }
    }
    for (double y : s.target) pv_max = std::max(pv_max, y);
  }
  for (std::size_t v = 0; v < kVariates; ++v) {
    if (!(st.max[v] > st.min[v])) {
      throw DegenerateError("center " + std::to_string(train.center_id) + ": variate '" +
                            std::string(kVariateNames[v]) + "' is constant over the training split");
    }
  }
  if (!(pv_max > 0.0)) {
    throw DegenerateError("center " + std::to_string(train.center_id) + ": PV target is zero over the training split");
  }
  st.pv_max = pv_max;
  return apply_normalization(train, st);
}

CenterDataset apply_normalization(const CenterDataset& data, const NormStats& stats) {
  CenterDataset out{data.center_id, data.prosumers, data.samples, stats};
  for (WindowSample& s : out.samples) {
    for (std::size_t v = 0; v < kVariates; ++v) {
      for (double& x : s.input.row(v)) x = stats.normalize(static_cast<Variate>(v), x);
    }
    for (double& y : s.target) y = stats.normalize_target(y);
  }
  return out;
}

std::vector<PreparedCenter> prepare_centers(const std::vector<CenterDataset>& centers, double train_fraction) {
  std::vector<PreparedCenter> out;
  out.reserve(centers.size());
  for (const CenterDataset& c : centers) {
    auto [train, test] = split_train_test(c, train_fraction);
    PreparedCenter p;
    p.center_id = c.center_id;
    p.train = normalize(train);
    p.stats = *p.train.stats;
    p.test = apply_normalization(test, p.stats);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace pvfl
