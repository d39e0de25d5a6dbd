#include "pvfl/experiment.hpp"

#include <algorithm>
#include <cstdint>
#include <charconv>
#include <fstream>
#include <set>

#include "pvfl/config.hpp"
#include "pvfl/error.hpp"
#include "pvfl/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pvfl {

namespace {

std::string num(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) return "nan";
  return std::string(buf, end);
}

json metrics_json(const EvalResult& r) {
  return {{"mae", r.mae}, {"rmse", r.rmse}, {"r2", r.r2}, {"n_samples", r.n_samples}};
}

std::string config_line(const ExperimentSpec& spec) { return "# config: " + spec.source.dump() + "\n"; }

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

template <typename T>
void read_key(const json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
    if (!it->is_number_integer() || it->template get<std::int64_t>() < 0) throw ConfigError(std::string(key) + " must be a non-negative integer");
  }
  try {
    out = it->template get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  }
}

CsvSource parse_csv_source(const json& j, const fs::path& base) {
  reject_unknown_keys(j, {"meter", "centers", "assignment"}, "data.csv");
  CsvSource src;
  if (!j.contains("meter")) throw ConfigError("data.csv.meter is required");
  src.meter = resolve(base, j.at("meter").get<std::string>());
  if (!j.contains("centers") || !j.at("centers").is_array()) throw ConfigError("data.csv.centers must be an array");
  for (const auto& c : j.at("centers")) {
    reject_unknown_keys(c, {"id", "irradiance"}, "data.csv.centers[]");
    if (!c.contains("id") || !c.contains("irradiance")) {
      throw ConfigError("data.csv.centers[] needs id and irradiance");
    }
    src.centers.push_back({c.at("id").get<int>(), resolve(base, c.at("irradiance").get<std::string>())});
  }
  if (!j.contains("assignment") || !j.at("assignment").is_object()) {
    throw ConfigError("data.csv.assignment must map prosumer ids to center ids");
  }
  for (const auto& [prosumer, center] : j.at("assignment").items()) {
    src.assignment.emplace_back(prosumer, center.get<int>());
  }
  return src;
}

fs::path strategy_dir(const fs::path& root, Strategy s) { return root / to_string(s); }

fs::path center_file(const fs::path& dir, int center_id) {
  return dir / ("center_" + std::to_string(center_id) + ".ckpt");
}

const PreparedCenter& find_center(const std::vector<PreparedCenter>& centers, int id) {
  for (const auto& c : centers) {
    if (c.center_id == id) return c;
  }
  throw ConfigError("unknown center " + std::to_string(id));
}

void write_round_rows(std::ostream& log, std::ostream& timing, Strategy s, std::span<const RoundRecord> records) {
  for (const RoundRecord& rec : records) {
    for (const CenterRound& c : rec.centers) {
      log << to_string(s) << ',' << rec.phase << ',' << rec.round << ',' << c.center_id << ',' << num(c.lambda) << ','
          << num(c.train_loss) << ',' << num(c.test.mae) << ',' << num(c.test.rmse) << ',' << num(c.test.r2) << '\n';
    }
    timing << to_string(s) << ',' << rec.phase << ',' << rec.round << ',' << num(rec.wall_seconds) << '\n';
  }
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::trunc) {
  std::ofstream os(path, std::ios::out | mode);
  if (!os) throw FormatError("cannot write " + path.string());
  return os;
}

// Trace and onboard reuse checkpoints, so they must see the data and model
// the run was made with.
void require_matching_run(const ExperimentSpec& spec, const fs::path& run_dir) {
  const fs::path report_path = run_dir / "report.json";
  std::ifstream in(report_path);
  if (!in) throw StateError("missing " + report_path.string() + "; run the experiment first");
  json report;
  try {
    report = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(report_path.string() + " is not valid JSON: " + e.what());
  }
  json run_spec = report.value("spec", json::object());
  json ours = spec.source;
  for (json* j : {&run_spec, &ours}) {
    j->erase("strategy");
    j->erase("onboard_rounds");
    j->erase("threads");
  }
  if (run_spec != ours) {
    throw ConfigError("spec differs from the one used for " + run_dir.string() + " (check data, model and seed)");
  }
}

}  // namespace

std::vector<Strategy> ExperimentSpec::strategies() const {
  if (strategy == "all") return {Strategy::Pfl, Strategy::FedAvg, Strategy::Local};
  return {parse_strategy(strategy)};
}

ExperimentSpec parse_spec(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("experiment spec must be a JSON object");
  reject_unknown_keys(j,
                      {"data", "onboard_centers", "model", "strategy", "rounds", "onboard_rounds", "seed",
                       "train_fraction", "threads"},
                      "spec");
  ExperimentSpec spec;
  spec.source = j;
  if (!j.contains("data") || !j.at("data").is_object()) throw ConfigError("spec.data is required");
  const json& data = j.at("data");
  reject_unknown_keys(data, {"synthetic", "csv"}, "data");
  if (data.contains("synthetic") == data.contains("csv")) {
    throw ConfigError("data needs exactly one of 'synthetic' or 'csv'");
  }
  if (data.contains("synthetic")) {
    spec.synthetic = data.at("synthetic").get<SynthConfig>();
    for (const auto& c : spec.synthetic->centers) {
      if (c.onboard) spec.onboard_centers.push_back(c.center_id);
    }
  } else {
    spec.csv = parse_csv_source(data.at("csv"), base_dir);
  }
  if (j.contains("onboard_centers")) {
    for (const auto& id : j.at("onboard_centers")) spec.onboard_centers.push_back(id.get<int>());
  }
  std::sort(spec.onboard_centers.begin(), spec.onboard_centers.end());
  spec.onboard_centers.erase(std::unique(spec.onboard_centers.begin(), spec.onboard_centers.end()),
                             spec.onboard_centers.end());
  if (j.contains("model")) spec.model = j.at("model").get<ModelConfig>();
  read_key(j, "strategy", spec.strategy);
  read_key(j, "rounds", spec.rounds);
  read_key(j, "onboard_rounds", spec.onboard_rounds);
  read_key(j, "seed", spec.seed);
  read_key(j, "train_fraction", spec.train_fraction);
  read_key(j, "threads", spec.threads);
  spec.strategies();  // validates the name
  if (spec.rounds == 0) throw ConfigError("rounds must be positive");
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie strictly between 0 and 1");
  }
  return spec;
}

ExperimentSpec load_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open spec " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("spec " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_spec(j, path.parent_path());
}

ExperimentData load_data(const ExperimentSpec& spec) {
  ExperimentData data;
  CenterAssignment assignment;
  if (spec.synthetic) {
    data.series = synthesize(*spec.synthetic, spec.seed);
    for (const auto& s : data.series) assignment.emplace_back(s.prosumer_id, s.center_id);
  } else {
    const CsvSource& src = *spec.csv;
    data.series = load_meter_csv(src.meter);
    assignment = src.assignment;
    std::map<int, IrradianceTable> tables;
    for (const auto& c : src.centers) {
      if (!tables.emplace(c.center_id, load_irradiance_csv(c.irradiance)).second) {
        throw ConfigError("data.csv.centers lists center " + std::to_string(c.center_id) + " twice");
      }
    }
    std::map<std::string, int> center_of(assignment.begin(), assignment.end());
    for (auto& s : data.series) {
      auto it = center_of.find(s.prosumer_id);
      if (it == center_of.end()) throw AssignmentError("prosumer " + s.prosumer_id + " is not assigned to a center");
      auto table = tables.find(it->second);
      if (table == tables.end()) {
        throw ConfigError("center " + std::to_string(it->second) + " has no irradiance file");
      }
      s.center_id = it->second;
      attach_irradiance(s, table->second);
      s.validate();
    }
  }
  for (const auto& [p, c] : assignment) data.center_of[p] = c;

  auto prepared = prepare_centers(partition_centers(data.series, assignment, spec.model.window_days),
                                  spec.train_fraction);
  std::set<int> held(spec.onboard_centers.begin(), spec.onboard_centers.end());
  for (auto& c : prepared) {
    (held.erase(c.center_id) ? data.newcomers : data.centers).push_back(std::move(c));
  }
  if (!held.empty()) throw ConfigError("onboard center " + std::to_string(*held.begin()) + " has no data");
  if (data.centers.empty()) throw ConfigError("no centers left for the federation");
  return data;
}

RunOptions run_options(const ExperimentSpec& spec) {
  RunOptions o;
  o.rounds = spec.rounds;
  o.seed = spec.seed;
  o.threads = spec.threads;
  return o;
}

json strategy_report(const FederationState& state) {
  json centers = json::array();
  double sum_raw[3] = {0, 0, 0}, sum_clip[3] = {0, 0, 0};
  for (std::size_t i = 0; i < state.clients.size(); ++i) {
    const ClientState& c = state.clients[i];
    const EvalResult raw = evaluate_center(state.eval_model(i), c.data->test, c.data->stats, false);
    const EvalResult clipped = evaluate_center(state.eval_model(i), c.data->test, c.data->stats, true);
    json curve = json::array();
    for (const RoundRecord& rec : state.records) {
      for (const CenterRound& cr : rec.centers) {
        if (cr.center_id == c.center_id) curve.push_back(cr.train_loss);
      }
    }
    centers.push_back({{"center", c.center_id},
                       {"train_samples", c.data->train.size()},
                       {"test_samples", c.data->test.size()},
                       {"lambda", c.lambda},
                       {"raw", metrics_json(raw)},
                       {"clipped", metrics_json(clipped)},
                       {"train_loss_curve", curve}});
    sum_raw[0] += raw.mae, sum_raw[1] += raw.rmse, sum_raw[2] += raw.r2;
    sum_clip[0] += clipped.mae, sum_clip[1] += clipped.rmse, sum_clip[2] += clipped.r2;
  }
  const double n = static_cast<double>(state.clients.size());
  return {{"rounds", state.rounds_done},
          {"centers", centers},
          {"mean",
           {{"raw", {{"mae", sum_raw[0] / n}, {"rmse", sum_raw[1] / n}, {"r2", sum_raw[2] / n}}},
            {"clipped", {{"mae", sum_clip[0] / n}, {"rmse", sum_clip[1] / n}, {"r2", sum_clip[2] / n}}}}}};
}

RunOutput run_experiment(const ExperimentSpec& spec, const ExperimentData& data) {
  RunOutput out;
  out.report = {{"spec", spec.source}, {"seed", spec.seed}, {"rounds", spec.rounds}, {"strategies", json::object()}};
  for (Strategy s : spec.strategies()) {
    FederationState state = run_strategy(s, data.centers, spec.model, run_options(spec));
    out.report["strategies"][to_string(s)] = strategy_report(state);
    out.states.emplace(s, std::move(state));
  }
  return out;
}

void save_federation(const FederationState& state, const fs::path& dir) {
  fs::create_directories(dir);
  for (const ClientState& c : state.clients) {
    const json extra = {{"strategy", to_string(state.strategy)},
                        {"center", c.center_id},
                        {"lambda", c.lambda},
                        {"e_local", c.e_local},
                        {"first_round", c.first_round},
                        {"rounds_done", state.rounds_done}};
    write_checkpoint(center_file(dir, c.center_id), to_checkpoint(c.params, extra.dump()));
  }
  if (state.strategy != Strategy::Local) {
    Checkpoint g;
    g.metadata_json = json{{"config", state.config},
                           {"strategy", to_string(state.strategy)},
                           {"embedding", state.global.embedding},
                           {"rounds_done", state.rounds_done}}
                          .dump();
    g.tensors = state.global.base;
    write_checkpoint(dir / "global.ckpt", g);
  }
}

FederationState restore_federation(Strategy strategy, const fs::path& dir, const std::vector<PreparedCenter>& centers,
                                   const ModelConfig& config, const RunOptions& options) {
  FederationState state = init_federation(strategy, centers, config, options);
  for (ClientState& c : state.clients) {
    const fs::path file = center_file(dir, c.center_id);
    if (!fs::exists(file)) throw StateError("missing checkpoint " + file.string());
    const Checkpoint ckpt = read_checkpoint(file);
    c.params = from_checkpoint(ckpt);
    if (!(c.params.config == config)) throw ConfigError(file.string() + " was trained with a different model config");
    const json extra = json::parse(ckpt.metadata_json).at("extra");
    c.lambda = extra.at("lambda").get<double>();
    c.e_local = extra.at("e_local").get<std::vector<double>>();
    c.first_round = extra.at("first_round").get<std::size_t>();
    state.rounds_done = extra.at("rounds_done").get<std::size_t>();
  }
  if (strategy != Strategy::Local) {
    const fs::path file = dir / "global.ckpt";
    if (!fs::exists(file)) throw StateError("missing checkpoint " + file.string());
    const Checkpoint g = read_checkpoint(file);
    const json meta = json::parse(g.metadata_json);
    state.global.base = g.tensors;
    state.global.embedding = meta.at("embedding").get<std::vector<double>>();
    state.global.round = meta.at("rounds_done").get<std::size_t>();
    if (strategy == Strategy::FedAvg) state.global_model = merge_model(config, g.tensors, {});
  }
  return state;
}

void cmd_run(const ExperimentSpec& spec, const fs::path& out) {
  const ExperimentData data = load_data(spec);
  fs::create_directories(out);
  RunOutput result = run_experiment(spec, data);

  auto log = open_out(out / "round_log.csv");
  auto timing = open_out(out / "timing.csv");
  log << config_line(spec) << "strategy,phase,round,center,lambda,train_loss,mae,rmse,r2\n";
  timing << config_line(spec) << "strategy,phase,round,wall_seconds\n";
  for (const auto& [s, state] : result.states) {
    write_round_rows(log, timing, s, state.records);
    save_federation(state, strategy_dir(out / "checkpoints", s));
  }
  open_out(out / "report.json") << result.report.dump(2) << '\n';
}

void cmd_trace(const ExperimentSpec& spec, const fs::path& run_dir, const std::string& prosumer_id,
               const std::string& from_date, const std::string& to_date, const std::vector<Strategy>& strategies,
               const fs::path& csv_out) {
  require_matching_run(spec, run_dir);
  const ExperimentData data = load_data(spec);
  auto owner = data.center_of.find(prosumer_id);
  if (owner == data.center_of.end()) throw ContractError("unknown prosumer " + prosumer_id);
  const DayNumber from = parse_date(from_date), to = parse_date(to_date);
  if (to < from) throw ContractError("trace range ends before it starts");

  const bool newcomer = std::any_of(data.newcomers.begin(), data.newcomers.end(),
                                    [&](const PreparedCenter& c) { return c.center_id == owner->second; });
  const PreparedCenter& center = find_center(newcomer ? data.newcomers : data.centers, owner->second);
  const ProsumerSeries* series = nullptr;
  for (const auto& s : data.series) {
    if (s.prosumer_id == prosumer_id) series = &s;
  }

  std::map<DayNumber, const WindowSample*> by_day;
  for (const CenterDataset* split : {&center.train, &center.test}) {
    for (const auto& s : split->samples) {
      if (s.prosumer_id == prosumer_id && s.target_day >= from && s.target_day <= to) by_day[s.target_day] = &s;
    }
  }
  std::vector<WindowSample> samples;
  for (DayNumber d = from; d <= to; ++d) {
    auto it = by_day.find(d);
    if (it == by_day.end()) throw ContractError("no sample for " + prosumer_id + " on " + format_date(d));
    samples.push_back(*it->second);
  }

  const std::vector<Strategy> chosen = strategies.empty() ? spec.strategies() : strategies;
  const fs::path ckpt_root = run_dir / (newcomer ? "onboard/checkpoints" : "checkpoints");
  std::vector<Matrix> preds;
  for (Strategy s : chosen) {
    const fs::path dir = strategy_dir(ckpt_root, s);
    const fs::path file = s == Strategy::FedAvg ? dir / "global.ckpt" : center_file(dir, center.center_id);
    if (!fs::exists(file)) throw StateError("missing checkpoint " + file.string());
    const Checkpoint ckpt = read_checkpoint(file);
    const ModelParams params =
        s == Strategy::FedAvg ? merge_model(spec.model, ckpt.tensors, {}) : from_checkpoint(ckpt);
    preds.push_back(predict(params, samples));
  }

  auto os = open_out(csv_out);
  os << config_line(spec) << "date,slot,y_true";
  for (Strategy s : chosen) os << ",pred_" << to_string(s);
  os << '\n';
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const DayNumber day = samples[k].target_day;
    const std::size_t offset = static_cast<std::size_t>(day - series->first_day) * kSlotsPerDay;
    for (std::size_t t = 0; t < kSlotsPerDay; ++t) {
      os << format_date(day) << ',' << t << ',' << num(series->pv_generation[offset + t]);
      for (const Matrix& p : preds) os << ',' << num(center.stats.denormalize_target(p(k, t)));
      os << '\n';
    }
  }
}

json cmd_onboard(const ExperimentSpec& spec, const fs::path& run_dir, std::size_t rounds) {
  require_matching_run(spec, run_dir);
  const ExperimentData data = load_data(spec);
  if (data.newcomers.size() != 1) {
    throw ConfigError("onboarding needs exactly one held-back center, found " + std::to_string(data.newcomers.size()));
  }
  const PreparedCenter& newcomer = data.newcomers.front();
  std::size_t existing = 0;
  for (const auto& c : data.centers) existing += c.train.size();
  const double mean_existing = static_cast<double>(existing) / static_cast<double>(data.centers.size());
  const double volume = static_cast<double>(newcomer.train.size());

  json report = {{"spec", spec.source},
                 {"seed", spec.seed},
                 {"new_center", newcomer.center_id},
                 {"onboard_rounds", rounds},
                 {"volume",
                  {{"new_center_train_samples", newcomer.train.size()},
                   {"mean_existing_train_samples", mean_existing},
                   {"volume_ratio", volume / mean_existing},
                   {"aggregation_weight", volume / (volume + static_cast<double>(existing))}}},
                 {"strategies", json::object()}};

  const fs::path log_path = run_dir / "round_log.csv";
  const fs::path timing_path = run_dir / "timing.csv";
  if (!fs::exists(log_path)) throw StateError("missing " + log_path.string() + "; run the experiment first");
  auto log = open_out(log_path, std::ios::app);
  auto timing = open_out(timing_path, std::ios::app);
  for (Strategy s : spec.strategies()) {
    FederationState state =
        restore_federation(s, strategy_dir(run_dir / "checkpoints", s), data.centers, spec.model, run_options(spec));
    const std::size_t before = state.records.size();
    onboard_new_center(state, newcomer, rounds);
    write_round_rows(log, timing, s, std::span(state.records).subspan(before));
    save_federation(state, strategy_dir(run_dir / "onboard/checkpoints", s));

    const std::size_t idx = state.clients.size() - 1;
    json entry = strategy_report(state);
    entry["new_center"] = {
        {"raw", metrics_json(evaluate_center(state.eval_model(idx), newcomer.test, newcomer.stats, false))},
        {"clipped", metrics_json(evaluate_center(state.eval_model(idx), newcomer.test, newcomer.stats, true))}};
    report["strategies"][to_string(s)] = entry;
  }
  open_out(run_dir / "onboard_report.json") << report.dump(2) << '\n';
  return report;
}

}  // namespace pvfl
