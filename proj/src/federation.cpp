#include "pvfl/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <mutex>
#include <thread>

namespace pvfl {

namespace {

std::mutex g_sink_mutex;
WarningSink g_sink;

void warn(const std::string& message) {
  std::lock_guard lock(g_sink_mutex);
  if (g_sink) {
    g_sink(message);
  } else {
    std::cerr << "warning: " << message << '\n';
  }
}

void check_same_layout(const ParamSet& a, const ParamSet& b, const std::string& who) {
  if (a.size() != b.size()) {
    throw AggregationError(who + ": parameter set has " + std::to_string(a.size()) + " tensors, expected " +
                           std::to_string(b.size()));
  }
  for (std::size_t t = 0; t < a.size(); ++t) {
    if (a[t].name != b[t].name || !a[t].value.same_shape(b[t].value)) {
      throw AggregationError(who + ": tensor '" + a[t].name + "' " + a[t].value.shape_string() +
                             " does not match '" + b[t].name + "' " + b[t].value.shape_string());
    }
  }
}

// Runs fn(i) for every client, on up to `threads` workers. The first failure
// in client order is rethrown tagged with its center.
template <typename Fn>
void for_each_client(std::vector<ClientState>& clients, std::size_t threads, Fn fn) {
  std::vector<std::exception_ptr> errors(clients.size());
  auto work = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), clients.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < clients.size(); ++i) work(i);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < clients.size(); i += workers) work(i);
      });
    }
  }
  for (std::size_t i = 0; i < clients.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      throw ClientError(clients[i].center_id, e.what(), errors[i]);
    }
  }
}

double train_client(ClientState& c, const FederationState& state, std::size_t round) {
  Rng rng(shuffle_seed(state.options.seed, c.center_id, round));
  const TrainTrace trace = local_train(c.params, c.data->train, rng);
  return trace.epoch_loss.back();
}

void score(RoundRecord& rec, const FederationState& state) {
  if (!state.options.evaluate_rounds) return;
  for (std::size_t i = 0; i < state.clients.size(); ++i) {
    const ClientState& c = state.clients[i];
    rec.centers[i].test = evaluate_center(state.eval_model(i), c.data->test, c.data->stats, false);
  }
}

RoundRecord pfl_round(FederationState& state, Server& server, std::size_t r) {
  RoundRecord rec;
  rec.round = r;
  rec.centers.resize(state.clients.size());
  std::vector<ClientUpload> uploads(state.clients.size());
  for_each_client(state.clients, state.options.threads, [&](std::size_t i) {
    ClientState& c = state.clients[i];
    if (r > c.first_round) {
      c.lambda = state.options.forced_lambda ? *state.options.forced_lambda
                                             : compute_lambda(c.e_local, state.global.embedding);
      SplitModel parts = split_model(c.params, state.options.split);
      c.params = merge_model(state.config, local_aggregate(parts.base, state.global.base, c.lambda), parts.head);
    }
    rec.centers[i] = {c.center_id, c.lambda, train_client(c, state, r), {}};
    c.e_local = pv_condition_embedding(c.params, c.data->train, state.config.recent_days);
    uploads[i] = {c.center_id, split_model(c.params, state.options.split).base, c.e_local, c.data->train.size()};
  });
  for (auto& u : uploads) server.receive(u);
  state.last_uploads = std::move(uploads);
  state.global = server.aggregate(r);
  score(rec, state);
  return rec;
}

RoundRecord fedavg_round(FederationState& state, Server& server, std::size_t r) {
  RoundRecord rec;
  rec.round = r;
  rec.centers.resize(state.clients.size());
  std::vector<ClientUpload> uploads(state.clients.size());
  for_each_client(state.clients, state.options.threads, [&](std::size_t i) {
    ClientState& c = state.clients[i];
    if (r > c.first_round) c.params = state.global_model;
    c.lambda = 1.0;
    rec.centers[i] = {c.center_id, c.lambda, train_client(c, state, r), {}};
    uploads[i] = {c.center_id, split_model(c.params, {.empty_head = true}).base, {}, c.data->train.size()};
  });
  for (auto& u : uploads) server.receive(u);
  state.last_uploads = std::move(uploads);
  state.global = server.aggregate(r);
  state.global_model = merge_model(state.config, state.global.base, {});
  score(rec, state);
  return rec;
}

RoundRecord local_round(FederationState& state, std::size_t r) {
  RoundRecord rec;
  rec.round = r;
  rec.centers.resize(state.clients.size());
  for_each_client(state.clients, state.options.threads, [&](std::size_t i) {
    ClientState& c = state.clients[i];
    c.lambda = 0.0;
    rec.centers[i] = {c.center_id, c.lambda, train_client(c, state, r), {}};
  });
  state.last_uploads.clear();
  score(rec, state);
  return rec;
}

ClientState make_client(const PreparedCenter& center, const ModelParams& init, std::size_t first_round) {
  ClientState c;
  c.center_id = center.center_id;
  c.params = init;
  c.data = &center;
  c.lambda = 0.5;
  c.first_round = first_round;
  return c;
}

FederationState run_rounds(FederationState state, const RoundObserver& observer) {
  Server server;
  for (std::size_t r = 1; r <= state.options.rounds; ++r) {
    state.records.push_back(run_round(state, server));
    if (observer) observer(state);
  }
  return state;
}

}  // namespace

std::vector<double> aggregation_weights(std::span<const std::size_t> volumes) {
  if (volumes.empty()) throw AggregationError("no clients to aggregate");
  double total = 0.0;
  for (std::size_t v : volumes) {
    if (v == 0) throw AggregationError("client with zero data volume");
    total += static_cast<double>(v);
  }
  std::vector<double> w;
  w.reserve(volumes.size());
  for (std::size_t v : volumes) w.push_back(static_cast<double>(v) / total);
  return w;
}

ParamSet aggregate_base(std::span<const ParamSet> bases, std::span<const std::size_t> volumes,
                        std::span<const int> center_ids) {
  if (bases.size() != volumes.size()) throw AggregationError("one volume is needed per base");
  const std::vector<double> w = aggregation_weights(volumes);
  auto label = [&](std::size_t i) {
    return i < center_ids.size() ? "center " + std::to_string(center_ids[i]) : "client " + std::to_string(i);
  };
  ParamSet out = bases.front();
  for (std::size_t i = 1; i < bases.size(); ++i) check_same_layout(bases[i], out, label(i));
  for (std::size_t t = 0; t < out.size(); ++t) {
    auto dst = out[t].value.values();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < bases.size(); ++i) acc += w[i] * bases[i][t].value.values()[k];
      dst[k] = acc;
    }
  }
  return out;
}

std::vector<double> aggregate_embedding(std::span<const std::vector<double>> embeddings,
                                        std::span<const std::size_t> volumes) {
  if (embeddings.size() != volumes.size()) throw AggregationError("one volume is needed per embedding");
  const std::vector<double> w = aggregation_weights(volumes);
  const std::size_t n = embeddings.front().size();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings[i].size() != n) {
      throw AggregationError("embedding " + std::to_string(i) + " has length " +
                             std::to_string(embeddings[i].size()) + ", expected " + std::to_string(n));
    }
  }
  for (std::size_t k = 0; k < n; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < embeddings.size(); ++i) acc += w[i] * embeddings[i][k];
    out[k] = acc;
  }
  return out;
}

void set_warning_sink(WarningSink sink) {
  std::lock_guard lock(g_sink_mutex);
  g_sink = std::move(sink);
}

double compute_lambda(std::span<const double> e_local, std::span<const double> e_global) {
  if (e_local.size() != e_global.size()) {
    throw DimensionError("embedding lengths differ: " + std::to_string(e_local.size()) + " vs " +
                         std::to_string(e_global.size()));
  }
  double dot = 0.0, nl = 0.0, ng = 0.0;
  for (std::size_t i = 0; i < e_local.size(); ++i) {
    if (!std::isfinite(e_local[i]) || !std::isfinite(e_global[i])) {
      throw ContractError("embedding contains a non-finite value");
    }
    dot += e_local[i] * e_global[i];
    nl += e_local[i] * e_local[i];
    ng += e_global[i] * e_global[i];
  }
  if (nl == 0.0 || ng == 0.0) {
    warn("zero-norm irradiance embedding, using lambda = 0.5");
    return 0.5;
  }
  const double cosine = std::clamp(dot / (std::sqrt(nl) * std::sqrt(ng)), -1.0, 1.0);
  return (cosine + 1.0) / 2.0;
}

ParamSet local_aggregate(const ParamSet& base_local, const ParamSet& base_global, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("lambda must lie in [0, 1]");
  check_same_layout(base_global, base_local, "global base");
  ParamSet out = base_local;
  for (std::size_t t = 0; t < out.size(); ++t) {
    auto dst = out[t].value.values();
    auto g = base_global[t].value.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = lambda * g[k] + (1.0 - lambda) * dst[k];
  }
  return out;
}

void Server::receive(ClientUpload upload) {
  for (const auto& u : uploads_) {
    if (u.center_id == upload.center_id) {
      throw AggregationError("center " + std::to_string(upload.center_id) + " uploaded twice in one round");
    }
  }
  uploads_.push_back(std::move(upload));
}

GlobalState Server::aggregate(std::size_t round) {
  if (uploads_.empty()) throw AggregationError("no uploads to aggregate");
  std::sort(uploads_.begin(), uploads_.end(),
            [](const ClientUpload& a, const ClientUpload& b) { return a.center_id < b.center_id; });
  std::vector<ParamSet> bases;
  std::vector<std::vector<double>> embeddings;
  std::vector<std::size_t> volumes;
  std::vector<int> ids;
  bool any_embedding = false;
  for (auto& u : uploads_) {
    bases.push_back(std::move(u.base));
    any_embedding = any_embedding || !u.embedding.empty();
    embeddings.push_back(std::move(u.embedding));
    volumes.push_back(u.volume);
    ids.push_back(u.center_id);
  }
  uploads_.clear();

  GlobalState g;
  g.round = round;
  g.base = aggregate_base(bases, volumes, ids);
  if (any_embedding) g.embedding = aggregate_embedding(embeddings, volumes);
  const auto w = aggregation_weights(volumes);
  last_weights_.clear();
  for (std::size_t i = 0; i < ids.size(); ++i) last_weights_.emplace_back(ids[i], w[i]);
  return g;
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Pfl:
      return "pfl";
    case Strategy::FedAvg:
      return "fedavg";
    case Strategy::Local:
      return "local";
  }
  return "?";
}

Strategy parse_strategy(const std::string& s) {
  if (s == "pfl") return Strategy::Pfl;
  if (s == "fedavg") return Strategy::FedAvg;
  if (s == "local") return Strategy::Local;
  throw ConfigError("unknown strategy '" + s + "' (expected pfl, fedavg or local)");
}

const ModelParams& FederationState::eval_model(std::size_t client) const {
  return strategy == Strategy::FedAvg ? global_model : clients.at(client).params;
}

std::uint64_t model_seed(std::uint64_t master) { return derive_seed(master, {0x1A17}); }

std::uint64_t shuffle_seed(std::uint64_t master, int center_id, std::size_t round) {
  return derive_seed(master, {0x5AFF, static_cast<std::uint64_t>(center_id), round});
}

FederationState init_federation(Strategy strategy, const std::vector<PreparedCenter>& centers,
                                const ModelConfig& config, const RunOptions& options) {
  if (centers.empty()) throw ConfigError("at least one center is required");
  if (options.rounds == 0) throw ConfigError("rounds must be positive");
  if (options.forced_lambda && !(*options.forced_lambda >= 0.0 && *options.forced_lambda <= 1.0)) {
    throw ConfigError("forced lambda must lie in [0, 1]");
  }
  FederationState state;
  state.strategy = strategy;
  state.config = config;
  state.options = options;
  const ModelParams init = init_model(config, model_seed(options.seed));
  for (const auto& c : centers) state.clients.push_back(make_client(c, init, 1));
  if (strategy == Strategy::FedAvg) state.global_model = init;
  return state;
}

RoundRecord run_round(FederationState& state, Server& server) {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t r = state.rounds_done + 1;
  RoundRecord rec;
  switch (state.strategy) {
    case Strategy::Pfl:
      rec = pfl_round(state, server, r);
      break;
    case Strategy::FedAvg:
      rec = fedavg_round(state, server, r);
      break;
    case Strategy::Local:
      rec = local_round(state, r);
      break;
  }
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  state.rounds_done = r;
  return rec;
}

FederationState run_pfl(const std::vector<PreparedCenter>& centers, const ModelConfig& config,
                        const RunOptions& options, const RoundObserver& observer) {
  return run_rounds(init_federation(Strategy::Pfl, centers, config, options), observer);
}

FederationState run_fedavg(const std::vector<PreparedCenter>& centers, const ModelConfig& config,
                           const RunOptions& options, const RoundObserver& observer) {
  return run_rounds(init_federation(Strategy::FedAvg, centers, config, options), observer);
}

FederationState run_local_only(const std::vector<PreparedCenter>& centers, const ModelConfig& config,
                               const RunOptions& options, const RoundObserver& observer) {
  return run_rounds(init_federation(Strategy::Local, centers, config, options), observer);
}

FederationState run_strategy(Strategy strategy, const std::vector<PreparedCenter>& centers,
                             const ModelConfig& config, const RunOptions& options, const RoundObserver& observer) {
  switch (strategy) {
    case Strategy::Pfl:
      return run_pfl(centers, config, options, observer);
    case Strategy::FedAvg:
      return run_fedavg(centers, config, options, observer);
    case Strategy::Local:
      return run_local_only(centers, config, options, observer);
  }
  throw ConfigError("unknown strategy");
}

constexpr double kOnboardRidge = 0.1;

void onboard_new_center(FederationState& state, const PreparedCenter& newcomer, std::size_t rounds,
                        const RoundObserver& observer) {
  for (const auto& c : state.clients) {
    if (c.center_id == newcomer.center_id) {
      throw ConfigError("center " + std::to_string(newcomer.center_id) + " is already part of the federation");
    }
  }
  const std::size_t join_round = state.rounds_done + 1;
  ModelParams start;
  switch (state.strategy) {
    case Strategy::Pfl: {
      if (state.global.base.empty()) throw StateError("onboarding needs a prior aggregation");
      const ModelParams fresh =
          init_model(state.config, derive_seed(state.options.seed, {0x4EAD, static_cast<std::uint64_t>(newcomer.center_id)}));
      start = merge_model(state.config, state.global.base, split_model(fresh, state.options.split).head);
      if (!state.options.split.empty_head) fit_head(start, newcomer.train, kOnboardRidge);
      break;
    }
    case Strategy::FedAvg:
      start = state.global_model;
      break;
    case Strategy::Local:
      start = init_model(state.config, model_seed(state.options.seed));
      break;
  }
  state.clients.push_back(make_client(newcomer, start, join_round));

  Server server;
  for (std::size_t k = 0; k < rounds; ++k) {
    RoundRecord rec = run_round(state, server);
    rec.phase = "onboard";
    state.records.push_back(std::move(rec));
    if (observer) observer(state);
  }
}

}  // namespace pvfl
