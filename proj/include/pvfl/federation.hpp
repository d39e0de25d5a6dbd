#pragma once

// Server/client protocol for personalised federated training, plus the
// FedAvg and Local-only baselines and new-center onboarding.

#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pvfl/dataset.hpp"
#include "pvfl/error.hpp"
#include "pvfl/metrics.hpp"
#include "pvfl/model.hpp"

namespace pvfl {

/// A client failure inside a round; carries the center and the original error.
class ClientError : public Error {
 public:
  ClientError(int center_id, const std::string& what, std::exception_ptr cause)
      : Error("center " + std::to_string(center_id) + ": " + what), center_id_(center_id), cause_(cause) {}
  int center_id() const noexcept { return center_id_; }
  std::exception_ptr cause() const noexcept { return cause_; }

 private:
  int center_id_;
  std::exception_ptr cause_;
};

// --- aggregation algebra --------------------------------------------------------

/// |D_i| / |D| for every client. Throws AggregationError on an empty list or a zero volume.
std::vector<double> aggregation_weights(std::span<const std::size_t> volumes);

/// Volume-weighted average of parameter sets. `center_ids` label errors.
ParamSet aggregate_base(std::span<const ParamSet> bases, std::span<const std::size_t> volumes,
                        std::span<const int> center_ids = {});
std::vector<double> aggregate_embedding(std::span<const std::vector<double>> embeddings,
                                        std::span<const std::size_t> volumes);

/// Receives the warning when compute_lambda falls back to 0.5.
using WarningSink = std::function<void(const std::string&)>;
/// Default sink writes to stderr.
void set_warning_sink(WarningSink sink);

/// (cos(e_local, e_global) + 1) / 2, or 0.5 when either vector has zero norm.
double compute_lambda(std::span<const double> e_local, std::span<const double> e_global);

/// lambda * global + (1 - lambda) * local, tensor by tensor.
ParamSet local_aggregate(const ParamSet& base_local, const ParamSet& base_global, double lambda);

// --- server boundary -------------------------------------------------------------

/// Everything a client sends to the server in one round.
struct ClientUpload {
  int center_id = -1;
  ParamSet base;
  std::vector<double> embedding;
  std::size_t volume = 0;
};

struct GlobalState {
  ParamSet base;
  std::vector<double> embedding;
  std::size_t round = 0;
};

/// Collects one upload per center, then aggregates them in center-id order.
class Server {
 public:
  void receive(ClientUpload upload);
  /// Aggregates the pending uploads, clears them and returns the new state.
  GlobalState aggregate(std::size_t round);
  std::size_t pending() const noexcept { return uploads_.size(); }
  /// Per-center aggregation weights of the most recent aggregate().
  const std::vector<std::pair<int, double>>& last_weights() const noexcept { return last_weights_; }

 private:
  std::vector<ClientUpload> uploads_;
  std::vector<std::pair<int, double>> last_weights_;
};

// --- orchestration -----------------------------------------------------------

enum class Strategy { Pfl, FedAvg, Local };
std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& s);

struct ClientState {
  int center_id = -1;
  ModelParams params;
  const PreparedCenter* data = nullptr;
  double lambda = 0.5;
  std::vector<double> e_local;
  std::size_t first_round = 1;  // aggregation starts the round after this one
};

struct CenterRound {
  int center_id = -1;
  double lambda = 0.0;
  double train_loss = 0.0;
  EvalResult test;
};

struct RoundRecord {
  std::size_t round = 0;
  std::string phase = "train";
  std::vector<CenterRound> centers;
  double wall_seconds = 0.0;
};

struct RunOptions {
  std::size_t rounds = 10;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  /// Replaces the cosine lambda from round 2 on.
  std::optional<double> forced_lambda;
  SplitPolicy split;
  /// Score every center's test split after every round.
  bool evaluate_rounds = true;
};

/// Everything needed to continue a run: client models, server state, log.
struct FederationState {
  Strategy strategy = Strategy::Pfl;
  ModelConfig config;
  RunOptions options;
  std::vector<ClientState> clients;
  GlobalState global;
  std::vector<RoundRecord> records;
  std::size_t rounds_done = 0;
  ModelParams global_model;                // FedAvg only
  std::vector<ClientUpload> last_uploads;  // what the server saw in the latest round

  /// Model that scores a center: the global model for FedAvg, else the client's own.
  const ModelParams& eval_model(std::size_t client) const;
};

/// Seed shared by every center's round-1 model.
std::uint64_t model_seed(std::uint64_t master);
/// Shuffle stream of one center in one round.
std::uint64_t shuffle_seed(std::uint64_t master, int center_id, std::size_t round);

/// Clients for `centers`, all starting from the same initial model.
FederationState init_federation(Strategy strategy, const std::vector<PreparedCenter>& centers,
                                const ModelConfig& config, const RunOptions& options);

/// One synchronous round of `state.strategy`. PFL: (if r > 1) lambda and
/// local aggregation, local training, embedding, upload; then server
/// aggregation. FedAvg: start from the global model, train, average full
/// models. Local: train only; `server` is untouched.
RoundRecord run_round(FederationState& state, Server& server);

/// Callback after every completed round, e.g. for trajectory comparisons.
using RoundObserver = std::function<void(const FederationState&)>;

FederationState run_pfl(const std::vector<PreparedCenter>& centers, const ModelConfig& config,
                        const RunOptions& options, const RoundObserver& observer = {});
FederationState run_fedavg(const std::vector<PreparedCenter>& centers, const ModelConfig& config,
                           const RunOptions& options, const RoundObserver& observer = {});
FederationState run_local_only(const std::vector<PreparedCenter>& centers, const ModelConfig& config,
                               const RunOptions& options, const RoundObserver& observer = {});
FederationState run_strategy(Strategy strategy, const std::vector<PreparedCenter>& centers,
                             const ModelConfig& config, const RunOptions& options,
                             const RoundObserver& observer = {});

/// Adds `newcomer` and continues `state` for `rounds` more rounds. PFL:
/// the newcomer starts from the global base and lambda 0.5, with its head
/// ridge-fitted on its own training split, and skips aggregation in its first
/// round. FedAvg: it starts from the global
/// model. Local: it trains alone from the shared initial model. Records carry
/// phase "onboard".
void onboard_new_center(FederationState& state, const PreparedCenter& newcomer, std::size_t rounds,
                        const RoundObserver& observer = {});

}  // namespace pvfl
