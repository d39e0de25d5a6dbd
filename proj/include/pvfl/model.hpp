#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pvfl/dataset.hpp"
#include "pvfl/numeric.hpp"

namespace pvfl {

struct ModelConfig {
  std::size_t blocks = 2;
  std::size_t d_emb = 32;
  std::size_t d_k = 32;
  std::size_t d_ff = 64;
  std::size_t window_days = 3;
  std::size_t slots = kSlotsPerDay;
  double learning_rate = 1e-3;
  std::size_t epochs_per_round = 1;
  std::size_t batch_size = 32;
  /// Trailing training days that feed the irradiance embedding.
  std::size_t recent_days = 7;

  std::size_t input_width() const { return window_days * slots; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct BlockParams {
  ParamTensor wq, bq, wk, bk, wv, bv;  // d_emb -> d_k
  ParamTensor wo, bo;                  // d_k -> d_emb
  ParamTensor fc1_w, fc1_b;            // d_emb -> d_ff
  ParamTensor fc2_w, fc2_b;            // d_ff -> d_emb
};

/// Full local model: shared variate embedding, transformer blocks, output head.
struct ModelParams {
  ModelConfig config;
  ParamTensor emb_w, emb_b;
  std::vector<BlockParams> blocks;
  ParamTensor out_w, out_b;

  /// Every tensor in canonical order: embedding, blocks, output head.
  std::vector<ParamTensor*> tensors();
  std::vector<const ParamTensor*> tensors() const;
  std::size_t parameter_count() const;
};

/// Closed-form parameter count for a configuration.
std::size_t expected_parameter_count(const ModelConfig& config);

/// Xavier-uniform weights, zero biases.
ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

/// Parameter leaves of one model registered on a tape.
struct BoundBlock {
  Var wq, bq, wk, bk, wv, bv, wo, bo, fc1_w, fc1_b, fc2_w, fc2_b;
};
struct BoundModel {
  Var emb_w, emb_b;
  std::vector<BoundBlock> blocks;
  Var out_w, out_b;
};
/// Trainable leaves: the backward sweep writes into the parameters' grads.
BoundModel bind(Tape& tape, ModelParams& params);
/// Constant leaves for inference.
BoundModel bind_frozen(Tape& tape, const ModelParams& params);

/// Rows are stacked samples: sample s occupies rows 4s..4s+3 in variate order.
Var embed_variates(Var inputs, const BoundModel& m);
Var block_forward(Var h, const BoundBlock& block, std::size_t d_k);

struct ForwardPass {
  Var prediction;  // batch x slots
  Var final_h;     // (4 * batch) x d_emb
};
ForwardPass forward(Tape& tape, const BoundModel& model, const ModelConfig& config,
                    const Matrix& stacked_inputs);

/// Stacks sample inputs into (4 * n) x width and targets into n x 48.
Matrix stack_inputs(std::span<const WindowSample* const> batch);
Matrix stack_targets(std::span<const WindowSample* const> batch);

/// PV estimates for every sample, one row each, in normalised units.
Matrix predict(const ModelParams& params, std::span<const WindowSample> samples);

/// Mean squared error over every timestep of every sample.
double compute_loss(const ModelParams& params, std::span<const WindowSample> batch);
/// Loss plus gradients written into the parameters' grad buffers.
double loss_and_gradients(ModelParams& params, std::span<const WindowSample* const> batch);

struct TrainTrace {
  std::vector<double> epoch_loss;  // sample-weighted mean batch loss per epoch
};

/// Mini-batch SGD for `config.epochs_per_round` epochs; batch order is a
/// seeded shuffle drawn from `rng`.
TrainTrace local_train(ModelParams& params, const CenterDataset& train, Rng& rng);

/// Averaged final-layer DHI/DNI/GHI rows over training samples whose target day
/// lies within the last `recent_days` days of the split. Length 3 * d_emb.
std::vector<double> pv_condition_embedding(const ModelParams& params, const CenterDataset& data,
                                           std::size_t recent_days);

/// Ridge least-squares fit of the output head on the Net-row features of the
/// current base, using `train`. Other tensors are untouched.
void fit_head(ModelParams& params, const CenterDataset& train, double ridge);

struct NamedMatrix {
  std::string name;
  Matrix value;

  friend bool operator==(const NamedMatrix&, const NamedMatrix&) = default;
};
using ParamSet = std::vector<NamedMatrix>;

/// Which tensors stay local. The default keeps the output projection as the
/// head; `empty_head` moves it into the base so nothing stays local.
struct SplitPolicy {
  bool empty_head = false;
};

struct SplitModel {
  ParamSet base;
  ParamSet head;
};

SplitModel split_model(const ModelParams& params, SplitPolicy policy = {});
ModelParams merge_model(const ModelConfig& config, const ParamSet& base, const ParamSet& head);
std::size_t value_count(const ParamSet& set);

// --- checkpoints --------------------------------------------------------------

/// Binary container: magic, version, JSON metadata, named float64 tensors.
struct Checkpoint {
  std::string metadata_json;
  ParamSet tensors;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

Checkpoint to_checkpoint(const ModelParams& params, const std::string& extra_metadata_json = "{}");
ModelParams from_checkpoint(const Checkpoint& ckpt);

}  // namespace pvfl
