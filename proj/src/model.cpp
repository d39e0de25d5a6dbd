#include "pvfl/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "pvfl/config.hpp"
#include "pvfl/error.hpp"

namespace pvfl {

namespace {

constexpr std::size_t kPredictChunk = 256;

ParamTensor tensor(std::string name, std::size_t rows, std::size_t cols) {
  return ParamTensor(std::move(name), Matrix(rows, cols));
}

// Zero-valued parameters with the right names and shapes.
ModelParams skeleton(const ModelConfig& c) {
  ModelParams p;
  p.config = c;
  p.emb_w = tensor("emb.w", c.input_width(), c.d_emb);
  p.emb_b = tensor("emb.b", 1, c.d_emb);
  for (std::size_t l = 0; l < c.blocks; ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    BlockParams b;
    b.wq = tensor(pre + "wq", c.d_emb, c.d_k);
    b.bq = tensor(pre + "bq", 1, c.d_k);
    b.wk = tensor(pre + "wk", c.d_emb, c.d_k);
    b.bk = tensor(pre + "bk", 1, c.d_k);
    b.wv = tensor(pre + "wv", c.d_emb, c.d_k);
    b.bv = tensor(pre + "bv", 1, c.d_k);
    b.wo = tensor(pre + "wo", c.d_k, c.d_emb);
    b.bo = tensor(pre + "bo", 1, c.d_emb);
    b.fc1_w = tensor(pre + "fc1.w", c.d_emb, c.d_ff);
    b.fc1_b = tensor(pre + "fc1.b", 1, c.d_ff);
    b.fc2_w = tensor(pre + "fc2.w", c.d_ff, c.d_emb);
    b.fc2_b = tensor(pre + "fc2.b", 1, c.d_emb);
    p.blocks.push_back(std::move(b));
  }
  p.out_w = tensor("out.w", c.d_emb, c.slots);
  p.out_b = tensor("out.b", 1, c.slots);
  return p;
}

bool is_head_tensor(const std::string& name) { return name.rfind("out.", 0) == 0; }

void check_input(const ModelConfig& c, const Matrix& stacked) {
  if (stacked.cols() != c.input_width() || stacked.rows() == 0 || stacked.rows() % kVariates != 0) {
    throw DimensionError("model input " + stacked.shape_string() + " does not match (4n)x" +
                         std::to_string(c.input_width()));
  }
}

std::vector<const WindowSample*> pointers(std::span<const WindowSample> samples) {
  std::vector<const WindowSample*> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(&s);
  return out;
}

// --- little-endian binary helpers ---

void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
std::uint64_t get_uint(std::istream& is, int bytes, const std::string& what) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int ch = is.get();
    if (ch == std::char_traits<char>::eof()) throw FormatError("checkpoint truncated while reading " + what);
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(ch)) << (8 * i);
  }
  return v;
}
std::string get_bytes(std::istream& is, std::uint64_t n, const std::string& what) {
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw FormatError("checkpoint truncated while reading " + what);
  }
  return s;
}

constexpr char kMagic[8] = {'P', 'V', 'F', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
  };
  positive(blocks, "blocks");
  positive(d_emb, "d_emb");
  positive(d_k, "d_k");
  positive(d_ff, "d_ff");
  positive(window_days, "window_days");
  positive(slots, "slots");
  positive(epochs_per_round, "epochs_per_round");
  positive(batch_size, "batch_size");
  positive(recent_days, "recent_days");
  if (d_k > d_emb) throw ConfigError("model.d_k must not exceed model.d_emb");
  if (!std::isfinite(learning_rate) || learning_rate < 0.0) {
    throw ConfigError("model.learning_rate must be finite and non-negative");
  }
}

std::vector<ParamTensor*> ModelParams::tensors() {
  std::vector<ParamTensor*> out{&emb_w, &emb_b};
  for (auto& b : blocks) {
    for (ParamTensor* t : {&b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.fc1_w, &b.fc1_b,
                           &b.fc2_w, &b.fc2_b}) {
      out.push_back(t);
    }
  }
  out.push_back(&out_w);
  out.push_back(&out_b);
  return out;
}

std::vector<const ParamTensor*> ModelParams::tensors() const {
  auto mutable_view = const_cast<ModelParams*>(this)->tensors();
  return {mutable_view.begin(), mutable_view.end()};
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const ParamTensor* t : tensors()) n += t->value.size();
  return n;
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_emb, dk = c.d_k, ff = c.d_ff;
  const std::size_t embedding = c.input_width() * d + d;
  const std::size_t block = 3 * (d * dk + dk) + (dk * d + d) + (d * ff + ff) + (ff * d + d);
  const std::size_t head = d * c.slots + c.slots;
  return embedding + c.blocks * block + head;
}

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p = skeleton(config);
  Rng rng(seed);
  for (ParamTensor* t : p.tensors()) {
    if (t->value.rows() == 1) continue;  // bias rows stay zero
    const double a = std::sqrt(6.0 / static_cast<double>(t->value.rows() + t->value.cols()));
    for (double& v : t->value.values()) v = rng.uniform(-a, a);
  }
  for (ParamTensor* t : p.tensors()) t->zero_grad();
  return p;
}

BoundModel bind(Tape& tape, ModelParams& p) {
  BoundModel m;
  m.emb_w = tape.parameter(p.emb_w);
  m.emb_b = tape.parameter(p.emb_b);
  for (auto& b : p.blocks) {
    m.blocks.push_back({tape.parameter(b.wq), tape.parameter(b.bq), tape.parameter(b.wk), tape.parameter(b.bk),
                        tape.parameter(b.wv), tape.parameter(b.bv), tape.parameter(b.wo), tape.parameter(b.bo),
                        tape.parameter(b.fc1_w), tape.parameter(b.fc1_b), tape.parameter(b.fc2_w),
                        tape.parameter(b.fc2_b)});
  }
  m.out_w = tape.parameter(p.out_w);
  m.out_b = tape.parameter(p.out_b);
  return m;
}

BoundModel bind_frozen(Tape& tape, const ModelParams& p) {
  auto c = [&tape](const ParamTensor& t) { return tape.constant(t.value); };
  BoundModel m;
  m.emb_w = c(p.emb_w);
  m.emb_b = c(p.emb_b);
  for (const auto& b : p.blocks) {
    m.blocks.push_back({c(b.wq), c(b.bq), c(b.wk), c(b.bk), c(b.wv), c(b.bv), c(b.wo), c(b.bo), c(b.fc1_w),
                        c(b.fc1_b), c(b.fc2_w), c(b.fc2_b)});
  }
  m.out_w = c(p.out_w);
  m.out_b = c(p.out_b);
  return m;
}

Var embed_variates(Var inputs, const BoundModel& m) { return affine(inputs, m.emb_w, m.emb_b); }

Var block_forward(Var h, const BoundBlock& b, std::size_t d_k) {
  Var q = affine(h, b.wq, b.bq);
  Var k = affine(h, b.wk, b.bk);
  Var v = affine(h, b.wv, b.bv);
  Var attn = scaled_dot_attention(q, k, v, d_k, kVariates);
  Var a = affine(attn, b.wo, b.bo);
  return affine(relu(affine(a, b.fc1_w, b.fc1_b)), b.fc2_w, b.fc2_b);
}

ForwardPass forward(Tape& tape, const BoundModel& model, const ModelConfig& config, const Matrix& stacked_inputs) {
  check_input(config, stacked_inputs);
  Var h = embed_variates(tape.constant(stacked_inputs), model);
  for (const auto& block : model.blocks) h = block_forward(h, block, config.d_k);
  Var net_rows = select_rows(h, static_cast<std::size_t>(Variate::Net), kVariates);
  return {affine(net_rows, model.out_w, model.out_b), h};
}

Matrix stack_inputs(std::span<const WindowSample* const> batch) {
  if (batch.empty()) throw ContractError("cannot stack an empty batch");
  const std::size_t width = batch.front()->input.cols();
  Matrix out(kVariates * batch.size(), width);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const Matrix& in = batch[s]->input;
    if (in.rows() != kVariates || in.cols() != width) {
      throw DimensionError("sample input " + in.shape_string() + " does not match 4x" + std::to_string(width));
    }
    std::copy(in.values().begin(), in.values().end(), out.row(kVariates * s).begin());
  }
  return out;
}

Matrix stack_targets(std::span<const WindowSample* const> batch) {
  if (batch.empty()) throw ContractError("cannot stack an empty batch");
  const std::size_t width = batch.front()->target.size();
  Matrix out(batch.size(), width);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    if (batch[s]->target.size() != width) throw DimensionError("sample targets differ in length");
    std::copy(batch[s]->target.begin(), batch[s]->target.end(), out.row(s).begin());
  }
  return out;
}

Matrix predict(const ModelParams& params, std::span<const WindowSample> samples) {
  Matrix out(samples.size(), params.config.slots);
  const auto ptrs = pointers(samples);
  for (std::size_t start = 0; start < ptrs.size(); start += kPredictChunk) {
    const std::size_t n = std::min(kPredictChunk, ptrs.size() - start);
    const std::span<const WindowSample* const> chunk(ptrs.data() + start, n);
    Tape tape;
    const BoundModel m = bind_frozen(tape, params);
    const Matrix& y = forward(tape, m, params.config, stack_inputs(chunk)).prediction.value();
    std::copy(y.values().begin(), y.values().end(), out.row(start).begin());
  }
  return out;
}

double compute_loss(const ModelParams& params, std::span<const WindowSample> batch) {
  if (batch.empty()) throw ContractError("loss of an empty batch");
  const Matrix pred = predict(params, batch);
  const Matrix target = stack_targets(pointers(batch));
  if (!pred.same_shape(target)) {
    throw DimensionError("prediction " + pred.shape_string() + " vs target " + target.shape_string());
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.values()[i] - target.values()[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

double loss_and_gradients(ModelParams& params, std::span<const WindowSample* const> batch) {
  if (batch.empty()) throw ContractError("loss of an empty batch");
  Tape tape;
  const BoundModel m = bind(tape, params);
  const ForwardPass fp = forward(tape, m, params.config, stack_inputs(batch));
  Var loss = mse(fp.prediction, stack_targets(batch));
  tape.backward(loss);
  return loss.value()(0, 0);
}

TrainTrace local_train(ModelParams& params, const CenterDataset& train, Rng& rng) {
  const ModelConfig& c = params.config;
  c.validate();
  if (train.samples.empty()) throw ContractError("center " + std::to_string(train.center_id) + " has no training samples");
  std::vector<std::size_t> order(train.samples.size());
  const auto tensors = params.tensors();
  TrainTrace trace;
  for (std::size_t epoch = 0; epoch < c.epochs_per_round; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    double weighted = 0.0;
    std::vector<const WindowSample*> batch;
    for (std::size_t start = 0; start < order.size(); start += c.batch_size) {
      const std::size_t n = std::min(c.batch_size, order.size() - start);
      batch.clear();
      for (std::size_t i = 0; i < n; ++i) batch.push_back(&train.samples[order[start + i]]);
      const double loss = loss_and_gradients(params, batch);
      if (!std::isfinite(loss)) {
        throw DivergenceError("non-finite loss in epoch " + std::to_string(epoch + 1) +
                              " with learning rate " + std::to_string(c.learning_rate));
      }
      sgd_step(tensors, c.learning_rate);
      weighted += loss * static_cast<double>(n);
    }
    trace.epoch_loss.push_back(weighted / static_cast<double>(order.size()));
  }
  return trace;
}

std::vector<double> pv_condition_embedding(const ModelParams& params, const CenterDataset& data,
                                           std::size_t recent_days) {
  if (recent_days == 0) throw ContractError("recent_days must be positive");
  if (data.samples.empty()) throw ContractError("embedding needs at least one sample");
  DayNumber last = data.samples.front().target_day;
  for (const auto& s : data.samples) last = std::max(last, s.target_day);
  const DayNumber cutoff = last - static_cast<DayNumber>(recent_days);

  std::vector<const WindowSample*> recent;
  for (const auto& s : data.samples) {
    if (s.target_day > cutoff) recent.push_back(&s);
  }
  const std::size_t d = params.config.d_emb;
  std::vector<double> acc(3 * d, 0.0);
  for (std::size_t start = 0; start < recent.size(); start += kPredictChunk) {
    const std::size_t n = std::min(kPredictChunk, recent.size() - start);
    const std::span<const WindowSample* const> chunk(recent.data() + start, n);
    Tape tape;
    const BoundModel m = bind_frozen(tape, params);
    const Matrix& h = forward(tape, m, params.config, stack_inputs(chunk)).final_h.value();
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t v = 1; v < kVariates; ++v) {
        const auto row = h.row(kVariates * s + v);
        for (std::size_t j = 0; j < d; ++j) acc[(v - 1) * d + j] += row[j];
      }
    }
  }
  for (double& x : acc) x /= static_cast<double>(recent.size());
  return acc;
}

void fit_head(ModelParams& params, const CenterDataset& train, double ridge) {
  if (train.samples.empty()) throw ContractError("head fit needs at least one sample");
  if (!(ridge > 0.0) || !std::isfinite(ridge)) throw ContractError("ridge must be positive and finite");
  const std::size_t d = params.config.d_emb;
  const std::size_t k = d + 1;  // features plus a constant for the bias
  const std::size_t T = params.config.slots;
  Matrix xtx(k, k);
  Matrix xty(k, T);
  const auto ptrs = pointers(train.samples);
  std::vector<double> x(k, 1.0);
  for (std::size_t start = 0; start < ptrs.size(); start += kPredictChunk) {
    const std::size_t n = std::min(kPredictChunk, ptrs.size() - start);
    const std::span<const WindowSample* const> chunk(ptrs.data() + start, n);
    Tape tape;
    const BoundModel m = bind_frozen(tape, params);
    const Matrix& h = forward(tape, m, params.config, stack_inputs(chunk)).final_h.value();
    for (std::size_t s = 0; s < n; ++s) {
      const auto row = h.row(kVariates * s);
      std::copy(row.begin(), row.end(), x.begin());
      const auto& y = chunk[s]->target;
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) xtx(i, j) += x[i] * x[j];
        for (std::size_t t = 0; t < T; ++t) xty(i, t) += x[i] * y[t];
      }
    }
  }
  for (std::size_t i = 0; i < k; ++i) xtx(i, i) += ridge * static_cast<double>(ptrs.size());

  // Cholesky factor L with L L^T = xtx, then two triangular solves per column.
  Matrix l(k, k);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double acc = xtx(i, j);
      for (std::size_t p = 0; p < j; ++p) acc -= l(i, p) * l(j, p);
      if (i == j) {
        if (!(acc > 0.0)) throw DegenerateError("head fit: normal matrix is not positive definite");
        l(i, i) = std::sqrt(acc);
      } else {
        l(i, j) = acc / l(j, j);
      }
    }
  }
  std::vector<double> z(k);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < k; ++i) {
      double acc = xty(i, t);
      for (std::size_t p = 0; p < i; ++p) acc -= l(i, p) * z[p];
      z[i] = acc / l(i, i);
    }
    for (std::size_t i = k; i-- > 0;) {
      double acc = z[i];
      for (std::size_t p = i + 1; p < k; ++p) acc -= l(p, i) * z[p];
      z[i] = acc / l(i, i);
    }
    for (std::size_t i = 0; i < d; ++i) params.out_w.value(i, t) = z[i];
    params.out_b.value(0, t) = z[d];
  }
}

SplitModel split_model(const ModelParams& params, SplitPolicy policy) {
  SplitModel out;
  for (const ParamTensor* t : params.tensors()) {
    auto& dst = (!policy.empty_head && is_head_tensor(t->name)) ? out.head : out.base;
    dst.push_back({t->name, t->value});
  }
  return out;
}

ModelParams merge_model(const ModelConfig& config, const ParamSet& base, const ParamSet& head) {
  config.validate();
  ModelParams p = skeleton(config);
  std::map<std::string, const Matrix*> given;
  for (const ParamSet* set : {&base, &head}) {
    for (const auto& nm : *set) {
      if (!given.emplace(nm.name, &nm.value).second) throw ContractError("tensor '" + nm.name + "' given twice");
    }
  }
  for (ParamTensor* t : p.tensors()) {
    auto it = given.find(t->name);
    if (it == given.end()) throw ContractError("tensor '" + t->name + "' missing from merge");
    if (!it->second->same_shape(t->value)) {
      throw DimensionError("tensor '" + t->name + "' has shape " + it->second->shape_string() + ", expected " +
                           t->value.shape_string());
    }
    t->value = *it->second;
    t->zero_grad();
    given.erase(it);
  }
  if (!given.empty()) throw ContractError("unknown tensor '" + given.begin()->first + "' in merge");
  return p;
}

std::size_t value_count(const ParamSet& set) {
  std::size_t n = 0;
  for (const auto& nm : set) n += nm.value.size();
  return n;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof kMagic);
  put_u32(os, kCheckpointVersion);
  put_u64(os, ckpt.metadata_json.size());
  os.write(ckpt.metadata_json.data(), static_cast<std::streamsize>(ckpt.metadata_json.size()));
  put_u64(os, ckpt.tensors.size());
  for (const auto& nm : ckpt.tensors) {
    put_u32(os, static_cast<std::uint32_t>(nm.name.size()));
    os.write(nm.name.data(), static_cast<std::streamsize>(nm.name.size()));
    put_u64(os, nm.value.rows());
    put_u64(os, nm.value.cols());
    for (double v : nm.value.values()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw FormatError("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw FormatError(path.string() + " is not a pvfl checkpoint");
  }
  const auto version = get_uint(is, 4, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  Checkpoint ckpt;
  ckpt.metadata_json = get_bytes(is, get_uint(is, 8, "metadata length"), "metadata");
  const auto count = get_uint(is, 8, "tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedMatrix nm;
    nm.name = get_bytes(is, get_uint(is, 4, "name length"), "tensor name");
    const auto rows = get_uint(is, 8, nm.name);
    const auto cols = get_uint(is, 8, nm.name);
    std::vector<double> data(rows * cols);
    for (double& v : data) v = std::bit_cast<double>(get_uint(is, 8, nm.name));
    nm.value = Matrix(rows, cols, std::move(data));
    ckpt.tensors.push_back(std::move(nm));
  }
  return ckpt;
}

Checkpoint to_checkpoint(const ModelParams& params, const std::string& extra_metadata_json) {
  nlohmann::json meta;
  meta["config"] = params.config;
  try {
    meta["extra"] = nlohmann::json::parse(extra_metadata_json);
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("checkpoint metadata is not JSON: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.metadata_json = meta.dump();
  ckpt.tensors = split_model(params, {.empty_head = true}).base;
  return ckpt;
}

ModelParams from_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ckpt.metadata_json);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is not JSON: ") + e.what());
  }
  if (!meta.contains("config")) throw FormatError("checkpoint metadata lacks the model config");
  return merge_model(meta.at("config").get<ModelConfig>(), ckpt.tensors, {});
}

}  // namespace pvfl
