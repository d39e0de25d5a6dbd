#include "pvfl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "pvfl/error.hpp"

namespace pvfl {

namespace {

void check_pair(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size()) {
    throw ContractError("metric inputs differ in length: " + std::to_string(y.size()) + " vs " +
                        std::to_string(y_hat.size()));
  }
  if (y.empty()) throw ContractError("metric inputs are empty");
}

}  // namespace

double mae(std::span<const double> y, std::span<const double> y_hat) {
  check_pair(y, y_hat);
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += std::abs(y_hat[i] - y[i]);
  return acc / static_cast<double>(y.size());
}

double rmse(std::span<const double> y, std::span<const double> y_hat) {
  check_pair(y, y_hat);
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y_hat[i] - y[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(y.size()));
}

double r2(std::span<const double> y, std::span<const double> y_hat) {
  check_pair(y, y_hat);
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  double ss_tot = 0.0, ss_res = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_tot += (y[i] - mean) * (y[i] - mean);
    ss_res += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
  }
  if (ss_tot == 0.0) throw DegenerateError("R2 undefined: ground truth has zero variance");
  return 1.0 - ss_res / ss_tot;
}

EvalResult evaluate(std::span<const double> y, std::span<const double> y_hat, std::size_t n_samples) {
  return {mae(y, y_hat), rmse(y, y_hat), r2(y, y_hat), n_samples};
}

EvalResult evaluate_center(const ModelParams& params, const CenterDataset& test, const NormStats& stats,
                           bool clip_nonnegative) {
  if (test.samples.empty()) throw ContractError("center " + std::to_string(test.center_id) + " has no test samples");
  const Matrix pred = predict(params, test.samples);
  std::vector<double> y, y_hat;
  y.reserve(pred.size());
  y_hat.reserve(pred.size());
  for (std::size_t s = 0; s < test.samples.size(); ++s) {
    const auto& target = test.samples[s].target;
    for (std::size_t t = 0; t < target.size(); ++t) {
      double p = stats.denormalize_target(pred(s, t));
      if (clip_nonnegative) p = std::max(p, 0.0);
      y.push_back(stats.denormalize_target(target[t]));
      y_hat.push_back(p);
    }
  }
  return evaluate(y, y_hat, test.samples.size());
}

}  // namespace pvfl
