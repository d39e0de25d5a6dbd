#pragma once

#include <cstddef>
#include <span>

#include "pvfl/dataset.hpp"
#include "pvfl/model.hpp"

namespace pvfl {

double mae(std::span<const double> y, std::span<const double> y_hat);
double rmse(std::span<const double> y, std::span<const double> y_hat);
/// 1 - SS_res / SS_tot. Throws DegenerateError when y is constant.
double r2(std::span<const double> y, std::span<const double> y_hat);

struct EvalResult {
  double mae = 0.0;   // kWh
  double rmse = 0.0;  // kWh
  double r2 = 0.0;
  std::size_t n_samples = 0;
};

/// Metrics over pooled timesteps, given kWh truth and predictions.
EvalResult evaluate(std::span<const double> y, std::span<const double> y_hat, std::size_t n_samples);

/// Predicts every test sample, maps back to kWh with `stats`, optionally clips
/// negative PV to zero, then pools all timesteps.
EvalResult evaluate_center(const ModelParams& params, const CenterDataset& test, const NormStats& stats,
                           bool clip_nonnegative);

}  // namespace pvfl
