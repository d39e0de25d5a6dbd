#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "pvfl/error.hpp"
#include "pvfl/metrics.hpp"

using namespace pvfl;
using Catch::Matchers::WithinAbs;

namespace {

std::vector<double> draw(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.blocks = 1;
  c.d_emb = 4;
  c.d_k = 4;
  c.d_ff = 4;
  c.window_days = 1;
  return c;
}

}  // namespace

TEST_CASE("MAE", "[metrics]") {
  const std::vector<double> y{1, 2};
  CHECK(mae(y, y) == 0.0);
  CHECK_THAT(mae(y, std::vector<double>{2, 4}), WithinAbs(1.5, 1e-15));
  CHECK_THROWS_AS(mae(y, std::vector<double>{1}), ContractError);
  CHECK_THROWS_AS(mae(std::vector<double>{}, std::vector<double>{}), ContractError);
}

TEST_CASE("RMSE", "[metrics]") {
  const std::vector<double> y{0, 0};
  CHECK(rmse(y, y) == 0.0);
  CHECK_THAT(rmse(y, std::vector<double>{3, 4}), WithinAbs(std::sqrt(12.5), 1e-15));
  CHECK_THROWS_AS(rmse(y, std::vector<double>{1, 2, 3}), ContractError);
}

TEST_CASE("R squared", "[metrics]") {
  const std::vector<double> y{0, 2};
  CHECK(r2(y, y) == 1.0);
  CHECK_THAT(r2(y, std::vector<double>{1, 1}), WithinAbs(0.0, 1e-15));
  const std::vector<double> z{3, 7, 1, 5};
  CHECK_THAT(r2(z, std::vector<double>(4, 4.0)), WithinAbs(0.0, 1e-15));
  CHECK_THROWS_AS(r2(std::vector<double>{2, 2, 2}, std::vector<double>{1, 2, 3}), DegenerateError);
  CHECK_THROWS_AS(r2(y, std::vector<double>{1}), ContractError);
}

TEST_CASE("metric properties", "[metrics]") {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(60);
    const auto y = draw(rng, n + 1, -2.0, 3.0);
    const auto y_hat = draw(rng, n + 1, -2.0, 3.0);
    const double m = mae(y, y_hat);
    CHECK(m >= 0.0);
    CHECK(rmse(y, y_hat) >= m - 1e-15);
    CHECK(r2(y, y_hat) <= 1.0);

    // Joint permutation of (y, y_hat) pairs.
    std::vector<std::size_t> idx(y.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx);
    std::vector<double> py, ph;
    for (std::size_t i : idx) {
      py.push_back(y[i]);
      ph.push_back(y_hat[i]);
    }
    CHECK_THAT(mae(py, ph), WithinAbs(m, 1e-12));
    CHECK_THAT(rmse(py, ph), WithinAbs(rmse(y, y_hat), 1e-12));
    CHECK_THAT(r2(py, ph), WithinAbs(r2(y, y_hat), 1e-12));
  }
}

TEST_CASE("evaluate bundles the three metrics", "[metrics]") {
  const std::vector<double> y{0, 2, 4, 6};
  const std::vector<double> y_hat{1, 2, 3, 6};
  const EvalResult r = evaluate(y, y_hat, 1);
  CHECK(r.mae == mae(y, y_hat));
  CHECK(r.rmse == rmse(y, y_hat));
  CHECK(r.r2 == r2(y, y_hat));
  CHECK(r.n_samples == 1);
}

TEST_CASE("center evaluation", "[metrics]") {
  const ModelConfig c = tiny_config();
  ModelParams p = init_model(c, 1);
  NormStats stats;
  stats.pv_max = 2.5;

  // A head with zero weights outputs its bias for any input.
  p.out_w.value = Matrix(c.d_emb, c.slots);
  std::vector<double> curve(c.slots);
  for (std::size_t t = 0; t < c.slots; ++t) {
    curve[t] = std::sin(static_cast<double>(t) / 8.0);
    p.out_b.value(0, t) = curve[t];
  }

  CenterDataset test;
  Rng rng(2);
  for (int s = 0; s < 5; ++s) {
    WindowSample w;
    w.input = Matrix(4, c.input_width());
    for (double& x : w.input.values()) x = rng.uniform();
    w.target = curve;
    w.target_day = s;
    test.samples.push_back(w);
  }

  SECTION("perfect model") {
    const EvalResult r = evaluate_center(p, test, stats, false);
    CHECK_THAT(r.mae, WithinAbs(0.0, 1e-15));
    CHECK_THAT(r.rmse, WithinAbs(0.0, 1e-15));
    CHECK_THAT(r.r2, WithinAbs(1.0, 1e-15));
    CHECK(r.n_samples == 5);
  }
  SECTION("errors are reported in kWh") {
    ModelParams off = p;
    for (double& b : off.out_b.value.values()) b += 0.1;
    CHECK_THAT(evaluate_center(off, test, stats, false).mae, WithinAbs(0.25, 1e-12));
  }
  SECTION("sample order does not matter") {
    ModelParams q = init_model(c, 3);
    CenterDataset rev = test;
    std::reverse(rev.samples.begin(), rev.samples.end());
    const EvalResult a = evaluate_center(q, test, stats, false);
    const EvalResult b = evaluate_center(q, rev, stats, false);
    CHECK_THAT(a.mae, WithinAbs(b.mae, 1e-12));
    CHECK_THAT(a.rmse, WithinAbs(b.rmse, 1e-12));
    CHECK_THAT(a.r2, WithinAbs(b.r2, 1e-12));
  }
  SECTION("clipping never raises MAE for non-negative truth") {
    for (int trial = 0; trial < 50; ++trial) {
      ModelParams q = init_model(c, 100 + trial);
      for (double& b : q.out_b.value.values()) b = rng.uniform(-0.5, 0.5);
      CenterDataset pos = test;
      for (auto& s : pos.samples) {
        for (double& y : s.target) y = rng.uniform(0.0, 1.0);
      }
      CHECK(evaluate_center(q, pos, stats, true).mae <= evaluate_center(q, pos, stats, false).mae + 1e-15);
    }
  }
  SECTION("empty test set") { CHECK_THROWS_AS(evaluate_center(p, CenterDataset{}, stats, false), ContractError); }
}
