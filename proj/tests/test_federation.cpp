#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <type_traits>

#include "pvfl/error.hpp"
#include "pvfl/federation.hpp"

using namespace pvfl;
using Catch::Matchers::WithinAbs;

namespace {

ParamSet scalar_set(double v) { return {{"w", Matrix(1, 1, v)}}; }

ModelConfig small_model() {
  ModelConfig c;
  c.blocks = 1;
  c.d_emb = 8;
  c.d_k = 8;
  c.d_ff = 8;
  c.window_days = 2;
  c.learning_rate = 0.2;
  c.batch_size = 8;
  c.recent_days = 3;
  return c;
}

std::vector<PreparedCenter> small_centers(std::size_t count, std::size_t prosumers, std::size_t days,
                                          std::uint64_t seed = 1) {
  SynthConfig cfg;
  cfg.days = days;
  const double amp[4] = {0.6, 0.8, 1.0, 1.2};
  for (std::size_t i = 0; i < count; ++i) {
    SynthCenter c;
    c.center_id = static_cast<int>(i + 1);
    c.prosumers = prosumers;
    c.irradiance_amplitude = amp[i % 4];
    c.panel_orientation = i % 2 ? 0.9 : -0.9;
    c.consumption.midday = 0.1 * static_cast<double>(i);
    cfg.centers.push_back(c);
  }
  const auto series = synthesize(cfg, seed);
  CenterAssignment a;
  for (const auto& s : series) a.emplace_back(s.prosumer_id, s.center_id);
  return prepare_centers(partition_centers(series, a, small_model().window_days), 0.8);
}

RunOptions options(std::size_t rounds, std::uint64_t seed = 7) {
  RunOptions o;
  o.rounds = rounds;
  o.seed = seed;
  return o;
}

bool same_params(const ModelParams& a, const ModelParams& b) {
  const auto ta = a.tensors();
  const auto tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (!(ta[i]->value == tb[i]->value)) return false;
  }
  return ta.size() == tb.size();
}

double max_abs_diff(const ModelParams& a, const ModelParams& b) {
  double worst = 0.0;
  const auto ta = a.tensors();
  const auto tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) {
    for (std::size_t k = 0; k < ta[i]->value.size(); ++k) {
      worst = std::max(worst, std::abs(ta[i]->value.values()[k] - tb[i]->value.values()[k]));
    }
  }
  return worst;
}

double mean_mae(const RoundRecord& rec) {
  double acc = 0.0;
  for (const auto& c : rec.centers) acc += c.test.mae;
  return acc / static_cast<double>(rec.centers.size());
}

}  // namespace

TEST_CASE("base aggregation", "[federation]") {
  const std::vector<std::size_t> equal{5, 5};
  const std::vector<ParamSet> a{scalar_set(1), scalar_set(3)};
  CHECK(aggregate_base(a, equal)[0].value(0, 0) == 2.0);

  const std::vector<std::size_t> three_to_one{3, 1};
  const std::vector<ParamSet> b{scalar_set(0), scalar_set(4)};
  CHECK_THAT(aggregate_base(b, three_to_one)[0].value(0, 0), WithinAbs(1.0, 1e-15));

  const std::vector<ParamSet> one{scalar_set(-2.5)};
  const std::vector<std::size_t> v1{9};
  CHECK(aggregate_base(one, v1) == one[0]);

  SECTION("identical bases average to themselves") {
    const std::vector<ParamSet> same{scalar_set(0.3), scalar_set(0.3), scalar_set(0.3)};
    const std::vector<std::size_t> vols{1, 2, 3};
    CHECK_THAT(aggregate_base(same, vols)[0].value(0, 0), WithinAbs(0.3, 1e-15));
  }
  SECTION("layout mismatch names the center") {
    const std::vector<ParamSet> bad{scalar_set(0), {{"w", Matrix(2, 1)}}};
    const std::vector<int> ids{4, 9};
    try {
      aggregate_base(bad, equal, ids);
      FAIL("expected an aggregation error");
    } catch (const AggregationError& e) {
      CHECK(std::string(e.what()).find('9') != std::string::npos);
    }
  }
  SECTION("zero volume and empty input") {
    const std::vector<std::size_t> zero{3, 0};
    CHECK_THROWS_AS(aggregate_base(a, zero), AggregationError);
    CHECK_THROWS_AS(aggregate_base({}, {}), AggregationError);
  }
}

TEST_CASE("aggregation weights", "[federation]") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::size_t> vols(1 + rng.below(8));
    for (auto& v : vols) v = 1 + rng.below(1000);
    const auto w = aggregation_weights(vols);
    const double total = std::accumulate(vols.begin(), vols.end(), 0.0);
    CHECK_THAT(std::accumulate(w.begin(), w.end(), 0.0), WithinAbs(1.0, 1e-12));
    for (std::size_t i = 0; i < vols.size(); ++i) CHECK(w[i] == static_cast<double>(vols[i]) / total);
  }
}

TEST_CASE("embedding aggregation", "[federation]") {
  const std::vector<std::vector<double>> same{{1, 2, 3}, {1, 2, 3}};
  const std::vector<std::size_t> v{2, 7};
  const auto e = aggregate_embedding(same, v);
  for (std::size_t i = 0; i < 3; ++i) CHECK_THAT(e[i], WithinAbs(same[0][i], 1e-15));

  const std::vector<std::vector<double>> ortho{{1, 0}, {0, 1}};
  const std::vector<std::size_t> eq{4, 4};
  CHECK(aggregate_embedding(ortho, eq) == std::vector<double>{0.5, 0.5});

  const std::vector<std::vector<double>> mixed{{1, -1}, {3, 5}, {0, 2}};
  const std::vector<std::size_t> small{1, 2, 3}, scaled{10, 20, 30};
  const auto a = aggregate_embedding(mixed, small);
  const auto b = aggregate_embedding(mixed, scaled);
  for (std::size_t i = 0; i < 2; ++i) CHECK_THAT(a[i], WithinAbs(b[i], 1e-15));

  const std::vector<std::vector<double>> ragged{{1, 2}, {1}};
  CHECK_THROWS_AS(aggregate_embedding(ragged, eq), AggregationError);
}

TEST_CASE("lambda", "[federation]") {
  const std::vector<double> e{0.3, -1.2, 2.0, 0.7};
  std::vector<double> neg(e.size()), perp{1.2, 0.3, 0.0, 0.0};
  std::transform(e.begin(), e.end(), neg.begin(), [](double x) { return -x; });

  CHECK_THAT(compute_lambda(e, e), WithinAbs(1.0, 1e-12));
  CHECK_THAT(compute_lambda(e, neg), WithinAbs(0.0, 1e-12));
  CHECK_THAT(compute_lambda(e, perp), WithinAbs(0.5, 1e-12));

  SECTION("properties on random pairs") {
    Rng rng(11);
    for (int trial = 0; trial < 10000; ++trial) {
      std::vector<double> a(6), b(6);
      for (double& x : a) x = rng.uniform(-5, 5);
      for (double& x : b) x = rng.uniform(-5, 5);
      const double l = compute_lambda(a, b);
      CHECK((l >= 0.0 && l <= 1.0));
      const double s = rng.uniform(0.01, 100.0);
      std::vector<double> as(a);
      for (double& x : as) x *= s;
      CHECK_THAT(compute_lambda(as, b), WithinAbs(l, 1e-12));
      CHECK_THAT(compute_lambda(a, as), WithinAbs(1.0, 1e-12));
    }
  }
  SECTION("zero norm falls back to one half and warns") {
    std::vector<std::string> warnings;
    set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
    const std::vector<double> zero(4, 0.0);
    CHECK(compute_lambda(zero, e) == 0.5);
    CHECK(compute_lambda(e, zero) == 0.5);
    set_warning_sink({});
    CHECK(warnings.size() == 2);
  }
  SECTION("bad inputs") {
    CHECK_THROWS_AS(compute_lambda(e, std::vector<double>{1, 2}), DimensionError);
    std::vector<double> nan = e;
    nan[1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(compute_lambda(nan, e), ContractError);
  }
}

TEST_CASE("local aggregation", "[federation]") {
  const ParamSet local = scalar_set(2), global = scalar_set(4);
  CHECK(local_aggregate(local, global, 0.0) == local);
  CHECK(local_aggregate(local, global, 1.0) == global);
  CHECK(local_aggregate(local, global, 0.5)[0].value(0, 0) == 3.0);
  CHECK_THROWS_AS(local_aggregate(local, global, 1.5), ContractError);
  CHECK_THROWS_AS(local_aggregate(local, global, -0.1), ContractError);
  CHECK_THROWS_AS(local_aggregate(local, {{"w", Matrix(1, 2)}}, 0.5), Error);

  SECTION("blend stays between local and global") {
    Rng rng(12);
    for (int trial = 0; trial < 500; ++trial) {
      ParamSet l{{"a", Matrix(3, 4)}}, g{{"a", Matrix(3, 4)}};
      for (double& x : l[0].value.values()) x = rng.uniform(-3, 3);
      for (double& x : g[0].value.values()) x = rng.uniform(-3, 3);
      const double lambda = rng.uniform();
      const auto out = local_aggregate(l, g, lambda);
      for (std::size_t k = 0; k < 12; ++k) {
        const double lo = std::min(l[0].value.values()[k], g[0].value.values()[k]);
        const double hi = std::max(l[0].value.values()[k], g[0].value.values()[k]);
        CHECK(out[0].value.values()[k] >= lo - 1e-15);
        CHECK(out[0].value.values()[k] <= hi + 1e-15);
      }
    }
  }
  SECTION("head passes through a PFL round untouched by the blend") {
    const ModelParams p = init_model(small_model(), 1);
    const auto parts = split_model(p);
    auto other = parts.base;
    for (auto& t : other) {
      for (double& x : t.value.values()) x += 1.0;
    }
    const ModelParams merged = merge_model(p.config, local_aggregate(parts.base, other, 0.7), parts.head);
    CHECK(merged.out_w.value == p.out_w.value);
    CHECK(merged.out_b.value == p.out_b.value);
    CHECK_FALSE(merged.emb_w.value == p.emb_w.value);
  }
}

TEST_CASE("server", "[federation]") {
  Server server;
  server.receive({2, scalar_set(4), {0, 1}, 1});
  server.receive({1, scalar_set(0), {1, 0}, 3});
  CHECK_THROWS_AS(server.receive({1, scalar_set(0), {1, 0}, 3}), AggregationError);
  CHECK(server.pending() == 2);
  const GlobalState g = server.aggregate(5);
  CHECK(server.pending() == 0);
  CHECK(g.round == 5);
  CHECK_THAT(g.base[0].value(0, 0), WithinAbs(1.0, 1e-15));
  CHECK_THAT(g.embedding[0], WithinAbs(0.75, 1e-15));
  REQUIRE(server.last_weights().size() == 2);
  CHECK(server.last_weights()[0] == std::pair<int, double>{1, 0.75});
  CHECK(server.last_weights()[1] == std::pair<int, double>{2, 0.25});
  CHECK_THROWS_AS(server.aggregate(6), AggregationError);
}

TEST_CASE("strategy names", "[federation]") {
  for (Strategy s : {Strategy::Pfl, Strategy::FedAvg, Strategy::Local}) CHECK(parse_strategy(to_string(s)) == s);
  CHECK_THROWS_AS(parse_strategy("ditto"), ConfigError);
}

TEST_CASE("protocol runs", "[federation]") {
  const auto centers = small_centers(2, 2, 14);
  const ModelConfig cfg = small_model();

  SECTION("round 1 uses lambda one half, records have length R") {
    const auto s = run_pfl(centers, cfg, options(3));
    REQUIRE(s.records.size() == 3);
    for (const auto& c : s.records[0].centers) CHECK(c.lambda == 0.5);
    for (const auto& c : s.records[2].centers) CHECK((c.lambda >= 0.0 && c.lambda <= 1.0));
    CHECK(s.global.embedding.size() == 3 * cfg.d_emb);
    CHECK(s.rounds_done == 3);
  }
  SECTION("R = 1 is one round") {
    const auto a = run_pfl(centers, cfg, options(1));
    FederationState b = init_federation(Strategy::Pfl, centers, cfg, options(1));
    Server server;
    run_round(b, server);
    for (std::size_t i = 0; i < centers.size(); ++i) CHECK(same_params(a.clients[i].params, b.clients[i].params));
  }
  SECTION("same seed, same records, any thread count") {
    RunOptions threaded = options(3);
    threaded.threads = 2;
    const auto a = run_pfl(centers, cfg, options(3));
    const auto b = run_pfl(centers, cfg, threaded);
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t i = 0; i < centers.size(); ++i) {
        CHECK(a.records[r].centers[i].train_loss == b.records[r].centers[i].train_loss);
        CHECK(a.records[r].centers[i].lambda == b.records[r].centers[i].lambda);
        CHECK(a.records[r].centers[i].test.mae == b.records[r].centers[i].test.mae);
      }
    }
  }
  SECTION("lambda forced to 0 is Local-only, bit for bit") {
    RunOptions forced = options(4);
    forced.forced_lambda = 0.0;
    std::vector<std::vector<ModelParams>> pfl, local;
    run_pfl(centers, cfg, forced, [&](const FederationState& s) {
      pfl.emplace_back();
      for (const auto& c : s.clients) pfl.back().push_back(c.params);
    });
    run_local_only(centers, cfg, options(4), [&](const FederationState& s) {
      local.emplace_back();
      for (const auto& c : s.clients) local.back().push_back(c.params);
    });
    REQUIRE(pfl.size() == 4);
    for (std::size_t r = 0; r < 4; ++r) {
      for (std::size_t i = 0; i < centers.size(); ++i) CHECK(same_params(pfl[r][i], local[r][i]));
    }
  }
  SECTION("lambda forced to 1 with an empty head is FedAvg, bit for bit") {
    RunOptions forced = options(4);
    forced.forced_lambda = 1.0;
    forced.split.empty_head = true;
    std::vector<std::vector<ModelParams>> pfl, avg;
    std::vector<ParamSet> pfl_global, avg_global;
    run_pfl(centers, cfg, forced, [&](const FederationState& s) {
      pfl.emplace_back();
      for (const auto& c : s.clients) pfl.back().push_back(c.params);
      pfl_global.push_back(s.global.base);
    });
    run_fedavg(centers, cfg, options(4), [&](const FederationState& s) {
      avg.emplace_back();
      for (const auto& c : s.clients) avg.back().push_back(c.params);
      avg_global.push_back(split_model(s.global_model, {.empty_head = true}).base);
    });
    for (std::size_t r = 0; r < 4; ++r) {
      CHECK(pfl_global[r] == avg_global[r]);
      for (std::size_t i = 0; i < centers.size(); ++i) CHECK(same_params(pfl[r][i], avg[r][i]));
    }
  }
  SECTION("Local-only centers are isolated") {
    auto shuffled = centers;
    std::reverse(shuffled[1].train.samples.begin(), shuffled[1].train.samples.end());
    shuffled[1].train.samples.pop_back();
    const auto a = run_local_only(centers, cfg, options(2));
    const auto b = run_local_only(shuffled, cfg, options(2));
    CHECK(same_params(a.clients[0].params, b.clients[0].params));
    CHECK_FALSE(same_params(a.clients[1].params, b.clients[1].params));
    CHECK(a.last_uploads.empty());
  }
  SECTION("PFL improves on its first round") {
    RunOptions o = options(10);
    const auto s = run_pfl(centers, cfg, o);
    CHECK(mean_mae(s.records.back()) < mean_mae(s.records.front()));
  }
}

TEST_CASE("single client degeneracy", "[federation]") {
  const auto centers = small_centers(1, 2, 12);
  const ModelConfig cfg = small_model();
  const auto local = run_local_only(centers, cfg, options(3));
  const auto avg = run_fedavg(centers, cfg, options(3));
  const auto pfl = run_pfl(centers, cfg, options(3));
  CHECK(same_params(avg.global_model, local.clients[0].params));
  CHECK(max_abs_diff(pfl.clients[0].params, local.clients[0].params) < 1e-12);
}

TEST_CASE("client failures carry the center id", "[federation]") {
  auto centers = small_centers(2, 1, 10);
  for (auto& s : centers[1].train.samples) s.input(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    run_pfl(centers, small_model(), options(1));
    FAIL("expected a client error");
  } catch (const ClientError& e) {
    CHECK(e.center_id() == centers[1].center_id);
    CHECK_THROWS_AS(std::rethrow_exception(e.cause()), DivergenceError);
  }
}

TEST_CASE("onboarding", "[federation]") {
  const auto all = small_centers(3, 2, 14);
  const std::vector<PreparedCenter> existing(all.begin(), all.begin() + 2);
  const PreparedCenter& newcomer = all[2];
  const ModelConfig cfg = small_model();

  SECTION("zero rounds adds the center and changes nothing else") {
    FederationState s = run_pfl(existing, cfg, options(3));
    const FederationState before = s;
    onboard_new_center(s, newcomer, 0);
    REQUIRE(s.clients.size() == 3);
    for (std::size_t i = 0; i < 2; ++i) CHECK(same_params(s.clients[i].params, before.clients[i].params));
    CHECK(s.records.size() == before.records.size());
    CHECK(s.clients[2].lambda == 0.5);
    CHECK(split_model(s.clients[2].params).base == s.global.base);
  }
  SECTION("newcomer joins the aggregation with its volume share") {
    FederationState s = run_pfl(existing, cfg, options(3));
    std::vector<std::vector<std::pair<int, double>>> weights;
    onboard_new_center(s, newcomer, 2);
    REQUIRE(s.records.size() == 5);
    CHECK(s.records.back().phase == "onboard");
    CHECK(s.records.back().centers.size() == 3);
    CHECK(s.records[3].centers[2].lambda == 0.5);
    const double total = static_cast<double>(existing[0].train.size() + existing[1].train.size() + newcomer.train.size());
    REQUIRE(s.last_uploads.size() == 3);
    CHECK(s.last_uploads[2].volume == newcomer.train.size());
    CHECK(aggregation_weights(std::vector<std::size_t>{existing[0].train.size(), existing[1].train.size(),
                                                       newcomer.train.size()})[2] ==
          static_cast<double>(newcomer.train.size()) / total);
  }
  SECTION("FedAvg and Local newcomers") {
    FederationState avg = run_fedavg(existing, cfg, options(2));
    const ModelParams global = avg.global_model;
    onboard_new_center(avg, newcomer, 0);
    CHECK(same_params(avg.clients[2].params, global));

    FederationState local = run_local_only(existing, cfg, options(2));
    onboard_new_center(local, newcomer, 0);
    CHECK(same_params(local.clients[2].params, init_model(cfg, model_seed(7))));
  }
  SECTION("needs a prior aggregation and a new id") {
    FederationState fresh = init_federation(Strategy::Pfl, existing, cfg, options(1));
    CHECK_THROWS_AS(onboard_new_center(fresh, newcomer, 1), StateError);
    FederationState s = run_pfl(existing, cfg, options(1));
    CHECK_THROWS_AS(onboard_new_center(s, existing[0], 1), ConfigError);
  }
}

TEST_CASE("privacy boundary", "[federation]") {
  // The upload type holds exactly four members: id, base, embedding, volume.
  static_assert(std::is_aggregate_v<ClientUpload>);
  const auto probe = [](const ClientUpload& u) {
    const auto& [id, base, embedding, volume] = u;
    static_assert(std::is_same_v<std::remove_cvref_t<decltype(base)>, ParamSet>);
    static_assert(std::is_same_v<std::remove_cvref_t<decltype(embedding)>, std::vector<double>>);
    static_assert(std::is_same_v<std::remove_cvref_t<decltype(volume)>, std::size_t>);
    return id;
  };

  const auto centers = small_centers(2, 2, 12);
  const ModelConfig cfg = small_model();
  const auto s = run_pfl(centers, cfg, options(2));
  REQUIRE(s.last_uploads.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    const ClientUpload& u = s.last_uploads[i];
    CHECK(probe(u) == centers[i].center_id);
    CHECK(u.volume == centers[i].train.size());
    CHECK(u.embedding.size() == 3 * cfg.d_emb);
    for (const auto& t : u.base) CHECK(t.name.rfind("out.", 0) != 0);
    CHECK(value_count(u.base) == expected_parameter_count(cfg) - (cfg.d_emb * 48 + 48));
  }
}
