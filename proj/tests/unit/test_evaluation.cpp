// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "support.hpp"
#include "tsmoe/evaluation.hpp"

using namespace tsmoe;
using namespace tsmoe::test;

namespace {

// Direct O(n^2) energy form.
double crps_pairs(const std::vector<double>& xs, double y) {
    const double n = double(xs.size());
    double a = 0.0, b = 0.0;
    for (double x : xs) a += std::abs(x - y);
    for (double x : xs) {
        for (double z : xs) b += std::abs(x - z);
    }
    return a / n - b / (2.0 * n * n);
}

std::vector<double> periodic(std::size_t n, std::size_t s, Rng& rng) {
    const auto base = random_values(s, rng);
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = base[i % s];
    return v;
}

// Knows every series and returns its true continuation after the given context.
Forecaster oracle(const std::vector<TimeSeriesRecord>& recs) {
    return [recs](std::span<const double> ctx, std::size_t h, std::uint64_t) {
        for (const auto& r : recs) {
            if (r.values.size() >= ctx.size() && std::equal(ctx.begin(), ctx.end(), r.values.begin())) {
                Tensor t(Shape{1, h});
                for (std::size_t i = 0; i < h; ++i) t[i] = r.values[ctx.size() + i];
                return t;
            }
        }
        throw std::runtime_error("oracle: unknown context");
    };
}

} // namespace

TEST_CASE("seasonal naive") {
    const std::vector<double> ctx{1, 2, 3, 4};
    CHECK(seasonal_naive(ctx, 2, 2) == std::vector<double>{3, 4});
    CHECK(seasonal_naive(ctx, 1, 3) == std::vector<double>{4, 4, 4});
    CHECK(seasonal_naive(ctx, 2, 4) == std::vector<double>{3, 4, 3, 4});
    CHECK(seasonal_naive(ctx, 3, 5) == std::vector<double>{2, 3, 4, 2, 3});
    CHECK_THROWS_AS(seasonal_naive(ctx, 5, 1), std::invalid_argument);
    Rng rng(1);
    const auto v = periodic(100, 7, rng);
    const auto ctx2 = std::span<const double>(v).first(60);
    const auto f = seasonal_naive(ctx2, 7, 40);
    CHECK(mean_absolute_error(f, std::span<const double>(v).subspan(60, 40)) == 0.0);
}

TEST_CASE("MASE") {
    const std::vector<double> insample{1, 3, 2, 5, 3, 6, 4, 8};
    const std::vector<double> actual{6, 7};
    const auto forecast = seasonal_naive(insample, 2, 2);
    CHECK(forecast == std::vector<double>{4, 8});
    // In-sample lag-2 differences 1, 2, 1, 1, 1, 2 average 4/3; forecast MAE is 1.5.
    const MetricValue m = mase(forecast, actual, insample, 2);
    REQUIRE(m.ok());
    CHECK(m.value == doctest::Approx(1.125).epsilon(1e-15));
    CHECK(mase(actual, actual, insample, 2).value == 0.0);
    const MetricValue z = mase(forecast, actual, std::vector<double>(8, 3.0), 2);
    CHECK_FALSE(z.ok());
    CHECK(*z.skipped == "zero scale");
}

TEST_CASE("CRPS") {
    CHECK(std::abs(crps_empirical(std::vector<double>{0.0, 2.0}, 1.0) - 0.5) < 1e-12);
    CHECK(crps_empirical(std::vector<double>{3.0, 3.0, 3.0}, 3.0) == 0.0);
    CHECK(std::abs(crps_empirical(std::vector<double>(5, 2.0), -1.5) - 3.5) < 1e-12);
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const auto xs = random_values(1 + std::size_t(trial), rng);
        const double y = standard_normal(rng);
        const double c = crps_empirical(xs, y);
        CHECK(c >= 0.0);
        CHECK(c == doctest::Approx(crps_pairs(xs, y)).epsilon(1e-12));
        CHECK(crps_empirical(std::vector<double>(xs.size(), y), y) <= c);
    }
    const Tensor s = Tensor::matrix(2, 2, {0, 1, 2, 1});
    CHECK(crps_mean(s, std::vector<double>{1.0, 1.0}) == doctest::Approx(0.25));
}

TEST_CASE("geometric-mean aggregate") {
    CHECK(aggregate_geomean(std::vector<double>{0.5, 2.0}, std::vector<double>{1.0, 1.0}) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(aggregate_geomean(std::vector<double>{3.0, 7.0}, std::vector<double>{3.0, 7.0}) == 1.0);
    CHECK(aggregate_geomean(std::vector<double>{0.64, 1.28, 6.4}, std::vector<double>{1.0, 2.0, 10.0}) ==
          doctest::Approx(0.64).epsilon(1e-14));
    const double a = aggregate_geomean(std::vector<double>{0.3, 0.9}, std::vector<double>{0.5, 1.1});
    const double b = aggregate_geomean(std::vector<double>{0.3 * 17.0, 0.9}, std::vector<double>{0.5 * 17.0, 1.1});
    CHECK(a == doctest::Approx(b).epsilon(1e-14));
    CHECK_THROWS_AS(aggregate_geomean(std::vector<double>{0.0}, std::vector<double>{1.0}), std::invalid_argument);
    CHECK_THROWS_AS(aggregate_geomean(std::vector<double>{1.0}, std::vector<double>{-1.0}), std::invalid_argument);
}

TEST_CASE("rolling origins") {
    CHECK(rolling_origins(100, 4, 3) == std::vector<std::size_t>{88, 92, 96});
    CHECK(rolling_origins(12, 4, 3) == std::vector<std::size_t>{0, 4, 8});
    CHECK_THROWS_AS(rolling_origins(11, 4, 3), std::invalid_argument);
}

TEST_CASE("benchmark") {
    Rng rng(3);
    std::vector<EvalDataset> datasets;
    for (std::size_t d = 0; d < 3; ++d) {
        EvalDataset ds;
        ds.name = "d" + std::to_string(d);
        ds.season = 4 + d;
        for (std::size_t s = 0; s < 3; ++s) {
            ds.records.push_back({ds.name + "_" + std::to_string(s), ds.name, random_values(80 + 10 * s, rng), std::nullopt});
        }
        datasets.push_back(ds);
    }
    Protocol proto;
    proto.horizon = 4;
    proto.windows = 3;
    proto.context_length = 0;

    SUBCASE("seasonal naive against itself is exactly one") {
        const EvalReport r = run_benchmark(seasonal_naive_forecaster(5), "naive", {datasets[1]}, proto);
        CHECK(r.aggregate.mae_vs_naive == 1.0);
        CHECK(r.aggregate.crps_vs_naive == 1.0);
        REQUIRE(r.aggregate.mase_vs_naive.ok());
        CHECK(r.aggregate.mase_vs_naive.value == 1.0);
    }
    SUBCASE("a perfect forecaster scores zero") {
        std::vector<TimeSeriesRecord> all;
        for (const auto& ds : datasets) all.insert(all.end(), ds.records.begin(), ds.records.end());
        const EvalReport r = run_benchmark(oracle(all), "oracle", datasets, proto);
        CHECK(r.aggregate.mae_vs_naive == 0.0);
        CHECK(r.aggregate.crps_vs_naive == 0.0);
        for (const auto& s : r.series) {
            CHECK(s.mae == 0.0);
            CHECK(s.crps == 0.0);
            CHECK(s.windows == 3);
        }
    }
    SUBCASE("averaging order: series, then dataset, then geometric mean") {
        auto scaled = [](std::span<const double> ctx, std::size_t h, std::uint64_t) {
            Tensor t(Shape{1, h});
            for (std::size_t i = 0; i < h; ++i) t[i] = ctx.back();
            return t;
        };
        const EvalReport r = run_benchmark(scaled, "last", datasets, proto);
        std::vector<double> m, n;
        for (std::size_t d = 0; d < 3; ++d) {
            double sm = 0.0, sn = 0.0;
            for (std::size_t s = 0; s < 3; ++s) {
                sm += r.series[3 * d + s].mae;
                sn += r.naive_series[3 * d + s].mae;
            }
            CHECK(r.datasets[d].mae == doctest::Approx(sm / 3.0).epsilon(1e-14));
            m.push_back(sm / 3.0);
            n.push_back(sn / 3.0);
        }
        CHECK(r.aggregate.mae_vs_naive == doctest::Approx(aggregate_geomean(m, n)).epsilon(1e-14));
        // Last-value forecasts equal seasonal naive with season 1, MAE by hand on the first series.
        const auto& v = datasets[0].records[0].values;
        double mae = 0.0;
        for (std::size_t o : rolling_origins(v.size(), 4, 3)) {
            for (std::size_t t = 0; t < 4; ++t) mae += std::abs(v[o + t] - v[o - 1]) / 4.0;
        }
        CHECK(r.series[0].mae == doctest::Approx(mae / 3.0).epsilon(1e-14));
    }
    SUBCASE("short series are skipped with a reason") {
        EvalDataset ds = datasets[0];
        ds.records.push_back({"short", "d0", random_values(12, rng), std::nullopt});
        const EvalReport r = run_benchmark(seasonal_naive_forecaster(1), "x", {ds}, proto);
        REQUIRE(r.series.back().skipped.has_value());
        CHECK(r.series.back().skipped->find("required by the protocol") != std::string::npos);
        CHECK(r.datasets[0].skipped == 1);
        CHECK(r.datasets[0].series == 3);
    }
    SUBCASE("datasets where seasonal naive is exact drop out of the aggregate") {
        EvalDataset exact;
        exact.name = "exact";
        exact.season = 5;
        for (std::size_t s = 0; s < 2; ++s) exact.records.push_back({"e" + std::to_string(s), "exact", periodic(90, 5, rng), std::nullopt});
        auto last = [](std::span<const double> ctx, std::size_t h, std::uint64_t) { return Tensor(Shape{1, h}, ctx.back()); };
        const EvalReport only = run_benchmark(last, "last", {datasets[0]}, proto);
        const EvalReport mixed = run_benchmark(last, "last", {datasets[0], exact}, proto);
        CHECK(mixed.datasets[1].naive_mae == 0.0);
        CHECK(mixed.datasets[1].mae > 0.0);
        CHECK(mixed.aggregate.mae_vs_naive == only.aggregate.mae_vs_naive);
        const EvalReport none = run_benchmark(last, "last", {exact}, proto);
        CHECK(std::isnan(none.aggregate.mae_vs_naive));
        CHECK(nlohmann::json::parse(none.to_json()).at("aggregate").at("agg_mae_vs_naive").is_null());
    }
    SUBCASE("per-window seeds are deterministic") {
        std::vector<std::uint64_t> seen;
        auto spy = [&](std::span<const double> ctx, std::size_t h, std::uint64_t seed) {
            seen.push_back(seed);
            return Tensor(Shape{1, h}, ctx.back());
        };
        run_benchmark(spy, "spy", {datasets[0]}, proto);
        const auto first = seen;
        seen.clear();
        run_benchmark(spy, "spy", {datasets[0]}, proto);
        CHECK(seen == first);
        CHECK(first[0] == derive_seed(derive_seed(proto.seed, "d0_0"), 0));
        CHECK(std::set<std::uint64_t>(first.begin(), first.end()).size() == first.size());
    }
    SUBCASE("report serialization") {
        const EvalReport r = run_benchmark(seasonal_naive_forecaster(1), "x", datasets, proto);
        const auto j = nlohmann::json::parse(r.to_json());
        CHECK(j.at("aggregate").at("agg_mae_vs_naive").get<double>() == r.aggregate.mae_vs_naive);
        CHECK(r.to_table().find("aggregate") != std::string::npos);
    }
}
