// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tsmoe/rng.hpp"

namespace tsmoe {

std::vector<double> seasonal_naive(std::span<const double> context, std::size_t season, std::size_t horizon) {
    if (season == 0) throw std::invalid_argument("seasonal_naive: season must be at least 1");
    if (context.size() < season) {
        throw std::invalid_argument("seasonal_naive: context of length " + std::to_string(context.size()) +
                                    " is shorter than the season " + std::to_string(season));
    }
    std::vector<double> out(horizon);
    const std::size_t base = context.size() - season;
    for (std::size_t t = 0; t < horizon; ++t) out[t] = context[base + t % season];
    return out;
}

double mean_absolute_error(std::span<const double> forecast, std::span<const double> actual) {
    if (forecast.size() != actual.size() || actual.empty()) throw std::invalid_argument("mae: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < actual.size(); ++i) s += std::abs(forecast[i] - actual[i]);
    return s / double(actual.size());
}

MetricValue mase(std::span<const double> forecast, std::span<const double> actual, std::span<const double> insample,
                 std::size_t season) {
    if (season == 0) throw std::invalid_argument("mase: season must be at least 1");
    if (insample.size() <= season) throw std::invalid_argument("mase: in-sample series must be longer than the season");
    double scale = 0.0;
    for (std::size_t t = season; t < insample.size(); ++t) scale += std::abs(insample[t] - insample[t - season]);
    scale /= double(insample.size() - season);
    if (scale == 0.0) return {0.0, std::string("zero scale")};
    return {mean_absolute_error(forecast, actual) / scale, std::nullopt};
}

double crps_empirical(std::span<const double> samples, double actual) {
    const std::size_t n = samples.size();
    if (n == 0) throw std::invalid_argument("crps_empirical: no samples");
    double first = 0.0;
    for (double x : samples) first += std::abs(x - actual);
    first /= double(n);
    // Sum over ordered pairs of |x_i - x_j| via sorting: sum_i x_(i) * (2i - n + 1).
    std::vector<double> sorted(samples.begin(), samples.end());
    std::sort(sorted.begin(), sorted.end());
    double pair_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) pair_sum += sorted[i] * (2.0 * double(i) - double(n) + 1.0);
    pair_sum *= 2.0;
    return first - pair_sum / (2.0 * double(n) * double(n));
}

double crps_mean(const Tensor& samples, std::span<const double> actual) {
    if (samples.cols() != actual.size() || actual.empty()) throw std::invalid_argument("crps_mean: shape mismatch");
    std::vector<double> column(samples.rows());
    double s = 0.0;
    for (std::size_t t = 0; t < actual.size(); ++t) {
        for (std::size_t i = 0; i < samples.rows(); ++i) column[i] = samples.at(i, t);
        s += crps_empirical(column, actual[t]);
    }
    return s / double(actual.size());
}

double aggregate_geomean(std::span<const double> metric, std::span<const double> naive) {
    if (metric.size() != naive.size() || metric.empty()) throw std::invalid_argument("aggregate_geomean: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < metric.size(); ++i) {
        if (!(metric[i] > 0.0) || !(naive[i] > 0.0)) {
            throw std::invalid_argument("aggregate_geomean: metrics must be positive");
        }
        s += std::log(metric[i] / naive[i]);
    }
    return std::exp(s / double(metric.size()));
}

Forecaster seasonal_naive_forecaster(std::size_t season) {
    return [season](std::span<const double> context, std::size_t horizon, std::uint64_t) {
        const std::vector<double> f = seasonal_naive(context, season, horizon);
        return Tensor(Shape{1, horizon}, f);
    };
}

std::vector<std::size_t> rolling_origins(std::size_t length, std::size_t horizon, std::size_t windows) {
    if (horizon == 0 || windows == 0) throw std::invalid_argument("rolling_origins: horizon and windows must be positive");
    if (length < horizon * windows) throw std::invalid_argument("rolling_origins: series shorter than the test region");
    std::vector<std::size_t> origins;
    for (std::size_t w = windows; w > 0; --w) origins.push_back(length - w * horizon);
    return origins;
}

namespace {

struct SeriesRun {
    SeriesMetrics model;
    SeriesMetrics naive;
};

SeriesRun evaluate_series(const Forecaster& forecaster, const Forecaster& naive, const TimeSeriesRecord& rec,
                          const std::string& dataset, std::size_t season, const Protocol& protocol) {
    SeriesRun run;
    run.model.dataset = run.naive.dataset = dataset;
    run.model.id = run.naive.id = rec.id;
    const std::size_t h = protocol.horizon;
    const std::size_t needed = h * protocol.windows + season + 1;
    if (rec.values.size() < needed) {
        const std::string reason = "series length " + std::to_string(rec.values.size()) + " < " + std::to_string(needed) +
                                   " required by the protocol";
        run.model.skipped = run.naive.skipped = reason;
        return run;
    }
    const std::vector<std::size_t> origins = rolling_origins(rec.values.size(), h, protocol.windows);
    std::vector<double> mase_model, mase_naive;
    std::optional<std::string> mase_reason;
    const std::span<const double> all(rec.values);
    for (std::size_t w = 0; w < origins.size(); ++w) {
        const std::size_t o = origins[w];
        const std::size_t start =
            protocol.context_length == 0 || protocol.context_length >= o ? 0 : o - protocol.context_length;
        const auto context = all.subspan(start, o - start);
        const auto insample = all.subspan(0, o);
        const auto actual = all.subspan(o, h);
        const std::uint64_t seed = derive_seed(derive_seed(protocol.seed, rec.id), w);

        auto score = [&](const Forecaster& f, SeriesMetrics& m, std::vector<double>& mases) {
            const Tensor samples = f(context, h, seed);
            if (samples.cols() != h || samples.rows() == 0) throw std::runtime_error("forecaster returned a bad shape");
            std::vector<double> point(h);
            std::vector<double> column(samples.rows());
            for (std::size_t t = 0; t < h; ++t) {
                for (std::size_t i = 0; i < samples.rows(); ++i) column[i] = samples.at(i, t);
                std::sort(column.begin(), column.end());
                const double pos = 0.5 * double(column.size() - 1);
                const std::size_t lo = std::size_t(pos);
                const std::size_t hi = std::min(lo + 1, column.size() - 1);
                point[t] = column[lo] + (pos - double(lo)) * (column[hi] - column[lo]);
            }
            m.mae += mean_absolute_error(point, actual);
            m.crps += crps_mean(samples, actual);
            const MetricValue mv = mase(point, actual, insample, season);
            if (mv.ok()) {
                mases.push_back(mv.value);
            } else {
                mase_reason = mv.skipped;
            }
        };
        score(forecaster, run.model, mase_model);
        score(naive, run.naive, mase_naive);
    }
    const double n = double(origins.size());
    for (auto* m : {&run.model, &run.naive}) {
        m->windows = origins.size();
        m->mae /= n;
        m->crps /= n;
    }
    auto finish = [&](SeriesMetrics& m, const std::vector<double>& v) {
        if (v.size() != origins.size()) {
            m.mase = {0.0, mase_reason.value_or("zero scale")};
            return;
        }
        double s = 0.0;
        for (double x : v) s += x;
        m.mase = {s / n, std::nullopt};
    };
    finish(run.model, mase_model);
    finish(run.naive, mase_naive);
    return run;
}

MetricValue mean_metric(const std::vector<const SeriesMetrics*>& rows) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto* r : rows) {
        if (r->mase.ok()) {
            s += r->mase.value;
            ++n;
        }
    }
    if (n == 0) return {0.0, std::string("no series with a defined MASE")};
    return {s / double(n), std::nullopt};
}

nlohmann::ordered_json metric_json(const MetricValue& m) {
    if (m.ok()) return m.value;
    return nlohmann::ordered_json{{"skipped", *m.skipped}};
}

nlohmann::ordered_json series_json(const SeriesMetrics& s) {
    nlohmann::ordered_json j;
    j["dataset"] = s.dataset;
    j["id"] = s.id;
    if (s.skipped) {
        j["skipped"] = *s.skipped;
        return j;
    }
    j["windows"] = s.windows;
    j["mae"] = s.mae;
    j["crps"] = s.crps;
    j["mase"] = metric_json(s.mase);
    return j;
}

} // namespace

EvalReport run_benchmark(const Forecaster& forecaster, const std::string& model_name,
                         const std::vector<EvalDataset>& datasets, const Protocol& protocol) {
    if (protocol.horizon == 0 || protocol.windows == 0) throw std::invalid_argument("protocol needs horizon and windows");
    EvalReport report;
    report.model_name = model_name;
    report.protocol = protocol;
    std::vector<double> agg_mae, agg_mae_naive, agg_crps, agg_crps_naive, agg_mase, agg_mase_naive;
    std::size_t scored = 0;
    for (const auto& ds : datasets) {
        const Forecaster naive = seasonal_naive_forecaster(ds.season);
        DatasetMetrics dm;
        dm.name = ds.name;
        dm.season = ds.season;
        std::vector<const SeriesMetrics*> model_rows, naive_rows;
        const std::size_t first = report.series.size();
        for (const auto& rec : ds.records) {
            SeriesRun run = evaluate_series(forecaster, naive, rec, ds.name, ds.season, protocol);
            report.series.push_back(std::move(run.model));
            report.naive_series.push_back(std::move(run.naive));
        }
        for (std::size_t i = first; i < report.series.size(); ++i) {
            if (report.series[i].skipped) {
                ++dm.skipped;
                continue;
            }
            model_rows.push_back(&report.series[i]);
            naive_rows.push_back(&report.naive_series[i]);
        }
        dm.series = model_rows.size();
        if (dm.series > 0) {
            for (std::size_t i = 0; i < model_rows.size(); ++i) {
                dm.mae += model_rows[i]->mae;
                dm.crps += model_rows[i]->crps;
                dm.naive_mae += naive_rows[i]->mae;
                dm.naive_crps += naive_rows[i]->crps;
            }
            const double n = double(dm.series);
            dm.mae /= n;
            dm.crps /= n;
            dm.naive_mae /= n;
            dm.naive_crps /= n;
            dm.mase = mean_metric(model_rows);
            dm.naive_mase = mean_metric(naive_rows);
            ++scored;
            // A dataset on which seasonal naive is exact has no finite ratio; it drops out of that aggregate.
            if (dm.naive_mae > 0.0) {
                agg_mae.push_back(dm.mae);
                agg_mae_naive.push_back(dm.naive_mae);
            }
            if (dm.naive_crps > 0.0) {
                agg_crps.push_back(dm.crps);
                agg_crps_naive.push_back(dm.naive_crps);
            }
            if (dm.mase.ok() && dm.naive_mase.ok() && dm.naive_mase.value > 0.0) {
                agg_mase.push_back(dm.mase.value);
                agg_mase_naive.push_back(dm.naive_mase.value);
            }
        }
        report.datasets.push_back(std::move(dm));
    }
    if (scored == 0) throw std::runtime_error("no dataset produced metrics under the protocol");
    // A perfect forecaster has zero error; its ratio is reported as zero rather than via logs.
    auto geomean_or_zero = [](const std::vector<double>& m, const std::vector<double>& n) {
        if (m.empty()) return std::numeric_limits<double>::quiet_NaN();
        for (double v : m) {
            if (v == 0.0) return 0.0;
        }
        return aggregate_geomean(m, n);
    };
    report.aggregate.mae_vs_naive = geomean_or_zero(agg_mae, agg_mae_naive);
    report.aggregate.crps_vs_naive = geomean_or_zero(agg_crps, agg_crps_naive);
    if (agg_mase.empty()) {
        report.aggregate.mase_vs_naive = {0.0, std::string("no dataset with a defined MASE")};
    } else {
        report.aggregate.mase_vs_naive = {geomean_or_zero(agg_mase, agg_mase_naive), std::nullopt};
    }
    return report;
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["model"] = model_name;
    j["protocol"] = {{"horizon", protocol.horizon},
                     {"windows", protocol.windows},
                     {"context_length", protocol.context_length},
                     {"n_samples", protocol.n_samples},
                     {"seed", protocol.seed}};
    nlohmann::ordered_json ds = nlohmann::ordered_json::array();
    for (const auto& d : datasets) {
        ds.push_back({{"name", d.name},
                      {"season", d.season},
                      {"series", d.series},
                      {"skipped", d.skipped},
                      {"mae", d.mae},
                      {"crps", d.crps},
                      {"mase", metric_json(d.mase)},
                      {"naive_mae", d.naive_mae},
                      {"naive_crps", d.naive_crps},
                      {"naive_mase", metric_json(d.naive_mase)}});
    }
    j["datasets"] = ds;
    j["aggregate"] = {{"agg_mae_vs_naive", aggregate.mae_vs_naive},
                      {"agg_crps_vs_naive", aggregate.crps_vs_naive},
                      {"agg_mase_vs_naive", metric_json(aggregate.mase_vs_naive)}};
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& s : series) rows.push_back(series_json(s));
    j["series"] = rows;
    nlohmann::ordered_json naive_rows = nlohmann::ordered_json::array();
    for (const auto& s : naive_series) naive_rows.push_back(series_json(s));
    j["naive_series"] = naive_rows;
    return j.dump(2);
}

std::string EvalReport::to_table() const {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4);
    auto mase_cell = [](const MetricValue& m) {
        if (!m.ok()) return std::string("skipped");
        std::ostringstream s;
        s << std::fixed << std::setprecision(4) << m.value;
        return s.str();
    };
    out << "model: " << model_name << "  horizon " << protocol.horizon << "  windows " << protocol.windows
        << "  context " << protocol.context_length << "  samples " << protocol.n_samples << '\n';
    out << std::left << std::setw(16) << "dataset" << std::right << std::setw(7) << "season" << std::setw(7) << "series"
        << std::setw(11) << "mae" << std::setw(11) << "naive_mae" << std::setw(11) << "crps" << std::setw(11)
        << "naive_crps" << std::setw(11) << "mase" << std::setw(11) << "naive_mase" << '\n';
    for (const auto& d : datasets) {
        out << std::left << std::setw(16) << d.name << std::right << std::setw(7) << d.season << std::setw(7) << d.series
            << std::setw(11) << d.mae << std::setw(11) << d.naive_mae << std::setw(11) << d.crps << std::setw(11)
            << d.naive_crps << std::setw(11) << mase_cell(d.mase) << std::setw(11) << mase_cell(d.naive_mase) << '\n';
    }
    out << "aggregate (geometric mean vs seasonal naive): mae " << aggregate.mae_vs_naive << "  crps "
        << aggregate.crps_vs_naive << "  mase " << mase_cell(aggregate.mase_vs_naive) << '\n';
    return out.str();
}

} // namespace tsmoe
