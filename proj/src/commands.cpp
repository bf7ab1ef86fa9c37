// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "tsmoe/analysis.hpp"
#include "tsmoe/checkpoint.hpp"
#include "tsmoe/errors.hpp"
#include "tsmoe/inference.hpp"

namespace fs = std::filesystem;

namespace tsmoe {

RunConfig default_run_config() {
    RunConfig c;
    c.data.synthetic = true;
    c.data.synthetic_spec = default_synthetic_spec(0);
    c.data.holdout_tail = 48;
    c.eval.data = c.data;
    c.eval.data.holdout_tail = 0;
    return c;
}

namespace {

std::size_t read_size(const Json& j, const char* key, std::size_t fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    if (!is_count(j.at(key))) throw ConfigError(where + "." + key + " must be a non-negative integer");
    return j.at(key).get<std::size_t>();
}

std::string read_string(const Json& j, const char* key, const std::string& fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    if (!j.at(key).is_string()) throw ConfigError(where + "." + key + " must be a string");
    return j.at(key).get<std::string>();
}

std::map<std::string, std::size_t> read_seasons(const Json& j, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must map freq tags to seasons");
    std::map<std::string, std::size_t> out;
    for (const auto& item : j.items()) {
        if (!is_count(item.value()) || item.value().get<std::size_t>() == 0) {
            throw ConfigError(where + "." + item.key() + " must be a positive integer");
        }
        out[item.key()] = item.value().get<std::size_t>();
    }
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

bool is_positive_integer(const Json& v) { return is_count(v) && v.get<std::size_t>() > 0; }

fs::path prepare_out(const RunConfig& c) {
    const fs::path out(c.out);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
    write_text(out / "resolved_config.json", to_json(c).dump(2) + "\n");
    return out;
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

Model load_model(const RunConfig& c) {
    if (c.checkpoint.empty()) throw ConfigError("no checkpoint given (set \"checkpoint\" or pass --checkpoint)");
    if (!fs::exists(c.checkpoint)) throw IoError("checkpoint not found: " + c.checkpoint);
    return model_from_checkpoint(load_checkpoint(c.checkpoint));
}

std::map<std::size_t, CentroidSet> load_centroids_if_needed(const RunConfig& c) {
    const ModelConfig& m = c.train.model;
    if (m.ffn != FfnKind::MoE || m.gate_kind != GateKind::Cluster) return {};
    if (c.centroids.empty()) throw ConfigError("gate_kind cluster needs a centroid file (set \"centroids\" or pass --centroids)");
    if (!fs::exists(c.centroids)) throw IoError("centroid file not found: " + c.centroids);
    return centroids_from_checkpoint(load_checkpoint(c.centroids));
}

struct TrainOutcome {
    TrainResult result;
    std::vector<StepMetrics> logged;
};

TrainOutcome run_training(const RunConfig& c, const fs::path& out) {
    const auto records = load_training_records(c.data);
    const auto centroids = load_centroids_if_needed(c);
    TrainOutcome outcome;
    TrainHooks hooks;
    hooks.on_log = [&](const StepMetrics& m) { outcome.logged.push_back(m); };
    hooks.on_checkpoint = [&](const TrainState& s) {
        save_checkpoint(checkpoint_from_state(s), out / ("checkpoint_step" + std::to_string(s.step) + ".moef"));
    };
    try {
        outcome.result = train(c.train, records, centroids, hooks);
    } catch (const NumericalError&) {
        write_metrics_csv(outcome.logged, (out / "metrics.csv").string());
        throw;
    }
    write_metrics_csv(outcome.logged, (out / "metrics.csv").string());
    save_checkpoint(checkpoint_from_state(outcome.result.state), out / "checkpoint.moef");
    return outcome;
}

EvalReport evaluate_model(const Model& model, const RunConfig& c) {
    return run_benchmark(model_forecaster(model, c.protocol.n_samples), "tsmoe", build_eval_datasets(c.eval), c.protocol);
}

void write_report(const EvalReport& report, const fs::path& out) {
    write_text(out / "eval_report.json", report.to_json() + "\n");
    write_text(out / "eval_report.txt", report.to_table());
}

} // namespace

RunConfig run_config_from_json(const Json& j, RunConfig c) {
    check_keys(j, {"seed", "out", "threads", "checkpoint", "centroids", "model", "train", "data", "eval", "protocol",
                   "fit_gate", "forecast", "analysis", "sweep"},
               "config");
    const bool has_seed = j.contains("seed");
    c.seed = read_size(j, "seed", c.seed, "config");
    c.out = read_string(j, "out", c.out, "config");
    c.threads = read_size(j, "threads", c.threads, "config");
    if (c.threads == 0) throw ConfigError("config.threads must be at least 1");
    c.checkpoint = read_string(j, "checkpoint", c.checkpoint, "config");
    c.centroids = read_string(j, "centroids", c.centroids, "config");
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
    if (j.contains("model")) c.train.model = model_config_from_json(j.at("model"), c.train.model);
    if (j.contains("data")) {
        c.data = data_source_from_json(j.at("data"), c.data);
        if (!j.contains("eval") || !j.at("eval").contains("data")) {
            c.eval.data = c.data;
            c.eval.data.holdout_tail = 0;
        }
    }
    if (j.contains("eval")) c.eval = eval_dataset_spec_from_json(j.at("eval"), c.eval);
    if (j.contains("protocol")) c.protocol = protocol_from_json(j.at("protocol"), c.protocol);
    if (j.contains("fit_gate")) {
        const Json& f = j.at("fit_gate");
        check_keys(f, {"layers", "n_clusters", "iterations", "batch_size"}, "fit_gate");
        if (f.contains("layers")) {
            if (!f.at("layers").is_array()) throw ConfigError("fit_gate.layers must be an array");
            c.fit_gate.layers.clear();
            for (const auto& l : f.at("layers")) {
                if (!is_count(l)) throw ConfigError("fit_gate.layers must hold layer indices");
                c.fit_gate.layers.push_back(l.get<std::size_t>());
            }
        }
        c.fit_gate.n_clusters = read_size(f, "n_clusters", c.fit_gate.n_clusters, "fit_gate");
        c.fit_gate.iterations = read_size(f, "iterations", c.fit_gate.iterations, "fit_gate");
        c.fit_gate.batch_size = read_size(f, "batch_size", c.fit_gate.batch_size, "fit_gate");
    }
    if (j.contains("forecast")) {
        const Json& f = j.at("forecast");
        check_keys(f, {"horizon", "n_samples", "context_length", "quantiles", "write_samples"}, "forecast");
        c.forecast.horizon = read_size(f, "horizon", c.forecast.horizon, "forecast");
        c.forecast.n_samples = read_size(f, "n_samples", c.forecast.n_samples, "forecast");
        c.forecast.context_length = read_size(f, "context_length", c.forecast.context_length, "forecast");
        if (f.contains("quantiles")) {
            if (!f.at("quantiles").is_array()) throw ConfigError("forecast.quantiles must be an array");
            c.forecast.quantiles.clear();
            for (const auto& q : f.at("quantiles")) {
                if (!q.is_number() || !(q.get<double>() > 0.0 && q.get<double>() < 1.0)) {
                    throw ConfigError("forecast.quantiles must lie in (0, 1)");
                }
                c.forecast.quantiles.push_back(q.get<double>());
            }
        }
        if (f.contains("write_samples")) {
            if (!f.at("write_samples").is_boolean()) throw ConfigError("forecast.write_samples must be true or false");
            c.forecast.write_samples = f.at("write_samples").get<bool>();
        }
    }
    if (j.contains("analysis")) {
        const Json& a = j.at("analysis");
        check_keys(a, {"stages", "mass", "max_patches", "seasons"}, "analysis");
        if (a.contains("stages")) {
            if (!a.at("stages").is_array()) throw ConfigError("analysis.stages must be an array");
            c.analysis.stages.clear();
            for (const auto& s : a.at("stages")) {
                if (!s.is_string()) throw ConfigError("analysis.stages must hold strings");
                c.analysis.stages.push_back(s.get<std::string>());
            }
        }
        c.analysis.mass = read_string(a, "mass", c.analysis.mass, "analysis");
        allocation_mass_from_string(c.analysis.mass);
        c.analysis.max_patches = read_size(a, "max_patches", c.analysis.max_patches, "analysis");
        if (a.contains("seasons")) c.analysis.seasons = read_seasons(a.at("seasons"), "analysis.seasons");
    }
    if (j.contains("sweep")) {
        const Json& s = j.at("sweep");
        check_keys(s, {"axis", "values"}, "sweep");
        c.sweep.axis = read_string(s, "axis", c.sweep.axis, "sweep");
        if (s.contains("values")) {
            if (!s.at("values").is_array()) throw ConfigError("sweep.values must be an array");
            c.sweep.values.assign(s.at("values").begin(), s.at("values").end());
        }
    }
    if (has_seed) {
        c.train.seed = c.seed;
        c.protocol.seed = c.seed;
    }
    c.train.validate();
    return c;
}

Json to_json(const RunConfig& c) {
    Json j;
    j["seed"] = c.seed;
    j["out"] = c.out;
    j["threads"] = c.threads;
    j["checkpoint"] = c.checkpoint;
    j["centroids"] = c.centroids;
    j["train"] = to_json(c.train);
    j["data"] = to_json(c.data);
    j["eval"] = to_json(c.eval);
    j["protocol"] = to_json(c.protocol);
    j["fit_gate"] = {{"layers", c.fit_gate.layers},
                     {"n_clusters", c.fit_gate.n_clusters},
                     {"iterations", c.fit_gate.iterations},
                     {"batch_size", c.fit_gate.batch_size}};
    j["forecast"] = {{"horizon", c.forecast.horizon},
                     {"n_samples", c.forecast.n_samples},
                     {"context_length", c.forecast.context_length},
                     {"quantiles", c.forecast.quantiles},
                     {"write_samples", c.forecast.write_samples}};
    j["analysis"] = {{"stages", c.analysis.stages},
                     {"mass", c.analysis.mass},
                     {"max_patches", c.analysis.max_patches},
                     {"seasons", c.analysis.seasons}};
    j["sweep"] = {{"axis", c.sweep.axis}, {"values", c.sweep.values}};
    return j;
}

void write_metrics_csv(const std::vector<StepMetrics>& rows, const std::string& path) {
    std::ostringstream out;
    out << "step,pred_loss,balance_loss,lr,wall_ms\n";
    for (const auto& m : rows) {
        out << m.step << ',' << format_double(m.pred_loss) << ',' << format_double(m.balance_loss) << ','
            << format_double(m.lr) << ',' << format_double(m.wall_ms) << '\n';
    }
    write_text(path, out.str());
}

Forecaster model_forecaster(const Model& model, std::size_t n_samples) {
    return [&model, n_samples](std::span<const double> context, std::size_t horizon, std::uint64_t seed) {
        ForecastOptions o;
        o.horizon = horizon;
        o.n_samples = n_samples;
        o.seed = seed;
        o.quantile_levels = {};
        return forecast(model, context, o).samples;
    };
}

void cmd_train(const RunConfig& c) {
    const fs::path out = prepare_out(c);
    const TrainOutcome outcome = run_training(c, out);
    const auto& h = outcome.result.history;
    std::cout << "trained " << h.size() << " steps; final pred_loss " << (h.empty() ? 0.0 : h.back().pred_loss)
              << "; checkpoint " << (out / "checkpoint.moef").string() << '\n';
}

std::map<std::size_t, CentroidSet> fit_gate_centroids(const Model& model, const std::vector<TimeSeriesRecord>& records,
                                                      const TrainConfig& train, const FitGateOptions& options,
                                                      std::uint64_t seed, std::ostream* log) {
    const auto sequences =
        tile_windows(records, train.context_patches, model.config.patch_size, train.masking_ratio, train.normalizer);
    std::vector<std::size_t> layers = options.layers;
    if (layers.empty()) {
        for (std::size_t l = 0; l < model.config.layers; ++l) layers.push_back(l);
    }
    std::map<std::size_t, CentroidSet> sets;
    for (std::size_t layer : layers) {
        const Tensor reps = collect_representations(model, sequences, layer);
        KMeansOptions o;
        o.n_clusters = options.n_clusters;
        o.iterations = options.iterations;
        o.batch_size = options.batch_size;
        o.seed = derive_seed(seed, layer);
        CentroidSet cs = fit_centroids(reps, o);
        cs.layer = layer;
        cs.checkpoint_id = options.checkpoint;
        if (log) {
            *log << "layer " << layer << ": " << reps.rows() << " representations, " << cs.experts()
                 << " centroids, inertia " << kmeans_inertia(reps, cs.centroids) << '\n';
        }
        sets.emplace(layer, std::move(cs));
    }
    return sets;
}

void cmd_fit_gate(const RunConfig& c) {
    const fs::path out = prepare_out(c);
    const Model model = load_model(c);
    FitGateOptions options = c.fit_gate;
    options.checkpoint = c.checkpoint;
    const auto sets = fit_gate_centroids(model, load_training_records(c.data), c.train, options, c.seed, &std::cout);
    save_checkpoint(checkpoint_from_centroids(sets), out / "centroids.moef");
}

void cmd_forecast(const RunConfig& c) {
    const fs::path out = prepare_out(c);
    const Model model = load_model(c);
    DataSource source = c.data;
    source.holdout_tail = 0;
    const auto records = load_records(source);
    std::vector<ForecastResult> results;
    std::ostringstream samples_csv;
    if (c.forecast.write_samples) samples_csv << "id,path,step,value\n";
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        std::span<const double> context(rec.values);
        if (c.forecast.context_length > 0 && context.size() > c.forecast.context_length) {
            context = context.subspan(context.size() - c.forecast.context_length);
        }
        ForecastOptions o;
        o.horizon = c.forecast.horizon;
        o.n_samples = c.forecast.n_samples;
        o.seed = derive_seed(c.seed, rec.id);
        o.quantile_levels = c.forecast.quantiles;
        o.normalizer = c.train.normalizer;
        results.push_back(forecast(model, context, o, rec.id));
        if (c.forecast.write_samples) {
            const Tensor& s = results.back().samples;
            for (std::size_t p = 0; p < s.rows(); ++p) {
                for (std::size_t t = 0; t < s.cols(); ++t) {
                    samples_csv << rec.id << ',' << p << ',' << t << ',' << format_double(s.at(p, t)) << '\n';
                }
            }
        }
    }
    write_forecasts_jsonl(results, out / "forecasts.jsonl");
    if (c.forecast.write_samples) write_text(out / "samples.csv", samples_csv.str());
    std::cout << "wrote " << results.size() << " forecasts to " << (out / "forecasts.jsonl").string() << '\n';
}

void cmd_eval(const RunConfig& c) {
    const fs::path out = prepare_out(c);
    EvalReport report;
    if (c.checkpoint == "seasonal-naive") {
        const auto datasets = build_eval_datasets(c.eval);
        // Each dataset uses its own season, so run the baseline per dataset and merge.
        for (const auto& ds : datasets) {
            EvalReport part = run_benchmark(seasonal_naive_forecaster(ds.season), "seasonal-naive", {ds}, c.protocol);
            report.series.insert(report.series.end(), part.series.begin(), part.series.end());
            report.naive_series.insert(report.naive_series.end(), part.naive_series.begin(), part.naive_series.end());
            report.datasets.insert(report.datasets.end(), part.datasets.begin(), part.datasets.end());
        }
        std::vector<double> m, n, cm, cn, sm, sn;
        for (const auto& d : report.datasets) {
            if (d.series == 0) continue;
            m.push_back(d.mae);
            n.push_back(d.naive_mae);
            cm.push_back(d.crps);
            cn.push_back(d.naive_crps);
            if (d.mase.ok() && d.naive_mase.ok()) {
                sm.push_back(d.mase.value);
                sn.push_back(d.naive_mase.value);
            }
        }
        if (m.empty()) throw std::runtime_error("no dataset produced metrics under the protocol");
        report.model_name = "seasonal-naive";
        report.protocol = c.protocol;
        report.aggregate.mae_vs_naive = aggregate_geomean(m, n);
        report.aggregate.crps_vs_naive = aggregate_geomean(cm, cn);
        if (sm.empty()) {
            report.aggregate.mase_vs_naive = {0.0, std::string("no dataset with a defined MASE")};
        } else {
            report.aggregate.mase_vs_naive = {aggregate_geomean(sm, sn), std::nullopt};
        }
    } else {
        report = evaluate_model(load_model(c), c);
    }
    write_report(report, out);
    std::cout << report.to_table();
}

void cmd_analyze(const RunConfig& c) {
    const fs::path out = prepare_out(c);
    const Model model = load_model(c);
    DataSource source = c.data;
    source.holdout_tail = 0;
    const auto records = load_records(source);
    const auto sequences = analysis_sequences(records, model.config.patch_size, c.train.masking_ratio,
                                              c.analysis.max_patches, c.train.normalizer);
    for (const auto& stage : c.analysis.stages) {
        std::ostringstream csv;
        const std::size_t rows = export_embeddings(model, sequences, stage, csv);
        write_text(out / ("embeddings_" + stage + ".csv"), csv.str());
        std::cout << "embeddings " << stage << ": " << rows << " rows\n";
    }
    if (model.config.ffn != FfnKind::MoE) {
        std::cout << "dense model: routing analysis skipped\n";
        return;
    }
    const RoutingTrace trace = trace_routing(model, sequences);
    const AllocationMass mass = allocation_mass_from_string(c.analysis.mass);
    {
        std::ostringstream csv;
        write_trace_csv(trace, csv);
        write_text(out / "routing_trace.csv", csv.str());
    }
    const auto per_layer = allocation_distribution(trace, GroupBy::Layer, mass);
    const auto per_freq = allocation_distribution(trace, GroupBy::LayerFreq, mass);
    const auto per_position = allocation_distribution(trace, GroupBy::LayerPosition, mass);
    for (const auto& [name, hist] : {std::pair{"layer", &per_layer}, std::pair{"layer_freq", &per_freq},
                                     std::pair{"layer_position", &per_position}}) {
        std::ostringstream csv;
        write_histograms_csv(*hist, csv);
        write_text(out / (std::string("allocation_") + name + ".csv"), csv.str());
    }
    const ConcentrationReport conc = concentration_stats(per_layer, per_freq, model.config.top_k);
    {
        std::ostringstream csv;
        write_concentration_csv(conc, csv);
        write_text(out / "concentration.csv", csv.str());
    }
    {
        std::ostringstream csv;
        write_divergence_csv(conc, csv);
        write_text(out / "freq_divergence.csv", csv.str());
    }
    // Periodicity per layer and freq group, with seasons from the config or the synthetic spec.
    std::map<std::string, std::size_t> seasons = c.analysis.seasons;
    if (source.synthetic) {
        for (const auto& g : source.synthetic_spec.groups) seasons.try_emplace(g.label, season_length(g));
    }
    std::ostringstream probe_csv;
    probe_csv << "layer,freq,season,lag,expert_id,autocorrelation,pairs,status\n";
    for (const auto& [freq, season] : seasons) {
        RoutingTrace sub = trace;
        std::erase_if(sub.entries, [&](const RoutingEntry& e) { return e.freq != freq; });
        if (sub.entries.empty()) continue;
        for (std::size_t l = 0; l < model.config.layers; ++l) {
            probe_csv << l << ',' << freq << ',' << season << ',';
            try {
                const ProbeResult r = periodicity_probe(sub, l, season, model.config.patch_size);
                probe_csv << r.lag << ',' << r.expert << ',' << format_double(r.autocorrelation) << ',' << r.pairs
                          << ',' << (r.skipped ? *r.skipped : "ok") << '\n';
            } catch (const std::invalid_argument& e) {
                probe_csv << ",,,," << "skipped: " << e.what() << '\n';
            }
        }
    }
    write_text(out / "periodicity.csv", probe_csv.str());
    for (const auto& l : conc.layers) {
        std::cout << "layer " << l.layer << ": entropy " << l.entropy << " nats, effective experts "
                  << l.effective_experts << ", top-" << l.top_k << " mass " << l.top_k_mass << '\n';
    }
}

void cmd_sweep(const RunConfig& c) {
    const fs::path out = prepare_out(c);
    const std::string& axis = c.sweep.axis;
    if (axis != "patch_size" && axis != "masking_ratio" && axis != "n_experts" && axis != "gate_kind") {
        throw ConfigError("sweep.axis must be one of patch_size, masking_ratio, n_experts, gate_kind");
    }
    if (c.sweep.values.empty()) throw ConfigError("sweep.values is empty");
    std::ostringstream csv;
    csv << "axis,value,agg_mae_vs_naive,agg_crps_vs_naive,agg_mase_vs_naive,final_pred_loss,status\n";
    for (std::size_t i = 0; i < c.sweep.values.size(); ++i) {
        const Json& v = c.sweep.values[i];
        const std::string label = v.is_string() ? v.get<std::string>() : v.dump();
        csv << axis << ',' << label << ',';
        try {
            RunConfig sub = c;
            sub.out = (out / ("run_" + std::to_string(i))).string();
            if (axis == "patch_size") {
                if (!is_positive_integer(v)) throw ConfigError("patch_size values must be positive integers");
                sub.train.model.patch_size = v.get<std::size_t>();
            } else if (axis == "masking_ratio") {
                if (!v.is_number()) throw ConfigError("masking_ratio values must be numbers");
                sub.train.masking_ratio = v.get<double>();
            } else if (axis == "n_experts") {
                if (!is_positive_integer(v)) throw ConfigError("n_experts values must be positive integers");
                sub.train.model.n_experts = v.get<std::size_t>();
            } else {
                if (!v.is_string()) throw ConfigError("gate_kind values must be strings");
                sub.train.model.gate_kind = gate_kind_from_string(v.get<std::string>());
            }
            sub.train.validate();
            const fs::path sub_out = prepare_out(sub);
            const TrainOutcome outcome = run_training(sub, sub_out);
            const EvalReport report = evaluate_model(outcome.result.state.model, sub);
            write_report(report, sub_out);
            csv << format_double(report.aggregate.mae_vs_naive) << ',' << format_double(report.aggregate.crps_vs_naive)
                << ',' << (report.aggregate.mase_vs_naive.ok() ? format_double(report.aggregate.mase_vs_naive.value) : "")
                << ',' << format_double(outcome.result.history.back().pred_loss) << ",ok\n";
            std::cout << axis << " = " << label << ": agg mae " << report.aggregate.mae_vs_naive << '\n';
        } catch (const std::exception& e) {
            std::string msg = e.what();
            for (char& ch : msg) {
                if (ch == ',' || ch == '\n') ch = ';';
            }
            csv << ",,,,failed: " << msg << '\n';
            std::cout << axis << " = " << label << ": failed: " << e.what() << '\n';
        }
    }
    write_text(out / "sweep.csv", csv.str());
}

int exit_code_for_current_exception() noexcept {
    try {
        throw;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return 3;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return 4;
    } catch (const FormatError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (...) {
        std::cerr << "unknown error\n";
        return 1;
    }
}

} // namespace tsmoe
