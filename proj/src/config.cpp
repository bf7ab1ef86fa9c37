// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "tsmoe/errors.hpp"

namespace tsmoe {

void check_keys(const Json& obj, std::initializer_list<std::string_view> allowed, std::string_view where) {
    if (!obj.is_object()) throw ConfigError(std::string(where) + ": expected an object");
    for (const auto& item : obj.items()) {
        bool known = false;
        for (auto a : allowed) known |= item.key() == a;
        if (!known) throw ConfigError(std::string(where) + ": unknown key \"" + item.key() + "\"");
    }
}

bool is_count(const Json& v) noexcept {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

namespace {

std::string path_of(std::string_view where, const std::string& key) { return std::string(where) + "." + key; }

void read(const Json& j, const char* key, std::size_t& out, std::string_view where) {
    if (!j.contains(key)) return;
    const Json& v = j.at(key);
    if (!is_count(v)) {
        throw ConfigError(path_of(where, key) + " must be a non-negative integer");
    }
    out = v.get<std::size_t>();
}

void read(const Json& j, const char* key, double& out, std::string_view where) {
    if (!j.contains(key)) return;
    const Json& v = j.at(key);
    if (!v.is_number()) throw ConfigError(path_of(where, key) + " must be a number");
    out = v.get<double>();
}

void read(const Json& j, const char* key, bool& out, std::string_view where) {
    if (!j.contains(key)) return;
    const Json& v = j.at(key);
    if (!v.is_boolean()) throw ConfigError(path_of(where, key) + " must be true or false");
    out = v.get<bool>();
}

void read(const Json& j, const char* key, std::string& out, std::string_view where) {
    if (!j.contains(key)) return;
    const Json& v = j.at(key);
    if (!v.is_string()) throw ConfigError(path_of(where, key) + " must be a string");
    out = v.get<std::string>();
}

template <class Enum, class Parse>
void read_enum(const Json& j, const char* key, Enum& out, Parse parse, std::string_view where) {
    if (!j.contains(key)) return;
    std::string name;
    read(j, key, name, where);
    try {
        out = parse(name);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(path_of(where, key) + ": " + e.what());
    }
}

std::string to_string(NormalizerKind k) { return k == NormalizerKind::MeanStd ? "mean-std" : "median-iqr"; }

NormalizerKind normalizer_from_string(const std::string& name) {
    if (name == "mean-std") return NormalizerKind::MeanStd;
    if (name == "median-iqr") return NormalizerKind::MedianIqr;
    throw ConfigError("unknown normalizer: " + name);
}

} // namespace

Json to_json(const ModelConfig& c) {
    return Json{{"layers", c.layers},
                {"d_model", c.d_model},
                {"d_ff", c.d_ff},
                {"n_heads", c.n_heads},
                {"n_experts", c.n_experts},
                {"top_k", c.top_k},
                {"patch_size", c.patch_size},
                {"mixture_components", c.mixture_components},
                {"gate_kind", to_string(c.gate_kind)},
                {"ffn", to_string(c.ffn)},
                {"objective", to_string(c.objective)},
                {"final_norm", c.final_norm},
                {"rope_base", c.rope_base}};
}

ModelConfig model_config_from_json(const Json& j, ModelConfig c) {
    constexpr std::string_view where = "model";
    check_keys(j, {"layers", "d_model", "d_ff", "n_heads", "n_experts", "top_k", "patch_size", "mixture_components",
                   "gate_kind", "ffn", "objective", "final_norm", "rope_base"},
               where);
    read(j, "layers", c.layers, where);
    read(j, "d_model", c.d_model, where);
    read(j, "d_ff", c.d_ff, where);
    read(j, "n_heads", c.n_heads, where);
    read(j, "n_experts", c.n_experts, where);
    read(j, "top_k", c.top_k, where);
    read(j, "patch_size", c.patch_size, where);
    read(j, "mixture_components", c.mixture_components, where);
    read_enum(j, "gate_kind", c.gate_kind, gate_kind_from_string, where);
    read_enum(j, "ffn", c.ffn, ffn_kind_from_string, where);
    read_enum(j, "objective", c.objective, objective_from_string, where);
    read(j, "final_norm", c.final_norm, where);
    read(j, "rope_base", c.rope_base, where);
    return c;
}

Json to_json(const TrainConfig& c) {
    return Json{{"steps", c.steps},
                {"batch_size", c.batch_size},
                {"context_patches", c.context_patches},
                {"warmup_steps", c.warmup_steps},
                {"log_interval", c.log_interval},
                {"checkpoint_interval", c.checkpoint_interval},
                {"lr_max", c.lr_max},
                {"weight_decay", c.weight_decay},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"adam_eps", c.adam_eps},
                {"lambda_balance", c.lambda_balance},
                {"grad_clip", c.grad_clip},
                {"masking_ratio", c.masking_ratio},
                {"normalizer", to_string(c.normalizer)},
                {"seed", c.seed},
                {"model", to_json(c.model)}};
}

TrainConfig train_config_from_json(const Json& j, TrainConfig c) {
    constexpr std::string_view where = "train";
    check_keys(j, {"steps", "batch_size", "context_patches", "warmup_steps", "log_interval", "checkpoint_interval",
                   "lr_max", "weight_decay", "beta1", "beta2", "adam_eps", "lambda_balance", "grad_clip",
                   "masking_ratio", "normalizer", "seed", "model"},
               where);
    read(j, "steps", c.steps, where);
    read(j, "batch_size", c.batch_size, where);
    read(j, "context_patches", c.context_patches, where);
    read(j, "warmup_steps", c.warmup_steps, where);
    read(j, "log_interval", c.log_interval, where);
    read(j, "checkpoint_interval", c.checkpoint_interval, where);
    read(j, "lr_max", c.lr_max, where);
    read(j, "weight_decay", c.weight_decay, where);
    read(j, "beta1", c.beta1, where);
    read(j, "beta2", c.beta2, where);
    read(j, "adam_eps", c.adam_eps, where);
    read(j, "lambda_balance", c.lambda_balance, where);
    read(j, "grad_clip", c.grad_clip, where);
    read(j, "masking_ratio", c.masking_ratio, where);
    read_enum(j, "normalizer", c.normalizer, normalizer_from_string, where);
    read(j, "seed", c.seed, where);
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"), c.model);
    return c;
}

Json to_json(const SyntheticSpec& s) {
    Json groups = Json::array();
    for (const auto& g : s.groups) {
        groups.push_back(
            {{"label", g.label}, {"periods", g.periods}, {"family", to_string(g.family)}, {"noise_sigma", g.noise_sigma}});
    }
    return Json{{"series_per_group", s.series_per_group}, {"length", s.length}, {"seed", s.seed}, {"groups", groups}};
}

SyntheticSpec synthetic_spec_from_json(const Json& j, SyntheticSpec s) {
    constexpr std::string_view where = "synthetic";
    check_keys(j, {"series_per_group", "length", "seed", "groups"}, where);
    read(j, "series_per_group", s.series_per_group, where);
    read(j, "length", s.length, where);
    read(j, "seed", s.seed, where);
    if (j.contains("groups")) {
        if (!j.at("groups").is_array()) throw ConfigError("synthetic.groups must be an array");
        s.groups.clear();
        for (const auto& gj : j.at("groups")) {
            constexpr std::string_view gw = "synthetic.groups[]";
            check_keys(gj, {"label", "periods", "family", "noise_sigma"}, gw);
            SyntheticGroup g;
            read(gj, "label", g.label, gw);
            if (g.label.empty()) throw ConfigError("synthetic group needs a label");
            if (gj.contains("periods")) {
                if (!gj.at("periods").is_array()) throw ConfigError("synthetic.groups[].periods must be an array");
                g.periods.clear();
                for (const auto& p : gj.at("periods")) {
                    if (!is_count(p)) throw ConfigError("synthetic periods must be positive integers");
                    g.periods.push_back(p.get<std::size_t>());
                }
            }
            read_enum(gj, "family", g.family, pattern_family_from_string, gw);
            read(gj, "noise_sigma", g.noise_sigma, gw);
            s.groups.push_back(std::move(g));
        }
    }
    return s;
}

Json to_json(const DataSource& d) {
    Json j{{"paths", d.paths}, {"holdout_tail", d.holdout_tail}};
    j["synthetic"] = d.synthetic ? to_json(d.synthetic_spec) : Json(nullptr);
    return j;
}

DataSource data_source_from_json(const Json& j, DataSource d) {
    constexpr std::string_view where = "data";
    check_keys(j, {"paths", "synthetic", "holdout_tail"}, where);
    if (j.contains("paths")) {
        if (!j.at("paths").is_array()) throw ConfigError("data.paths must be an array of strings");
        d.paths.clear();
        for (const auto& p : j.at("paths")) {
            if (!p.is_string()) throw ConfigError("data.paths must be an array of strings");
            d.paths.push_back(p.get<std::string>());
        }
    }
    if (j.contains("synthetic")) {
        const Json& s = j.at("synthetic");
        if (s.is_null() || (s.is_boolean() && !s.get<bool>())) {
            d.synthetic = false;
        } else if (s.is_boolean()) {
            d.synthetic = true;
        } else {
            d.synthetic = true;
            d.synthetic_spec = synthetic_spec_from_json(s, d.synthetic_spec);
        }
    }
    read(j, "holdout_tail", d.holdout_tail, where);
    return d;
}

std::vector<TimeSeriesRecord> load_records(const DataSource& source) {
    std::vector<TimeSeriesRecord> out;
    for (const auto& p : source.paths) {
        auto recs = load_jsonl(p);
        out.insert(out.end(), recs.begin(), recs.end());
    }
    if (source.synthetic) {
        auto recs = generate_synthetic(source.synthetic_spec);
        out.insert(out.end(), recs.begin(), recs.end());
    }
    if (out.empty()) throw ConfigError("data source is empty: give data.paths or data.synthetic");
    return out;
}

std::vector<TimeSeriesRecord> load_training_records(const DataSource& source) {
    return truncate_tail(load_records(source), source.holdout_tail);
}

Json to_json(const EvalDatasetSpec& e) {
    Json data = to_json(e.data);
    data.erase("holdout_tail");
    return Json{{"data", data}, {"seasons", e.seasons}, {"default_season", e.default_season}};
}

EvalDatasetSpec eval_dataset_spec_from_json(const Json& j, EvalDatasetSpec e) {
    constexpr std::string_view where = "eval";
    check_keys(j, {"data", "seasons", "default_season"}, where);
    if (j.contains("data")) e.data = data_source_from_json(j.at("data"), e.data);
    if (j.contains("seasons")) {
        if (!j.at("seasons").is_object()) throw ConfigError("eval.seasons must map freq tags to seasons");
        e.seasons.clear();
        for (const auto& item : j.at("seasons").items()) {
            if (!is_count(item.value()) || item.value().get<std::size_t>() == 0) {
                throw ConfigError("eval.seasons." + item.key() + " must be a positive integer");
            }
            e.seasons[item.key()] = item.value().get<std::size_t>();
        }
    }
    read(j, "default_season", e.default_season, where);
    if (e.default_season == 0) throw ConfigError("eval.default_season must be positive");
    return e;
}

std::vector<EvalDataset> build_eval_datasets(const EvalDatasetSpec& spec) {
    DataSource source = spec.data;
    source.holdout_tail = 0;
    const std::vector<TimeSeriesRecord> records = load_records(source);
    std::map<std::string, std::size_t> synthetic_seasons;
    if (source.synthetic) {
        for (const auto& g : source.synthetic_spec.groups) synthetic_seasons[g.label] = season_length(g);
    }
    std::vector<EvalDataset> out;
    std::map<std::string, std::size_t> index;
    for (const auto& r : records) {
        auto [it, inserted] = index.try_emplace(r.freq, out.size());
        if (inserted) {
            EvalDataset ds;
            ds.name = r.freq;
            if (auto s = spec.seasons.find(r.freq); s != spec.seasons.end()) {
                ds.season = s->second;
            } else if (auto g = synthetic_seasons.find(r.freq); g != synthetic_seasons.end()) {
                ds.season = g->second;
            } else {
                ds.season = spec.default_season;
            }
            out.push_back(std::move(ds));
        }
        out[it->second].records.push_back(r);
    }
    return out;
}

Json to_json(const Protocol& p) {
    return Json{{"horizon", p.horizon},
                {"windows", p.windows},
                {"context_length", p.context_length},
                {"n_samples", p.n_samples},
                {"seed", p.seed}};
}

Protocol protocol_from_json(const Json& j, Protocol p) {
    constexpr std::string_view where = "protocol";
    check_keys(j, {"horizon", "windows", "context_length", "n_samples", "seed"}, where);
    read(j, "horizon", p.horizon, where);
    read(j, "windows", p.windows, where);
    read(j, "context_length", p.context_length, where);
    read(j, "n_samples", p.n_samples, where);
    read(j, "seed", p.seed, where);
    if (p.horizon == 0 || p.windows == 0 || p.n_samples == 0) {
        throw ConfigError("protocol horizon, windows and n_samples must be positive");
    }
    return p;
}

Json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return Json::parse(buf.str());
    } catch (const Json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

} // namespace tsmoe
