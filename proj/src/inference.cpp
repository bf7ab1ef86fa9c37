// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tsmoe/errors.hpp"
#include "tsmoe/mixture.hpp"
#include "tsmoe/rng.hpp"

namespace tsmoe {

QuantileSummary summarize(const Tensor& samples, const std::vector<double>& levels) {
    if (samples.size() == 0 || samples.rows() == 0) throw std::invalid_argument("summarize: empty sample set");
    for (double q : levels) {
        if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("summarize: quantile levels must lie in (0, 1)");
    }
    const std::size_t n = samples.rows();
    const std::size_t h = samples.cols();
    QuantileSummary out;
    for (double q : levels) out.quantiles[q].resize(h);
    out.point.resize(h);
    std::vector<double> column(n);
    auto interpolate = [&](double q) {
        const double pos = double(n - 1) * q;
        const std::size_t lo = std::size_t(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, n - 1);
        const double frac = pos - double(lo);
        return column[lo] + frac * (column[hi] - column[lo]);
    };
    for (std::size_t t = 0; t < h; ++t) {
        for (std::size_t i = 0; i < n; ++i) column[i] = samples.at(i, t);
        std::sort(column.begin(), column.end());
        for (double q : levels) out.quantiles[q][t] = interpolate(q);
        out.point[t] = interpolate(0.5);
    }
    return out;
}

namespace {

PatchedSequence sequence_from(const std::vector<double>& values, const std::vector<char>& real, std::size_t p,
                              std::size_t max_patches) {
    PatchedSequence seq;
    seq.patch_size = p;
    const std::size_t total = values.size() / p;
    const std::size_t keep = max_patches == 0 ? total : std::min(total, max_patches);
    const std::size_t skip = (total - keep) * p;
    seq.num_patches = keep;
    seq.patches.assign(values.begin() + std::ptrdiff_t(skip), values.end());
    seq.pad_mask.assign(real.begin() + std::ptrdiff_t(skip), real.end());
    seq.loss_mask.assign(keep, 0);
    return seq;
}

std::vector<double> last_head_row(const Model& model, const PatchedSequence& seq) {
    Graph graph;
    const ForwardResult fr = forward_inference(graph, model, make_input({seq}, model.config.objective));
    auto row = fr.head.value().row(seq.num_patches - 1);
    return {row.begin(), row.end()};
}

} // namespace

ForecastResult forecast(const Model& model, std::span<const double> context, const ForecastOptions& options,
                        const std::string& series_id) {
    if (options.horizon == 0) throw std::invalid_argument("forecast: horizon must be at least 1");
    if (context.empty()) throw std::invalid_argument("forecast: context is empty");
    if (options.n_samples == 0) throw std::invalid_argument("forecast: n_samples must be at least 1");
    if (model.config.objective != Objective::DecoderOnly) {
        throw ConfigError("autoregressive forecasting needs a decoder-only model");
    }
    const std::size_t p = model.config.patch_size;
    const std::size_t c = model.config.mixture_components;
    const std::size_t steps = (options.horizon + p - 1) / p;

    ForecastResult result;
    result.series_id = series_id;
    result.normalizer = fit_normalizer(context, options.normalizer);
    const Patches patches = patchify(context, p);
    std::vector<double> base(patches.values.size(), 0.0);
    for (std::size_t i = 0; i < base.size(); ++i) {
        if (patches.pad_mask[i]) base[i] = result.normalizer.normalize(patches.values[i]);
    }
    result.patches_consumed =
        options.max_context_patches == 0 ? patches.num_patches : std::min(patches.num_patches, options.max_context_patches);
    result.autoregressive_steps = steps;

    // The first step conditions only on the shared context.
    const std::vector<double> first_row =
        last_head_row(model, sequence_from(base, patches.pad_mask, p, options.max_context_patches));
    result.forward_passes = 1;
    const std::vector<MixtureParams> first = decode_patch(first_row, p, c);

    result.samples = Tensor(Shape{options.n_samples, options.horizon}, 0.0);
    for (std::size_t path = 0; path < options.n_samples; ++path) {
        Rng rng = make_rng(options.seed, path);
        std::vector<double> values = base;
        std::vector<char> real = patches.pad_mask;
        auto out = result.samples.row(path);
        std::size_t written = 0;
        for (std::size_t s = 0; s < steps; ++s) {
            std::vector<MixtureParams> dists;
            if (s == 0) {
                dists = first;
            } else {
                dists = decode_patch(last_head_row(model, sequence_from(values, real, p, options.max_context_patches)), p, c);
                ++result.forward_passes;
            }
            for (std::size_t j = 0; j < p; ++j) {
                const double z = sample_mixture_once(dists[j], rng);
                values.push_back(z);
                real.push_back(1);
                if (written < options.horizon) out[written++] = result.normalizer.denormalize(z);
            }
        }
    }
    QuantileSummary summary = summarize(result.samples, options.quantile_levels);
    result.quantiles = std::move(summary.quantiles);
    result.point = std::move(summary.point);
    return result;
}

void write_forecasts_jsonl(const std::vector<ForecastResult>& results, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    for (const auto& r : results) {
        nlohmann::ordered_json obj;
        obj["id"] = r.series_id;
        obj["horizon"] = r.point.size();
        obj["point"] = r.point;
        nlohmann::ordered_json q = nlohmann::ordered_json::object();
        for (const auto& [level, values] : r.quantiles) {
            std::ostringstream key;
            key << level;
            q[key.str()] = values;
        }
        obj["quantiles"] = q;
        out << obj.dump() << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

} // namespace tsmoe
