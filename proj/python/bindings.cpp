// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <json.hpp>

#include "tsmoe/checkpoint.hpp"
#include "tsmoe/config.hpp"
#include "tsmoe/errors.hpp"
#include "tsmoe/evaluation.hpp"
#include "tsmoe/inference.hpp"
#include "tsmoe/mixture.hpp"
#include "tsmoe/moe.hpp"
#include "tsmoe/training.hpp"

namespace py = pybind11;
using namespace tsmoe;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<double> to_vector(const Array& a) {
    if (a.ndim() != 1) throw std::invalid_argument("expected a 1-d array");
    return std::vector<double>(a.data(), a.data() + a.size());
}

Tensor to_matrix(const Array& a) {
    if (a.ndim() != 2) throw std::invalid_argument("expected a 2-d array");
    const auto r = std::size_t(a.shape(0)), c = std::size_t(a.shape(1));
    return Tensor(Shape{r, c}, std::vector<double>(a.data(), a.data() + r * c));
}

Array to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array out(shape);
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

Array to_array(const std::vector<double>& v) {
    Array out(py::ssize_t(v.size()));
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

// Python dict/list <-> JSON through the json module keeps this file free of a converter.
Json to_json_value(const py::object& o) {
    return Json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::object from_json_value(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

TimeSeriesRecord to_record(const py::dict& d) {
    TimeSeriesRecord r;
    r.id = d["id"].cast<std::string>();
    r.freq = d["freq"].cast<std::string>();
    r.values = to_vector(d["target"].cast<Array>());
    if (d.contains("variate_group") && !d["variate_group"].is_none()) r.variate_group = d["variate_group"].cast<std::string>();
    return r;
}

py::dict from_record(const TimeSeriesRecord& r) {
    py::dict d;
    d["id"] = r.id;
    d["freq"] = r.freq;
    d["target"] = to_array(r.values);
    d["variate_group"] = r.variate_group ? py::object(py::str(*r.variate_group)) : py::object(py::none());
    return d;
}

py::tuple gate_tuple(const GateDecision& g) { return py::make_tuple(g.selected, g.weights, g.dense_probs); }

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Sparse mixture-of-experts time-series forecasting (C++ core).";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
    py::register_exception<IoError>(m, "IoError", PyExc_IOError);

    m.def(
        "generate_synthetic",
        [](std::uint64_t seed, std::size_t length, std::size_t series_per_group) {
            SyntheticSpec spec = default_synthetic_spec(seed);
            spec.length = length;
            spec.series_per_group = series_per_group;
            py::list out;
            for (const auto& r : generate_synthetic(spec)) out.append(from_record(r));
            return out;
        },
        py::arg("seed") = 0, py::arg("length") = 512, py::arg("series_per_group") = 8,
        "Default synthetic corpus: four pattern families with two groups each.");

    m.def(
        "patchify",
        [](const Array& values, std::size_t patch_size) {
            const Patches p = patchify(to_vector(values), patch_size);
            Array vals({py::ssize_t(p.num_patches), py::ssize_t(patch_size)});
            Array mask({py::ssize_t(p.num_patches), py::ssize_t(patch_size)});
            for (std::size_t i = 0; i < p.values.size(); ++i) {
                vals.mutable_data()[i] = p.values[i];
                mask.mutable_data()[i] = p.pad_mask[i] ? 1.0 : 0.0;
            }
            return py::make_tuple(vals, mask);
        },
        py::arg("values"), py::arg("patch_size"), "Left-padded patches and their real-value mask.");

    m.def(
        "linear_gate", [](const Array& token, const Array& w, std::size_t k) { return gate_tuple(linear_gate(to_vector(token), to_matrix(w), k)); },
        py::arg("token"), py::arg("gate_weights"), py::arg("k"), "Returns (selected, weights, dense_probs).");
    m.def(
        "cluster_gate",
        [](const Array& token, const Array& centroids, std::size_t k) {
            CentroidSet cs;
            cs.centroids = to_matrix(centroids);
            return gate_tuple(cluster_gate(to_vector(token), cs, k));
        },
        py::arg("token"), py::arg("centroids"), py::arg("k"));
    m.def(
        "load_balance_loss",
        [](const Array& probs) {
            const Tensor p = to_matrix(probs);
            std::vector<GateDecision> ds(p.rows());
            for (std::size_t r = 0; r < p.rows(); ++r) {
                const auto row = p.row(r);
                ds[r].dense_probs.assign(row.begin(), row.end());
            }
            return load_balance_loss(ds, p.cols());
        },
        py::arg("dense_probs"), "M * sum_i D_i P_i for a T x M matrix of routing probabilities.");

    m.def(
        "mixture_log_prob",
        [](std::vector<double> weights, std::vector<double> means, std::vector<double> scales, double x) {
            return mixture_log_prob(MixtureParams{std::move(weights), std::move(means), std::move(scales)}, x);
        },
        py::arg("weights"), py::arg("means"), py::arg("scales"), py::arg("x"));

    m.def("crps", [](const Array& samples, double y) { return crps_empirical(to_vector(samples), y); }, py::arg("samples"),
          py::arg("actual"));
    m.def(
        "seasonal_naive",
        [](const Array& context, std::size_t season, std::size_t horizon) {
            return to_array(seasonal_naive(to_vector(context), season, horizon));
        },
        py::arg("context"), py::arg("season"), py::arg("horizon"));
    m.def(
        "mase",
        [](const Array& forecast, const Array& actual, const Array& insample, std::size_t season) -> py::object {
            const MetricValue v = mase(to_vector(forecast), to_vector(actual), to_vector(insample), season);
            if (!v.ok()) return py::none();
            return py::float_(v.value);
        },
        py::arg("forecast"), py::arg("actual"), py::arg("insample"), py::arg("season"),
        "MASE, or None when the in-sample seasonal-naive scale is zero.");
    m.def("aggregate_geomean", [](const Array& metric, const Array& naive) {
        return aggregate_geomean(to_vector(metric), to_vector(naive));
    });

    py::class_<Model>(m, "Model")
        .def_static(
            "load", [](const std::filesystem::path& path) { return model_from_checkpoint(load_checkpoint(path)); },
            py::arg("path"), "Loads the model tensors (and centroids) of a checkpoint.")
        .def_property_readonly("config", [](const Model& self) { return from_json_value(to_json(self.config)); })
        .def_property_readonly("parameter_count", [](const Model& self) { return count_parameters(self.config).total; })
        .def_property_readonly("activated_parameter_count",
                               [](const Model& self) { return count_parameters(self.config).activated; })
        .def(
            "forecast",
            [](const Model& self, const Array& context, std::size_t horizon, std::size_t n_samples, std::uint64_t seed,
               std::vector<double> quantiles) {
                ForecastOptions o;
                o.horizon = horizon;
                o.n_samples = n_samples;
                o.seed = seed;
                o.quantile_levels = std::move(quantiles);
                const std::vector<double> ctx = to_vector(context);
                ForecastResult r;
                {
                    py::gil_scoped_release release;
                    r = forecast(self, ctx, o);
                }
                py::dict q;
                for (const auto& [level, v] : r.quantiles) q[py::float_(level)] = to_array(v);
                py::dict out;
                out["samples"] = to_array(r.samples);
                out["median"] = to_array(r.point);
                out["quantiles"] = q;
                out["forward_passes"] = r.forward_passes;
                return out;
            },
            py::arg("context"), py::arg("horizon") = 16, py::arg("n_samples") = 100, py::arg("seed") = 0,
            py::arg("quantiles") = std::vector<double>{0.1, 0.5, 0.9},
            "Sample paths (n_samples x horizon), the median and the requested quantiles.");

    m.def(
        "train",
        [](const py::object& config, const py::list& records, const std::filesystem::path& checkpoint) {
            const TrainConfig tc = train_config_from_json(to_json_value(config));
            std::vector<TimeSeriesRecord> recs;
            for (const auto& r : records) recs.push_back(to_record(r.cast<py::dict>()));
            TrainResult result;
            {
                py::gil_scoped_release release;
                result = train(tc, recs);
            }
            if (!checkpoint.empty()) save_checkpoint(checkpoint_from_state(result.state), checkpoint);
            py::list history;
            for (const auto& s : result.history) {
                history.append(py::dict(py::arg("step") = s.step, py::arg("pred_loss") = s.pred_loss,
                                        py::arg("balance_loss") = s.balance_loss, py::arg("lr") = s.lr));
            }
            return py::make_tuple(result.state.model, history);
        },
        py::arg("config"), py::arg("records"), py::arg("checkpoint") = std::filesystem::path(),
        "Trains from a train-config dict (unset keys keep the desk defaults); returns (model, history).");
}
