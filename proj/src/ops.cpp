// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/ops.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace tsmoe::ops {
namespace {

void require_same_shape(Var a, Var b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                    shape_string(b.shape()));
    }
}

Graph& graph_of(Var a) { return *a.graph(); }

} // namespace

Var matmul(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (bv.rank() != 2 || av.cols() != bv.rows()) {
        throw std::invalid_argument("matmul: cannot multiply " + shape_string(av.shape()) + " by " +
                                    shape_string(bv.shape()));
    }
    Tensor out(Shape{av.rows(), bv.cols()});
    out.matrix().noalias() = av.matrix() * bv.matrix();
    return graph_of(a).record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& grad) {
        if (Tensor* ga = g.grad_buffer(a)) ga->matrix().noalias() += grad.matrix() * b.value().matrix().transpose();
        if (Tensor* gb = g.grad_buffer(b)) gb->matrix().noalias() += a.value().matrix().transpose() * grad.matrix();
    });
}

Var add(Var a, Var b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    out.matrix() += b.value().matrix();
    return graph_of(a).record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& grad) {
        g.accumulate(a, grad);
        g.accumulate(b, grad);
    });
}

Var sub(Var a, Var b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    out.matrix() -= b.value().matrix();
    return graph_of(a).record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& grad) {
        g.accumulate(a, grad);
        if (Tensor* gb = g.grad_buffer(b)) gb->matrix() -= grad.matrix();
    });
}

Var mul(Var a, Var b) {
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    out.matrix().array() *= b.value().matrix().array();
    return graph_of(a).record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& grad) {
        if (Tensor* ga = g.grad_buffer(a)) ga->matrix().array() += grad.matrix().array() * b.value().matrix().array();
        if (Tensor* gb = g.grad_buffer(b)) gb->matrix().array() += grad.matrix().array() * a.value().matrix().array();
    });
}

Var scale(Var a, double factor) {
    Tensor out = a.value();
    out.matrix() *= factor;
    return graph_of(a).record(std::move(out), {a}, [a, factor](Graph& g, const Tensor& grad) {
        if (Tensor* ga = g.grad_buffer(a)) ga->matrix() += factor * grad.matrix();
    });
}

Var add_bias(Var x, Var bias) {
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    if (bv.size() != xv.cols()) {
        throw std::invalid_argument("add_bias: bias of " + shape_string(bv.shape()) + " for input " +
                                    shape_string(xv.shape()));
    }
    Tensor out = xv;
    const auto row = Eigen::Map<const Eigen::RowVectorXd>(bv.data(), Eigen::Index(bv.size()));
    out.matrix().rowwise() += row;
    return graph_of(x).record(std::move(out), {x, bias}, [x, bias](Graph& g, const Tensor& grad) {
        g.accumulate(x, grad);
        if (Tensor* gb = g.grad_buffer(bias)) {
            Eigen::Map<Eigen::RowVectorXd>(gb->data(), Eigen::Index(gb->size())) += grad.matrix().colwise().sum();
        }
    });
}

Var sum(Var a) {
    double total = 0.0;
    for (double v : a.value().values()) total += v;
    return graph_of(a).record(Tensor::scalar(total), {a}, [a](Graph& g, const Tensor& grad) {
        if (Tensor* ga = g.grad_buffer(a)) {
            const double s = grad[0];
            for (double& v : ga->values()) v += s;
        }
    });
}

Var mean(Var a) {
    const std::size_t n = a.value().size();
    if (n == 0) throw std::invalid_argument("mean of empty tensor");
    return scale(sum(a), 1.0 / double(n));
}

Var weighted_sum(Var a, const Tensor& weights) {
    if (weights.size() != a.value().size()) throw std::invalid_argument("weighted_sum: size mismatch");
    double total = 0.0;
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < av.size(); ++i) total += av[i] * weights[i];
    return graph_of(a).record(Tensor::scalar(total), {a}, [a, weights](Graph& g, const Tensor& grad) {
        if (Tensor* ga = g.grad_buffer(a)) {
            for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += grad[0] * weights[i];
        }
    });
}

Var square_norm(Var a) {
    double total = 0.0;
    for (double v : a.value().values()) total += v * v;
    return graph_of(a).record(Tensor::scalar(total), {a}, [a](Graph& g, const Tensor& grad) {
        if (Tensor* ga = g.grad_buffer(a)) {
            const Tensor& av = a.value();
            for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += 2.0 * grad[0] * av[i];
        }
    });
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

Var gelu(Var a) {
    Tensor out = a.value();
    for (double& v : out.values()) v = gelu_value(v);
    return graph_of(a).record(std::move(out), {a}, [a](Graph& g, const Tensor& grad) {
        Tensor* ga = g.grad_buffer(a);
        if (!ga) return;
        const Tensor& av = a.value();
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (std::size_t i = 0; i < av.size(); ++i) {
            const double x = av[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
            (*ga)[i] += grad[i] * (cdf + x * pdf);
        }
    });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    const Tensor& xv = x.value();
    const std::size_t n = xv.rows();
    const std::size_t d = xv.cols();
    if (gain.value().size() != d || bias.value().size() != d) {
        throw std::invalid_argument("layer_norm: gain/bias width does not match input " + shape_string(xv.shape()));
    }
    Tensor normalized(xv.shape());
    std::vector<double> inv_std(n);
    Tensor out(xv.shape());
    const Tensor& gv = gain.value();
    const Tensor& bv = bias.value();
    for (std::size_t r = 0; r < n; ++r) {
        auto row = xv.row(r);
        double mu = 0.0;
        for (double v : row) mu += v;
        mu /= double(d);
        double var = 0.0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= double(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        auto nrow = normalized.row(r);
        auto orow = out.row(r);
        for (std::size_t c = 0; c < d; ++c) {
            nrow[c] = (row[c] - mu) * inv_std[r];
            orow[c] = nrow[c] * gv[c] + bv[c];
        }
    }
    return graph_of(x).record(
        std::move(out), {x, gain, bias},
        [x, gain, bias, normalized = std::move(normalized), inv_std = std::move(inv_std), n, d](Graph& g,
                                                                                                 const Tensor& grad) {
            Tensor* gx = g.grad_buffer(x);
            Tensor* gg = g.grad_buffer(gain);
            Tensor* gb = g.grad_buffer(bias);
            const Tensor& gv = gain.value();
            std::vector<double> dxhat(d);
            for (std::size_t r = 0; r < n; ++r) {
                auto grow = grad.row(r);
                auto nrow = normalized.row(r);
                if (gg)
                    for (std::size_t c = 0; c < d; ++c) (*gg)[c] += grow[c] * nrow[c];
                if (gb)
                    for (std::size_t c = 0; c < d; ++c) (*gb)[c] += grow[c];
                if (!gx) continue;
                double mean_dxhat = 0.0;
                double mean_dxhat_xhat = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    dxhat[c] = grow[c] * gv[c];
                    mean_dxhat += dxhat[c];
                    mean_dxhat_xhat += dxhat[c] * nrow[c];
                }
                mean_dxhat /= double(d);
                mean_dxhat_xhat /= double(d);
                auto xrow = gx->row(r);
                for (std::size_t c = 0; c < d; ++c) {
                    xrow[c] += inv_std[r] * (dxhat[c] - mean_dxhat - nrow[c] * mean_dxhat_xhat);
                }
            }
        });
}

Var softmax_rows(Var logits) {
    const Tensor& lv = logits.value();
    Tensor out(lv.shape());
    for (std::size_t r = 0; r < lv.rows(); ++r) {
        auto in = lv.row(r);
        auto o = out.row(r);
        double mx = in[0];
        for (double v : in) mx = std::max(mx, v);
        double total = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            o[c] = std::exp(in[c] - mx);
            total += o[c];
        }
        for (double& v : o) v /= total;
    }
    Tensor probs = out;
    return graph_of(logits).record(std::move(out), {logits},
                                   [logits, probs = std::move(probs)](Graph& g, const Tensor& grad) {
                                       Tensor* gl = g.grad_buffer(logits);
                                       if (!gl) return;
                                       for (std::size_t r = 0; r < probs.rows(); ++r) {
                                           auto p = probs.row(r);
                                           auto gr = grad.row(r);
                                           double dot = 0.0;
                                           for (std::size_t c = 0; c < p.size(); ++c) dot += p[c] * gr[c];
                                           auto out_row = gl->row(r);
                                           for (std::size_t c = 0; c < p.size(); ++c) out_row[c] += p[c] * (gr[c] - dot);
                                       }
                                   });
}

Var gather_rows(Var x, std::vector<std::size_t> rows) {
    const Tensor& xv = x.value();
    const std::size_t d = xv.cols();
    Tensor out(Shape{rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= xv.rows()) throw std::out_of_range("gather_rows: row index out of range");
        auto src = xv.row(rows[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return graph_of(x).record(std::move(out), {x}, [x, rows = std::move(rows)](Graph& g, const Tensor& grad) {
        Tensor* gx = g.grad_buffer(x);
        if (!gx) return;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            auto dst = gx->row(rows[i]);
            auto src = grad.row(i);
            for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
        }
    });
}

Var replace_rows(Var x, std::vector<std::size_t> rows, Var row_value) {
    const Tensor& xv = x.value();
    const Tensor& rv = row_value.value();
    if (rv.size() != xv.cols()) throw std::invalid_argument("replace_rows: row width mismatch");
    Tensor out = xv;
    std::vector<char> replaced(xv.rows(), 0);
    for (std::size_t r : rows) {
        if (r >= xv.rows()) throw std::out_of_range("replace_rows: row index out of range");
        std::copy(rv.values().begin(), rv.values().end(), out.row(r).begin());
        replaced[r] = 1;
    }
    return graph_of(x).record(std::move(out), {x, row_value},
                              [x, row_value, replaced = std::move(replaced)](Graph& g, const Tensor& grad) {
                                  Tensor* gx = g.grad_buffer(x);
                                  Tensor* gr = g.grad_buffer(row_value);
                                  for (std::size_t r = 0; r < replaced.size(); ++r) {
                                      auto src = grad.row(r);
                                      if (replaced[r]) {
                                          if (gr)
                                              for (std::size_t c = 0; c < src.size(); ++c) (*gr)[c] += src[c];
                                      } else if (gx) {
                                          auto dst = gx->row(r);
                                          for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                                      }
                                  }
                              });
}

} // namespace tsmoe::ops
