// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace tsmoe {
namespace {

struct RotaryTable {
    std::vector<double> cos;
    std::vector<double> sin;
};

RotaryTable rotary_table(const std::vector<double>& positions, std::size_t head_dim, double base) {
    const std::size_t half = head_dim / 2;
    RotaryTable t;
    t.cos.resize(positions.size() * half);
    t.sin.resize(positions.size() * half);
    for (std::size_t r = 0; r < positions.size(); ++r) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(base, -2.0 * double(i) / double(head_dim));
            const double angle = positions[r] * freq;
            t.cos[r * half + i] = std::cos(angle);
            t.sin[r * half + i] = std::sin(angle);
        }
    }
    return t;
}

} // namespace

Var rotary(Var x, const std::vector<double>& positions, std::size_t n_heads, double base) {
    const Tensor& xv = x.value();
    const std::size_t rows = xv.rows();
    const std::size_t width = xv.cols();
    if (positions.size() != rows) throw std::invalid_argument("rotary: one position per row required");
    if (n_heads == 0 || width % n_heads != 0 || (width / n_heads) % 2 != 0) {
        throw std::invalid_argument("rotary: head dimension must be even");
    }
    const std::size_t head_dim = width / n_heads;
    const std::size_t half = head_dim / 2;
    RotaryTable table = rotary_table(positions, head_dim, base);
    Tensor out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        auto in = xv.row(r);
        auto o = out.row(r);
        for (std::size_t h = 0; h < n_heads; ++h) {
            for (std::size_t i = 0; i < half; ++i) {
                const std::size_t a = h * head_dim + 2 * i;
                const double c = table.cos[r * half + i];
                const double s = table.sin[r * half + i];
                o[a] = in[a] * c - in[a + 1] * s;
                o[a + 1] = in[a] * s + in[a + 1] * c;
            }
        }
    }
    return x.graph()->record(std::move(out), {x},
                             [x, table = std::move(table), n_heads, head_dim, half](Graph& g, const Tensor& grad) {
                                 Tensor* gx = g.grad_buffer(x);
                                 if (!gx) return;
                                 for (std::size_t r = 0; r < grad.rows(); ++r) {
                                     auto gin = grad.row(r);
                                     auto gout = gx->row(r);
                                     for (std::size_t h = 0; h < n_heads; ++h) {
                                         for (std::size_t i = 0; i < half; ++i) {
                                             const std::size_t a = h * head_dim + 2 * i;
                                             const double c = table.cos[r * half + i];
                                             const double s = table.sin[r * half + i];
                                             gout[a] += gin[a] * c + gin[a + 1] * s;
                                             gout[a + 1] += -gin[a] * s + gin[a + 1] * c;
                                         }
                                     }
                                 }
                             });
}

Var multi_head_attention(Var q, Var k, Var v, std::shared_ptr<const AttentionLayout> layout, std::size_t n_heads) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    if (!qv.same_shape(kv) || !qv.same_shape(vv)) throw std::invalid_argument("attention: q/k/v shapes differ");
    const std::size_t rows = qv.rows();
    const std::size_t width = qv.cols();
    if (n_heads == 0 || width % n_heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
    if (layout->time_index.size() != rows || layout->key_valid.size() != rows || layout->segment_offsets.empty() ||
        layout->segment_offsets.back() != rows) {
        throw std::invalid_argument("attention: layout does not match input rows");
    }
    const std::size_t head_dim = width / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(double(head_dim));
    const std::size_t segments = layout->segment_offsets.size() - 1;

    // Attention probabilities per (segment, head), kept for the backward pass.
    std::vector<RowMatrix> probs(segments * n_heads);
    Tensor out(qv.shape());
    const auto qm = qv.matrix();
    const auto km = kv.matrix();
    const auto vm = vv.matrix();
    auto om = out.matrix();
    for (std::size_t s = 0; s < segments; ++s) {
        const std::size_t begin = layout->segment_offsets[s];
        const std::size_t n = layout->segment_offsets[s + 1] - begin;
        if (n == 0) continue;
        for (std::size_t h = 0; h < n_heads; ++h) {
            const auto qb = qm.block(Eigen::Index(begin), Eigen::Index(h * head_dim), Eigen::Index(n), Eigen::Index(head_dim));
            const auto kb = km.block(Eigen::Index(begin), Eigen::Index(h * head_dim), Eigen::Index(n), Eigen::Index(head_dim));
            const auto vb = vm.block(Eigen::Index(begin), Eigen::Index(h * head_dim), Eigen::Index(n), Eigen::Index(head_dim));
            RowMatrix scores = (qb * kb.transpose()) * inv_sqrt;
            for (std::size_t i = 0; i < n; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < n; ++j) {
                    if (layout->allowed(begin + i, begin + j)) mx = std::max(mx, scores(Eigen::Index(i), Eigen::Index(j)));
                }
                double total = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    double& sc = scores(Eigen::Index(i), Eigen::Index(j));
                    sc = layout->allowed(begin + i, begin + j) ? std::exp(sc - mx) : 0.0;
                    total += sc;
                }
                scores.row(Eigen::Index(i)) /= total;
            }
            om.block(Eigen::Index(begin), Eigen::Index(h * head_dim), Eigen::Index(n), Eigen::Index(head_dim)).noalias() =
                scores * vb;
            probs[s * n_heads + h] = std::move(scores);
        }
    }

    return q.graph()->record(
        std::move(out), {q, k, v},
        [q, k, v, layout, probs = std::move(probs), n_heads, head_dim, inv_sqrt, segments](Graph& g,
                                                                                          const Tensor& grad) {
            Tensor* gq = g.grad_buffer(q);
            Tensor* gk = g.grad_buffer(k);
            Tensor* gv = g.grad_buffer(v);
            const auto qm = q.value().matrix();
            const auto km = k.value().matrix();
            const auto vm = v.value().matrix();
            const auto gm = grad.matrix();
            for (std::size_t s = 0; s < segments; ++s) {
                const std::size_t begin = layout->segment_offsets[s];
                const std::size_t n = layout->segment_offsets[s + 1] - begin;
                if (n == 0) continue;
                const auto b = Eigen::Index(begin);
                const auto nn = Eigen::Index(n);
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const auto c0 = Eigen::Index(h * head_dim);
                    const auto hd = Eigen::Index(head_dim);
                    const RowMatrix& p = probs[s * n_heads + h];
                    const auto dout = gm.block(b, c0, nn, hd);
                    if (gv) gv->matrix().block(b, c0, nn, hd).noalias() += p.transpose() * dout;
                    if (!gq && !gk) continue;
                    RowMatrix dp = dout * vm.block(b, c0, nn, hd).transpose();
                    RowMatrix ds(nn, nn);
                    for (Eigen::Index i = 0; i < nn; ++i) {
                        const double dot = p.row(i).dot(dp.row(i));
                        ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
                    }
                    ds *= inv_sqrt;
                    if (gq) gq->matrix().block(b, c0, nn, hd).noalias() += ds * km.block(b, c0, nn, hd);
                    if (gk) gk->matrix().block(b, c0, nn, hd).noalias() += ds.transpose() * qm.block(b, c0, nn, hd);
                }
            }
        });
}

} // namespace tsmoe
