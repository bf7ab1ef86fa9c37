// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include "tsmoe/errors.hpp"
#include "tsmoe/ops.hpp"
#include "tsmoe/rng.hpp"

namespace tsmoe {

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
    if (k == 0 || k > scores.size()) throw std::invalid_argument("top-k needs 1 <= k <= number of scores");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + std::ptrdiff_t(k), idx.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    });
    idx.resize(k);
    return idx;
}

namespace {

std::vector<double> softmax(std::span<const double> v) {
    const double mx = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        total += out[i];
    }
    for (double& x : out) x /= total;
    return out;
}

double euclidean(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

} // namespace

GateDecision gate_from_logits(std::span<const double> logits, std::size_t k) {
    GateDecision d;
    d.selected = top_k_indices(logits, k);
    std::vector<double> kept(k);
    for (std::size_t i = 0; i < k; ++i) kept[i] = logits[d.selected[i]];
    d.weights = softmax(kept);
    d.dense_probs = softmax(logits);
    return d;
}

GateDecision linear_gate(std::span<const double> token, const Tensor& gate_weights, std::size_t k) {
    if (gate_weights.rank() != 2 || gate_weights.rows() != token.size()) {
        throw std::invalid_argument("linear_gate: gate weights " + shape_string(gate_weights.shape()) +
                                    " do not match token width " + std::to_string(token.size()));
    }
    const std::size_t m = gate_weights.cols();
    std::vector<double> logits(m, 0.0);
    for (std::size_t d = 0; d < token.size(); ++d) {
        for (std::size_t e = 0; e < m; ++e) logits[e] += token[d] * gate_weights.at(d, e);
    }
    return gate_from_logits(logits, k);
}

GateDecision cluster_gate(std::span<const double> token, const CentroidSet& centroids, std::size_t k) {
    const Tensor& c = centroids.centroids;
    if (c.cols() != token.size()) throw std::invalid_argument("cluster_gate: centroid width mismatch");
    std::vector<double> logits(c.rows());
    for (std::size_t e = 0; e < c.rows(); ++e) logits[e] = -euclidean(token, c.row(e));
    return gate_from_logits(logits, k);
}

double load_balance_loss(const std::vector<GateDecision>& decisions, std::size_t n_experts) {
    if (decisions.empty()) throw std::invalid_argument("load_balance_loss: empty batch");
    std::vector<double> share(n_experts, 0.0), prob(n_experts, 0.0);
    const double t = double(decisions.size());
    for (const auto& d : decisions) {
        if (d.dense_probs.size() != n_experts) throw std::invalid_argument("load_balance_loss: expert count mismatch");
        const auto top = top_k_indices(d.dense_probs, 1).front();
        share[top] += 1.0;
        for (std::size_t i = 0; i < n_experts; ++i) prob[i] += d.dense_probs[i];
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < n_experts; ++i) loss += (share[i] / t) * (prob[i] / t);
    return double(n_experts) * loss;
}

// ---------------------------------------------------------------------------

RoutedWeights topk_softmax(Var logits, std::size_t k) {
    const Tensor& lv = logits.value();
    const std::size_t rows = lv.rows();
    const std::size_t m = lv.cols();
    if (k == 0 || k > m) throw std::invalid_argument("topk_softmax: need 1 <= k <= experts");
    RoutedWeights routed;
    routed.selected.resize(rows);
    Tensor out(Shape{rows, m}, 0.0);
    std::uint64_t digest = 0x51ed270b27f4a5c3ULL;
    double margin = std::numeric_limits<double>::infinity();
    std::vector<double> kept(k);
    for (std::size_t r = 0; r < rows; ++r) {
        auto row = lv.row(r);
        auto sel = top_k_indices(row, k);
        for (std::size_t i = 0; i < k; ++i) {
            kept[i] = row[sel[i]];
            digest = mix_seed(digest ^ (sel[i] + 1 + (r << 20)));
        }
        for (std::size_t i = 0; i + 1 < k; ++i) margin = std::min(margin, kept[i] - kept[i + 1]);
        if (k < m) {
            double best_rest = -std::numeric_limits<double>::infinity();
            for (std::size_t e = 0; e < m; ++e) {
                if (std::find(sel.begin(), sel.end(), e) == sel.end()) best_rest = std::max(best_rest, row[e]);
            }
            margin = std::min(margin, kept[k - 1] - best_rest);
        }
        const auto w = softmax(kept);
        for (std::size_t i = 0; i < k; ++i) out.at(r, sel[i]) = w[i];
        routed.selected[r] = std::move(sel);
    }
    logits.graph()->note_selection(digest, margin);
    Tensor weights = out;
    routed.weights = logits.graph()->record(
        std::move(out), {logits},
        [logits, weights = std::move(weights), selected = routed.selected](Graph& g, const Tensor& grad) {
            Tensor* gl = g.grad_buffer(logits);
            if (!gl) return;
            for (std::size_t r = 0; r < selected.size(); ++r) {
                double dot = 0.0;
                for (std::size_t e : selected[r]) dot += weights.at(r, e) * grad.at(r, e);
                for (std::size_t e : selected[r]) gl->at(r, e) += weights.at(r, e) * (grad.at(r, e) - dot);
            }
        });
    return routed;
}

Var negative_distances(Var tokens, const Tensor& centroids) {
    const Tensor& xv = tokens.value();
    if (centroids.rank() != 2 || centroids.cols() != xv.cols()) {
        throw std::invalid_argument("negative_distances: centroid width mismatch");
    }
    const std::size_t rows = xv.rows();
    const std::size_t m = centroids.rows();
    Tensor out(Shape{rows, m});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t e = 0; e < m; ++e) out.at(r, e) = -euclidean(xv.row(r), centroids.row(e));
    }
    Tensor dist = out;
    return tokens.graph()->record(std::move(out), {tokens},
                                  [tokens, centroids, dist = std::move(dist)](Graph& g, const Tensor& grad) {
                                      Tensor* gx = g.grad_buffer(tokens);
                                      if (!gx) return;
                                      const Tensor& xv = tokens.value();
                                      for (std::size_t r = 0; r < xv.rows(); ++r) {
                                          auto x = xv.row(r);
                                          auto out_row = gx->row(r);
                                          for (std::size_t e = 0; e < centroids.rows(); ++e) {
                                              const double d = -dist.at(r, e);
                                              if (d <= 0.0) continue;
                                              const double f = -grad.at(r, e) / d;
                                              auto c = centroids.row(e);
                                              for (std::size_t j = 0; j < x.size(); ++j) out_row[j] += f * (x[j] - c[j]);
                                          }
                                      }
                                  });
}

Var moe_combine(Var weights, const std::vector<std::size_t>& expert_ids, const std::vector<Var>& expert_outputs,
                const std::vector<std::vector<std::size_t>>& rows) {
    if (expert_ids.size() != expert_outputs.size() || rows.size() != expert_outputs.size()) {
        throw std::invalid_argument("moe_combine: experts, outputs and rows must align");
    }
    const Tensor& wv = weights.value();
    const std::size_t t = wv.rows();
    std::size_t width = 0;
    for (const Var& y : expert_outputs) width = y.value().cols();
    Tensor out(Shape{t, width}, 0.0);
    for (std::size_t e = 0; e < expert_outputs.size(); ++e) {
        const Tensor& y = expert_outputs[e].value();
        if (y.rows() != rows[e].size() || y.cols() != width) throw std::invalid_argument("moe_combine: bad expert output");
        for (std::size_t k = 0; k < rows[e].size(); ++k) {
            const std::size_t r = rows[e][k];
            const double w = wv.at(r, expert_ids[e]);
            auto dst = out.row(r);
            auto src = y.row(k);
            for (std::size_t c = 0; c < width; ++c) dst[c] += w * src[c];
        }
    }
    std::vector<Var> parents{weights};
    parents.insert(parents.end(), expert_outputs.begin(), expert_outputs.end());
    return weights.graph()->record(
        std::move(out), parents,
        [weights, expert_ids, expert_outputs, rows](Graph& g, const Tensor& grad) {
            Tensor* gw = g.grad_buffer(weights);
            const Tensor& wv = weights.value();
            for (std::size_t e = 0; e < expert_outputs.size(); ++e) {
                Tensor* gy = g.grad_buffer(expert_outputs[e]);
                const Tensor& y = expert_outputs[e].value();
                for (std::size_t k = 0; k < rows[e].size(); ++k) {
                    const std::size_t r = rows[e][k];
                    auto gr = grad.row(r);
                    const double w = wv.at(r, expert_ids[e]);
                    if (gy) {
                        auto dst = gy->row(k);
                        for (std::size_t c = 0; c < gr.size(); ++c) dst[c] += w * gr[c];
                    }
                    if (gw) {
                        auto src = y.row(k);
                        double dot = 0.0;
                        for (std::size_t c = 0; c < gr.size(); ++c) dot += src[c] * gr[c];
                        gw->at(r, expert_ids[e]) += dot;
                    }
                }
            }
        });
}

Var load_balance(Var dense_probs, const std::vector<char>& token_valid) {
    const Tensor& pv = dense_probs.value();
    const std::size_t rows = pv.rows();
    const std::size_t m = pv.cols();
    if (token_valid.size() != rows) throw std::invalid_argument("load_balance: validity mask size mismatch");
    std::vector<double> share(m, 0.0), mean_prob(m, 0.0);
    double count = 0.0;
    std::uint64_t digest = 0x2545f4914f6cdd1dULL;
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < rows; ++r) {
        if (!token_valid[r]) continue;
        count += 1.0;
        auto row = pv.row(r);
        const auto order = top_k_indices(row, std::min<std::size_t>(2, m));
        share[order[0]] += 1.0;
        digest = mix_seed(digest ^ (order[0] + 1 + (r << 20)));
        if (order.size() > 1) margin = std::min(margin, row[order[0]] - row[order[1]]);
        for (std::size_t e = 0; e < m; ++e) mean_prob[e] += row[e];
    }
    if (count == 0.0) throw std::invalid_argument("load_balance: empty batch");
    dense_probs.graph()->note_selection(digest, margin);
    double loss = 0.0;
    for (std::size_t e = 0; e < m; ++e) {
        share[e] /= count;
        loss += share[e] * (mean_prob[e] / count);
    }
    loss *= double(m);
    return dense_probs.graph()->record(
        Tensor::scalar(loss), {dense_probs},
        [dense_probs, share = std::move(share), token_valid, count, m](Graph& g, const Tensor& grad) {
            Tensor* gp = g.grad_buffer(dense_probs);
            if (!gp) return;
            for (std::size_t r = 0; r < token_valid.size(); ++r) {
                if (!token_valid[r]) continue;
                for (std::size_t e = 0; e < m; ++e) gp->at(r, e) += grad[0] * double(m) * share[e] / count;
            }
        });
}

Var expert_ffn(Var x, Var w1, Var b1, Var w2, Var b2) {
    return ops::add_bias(ops::matmul(ops::gelu(ops::add_bias(ops::matmul(x, w1), b1)), w2), b2);
}

std::string to_string(GateKind kind) {
    switch (kind) {
    case GateKind::Linear: return "linear";
    case GateKind::LinearBalance: return "linear+balance";
    case GateKind::Cluster: return "cluster";
    }
    return "unknown";
}

GateKind gate_kind_from_string(const std::string& name) {
    for (auto k : {GateKind::Linear, GateKind::LinearBalance, GateKind::Cluster}) {
        if (to_string(k) == name) return k;
    }
    throw ConfigError("unknown gate kind: " + name);
}

MoeLayerOutput moe_forward(const ParamVars& params, const std::string& prefix, Var gate_input, Var expert_input,
                           std::size_t n_experts, std::size_t top_k, GateKind gate, const CentroidSet* centroids,
                           const std::vector<char>& token_valid) {
    Var logits;
    if (gate == GateKind::Cluster) {
        if (!centroids) throw ConfigError("cluster gate for " + prefix + " has no centroids");
        if (centroids->experts() != n_experts) throw ConfigError("centroid count does not match expert count");
        logits = negative_distances(gate_input, centroids->centroids);
    } else {
        logits = ops::matmul(gate_input, params.at(prefix + "gate.w"));
    }
    MoeLayerOutput out;
    out.routed = topk_softmax(logits, top_k);
    out.dense_probs = ops::softmax_rows(logits);
    out.balance_loss = load_balance(out.dense_probs, token_valid);

    std::vector<std::vector<std::size_t>> rows(n_experts);
    for (std::size_t r = 0; r < out.routed.selected.size(); ++r) {
        for (std::size_t e : out.routed.selected[r]) rows[e].push_back(r);
    }
    std::vector<std::size_t> ids;
    std::vector<Var> outputs;
    std::vector<std::vector<std::size_t>> used_rows;
    for (std::size_t e = 0; e < n_experts; ++e) {
        if (rows[e].empty()) continue;
        const std::string ep = prefix + "experts." + std::to_string(e) + ".";
        Var x = ops::gather_rows(expert_input, rows[e]);
        outputs.push_back(expert_ffn(x, params.at(ep + "w1"), params.at(ep + "b1"), params.at(ep + "w2"),
                                     params.at(ep + "b2")));
        ids.push_back(e);
        used_rows.push_back(std::move(rows[e]));
    }
    out.output = moe_combine(out.routed.weights, ids, outputs, used_rows);
    return out;
}

// ---------------------------------------------------------------------------

namespace {

std::size_t count_distinct_rows(const Tensor& vectors, std::size_t limit) {
    std::set<std::vector<double>> seen;
    for (std::size_t r = 0; r < limit; ++r) {
        auto row = vectors.row(r);
        seen.emplace(row.begin(), row.end());
    }
    return seen.size();
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

std::pair<std::size_t, double> nearest(std::span<const double> x, const Tensor& centroids) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
        const double d = squared_distance(x, centroids.row(c));
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return {best, best_d};
}

} // namespace

double kmeans_inertia(const Tensor& vectors, const Tensor& centroids) {
    double total = 0.0;
    for (std::size_t r = 0; r < vectors.rows(); ++r) total += nearest(vectors.row(r), centroids).second;
    return total;
}

CentroidSet fit_centroids(const Tensor& vectors, const KMeansOptions& options) {
    const std::size_t n = vectors.rank() == 2 ? vectors.rows() : 0;
    const std::size_t k = options.n_clusters;
    if (k == 0) throw ConfigError("k-means needs at least one cluster");
    if (n == 0) throw ConfigError("k-means needs at least one vector");
    const std::size_t dim = vectors.cols();

    std::size_t buffer = std::min(n, std::max<std::size_t>(options.batch_size, 16 * k));
    if (count_distinct_rows(vectors, buffer) < k) {
        buffer = n;
        if (count_distinct_rows(vectors, n) < k) {
            throw ConfigError("k-means needs at least " + std::to_string(k) + " distinct vectors");
        }
    }

    Rng rng = make_rng(options.seed, "kmeans");
    Tensor centroids(Shape{k, dim});
    // k-means++ seeding on the buffer.
    std::vector<double> closest(buffer, std::numeric_limits<double>::infinity());
    std::size_t pick = uniform_index(rng, buffer);
    for (std::size_t c = 0; c < k; ++c) {
        auto src = vectors.row(pick);
        std::copy(src.begin(), src.end(), centroids.row(c).begin());
        double total = 0.0;
        for (std::size_t i = 0; i < buffer; ++i) {
            closest[i] = std::min(closest[i], squared_distance(vectors.row(i), centroids.row(c)));
            total += closest[i];
        }
        if (c + 1 == k) break;
        const double target = uniform01(rng) * total;
        double acc = 0.0;
        pick = buffer;
        for (std::size_t i = 0; i < buffer; ++i) {
            if (closest[i] <= 0.0) continue;
            acc += closest[i];
            if (acc > target) {
                pick = i;
                break;
            }
        }
        if (pick == buffer) {
            for (std::size_t i = buffer; i-- > 0;) {
                if (closest[i] > 0.0) {
                    pick = i;
                    break;
                }
            }
        }
    }

    std::vector<double> counts(k, 0.0);
    std::vector<std::size_t> batch;
    std::vector<std::size_t> assignment;
    for (std::size_t it = 0; it < options.iterations; ++it) {
        batch.clear();
        if (n <= options.batch_size) {
            for (std::size_t i = 0; i < n; ++i) batch.push_back(i);
        } else {
            for (std::size_t i = 0; i < options.batch_size; ++i) batch.push_back(uniform_index(rng, n));
        }
        assignment.resize(batch.size());
        std::vector<double> gap(batch.size());
        std::vector<char> hit(k, 0);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const auto [c, d] = nearest(vectors.row(batch[i]), centroids);
            assignment[i] = c;
            gap[i] = d;
            hit[c] = 1;
        }
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const std::size_t c = assignment[i];
            counts[c] += 1.0;
            const double lr = 1.0 / counts[c];
            auto x = vectors.row(batch[i]);
            auto cen = centroids.row(c);
            for (std::size_t j = 0; j < dim; ++j) cen[j] += lr * (x[j] - cen[j]);
        }
        // Clusters that have never received a point restart at the farthest batch point.
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] > 0.0 || hit[c]) continue;
            const auto far = std::max_element(gap.begin(), gap.end()) - gap.begin();
            if (gap[std::size_t(far)] <= 0.0) continue;
            auto src = vectors.row(batch[std::size_t(far)]);
            std::copy(src.begin(), src.end(), centroids.row(c).begin());
            gap[std::size_t(far)] = 0.0;
        }
    }

    CentroidSet set;
    set.centroids = std::move(centroids);
    set.iterations = options.iterations;
    set.seed = options.seed;
    return set;
}

} // namespace tsmoe
