#include "mpq/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mpq {

const char* fisher_mode_name(FisherMode m) {
    // External name for the expected mode is "true", matching the usual
    // empirical-vs-true Fisher terminology.
    return m == FisherMode::empirical ? "empirical" : "true";
}

FisherMode fisher_mode_from_name(const std::string& s) {
    if (s == "empirical") return FisherMode::empirical;
    if (s == "true" || s == "expected") return FisherMode::expected;
    throw std::runtime_error("fisher_mode_from_name: unknown mode " + s);
}

namespace {

// Position of a layer's weight matrix within collect_params order.
size_t weight_param_index(int layer_id) {
    static const int kOffsets[4] = {2, 4, 8, 10};  // qkv, proj, fc1, fc2
    int block = layer_id / 4;
    int ordinal = layer_id % 4;
    return 2 + static_cast<size_t>(block) * 12 + kOffsets[ordinal];
}

double grad_sq_sum(const Matrix& g) {
    double s = 0.0;
    for (double v : g.data) s += v * v;
    return s;
}

std::vector<double> softmax_row(const Matrix& logits) {
    std::vector<double> p(logits.cols);
    double mx = logits(0, 0);
    for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, logits(0, j));
    double sum = 0.0;
    for (int j = 0; j < logits.cols; ++j) {
        p[j] = std::exp(logits(0, j) - mx);
        sum += p[j];
    }
    for (double& v : p) v /= sum;
    return p;
}

}  // namespace

std::vector<FisherEstimate> fisher_traces(const ToyViT& m, const Batch& data, FisherMode mode,
                                          Rng& rng, int label_samples) {
    if (data.size() == 0) throw std::runtime_error("fisher_traces: empty data");
    if (label_samples < 0) throw std::runtime_error("fisher_traces: bad label_samples");
    int L = m.num_layers();
    std::vector<double> acc(L, 0.0);

    for (size_t si = 0; si < data.size(); ++si) {
        Batch one;
        one.inputs.push_back(data.inputs[si]);
        one.labels.push_back(data.labels[si]);
        Tape t;
        TapeGraph g = build_tape(t, m, one);

        // weight of each class label in the squared-gradient average
        std::vector<double> class_weight(m.cfg.num_classes, 0.0);
        if (mode == FisherMode::empirical) {
            class_weight[data.labels[si]] = 1.0;
        } else {
            std::vector<double> p = softmax_row(t.val(g.logits[0]));
            if (label_samples == 0) {
                class_weight = p;  // exact expectation over y ~ p(y|x)
            } else {
                for (int s = 0; s < label_samples; ++s) {
                    double u = rng.uniform01();
                    double cum = 0.0;
                    int y = m.cfg.num_classes - 1;
                    for (int c = 0; c < m.cfg.num_classes; ++c) {
                        cum += p[c];
                        if (u < cum) {
                            y = c;
                            break;
                        }
                    }
                    class_weight[y] += 1.0 / label_samples;
                }
            }
        }

        for (int c = 0; c < m.cfg.num_classes; ++c) {
            if (class_weight[c] == 0.0) continue;
            int loss_c = (mode == FisherMode::empirical && c == data.labels[si])
                             ? g.per_sample_nll[0]
                             : t.nll(g.logits[0], {c});
            t.backward(loss_c);
            for (int l = 0; l < L; ++l)
                acc[l] += class_weight[c] * grad_sq_sum(t.grad(g.param_ids[weight_param_index(l)]));
        }
    }

    std::vector<FisherEstimate> out;
    for (int l = 0; l < L; ++l) {
        FisherEstimate e;
        e.layer_id = l;
        e.trace = acc[l] / static_cast<double>(data.size());
        e.num_samples = static_cast<long long>(data.size());
        e.mode = mode;
        out.push_back(e);
    }
    return out;
}

FisherEstimate fisher_trace(const ToyViT& m, int layer_id, const Batch& data, FisherMode mode,
                            Rng& rng, int label_samples) {
    auto all = fisher_traces(m, data, mode, rng, label_samples);
    if (layer_id < 0 || layer_id >= static_cast<int>(all.size()))
        throw std::runtime_error("fisher_trace: bad layer id");
    return all[layer_id];
}

double hessian_trace_fd(ToyViT& m, int layer_id, const Batch& data, double rel_step) {
    if (layer_id < 0 || layer_id >= m.num_layers())
        throw std::runtime_error("hessian_trace_fd: bad layer id");
    Matrix& w = m.layers[layer_id].weight;
    double l0 = loss_eval(m, data);
    double trace = 0.0;
    for (size_t j = 0; j < w.size(); ++j) {
        double orig = w.data[j];
        double h = rel_step * (std::abs(orig) + 1.0);
        w.data[j] = orig + h;
        double lp = loss_eval(m, data);
        w.data[j] = orig - h;
        double lm = loss_eval(m, data);
        w.data[j] = orig;
        trace += (lp - 2.0 * l0 + lm) / (h * h);
    }
    return trace;
}

TypeScales calibrate_type_scales(const ToyViT& m, const Batch& calib, const ActCache& acts,
                                 const std::vector<FisherEstimate>& traces, int mu, int beta,
                                 Rng& rng, double alpha_floor) {
    int n_blocks = m.cfg.blocks;
    if (mu < 1 || mu > n_blocks) throw std::runtime_error("calibrate_type_scales: mu out of range");
    if (beta < 1 || beta >= 32) throw std::runtime_error("calibrate_type_scales: beta out of range");
    if (static_cast<int>(traces.size()) != m.num_layers())
        throw std::runtime_error("calibrate_type_scales: trace count mismatch");
    if (alpha_floor < 0) throw std::runtime_error("calibrate_type_scales: negative alpha floor");

    TypeScales ts;
    ts.mu = mu;
    ts.beta = beta;
    std::vector<int> blocks(n_blocks);
    std::iota(blocks.begin(), blocks.end(), 0);
    shuffle(blocks, rng);
    blocks.resize(mu);
    std::sort(blocks.begin(), blocks.end());
    ts.sampled_blocks = blocks;

    double baseline = evaluate(m, calib);
    std::vector<int> full(m.num_layers(), 32);
    QuantizedModel qm = quantize_model(m, full, acts);

    for (int kind = 0; kind < 4; ++kind) {
        double drop_sum = 0.0, trace_sum = 0.0;
        for (int b : blocks) {
            int layer_id = 4 * b + kind;
            qm.set_bits(layer_id, beta);
            double acc = qm.accuracy(calib);
            qm.set_bits(layer_id, 32);
            drop_sum += std::max(0.0, baseline - acc);
            trace_sum += traces[layer_id].trace;
        }
        ts.avg_drop[kind] = drop_sum / mu;
        ts.mean_trace[kind] = trace_sum / mu;
        ts.alpha[kind] = (ts.avg_drop[kind] > 0.0 && ts.mean_trace[kind] > 0.0)
                             ? ts.avg_drop[kind] / ts.mean_trace[kind]
                             : alpha_floor;
    }
    return ts;
}

SensitivityProfile score(const std::vector<FisherEstimate>& traces, const TypeScales& scales,
                         const ToyViT& m) {
    if (static_cast<int>(traces.size()) != m.num_layers())
        throw std::runtime_error("score: trace count mismatch");
    SensitivityProfile p;
    for (const auto& l : m.layers) {
        LayerScore s;
        s.layer_id = l.layer_id;
        s.block = l.block_idx;
        s.kind = l.kind;
        s.c = l.param_count();
        s.trace = traces[l.layer_id].trace;
        s.alpha = scales.alpha[kind_ordinal(l.kind)];
        s.omega = s.alpha * s.trace;
        p.layers.push_back(s);
    }
    return p;
}

std::vector<double> sweep_single_layer(const ToyViT& m, const Batch& data, int bit) {
    if (bit < 1) throw std::runtime_error("sweep_single_layer: bits must be >= 1");
    double baseline = evaluate(m, data);
    ActCache acts = collect_activations(m, data);
    std::vector<int> full(m.num_layers(), 32);
    QuantizedModel qm = quantize_model(m, full, acts);
    std::vector<double> drops(m.num_layers(), 0.0);
    for (int l = 0; l < m.num_layers(); ++l) {
        qm.set_bits(l, bit);
        drops[l] = baseline - qm.accuracy(data);
        qm.set_bits(l, 32);
    }
    return drops;
}

nlohmann::ordered_json profile_to_json(const SensitivityProfile& p) {
    nlohmann::ordered_json j;
    j["schema"] = "sensitivity_profile/1";
    auto arr = nlohmann::ordered_json::array();
    for (const auto& l : p.layers)
        arr.push_back({{"layer_id", l.layer_id},
                       {"block", l.block},
                       {"kind", kind_name(l.kind)},
                       {"c", l.c},
                       {"trace", l.trace},
                       {"alpha", l.alpha},
                       {"omega", l.omega}});
    j["layers"] = arr;
    return j;
}

SensitivityProfile profile_from_json(const nlohmann::json& j) {
    SensitivityProfile p;
    for (const auto& e : j.at("layers")) {
        LayerScore s;
        s.layer_id = e.at("layer_id").get<int>();
        s.block = e.at("block").get<int>();
        s.kind = kind_from_name(e.at("kind").get<std::string>());
        s.c = e.at("c").get<long long>();
        s.trace = e.at("trace").get<double>();
        s.alpha = e.at("alpha").get<double>();
        s.omega = e.at("omega").get<double>();
        p.layers.push_back(s);
    }
    return p;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw std::runtime_error("spearman: need two same-length vectors");
    auto ranks = [](const std::vector<double>& v) {
        size_t n = v.size();
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), size_t{0});
        std::sort(idx.begin(), idx.end(), [&](size_t i, size_t j) { return v[i] < v[j]; });
        std::vector<double> r(n);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            double avg = 0.5 * (i + j) + 1.0;  // average rank, 1-based
            for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    std::vector<double> ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= ra.size();
    mb /= rb.size();
    double cov = 0, va = 0, vb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return 0.0;
    return cov / std::sqrt(va * vb);
}

}  // namespace mpq
