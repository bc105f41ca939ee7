#include "mpq/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mpq {

const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::qkv: return "qkv";
        case LayerKind::proj: return "proj";
        case LayerKind::fc1: return "fc1";
        case LayerKind::fc2: return "fc2";
    }
    throw std::runtime_error("kind_name: bad kind");
}

LayerKind kind_from_name(const std::string& s) {
    if (s == "qkv") return LayerKind::qkv;
    if (s == "proj") return LayerKind::proj;
    if (s == "fc1") return LayerKind::fc1;
    if (s == "fc2") return LayerKind::fc2;
    throw std::runtime_error("kind_from_name: unknown kind " + s);
}

LayerRecord& ToyViT::layer(int block_idx, LayerKind kind) {
    return layers[4 * block_idx + kind_ordinal(kind)];
}

const LayerRecord& ToyViT::layer(int block_idx, LayerKind kind) const {
    return layers[4 * block_idx + kind_ordinal(kind)];
}

long long ToyViT::total_quantizable_params() const {
    long long s = 0;
    for (const auto& l : layers) s += l.param_count();
    return s;
}

ToyViT model_skeleton(const ModelConfig& cfg) {
    if (cfg.heads < 1 || cfg.dim % cfg.heads != 0)
        throw std::runtime_error("model_skeleton: dim must be divisible by heads");
    if (cfg.blocks < 1 || cfg.tokens < 1 || cfg.num_classes < 2 || cfg.in_dim < 1)
        throw std::runtime_error("model_skeleton: bad config");

    ToyViT m;
    m.cfg = cfg;
    int d = cfg.dim;
    m.embed = Matrix(d, cfg.in_dim);
    m.embed_bias = Matrix(1, d);
    for (int bi = 0; bi < cfg.blocks; ++bi) {
        BlockParams bp;
        bp.ln1_gamma = Matrix(1, d);
        bp.ln1_beta = Matrix(1, d);
        bp.ln2_gamma = Matrix(1, d);
        bp.ln2_beta = Matrix(1, d);
        for (int j = 0; j < d; ++j) {
            bp.ln1_gamma(0, j) = 1.0;
            bp.ln2_gamma(0, j) = 1.0;
        }
        m.blocks.push_back(std::move(bp));

        auto make_layer = [&](LayerKind kind, int out, int in) {
            LayerRecord l;
            l.block_idx = bi;
            l.kind = kind;
            l.layer_id = 4 * bi + kind_ordinal(kind);
            l.weight = Matrix(out, in);
            l.bias = Matrix(1, out);
            m.layers.push_back(std::move(l));
        };
        make_layer(LayerKind::qkv, 3 * d, d);
        make_layer(LayerKind::proj, d, d);
        make_layer(LayerKind::fc1, 4 * d, d);
        make_layer(LayerKind::fc2, d, 4 * d);
    }
    m.final_gamma = Matrix(1, d);
    m.final_beta = Matrix(1, d);
    for (int j = 0; j < d; ++j) m.final_gamma(0, j) = 1.0;
    m.head = Matrix(cfg.num_classes, d);
    m.head_bias = Matrix(1, cfg.num_classes);
    return m;
}

ToyViT init_model(const ModelConfig& cfg, Rng& rng) {
    constexpr double kInitSd = 0.02;
    ToyViT m = model_skeleton(cfg);
    auto fill = [&](Matrix& w) {
        for (auto& v : w.data) v = kInitSd * rng.normal();
    };
    fill(m.embed);
    for (auto& l : m.layers) fill(l.weight);
    fill(m.head);
    return m;
}

namespace {

// Shared structure of the evaluation forward pass. linear() lets the caller
// interpose weight overrides and input filters per quantizable layer.
struct EvalCtx {
    const ToyViT& m;
    const ForwardHooks* hooks;
    std::vector<Matrix>* layer_inputs;

    Matrix linear(const Matrix& x, const LayerRecord& l) const {
        if (layer_inputs) (*layer_inputs)[l.layer_id] = x;
        const Matrix* w = &l.weight;
        const Matrix* in = &x;
        Matrix filtered;
        if (hooks) {
            if (!hooks->weight_override.empty() &&
                hooks->weight_override[l.layer_id].size() > 0)
                w = &hooks->weight_override[l.layer_id];
            if (hooks->input_filter) {
                filtered = hooks->input_filter(l.layer_id, x);
                in = &filtered;
            }
        }
        Matrix out = matmul_nt(*in, *w);
        for (int i = 0; i < out.rows; ++i)
            for (int j = 0; j < out.cols; ++j) out(i, j) += l.bias(0, j);
        return out;
    }
};

Matrix layer_norm_eval(const Matrix& x, const Matrix& gamma, const Matrix& beta) {
    Matrix out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        double mu = 0.0;
        for (int j = 0; j < x.cols; ++j) mu += x(i, j);
        mu /= x.cols;
        double var = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            double dv = x(i, j) - mu;
            var += dv * dv;
        }
        var /= x.cols;
        double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        for (int j = 0; j < x.cols; ++j)
            out(i, j) = gamma(0, j) * (x(i, j) - mu) * inv + beta(0, j);
    }
    return out;
}

void row_softmax_inplace(Matrix& x) {
    for (int i = 0; i < x.rows; ++i) {
        double mx = x(i, 0);
        for (int j = 1; j < x.cols; ++j) mx = std::max(mx, x(i, j));
        double sum = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            x(i, j) = std::exp(x(i, j) - mx);
            sum += x(i, j);
        }
        for (int j = 0; j < x.cols; ++j) x(i, j) /= sum;
    }
}

Matrix slice_cols_eval(const Matrix& x, int c0, int c1) {
    Matrix out(x.rows, c1 - c0);
    for (int i = 0; i < x.rows; ++i)
        for (int j = c0; j < c1; ++j) out(i, j - c0) = x(i, j);
    return out;
}

}  // namespace

Matrix forward_logits(const ToyViT& m, const Matrix& x, const ForwardHooks* hooks,
                      std::vector<Matrix>* layer_inputs) {
    const ModelConfig& cfg = m.cfg;
    if (x.rows != cfg.tokens || x.cols != cfg.in_dim)
        throw std::runtime_error("forward_logits: input shape mismatch");
    if (layer_inputs) layer_inputs->assign(m.layers.size(), Matrix());

    EvalCtx ctx{m, hooks, layer_inputs};
    int d = cfg.dim;
    int dh = d / cfg.heads;
    double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix e = matmul_nt(x, m.embed);
    for (int i = 0; i < e.rows; ++i)
        for (int j = 0; j < e.cols; ++j) e(i, j) += m.embed_bias(0, j);

    for (int bi = 0; bi < cfg.blocks; ++bi) {
        const BlockParams& bp = m.blocks[bi];
        Matrix u = layer_norm_eval(e, bp.ln1_gamma, bp.ln1_beta);
        Matrix qkv = ctx.linear(u, m.layer(bi, LayerKind::qkv));
        Matrix q = slice_cols_eval(qkv, 0, d);
        Matrix k = slice_cols_eval(qkv, d, 2 * d);
        Matrix v = slice_cols_eval(qkv, 2 * d, 3 * d);
        Matrix attn_out(cfg.tokens, d);
        for (int h = 0; h < cfg.heads; ++h) {
            Matrix qh = slice_cols_eval(q, h * dh, (h + 1) * dh);
            Matrix kh = slice_cols_eval(k, h * dh, (h + 1) * dh);
            Matrix vh = slice_cols_eval(v, h * dh, (h + 1) * dh);
            Matrix scores = matmul_nt(qh, kh);
            for (auto& s : scores.data) s *= att_scale;
            row_softmax_inplace(scores);
            Matrix oh = matmul(scores, vh);
            for (int i = 0; i < cfg.tokens; ++i)
                for (int j = 0; j < dh; ++j) attn_out(i, h * dh + j) = oh(i, j);
        }
        Matrix p = ctx.linear(attn_out, m.layer(bi, LayerKind::proj));
        add_inplace(e, p);

        Matrix u2 = layer_norm_eval(e, bp.ln2_gamma, bp.ln2_beta);
        Matrix f = ctx.linear(u2, m.layer(bi, LayerKind::fc1));
        for (auto& fv : f.data) fv = gelu_scalar(fv);
        Matrix f2 = ctx.linear(f, m.layer(bi, LayerKind::fc2));
        add_inplace(e, f2);
    }

    Matrix ln = layer_norm_eval(e, m.final_gamma, m.final_beta);
    Matrix pooled(1, d);
    for (int i = 0; i < ln.rows; ++i)
        for (int j = 0; j < d; ++j) pooled(0, j) += ln(i, j);
    for (int j = 0; j < d; ++j) pooled(0, j) /= ln.rows;

    Matrix logits = matmul_nt(pooled, m.head);
    for (int j = 0; j < logits.cols; ++j) logits(0, j) += m.head_bias(0, j);
    return logits;
}

Matrix forward_batch(const ToyViT& m, const Batch& b, const ForwardHooks* hooks) {
    Matrix out(static_cast<int>(b.size()), m.cfg.num_classes);
    for (size_t i = 0; i < b.size(); ++i) {
        Matrix l = forward_logits(m, b.inputs[i], hooks);
        for (int j = 0; j < l.cols; ++j) out(static_cast<int>(i), j) = l(0, j);
    }
    return out;
}

double nll_loss(const Matrix& logits, const std::vector<int>& labels) {
    if (static_cast<int>(labels.size()) != logits.rows)
        throw std::runtime_error("nll_loss: label count mismatch");
    double total = 0.0;
    for (int i = 0; i < logits.rows; ++i) {
        int y = labels[i];
        if (y < 0 || y >= logits.cols) throw std::runtime_error("nll_loss: label out of range");
        double mx = logits(i, 0);
        for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, logits(i, j));
        double sum = 0.0;
        for (int j = 0; j < logits.cols; ++j) sum += std::exp(logits(i, j) - mx);
        total += (std::log(sum) + mx) - logits(i, y);
    }
    return total / logits.rows;
}

double loss_eval(const ToyViT& m, const Batch& b, const ForwardHooks* hooks) {
    if (b.size() == 0) throw std::runtime_error("loss_eval: empty batch");
    return nll_loss(forward_batch(m, b, hooks), b.labels);
}

double evaluate(const ToyViT& m, const Batch& b, const ForwardHooks* hooks) {
    if (b.size() == 0) throw std::runtime_error("evaluate: empty batch");
    long long correct = 0;
    for (size_t i = 0; i < b.size(); ++i) {
        Matrix l = forward_logits(m, b.inputs[i], hooks);
        int best = 0;
        for (int j = 1; j < l.cols; ++j)
            if (l(0, j) > l(0, best)) best = j;
        if (best == b.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(b.size());
}

std::vector<Matrix*> collect_params(ToyViT& m) {
    std::vector<Matrix*> p;
    p.push_back(&m.embed);
    p.push_back(&m.embed_bias);
    for (int bi = 0; bi < m.cfg.blocks; ++bi) {
        BlockParams& bp = m.blocks[bi];
        p.push_back(&bp.ln1_gamma);
        p.push_back(&bp.ln1_beta);
        p.push_back(&m.layer(bi, LayerKind::qkv).weight);
        p.push_back(&m.layer(bi, LayerKind::qkv).bias);
        p.push_back(&m.layer(bi, LayerKind::proj).weight);
        p.push_back(&m.layer(bi, LayerKind::proj).bias);
        p.push_back(&bp.ln2_gamma);
        p.push_back(&bp.ln2_beta);
        p.push_back(&m.layer(bi, LayerKind::fc1).weight);
        p.push_back(&m.layer(bi, LayerKind::fc1).bias);
        p.push_back(&m.layer(bi, LayerKind::fc2).weight);
        p.push_back(&m.layer(bi, LayerKind::fc2).bias);
    }
    p.push_back(&m.final_gamma);
    p.push_back(&m.final_beta);
    p.push_back(&m.head);
    p.push_back(&m.head_bias);
    return p;
}

std::vector<const Matrix*> collect_params(const ToyViT& m) {
    auto mut = collect_params(const_cast<ToyViT&>(m));
    return std::vector<const Matrix*>(mut.begin(), mut.end());
}

TapeGraph build_tape(Tape& t, const ToyViT& m, const Batch& b) {
    if (b.size() == 0) throw std::runtime_error("build_tape: empty batch");
    const ModelConfig& cfg = m.cfg;
    int d = cfg.dim;
    int dh = d / cfg.heads;
    double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    TapeGraph g;
    auto params = collect_params(m);
    for (const Matrix* pm : params) g.param_ids.push_back(t.leaf(*pm));

    // Param leaf ids keyed by position in collect_params order.
    int pi = 0;
    int embed = g.param_ids[pi++];
    int embed_bias = g.param_ids[pi++];
    struct BlockIds {
        int ln1g, ln1b, qkv_w, qkv_b, proj_w, proj_b, ln2g, ln2b, fc1_w, fc1_b, fc2_w, fc2_b;
    };
    std::vector<BlockIds> blocks;
    for (int bi = 0; bi < cfg.blocks; ++bi) {
        BlockIds ids{};
        ids.ln1g = g.param_ids[pi++];
        ids.ln1b = g.param_ids[pi++];
        ids.qkv_w = g.param_ids[pi++];
        ids.qkv_b = g.param_ids[pi++];
        ids.proj_w = g.param_ids[pi++];
        ids.proj_b = g.param_ids[pi++];
        ids.ln2g = g.param_ids[pi++];
        ids.ln2b = g.param_ids[pi++];
        ids.fc1_w = g.param_ids[pi++];
        ids.fc1_b = g.param_ids[pi++];
        ids.fc2_w = g.param_ids[pi++];
        ids.fc2_b = g.param_ids[pi++];
        blocks.push_back(ids);
    }
    int final_g = g.param_ids[pi++];
    int final_b = g.param_ids[pi++];
    int head = g.param_ids[pi++];
    int head_bias = g.param_ids[pi++];

    for (size_t si = 0; si < b.size(); ++si) {
        int x = t.leaf(b.inputs[si]);
        int e = t.add_rowvec(t.matmul_nt(x, embed), embed_bias);
        for (int bi = 0; bi < cfg.blocks; ++bi) {
            const BlockIds& ids = blocks[bi];
            int u = t.layer_norm(e, ids.ln1g, ids.ln1b);
            int qkv = t.add_rowvec(t.matmul_nt(u, ids.qkv_w), ids.qkv_b);
            int q = t.slice_cols(qkv, 0, d);
            int k = t.slice_cols(qkv, d, 2 * d);
            int v = t.slice_cols(qkv, 2 * d, 3 * d);
            std::vector<int> heads_out;
            for (int h = 0; h < cfg.heads; ++h) {
                int qh = t.slice_cols(q, h * dh, (h + 1) * dh);
                int kh = t.slice_cols(k, h * dh, (h + 1) * dh);
                int vh = t.slice_cols(v, h * dh, (h + 1) * dh);
                int scores = t.scale(t.matmul_nt(qh, kh), att_scale);
                int attn = t.row_softmax(scores);
                heads_out.push_back(t.matmul(attn, vh));
            }
            int merged = cfg.heads == 1 ? heads_out[0] : t.concat_cols(heads_out);
            int p = t.add_rowvec(t.matmul_nt(merged, ids.proj_w), ids.proj_b);
            e = t.add(e, p);

            int u2 = t.layer_norm(e, ids.ln2g, ids.ln2b);
            int f = t.gelu(t.add_rowvec(t.matmul_nt(u2, ids.fc1_w), ids.fc1_b));
            int f2 = t.add_rowvec(t.matmul_nt(f, ids.fc2_w), ids.fc2_b);
            e = t.add(e, f2);
        }
        int ln = t.layer_norm(e, final_g, final_b);
        int pooled = t.mean_rows(ln);
        int logits = t.add_rowvec(t.matmul_nt(pooled, head), head_bias);
        g.logits.push_back(logits);
        g.per_sample_nll.push_back(t.nll(logits, {b.labels[si]}));
    }

    // Mean of per-sample losses; fixed left-to-right association.
    int acc = g.per_sample_nll[0];
    for (size_t i = 1; i < g.per_sample_nll.size(); ++i)
        acc = t.add(acc, g.per_sample_nll[i]);
    g.loss = t.scale(acc, 1.0 / static_cast<double>(b.size()));
    return g;
}

std::vector<Matrix> backward(const ToyViT& m, const Batch& b) {
    Tape t;
    TapeGraph g = build_tape(t, m, b);
    t.backward(g.loss);
    std::vector<Matrix> grads;
    grads.reserve(g.param_ids.size());
    for (int id : g.param_ids) grads.push_back(t.grad(id));
    return grads;
}

void train_model(ToyViT& m, const Batch& train, const TrainConfig& cfg, Rng& rng) {
    if (train.size() == 0) throw std::runtime_error("train_model: empty training set");
    auto params = collect_params(m);
    std::vector<Matrix> mom, vel;
    for (Matrix* p : params) {
        mom.emplace_back(p->rows, p->cols);
        vel.emplace_back(p->rows, p->cols);
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    long long step = 0;

    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle(order, rng);
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            size_t stop = std::min(order.size(), start + cfg.batch_size);
            Batch mb;
            for (size_t i = start; i < stop; ++i) {
                mb.inputs.push_back(train.inputs[order[i]]);
                mb.labels.push_back(train.labels[order[i]]);
            }
            Tape t;
            TapeGraph g = build_tape(t, m, mb);
            t.backward(g.loss);
            ++step;
            double corr = std::sqrt(1.0 - std::pow(b2, step)) / (1.0 - std::pow(b1, step));
            for (size_t pi = 0; pi < params.size(); ++pi) {
                const Matrix& grad = t.grad(g.param_ids[pi]);
                Matrix& p = *params[pi];
                for (size_t j = 0; j < p.size(); ++j) {
                    double gj = grad.data[j];
                    mom[pi].data[j] = b1 * mom[pi].data[j] + (1.0 - b1) * gj;
                    vel[pi].data[j] = b2 * vel[pi].data[j] + (1.0 - b2) * gj * gj;
                    p.data[j] -= cfg.lr * corr * mom[pi].data[j] /
                                 (std::sqrt(vel[pi].data[j]) + eps);
                }
            }
        }
    }
    for (Matrix* p : params) check_finite(*p, "train_model");
}

}  // namespace mpq
