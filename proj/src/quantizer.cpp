#include "mpq/quantizer.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace mpq {

QuantParams make_quant_params(int bits, double r_min, double r_max) {
    if (bits < 1) throw std::runtime_error("make_quant_params: bits must be >= 1");
    if (!(r_min < r_max)) throw std::runtime_error("make_quant_params: need r_min < r_max");
    QuantParams p;
    p.bits = bits;
    p.r_min = r_min;
    p.r_max = r_max;
    if (p.passthrough()) return p;
    double levels = std::ldexp(1.0, bits) - 1.0;  // 2^B - 1
    p.scale = (r_max - r_min) / levels;
    p.offset = r_min / p.scale + std::ldexp(1.0, bits - 1);
    p.q_min = -(1LL << (bits - 1));
    p.q_max = (1LL << (bits - 1)) - 1;
    return p;
}

std::pair<double, double> calibrate_range(const std::vector<const Matrix*>& stream) {
    bool seen = false;
    double lo = 0.0, hi = 0.0;
    for (const Matrix* m : stream) {
        for (double v : m->data) {
            if (!seen) {
                lo = hi = v;
                seen = true;
            } else {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        }
    }
    if (!seen) throw std::runtime_error("calibrate_range: empty stream");
    if (lo == hi) {
        double eps = std::max(std::abs(lo), 1.0) * 0x1.0p-20;
        lo -= eps;
        hi += eps;
    }
    return {lo, hi};
}

long long quantize_scalar(double x, const QuantParams& p) {
    long long q = static_cast<long long>(std::floor(x / p.scale - p.offset + 0.5));
    if (q < p.q_min) q = p.q_min;
    if (q > p.q_max) q = p.q_max;
    return q;
}

namespace {

double dequantize_scalar(long long q, const QuantParams& p) {
    // Extreme codes snap to the calibrated bounds so endpoints are exact.
    if (q == p.q_min) return p.r_min;
    if (q == p.q_max) return p.r_max;
    return p.scale * (static_cast<double>(q) + p.offset);
}

}  // namespace

double fake_quant_scalar(double x, const QuantParams& p) {
    if (p.passthrough()) return x;
    return dequantize_scalar(quantize_scalar(x, p), p);
}

IntMatrix quantize(const Matrix& m, const QuantParams& p) {
    if (p.passthrough()) throw std::runtime_error("quantize: passthrough params");
    IntMatrix q;
    q.rows = m.rows;
    q.cols = m.cols;
    q.data.resize(m.size());
    for (size_t i = 0; i < m.size(); ++i) q.data[i] = quantize_scalar(m.data[i], p);
    return q;
}

Matrix dequantize(const IntMatrix& q, const QuantParams& p) {
    if (p.passthrough()) throw std::runtime_error("dequantize: passthrough params");
    Matrix m(q.rows, q.cols);
    for (size_t i = 0; i < q.data.size(); ++i) {
        if (q.data[i] < p.q_min || q.data[i] > p.q_max)
            throw std::runtime_error("dequantize: code out of range");
        m.data[i] = dequantize_scalar(q.data[i], p);
    }
    return m;
}

Matrix fake_quant(const Matrix& m, const QuantParams& p) {
    if (p.passthrough()) return m;
    Matrix out(m.rows, m.cols);
    for (size_t i = 0; i < m.size(); ++i)
        out.data[i] = dequantize_scalar(quantize_scalar(m.data[i], p), p);
    return out;
}

double recon_loss(const Matrix& w, const std::vector<const Matrix*>& xs,
                  const QuantParams& wp, const QuantParams& xp) {
    if (xs.empty()) throw std::runtime_error("recon_loss: no activations");
    Matrix wq = fake_quant(w, wp);
    double num = 0.0, den = 0.0;
    for (const Matrix* x : xs) {
        Matrix ref = matmul_nt(*x, w);
        Matrix got = matmul_nt(fake_quant(*x, xp), wq);
        num += frobenius_norm_sq(sub(got, ref));
        den += frobenius_norm_sq(ref);
    }
    if (den == 0.0) throw std::runtime_error("recon_loss: degenerate layer (|WX| = 0)");
    return num / den;
}

ActCache collect_activations(const ToyViT& m, const Batch& calib) {
    if (calib.size() == 0) throw std::runtime_error("collect_activations: empty batch");
    ActCache cache;
    cache.inputs.resize(m.layers.size());
    for (auto& v : cache.inputs) v.reserve(calib.size());
    std::vector<Matrix> per_layer;
    for (size_t i = 0; i < calib.size(); ++i) {
        forward_logits(m, calib.inputs[i], nullptr, &per_layer);
        for (size_t l = 0; l < per_layer.size(); ++l)
            cache.inputs[l].push_back(std::move(per_layer[l]));
    }
    return cache;
}

void QuantizedModel::set_bits(int layer_id, int b) {
    if (b < 1) throw std::runtime_error("set_bits: bits must be >= 1");
    if (layer_id < 0 || layer_id >= static_cast<int>(bits.size()))
        throw std::runtime_error("set_bits: layer_id out of range");
    bits[layer_id] = b;
    if (b >= 32) {
        weight_q[layer_id] = QuantParams{};
        weight_q[layer_id].bits = b;
        act_q[layer_id] = weight_q[layer_id];
        qweight[layer_id] = Matrix();
        return;
    }
    auto [wlo, whi] = weight_range[layer_id];
    auto [alo, ahi] = act_range[layer_id];
    weight_q[layer_id] = make_quant_params(b, wlo, whi);
    act_q[layer_id] = make_quant_params(b, alo, ahi);
    qweight[layer_id] = fake_quant(base->layers[layer_id].weight, weight_q[layer_id]);
}

ForwardHooks QuantizedModel::hooks() const {
    ForwardHooks h;
    h.weight_override.resize(bits.size());
    for (size_t i = 0; i < bits.size(); ++i)
        if (bits[i] < 32) h.weight_override[i] = qweight[i];
    h.input_filter = [this](int layer_id, const Matrix& x) {
        if (bits[layer_id] >= 32) return x;
        return fake_quant(x, act_q[layer_id]);
    };
    return h;
}

double QuantizedModel::accuracy(const Batch& b) const {
    ForwardHooks h = hooks();
    return evaluate(*base, b, &h);
}

QuantizedModel quantize_model(const ToyViT& m, const std::vector<int>& bits,
                              const ActCache& calib_acts) {
    if (bits.size() != m.layers.size())
        throw std::runtime_error("quantize_model: allocation must cover all layers");
    if (calib_acts.inputs.size() != m.layers.size() || calib_acts.inputs[0].empty())
        throw std::runtime_error("quantize_model: calibration cache mismatch");
    QuantizedModel qm;
    qm.base = &m;
    qm.bits.assign(bits.size(), 32);
    qm.weight_q.resize(bits.size());
    qm.act_q.resize(bits.size());
    qm.qweight.resize(bits.size());
    qm.weight_range.resize(bits.size());
    qm.act_range.resize(bits.size());
    for (size_t i = 0; i < bits.size(); ++i) {
        qm.weight_range[i] = calibrate_range({&m.layers[i].weight});
        std::vector<const Matrix*> stream;
        stream.reserve(calib_acts.inputs[i].size());
        for (const Matrix& x : calib_acts.inputs[i]) stream.push_back(&x);
        qm.act_range[i] = calibrate_range(stream);
        qm.set_bits(static_cast<int>(i), bits[i]);
    }
    return qm;
}

QuantizedModel quantize_model(const ToyViT& m, const std::vector<int>& bits,
                              const Batch& calib) {
    return quantize_model(m, bits, collect_activations(m, calib));
}

}  // namespace mpq
