#pragma once

#include <utility>
#include <vector>

#include "mpq/model.hpp"

namespace mpq {

// Asymmetric uniform quantizer over [r_min, r_max] at B bits:
//   s = (r_max - r_min)/(2^B - 1),  z = r_min/s + 2^(B-1)
//   quantize:   q = floor(x/s - z + 0.5) clamped to [-2^(B-1), 2^(B-1)-1]
//   dequantize: s*(q + z), with the extreme codes snapped to r_min / r_max so
//               grid endpoints are exact in floating point.
// bits >= 32 marks a full-precision passthrough.
struct QuantParams {
    int bits = 8;
    double r_min = 0.0, r_max = 0.0;
    double scale = 0.0, offset = 0.0;  // s, z
    long long q_min = 0, q_max = 0;

    bool passthrough() const { return bits >= 32; }
};

QuantParams make_quant_params(int bits, double r_min, double r_max);

// Running elementwise min/max over the stream; a degenerate (min == max)
// range widens to (v - eps, v + eps) with eps = max(|v|, 1) * 2^-20.
std::pair<double, double> calibrate_range(const std::vector<const Matrix*>& stream);

struct IntMatrix {
    int rows = 0, cols = 0;
    std::vector<long long> data;
};

long long quantize_scalar(double x, const QuantParams& p);
double fake_quant_scalar(double x, const QuantParams& p);

IntMatrix quantize(const Matrix& m, const QuantParams& p);
Matrix dequantize(const IntMatrix& q, const QuantParams& p);
Matrix fake_quant(const Matrix& m, const QuantParams& p);

// Relative reconstruction error sum(|fq(W) fq(X)^T - W X^T|_F^2) over the
// sample list divided by sum(|W X^T|_F^2), where X rows are observations of
// the layer input. Throws when the denominator is zero.
double recon_loss(const Matrix& w, const std::vector<const Matrix*>& xs,
                  const QuantParams& wp, const QuantParams& xp);

// Full-precision layer inputs collected over a calibration batch.
struct ActCache {
    std::vector<std::vector<Matrix>> inputs;  // [layer_id][sample]
};

ActCache collect_activations(const ToyViT& m, const Batch& calib);

// A bit allocation applied to a model: per-layer weight/activation quant
// params at the allocated width plus precomputed fake-quant weights. The
// calibration ranges are bit-independent, so set_bits only re-derives params.
struct QuantizedModel {
    const ToyViT* base = nullptr;
    std::vector<int> bits;
    std::vector<QuantParams> weight_q, act_q;
    std::vector<Matrix> qweight;  // empty when passthrough
    std::vector<std::pair<double, double>> weight_range, act_range;

    void set_bits(int layer_id, int b);
    ForwardHooks hooks() const;
    double accuracy(const Batch& b) const;
};

QuantizedModel quantize_model(const ToyViT& m, const std::vector<int>& bits,
                              const ActCache& calib_acts);
QuantizedModel quantize_model(const ToyViT& m, const std::vector<int>& bits,
                              const Batch& calib);

}  // namespace mpq
