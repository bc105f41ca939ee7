#pragma once

#include <vector>

#include <json.hpp>

#include "mpq/quantizer.hpp"
#include "mpq/rng.hpp"

namespace mpq {

enum class FisherMode { empirical, expected };

const char* fisher_mode_name(FisherMode m);
FisherMode fisher_mode_from_name(const std::string& s);

struct FisherEstimate {
    int layer_id = 0;
    double trace = 0.0;  // nonnegative: mean per-sample sum of squared weight grads
    long long num_samples = 0;
    FisherMode mode = FisherMode::empirical;
};

// One backward sweep per sample computes every layer's trace at once.
// empirical: gradients at the observed labels. expected: the inner expectation
// over labels is taken against the model's own predictive distribution -
// exactly (class enumeration) when label_samples == 0, else with label_samples
// draws per example.
std::vector<FisherEstimate> fisher_traces(const ToyViT& m, const Batch& data, FisherMode mode,
                                          Rng& rng, int label_samples = 0);
FisherEstimate fisher_trace(const ToyViT& m, int layer_id, const Batch& data, FisherMode mode,
                            Rng& rng, int label_samples = 0);

// Trace of the NLL Hessian for one layer's weights via central second
// differences on the diagonal; step per entry is rel_step * (|w| + 1).
// Restores the weights it perturbs.
double hessian_trace_fd(ToyViT& m, int layer_id, const Batch& data, double rel_step = 1e-3);

struct TypeScales {
    double alpha[4] = {0, 0, 0, 0};       // per kind ordinal
    double avg_drop[4] = {0, 0, 0, 0};    // A^(t), clamped contributions
    double mean_trace[4] = {0, 0, 0, 0};  // full-precision traces of the sampled layers
    int mu = 0;
    int beta = 0;
    std::vector<int> sampled_blocks;
};

// Samples mu blocks without replacement; per kind, quantizes one layer at a
// time to beta bits (weights and activations, ranges from full-precision
// activations over calib), measures the accuracy drop on calib against the
// full-precision baseline, clamps negative drops to zero, and divides the mean
// drop by the mean full-precision trace. alpha falls back to alpha_floor when
// the mean drop or mean trace is nonpositive.
TypeScales calibrate_type_scales(const ToyViT& m, const Batch& calib, const ActCache& acts,
                                 const std::vector<FisherEstimate>& traces, int mu, int beta,
                                 Rng& rng, double alpha_floor = 1e-8);

struct LayerScore {
    int layer_id = 0;
    int block = 0;
    LayerKind kind = LayerKind::qkv;
    long long c = 0;
    double trace = 0.0;
    double alpha = 0.0;
    double omega = 0.0;  // alpha * trace
};

struct SensitivityProfile {
    std::vector<LayerScore> layers;
};

SensitivityProfile score(const std::vector<FisherEstimate>& traces, const TypeScales& scales,
                         const ToyViT& m);

// Accuracy drop on `data` from quantizing each layer alone to `bit` bits,
// in layer_id order; positive means the quantized model is worse.
std::vector<double> sweep_single_layer(const ToyViT& m, const Batch& data, int bit);

nlohmann::ordered_json profile_to_json(const SensitivityProfile& p);
SensitivityProfile profile_from_json(const nlohmann::json& j);

// Spearman rank correlation with average ranks on ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace mpq
