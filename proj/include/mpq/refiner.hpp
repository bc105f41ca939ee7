#pragma once

#include <optional>
#include <vector>

#include "mpq/allocator.hpp"
#include "mpq/expectations.hpp"

namespace mpq {

// Relative reconstruction error of one layer at its current bit-width,
// batch-averaged as sum of numerators over sum of denominators.
struct ReconMeasurement {
    int layer_id = 0;
    int bits = 0;
    double loss = 0.0;
};

ReconMeasurement measure_recon(const QuantizedModel& qm, int layer_id, const ActCache& calib);

// Estimated reconstruction losses one bit down / up from the measured width,
// scaled by the precomputed expectation ratios: loss_down = loss * k(B-1)/k(B),
// loss_up = loss * k(B+1)/k(B). gain is the estimated reduction from +1 bit,
// degradation the estimated increase from -1 bit; both are nonnegative when
// k decreases in B.
struct NeighborEstimate {
    bool down_ok = false;  // B-1 >= 1
    bool up_ok = false;    // B+1 < 32
    double loss_down = 0.0;
    double loss_up = 0.0;
    double gain = 0.0;
    double degradation = 0.0;
};

NeighborEstimate estimate_neighbors(const ReconMeasurement& m, const ReconRatioTable& table);

// One budget-preserving +1/-1 bit exchange between two layers.
struct SwapCandidate {
    int up_layer = -1;
    int down_layer = -1;
    double gain = 0.0;
    double degradation = 0.0;
    double net_estimate = 0.0;       // gain - degradation
    long long budget_delta = 0;      // c_up - c_down
};

struct RefineState {
    QuantizedModel* qm = nullptr;    // mutated in place by refine
    IlpInstance inst;                // budget contract and bit range
    std::vector<double> accuracy_history;  // on the sample set
    int iteration = 0;
    int max_iters = 0;
};

// u maximizes estimated gain among layers below max bits, d minimizes
// estimated degradation among layers above min bits with d != u. Pairs whose
// post-swap assignment breaks the budget are skipped in ranked order (next
// best d, then next best u). Ties break toward the lowest layer_id. Returns
// nullopt when no feasible pair exists.
std::optional<SwapCandidate> select_swap(const RefineState& state,
                                         const std::vector<ReconMeasurement>& measurements,
                                         const ReconRatioTable& table);

struct RefineRecord {
    int iteration = 0;
    int up_layer = -1;
    int down_layer = -1;
    double est_gain = 0.0;
    double est_degradation = 0.0;
    double accuracy_before = 0.0;
    double accuracy_after = 0.0;
    bool accepted = false;
};

struct RefineResult {
    std::vector<int> bits;
    double initial_accuracy = 0.0;  // on the sample set
    double final_accuracy = 0.0;
    std::vector<double> accuracy_history;
    std::vector<RefineRecord> trace;
    int iterations = 0;
    std::string stop_reason;  // "no_candidate", "no_improvement", "max_iters"
};

// Alg.-style loop: measure all layers, pick a swap, apply it (the calibration
// ranges come from full-precision activations, so only the two touched layers'
// quant params are re-derived), evaluate accuracy on the sample set. A swap
// that fails to strictly improve accuracy is reverted and the loop stops.
// max_iters <= 0 selects the default of one iteration per quantizable layer.
RefineResult refine(RefineState& state, const ActCache& calib, const Batch& sample_set,
                    const ReconRatioTable& table, int max_iters);

nlohmann::ordered_json refine_to_json(const RefineResult& r);

}  // namespace mpq
