#pragma once

#include <string>
#include <vector>

#include "mpq/checkpoint.hpp"
#include "mpq/refiner.hpp"

namespace mpq {

// Synthetic token-classification task: every token of a class-k example is
// the planted class pattern plus isotropic Gaussian noise, so the signal is
// position-free and survives mean pooling. Splits are disjoint index ranges
// over one sequentially generated sample stream.
struct TaskConfig {
    int num_classes = 4;
    int tokens = 8;
    int in_dim = 8;
    int train_n = 2048;
    int calib_n = 256;  // S, the sample-set size
    int test_n = 512;
    double pattern_sd = 0.5;
    double noise_sd = 1.0;
};

Dataset gen_task(Rng& rng, const TaskConfig& tc);

// Whole-run configuration. The task's tokens/in_dim/num_classes mirror the
// model config; config_from_json keeps them in sync and validate() rejects
// mismatches.
struct RunConfig {
    unsigned long long seed = 0;
    ModelConfig model;
    TaskConfig task;
    TrainConfig train;
    std::string fisher_mode = "true";
    int label_samples = 0;  // 0: exact expectation over classes
    std::vector<int> bit_set = {2, 3, 4};
    std::string b_t = "3";
    double gamma = 15.0;
    int mu = 0;   // sampled blocks for type scaling; 0 selects all N
    int beta = 1; // probe bit-width for type scaling; 1 tracks low-bit damage best
    int max_refine_iters = 0;  // 0 selects one iteration per layer
    std::string report_path;      // written by run_pipeline when nonempty
    std::string checkpoint_path;  // saved by run_pipeline when nonempty
    std::string load_model;       // checkpoint to load instead of training
    bool emit_timings = false;    // timings break byte-determinism; off by default
};

void validate_config(const RunConfig& cfg);
nlohmann::ordered_json config_to_json(const RunConfig& cfg);
// Strict parse: unknown keys are validation errors. Missing keys keep defaults.
RunConfig config_from_json(const nlohmann::json& j);

// Deterministic substream ids forked from the root seed. Listed here so every
// entry point draws the same randomness for the same work.
enum class Stream : unsigned long long {
    task = 0,
    init = 1,
    train = 2,
    fisher = 3,
    type_scales = 4,
    aux = 5,  // free stream for tests and one-off tools
};

Rng fork_stream(unsigned long long seed, Stream s);

struct TrainedToy {
    ToyViT model;
    Dataset data;
};

// gen_task + init + train with the documented substreams; errors when test
// accuracy lands below train.accuracy_threshold, naming config remedies.
TrainedToy train_toy(const RunConfig& cfg);

// All 4N layers at the same width, ranges from calib, accuracy on test.
double run_uniform_baseline(const ToyViT& m, int bits, const Batch& calib, const Batch& test);

// Full pipeline: train/load, baseline accuracy, type scales, per-layer scores,
// exact bit assignment, quantize, iterative refinement, final evaluation.
// Returns the run report; any stage failure is rethrown with a stage tag.
nlohmann::ordered_json run_pipeline(const RunConfig& cfg);

}  // namespace mpq
