#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mpq/autodiff.hpp"
#include "mpq/matrix.hpp"
#include "mpq/rng.hpp"

namespace mpq {

// Ordinal order (qkv, proj, fc1, fc2) is load-bearing: layer_id = 4*block + ordinal.
enum class LayerKind { qkv = 0, proj = 1, fc1 = 2, fc2 = 3 };

const char* kind_name(LayerKind k);
LayerKind kind_from_name(const std::string& s);
inline int kind_ordinal(LayerKind k) { return static_cast<int>(k); }

// One quantizable linear layer. Weight is out_dim x in_dim; the forward pass
// computes x * W^T + b for row-major token matrices x. param_count covers
// weight elements only; biases stay full precision and are never budgeted.
struct LayerRecord {
    int layer_id = 0;
    int block_idx = 0;
    LayerKind kind = LayerKind::qkv;
    Matrix weight;  // out_dim x in_dim
    Matrix bias;    // 1 x out_dim
    long long param_count() const {
        return static_cast<long long>(weight.rows) * weight.cols;
    }
};

struct BlockParams {
    Matrix ln1_gamma, ln1_beta;  // 1 x d
    Matrix ln2_gamma, ln2_beta;  // 1 x d
};

struct ModelConfig {
    int blocks = 3;       // N
    int dim = 8;          // d, divisible by heads
    int heads = 2;        // h
    int tokens = 8;       // L
    int num_classes = 4;  // K
    int in_dim = 8;       // token feature width before the embed projection
};

// Pre-norm transformer classifier: per block LN -> qkv attention -> proj
// (+residual), LN -> fc1 -> gelu -> fc2 (+residual); final LN, mean-pool over
// tokens, linear head. Embed, head, norms and all biases are full precision;
// the 4N linear layers in `layers` are the only quantization targets.
struct ToyViT {
    ModelConfig cfg;
    Matrix embed;       // d x in_dim
    Matrix embed_bias;  // 1 x d
    std::vector<LayerRecord> layers;  // 4N, indexed by layer_id
    std::vector<BlockParams> blocks;
    Matrix final_gamma, final_beta;  // 1 x d
    Matrix head;       // K x d
    Matrix head_bias;  // 1 x K

    LayerRecord& layer(int block_idx, LayerKind kind);
    const LayerRecord& layer(int block_idx, LayerKind kind) const;
    int num_layers() const { return static_cast<int>(layers.size()); }
    long long total_quantizable_params() const;
};

// All-zero weights except unit norm gammas; checkpoint loading fills it in.
ToyViT model_skeleton(const ModelConfig& cfg);

ToyViT init_model(const ModelConfig& cfg, Rng& rng);

struct Batch {
    std::vector<Matrix> inputs;  // each tokens x in_dim
    std::vector<int> labels;
    size_t size() const { return inputs.size(); }
};

struct Dataset {
    Batch train, calib, test;
};

// Per-layer substitution applied during evaluation. The quantizer fills these
// to run fake-quantized forwards through the same evaluation code; an empty
// hook set is the full-precision path.
struct ForwardHooks {
    // Per layer_id replacement weight; empty Matrix means keep the original.
    std::vector<Matrix> weight_override;
    // Applied to the layer's input right before the matmul; identity if unset.
    std::function<Matrix(int layer_id, const Matrix&)> input_filter;
};

// Logits for one example (1 x K). When layer_inputs is non-null it receives
// the pre-filter input matrix of each of the 4N layers, indexed by layer_id.
Matrix forward_logits(const ToyViT& m, const Matrix& x, const ForwardHooks* hooks = nullptr,
                      std::vector<Matrix>* layer_inputs = nullptr);

// Stacked logits for a batch (n x K).
Matrix forward_batch(const ToyViT& m, const Batch& b, const ForwardHooks* hooks = nullptr);

// Mean NLL with a numerically stable log-softmax.
double nll_loss(const Matrix& logits, const std::vector<int>& labels);

double loss_eval(const ToyViT& m, const Batch& b, const ForwardHooks* hooks = nullptr);

// Fraction of correct argmax predictions; ties pick the lowest class index.
double evaluate(const ToyViT& m, const Batch& b, const ForwardHooks* hooks = nullptr);

// Tape forward over a batch. param_ids mirrors collect_params order; per_sample_nll
// and logits have one node per example; loss is their mean.
struct TapeGraph {
    std::vector<int> param_ids;
    std::vector<int> logits;
    std::vector<int> per_sample_nll;
    int loss = -1;
};

// Stable parameter order: embed, embed_bias, per block (ln1_gamma, ln1_beta,
// qkv.w, qkv.b, proj.w, proj.b, ln2_gamma, ln2_beta, fc1.w, fc1.b, fc2.w,
// fc2.b), final_gamma, final_beta, head, head_bias. The checkpoint manifest
// and the Adam state use the same order.
std::vector<Matrix*> collect_params(ToyViT& m);
std::vector<const Matrix*> collect_params(const ToyViT& m);

TapeGraph build_tape(Tape& t, const ToyViT& m, const Batch& b);

// Gradients of mean NLL for every parameter, in collect_params order.
std::vector<Matrix> backward(const ToyViT& m, const Batch& b);

struct TrainConfig {
    int epochs = 160;
    double lr = 3e-3;
    int batch_size = 32;
    double accuracy_threshold = 0.85;  // on the test split, checked by the pipeline
};

// Adam on all parameters; deterministic minibatch order from rng.
void train_model(ToyViT& m, const Batch& train, const TrainConfig& cfg, Rng& rng);

}  // namespace mpq
