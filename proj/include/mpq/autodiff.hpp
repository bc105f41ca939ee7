#pragma once

#include <vector>

#include "mpq/matrix.hpp"

namespace mpq {

// Reverse-mode tape over Matrix values, sized for the toy transformer: nodes
// are appended during the forward pass and replayed backwards once per loss.
// Node ids are indices into the tape; parents always precede children, so a
// single reverse sweep from the root visits every contributing node.
enum class Op {
    leaf,
    matmul,       // a * b
    matmul_nt,    // a * b^T
    add,          // a + b (same shape)
    add_rowvec,   // a + broadcast row b (1 x cols)
    scale,        // a * const
    slice_cols,   // a[:, i0:i1)
    concat_cols,  // [a0 | a1 | ...]
    row_softmax,  // softmax per row
    layer_norm,   // per row: gamma * (x - mu)/sqrt(var + eps) + beta
    gelu,         // tanh-approximation gelu, elementwise
    mean_rows,    // column means -> 1 x cols
    nll,          // mean over rows of (logsumexp(row) - row[label]) -> 1 x 1
};

struct Node {
    Op op = Op::leaf;
    Matrix val;
    Matrix grad;
    int a = -1, b = -1, c = -1;  // parent ids (layer_norm uses all three)
    std::vector<int> srcs;       // concat_cols parents
    int i0 = 0, i1 = 0;          // slice bounds
    double k = 0.0;              // scale factor
    std::vector<int> labels;     // nll class labels, one per logits row
    Matrix cache;                // op-specific forward intermediates
};

struct Tape {
    std::vector<Node> nodes;

    int leaf(const Matrix& v);
    int matmul(int a, int b);
    int matmul_nt(int a, int b);
    int add(int a, int b);
    int add_rowvec(int a, int rowvec);
    int scale(int a, double k);
    int slice_cols(int a, int c0, int c1);
    int concat_cols(const std::vector<int>& parts);
    int row_softmax(int a);
    int layer_norm(int a, int gamma, int beta);
    int gelu(int a);
    int mean_rows(int a);
    int nll(int logits, const std::vector<int>& labels);

    const Matrix& val(int id) const { return nodes[id].val; }
    const Matrix& grad(int id) const { return nodes[id].grad; }

    // Zeroes every adjoint, then accumulates d(root)/d(node) into each node's
    // grad. root must be 1x1. May be called repeatedly with different roots.
    void backward(int root);

    void clear() { nodes.clear(); }

  private:
    int push(Node n);
};

constexpr double kLayerNormEps = 1e-5;

double gelu_scalar(double x);
double gelu_grad_scalar(double x);

}  // namespace mpq
