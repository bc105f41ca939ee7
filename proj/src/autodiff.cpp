#include "mpq/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace mpq {

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu_scalar(double x) {
    double u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad_scalar(double x) {
    double u = kGeluC * (x + kGeluA * x * x * x);
    double t = std::tanh(u);
    double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

int Tape::push(Node n) {
    nodes.push_back(std::move(n));
    return static_cast<int>(nodes.size()) - 1;
}

int Tape::leaf(const Matrix& v) {
    Node n;
    n.op = Op::leaf;
    n.val = v;
    return push(std::move(n));
}

int Tape::matmul(int a, int b) {
    Node n;
    n.op = Op::matmul;
    n.a = a;
    n.b = b;
    n.val = mpq::matmul(nodes[a].val, nodes[b].val);
    return push(std::move(n));
}

int Tape::matmul_nt(int a, int b) {
    Node n;
    n.op = Op::matmul_nt;
    n.a = a;
    n.b = b;
    n.val = mpq::matmul_nt(nodes[a].val, nodes[b].val);
    return push(std::move(n));
}

int Tape::add(int a, int b) {
    Node n;
    n.op = Op::add;
    n.a = a;
    n.b = b;
    n.val = mpq::add(nodes[a].val, nodes[b].val);
    return push(std::move(n));
}

int Tape::add_rowvec(int a, int rowvec) {
    const Matrix& x = nodes[a].val;
    const Matrix& r = nodes[rowvec].val;
    if (r.rows != 1 || r.cols != x.cols)
        throw std::runtime_error("add_rowvec: row vector shape mismatch");
    Node n;
    n.op = Op::add_rowvec;
    n.a = a;
    n.b = rowvec;
    n.val = x;
    for (int i = 0; i < x.rows; ++i)
        for (int j = 0; j < x.cols; ++j) n.val(i, j) += r(0, j);
    return push(std::move(n));
}

int Tape::scale(int a, double k) {
    Node n;
    n.op = Op::scale;
    n.a = a;
    n.k = k;
    n.val = scaled(nodes[a].val, k);
    return push(std::move(n));
}

int Tape::slice_cols(int a, int c0, int c1) {
    const Matrix& x = nodes[a].val;
    if (c0 < 0 || c1 > x.cols || c0 >= c1)
        throw std::runtime_error("slice_cols: bad bounds");
    Node n;
    n.op = Op::slice_cols;
    n.a = a;
    n.i0 = c0;
    n.i1 = c1;
    n.val = Matrix(x.rows, c1 - c0);
    for (int i = 0; i < x.rows; ++i)
        for (int j = c0; j < c1; ++j) n.val(i, j - c0) = x(i, j);
    return push(std::move(n));
}

int Tape::concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) throw std::runtime_error("concat_cols: no parts");
    int rows = nodes[parts[0]].val.rows;
    int cols = 0;
    for (int p : parts) {
        if (nodes[p].val.rows != rows) throw std::runtime_error("concat_cols: row mismatch");
        cols += nodes[p].val.cols;
    }
    Node n;
    n.op = Op::concat_cols;
    n.srcs = parts;
    n.val = Matrix(rows, cols);
    int off = 0;
    for (int p : parts) {
        const Matrix& x = nodes[p].val;
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < x.cols; ++j) n.val(i, off + j) = x(i, j);
        off += x.cols;
    }
    return push(std::move(n));
}

int Tape::row_softmax(int a) {
    const Matrix& x = nodes[a].val;
    Node n;
    n.op = Op::row_softmax;
    n.a = a;
    n.val = Matrix(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        double mx = x(i, 0);
        for (int j = 1; j < x.cols; ++j) mx = std::max(mx, x(i, j));
        double sum = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            double e = std::exp(x(i, j) - mx);
            n.val(i, j) = e;
            sum += e;
        }
        for (int j = 0; j < x.cols; ++j) n.val(i, j) /= sum;
    }
    return push(std::move(n));
}

int Tape::layer_norm(int a, int gamma, int beta) {
    const Matrix& x = nodes[a].val;
    const Matrix& g = nodes[gamma].val;
    const Matrix& bt = nodes[beta].val;
    if (g.rows != 1 || g.cols != x.cols || bt.rows != 1 || bt.cols != x.cols)
        throw std::runtime_error("layer_norm: affine shape mismatch");
    Node n;
    n.op = Op::layer_norm;
    n.a = a;
    n.b = gamma;
    n.c = beta;
    n.val = Matrix(x.rows, x.cols);
    // cache holds xhat (rows x cols) plus inv_std per row in an extra column.
    n.cache = Matrix(x.rows, x.cols + 1);
    for (int i = 0; i < x.rows; ++i) {
        double mu = 0.0;
        for (int j = 0; j < x.cols; ++j) mu += x(i, j);
        mu /= x.cols;
        double var = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            double d = x(i, j) - mu;
            var += d * d;
        }
        var /= x.cols;
        double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        n.cache(i, x.cols) = inv;
        for (int j = 0; j < x.cols; ++j) {
            double xh = (x(i, j) - mu) * inv;
            n.cache(i, j) = xh;
            n.val(i, j) = g(0, j) * xh + bt(0, j);
        }
    }
    return push(std::move(n));
}

int Tape::gelu(int a) {
    Node n;
    n.op = Op::gelu;
    n.a = a;
    n.val = nodes[a].val;
    for (auto& v : n.val.data) v = gelu_scalar(v);
    return push(std::move(n));
}

int Tape::mean_rows(int a) {
    const Matrix& x = nodes[a].val;
    Node n;
    n.op = Op::mean_rows;
    n.a = a;
    n.val = Matrix(1, x.cols);
    for (int i = 0; i < x.rows; ++i)
        for (int j = 0; j < x.cols; ++j) n.val(0, j) += x(i, j);
    for (int j = 0; j < x.cols; ++j) n.val(0, j) /= x.rows;
    return push(std::move(n));
}

int Tape::nll(int logits, const std::vector<int>& labels) {
    const Matrix& x = nodes[logits].val;
    if (static_cast<int>(labels.size()) != x.rows)
        throw std::runtime_error("nll: one label per logits row required");
    Node n;
    n.op = Op::nll;
    n.a = logits;
    n.labels = labels;
    n.cache = Matrix(x.rows, x.cols);  // softmax probabilities
    double total = 0.0;
    for (int i = 0; i < x.rows; ++i) {
        int y = labels[i];
        if (y < 0 || y >= x.cols) throw std::runtime_error("nll: label out of range");
        double mx = x(i, 0);
        for (int j = 1; j < x.cols; ++j) mx = std::max(mx, x(i, j));
        double sum = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            double e = std::exp(x(i, j) - mx);
            n.cache(i, j) = e;
            sum += e;
        }
        for (int j = 0; j < x.cols; ++j) n.cache(i, j) /= sum;
        total += (std::log(sum) + mx) - x(i, y);
    }
    n.val = Matrix(1, 1);
    n.val(0, 0) = total / x.rows;
    return push(std::move(n));
}

void Tape::backward(int root) {
    if (nodes[root].val.rows != 1 || nodes[root].val.cols != 1)
        throw std::runtime_error("backward: root must be scalar");
    for (auto& n : nodes) n.grad = Matrix(n.val.rows, n.val.cols);
    nodes[root].grad(0, 0) = 1.0;

    for (int id = root; id >= 0; --id) {
        Node& n = nodes[id];
        const Matrix& g = n.grad;
        switch (n.op) {
            case Op::leaf:
                break;
            case Op::matmul: {
                add_inplace(nodes[n.a].grad, mpq::matmul_nt(g, nodes[n.b].val));
                add_inplace(nodes[n.b].grad, mpq::matmul_tn(nodes[n.a].val, g));
                break;
            }
            case Op::matmul_nt: {
                add_inplace(nodes[n.a].grad, mpq::matmul(g, nodes[n.b].val));
                add_inplace(nodes[n.b].grad, mpq::matmul_tn(g, nodes[n.a].val));
                break;
            }
            case Op::add: {
                add_inplace(nodes[n.a].grad, g);
                add_inplace(nodes[n.b].grad, g);
                break;
            }
            case Op::add_rowvec: {
                add_inplace(nodes[n.a].grad, g);
                Matrix& rg = nodes[n.b].grad;
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < g.cols; ++j) rg(0, j) += g(i, j);
                break;
            }
            case Op::scale: {
                add_inplace(nodes[n.a].grad, scaled(g, n.k));
                break;
            }
            case Op::slice_cols: {
                Matrix& ag = nodes[n.a].grad;
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < g.cols; ++j) ag(i, n.i0 + j) += g(i, j);
                break;
            }
            case Op::concat_cols: {
                int off = 0;
                for (int p : n.srcs) {
                    Matrix& pg = nodes[p].grad;
                    for (int i = 0; i < pg.rows; ++i)
                        for (int j = 0; j < pg.cols; ++j) pg(i, j) += g(i, off + j);
                    off += pg.cols;
                }
                break;
            }
            case Op::row_softmax: {
                const Matrix& y = n.val;
                Matrix& ag = nodes[n.a].grad;
                for (int i = 0; i < y.rows; ++i) {
                    double dot = 0.0;
                    for (int j = 0; j < y.cols; ++j) dot += g(i, j) * y(i, j);
                    for (int j = 0; j < y.cols; ++j)
                        ag(i, j) += y(i, j) * (g(i, j) - dot);
                }
                break;
            }
            case Op::layer_norm: {
                const Matrix& gam = nodes[n.b].val;
                Matrix& ag = nodes[n.a].grad;
                Matrix& gg = nodes[n.b].grad;
                Matrix& bg = nodes[n.c].grad;
                int cols = n.val.cols;
                for (int i = 0; i < n.val.rows; ++i) {
                    double inv = n.cache(i, cols);
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (int j = 0; j < cols; ++j) {
                        double xh = n.cache(i, j);
                        double dxh = g(i, j) * gam(0, j);
                        gg(0, j) += g(i, j) * xh;
                        bg(0, j) += g(i, j);
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                    }
                    mean_dxh /= cols;
                    mean_dxh_xh /= cols;
                    for (int j = 0; j < cols; ++j) {
                        double xh = n.cache(i, j);
                        double dxh = g(i, j) * gam(0, j);
                        ag(i, j) += inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
                break;
            }
            case Op::gelu: {
                const Matrix& x = nodes[n.a].val;
                Matrix& ag = nodes[n.a].grad;
                for (size_t i = 0; i < x.size(); ++i)
                    ag.data[i] += g.data[i] * gelu_grad_scalar(x.data[i]);
                break;
            }
            case Op::mean_rows: {
                Matrix& ag = nodes[n.a].grad;
                double inv = 1.0 / ag.rows;
                for (int i = 0; i < ag.rows; ++i)
                    for (int j = 0; j < ag.cols; ++j) ag(i, j) += g(0, j) * inv;
                break;
            }
            case Op::nll: {
                Matrix& ag = nodes[n.a].grad;
                double go = g(0, 0) / ag.rows;
                for (int i = 0; i < ag.rows; ++i) {
                    for (int j = 0; j < ag.cols; ++j) ag(i, j) += go * n.cache(i, j);
                    ag(i, n.labels[i]) -= go;
                }
                break;
            }
        }
    }
}

}  // namespace mpq
