#include "mpq/expectations.hpp"

#include <cmath>
#include <stdexcept>

namespace mpq {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

double phi(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }
double Phi(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }

}  // namespace

ExpectationRow gaussian_expectations(int bits, double clip) {
    if (bits < 1) throw std::runtime_error("gaussian_expectations: bits must be >= 1");
    if (clip <= 0.0) throw std::runtime_error("gaussian_expectations: clip must be positive");
    ExpectationRow row;
    row.bits = bits;
    if (bits >= 32) return row;  // passthrough quantizer, zero error
    if (bits > 20) throw std::runtime_error("gaussian_expectations: bits > 20 not tabulated");

    QuantParams p = make_quant_params(bits, -clip, clip);

    // Cell edges: the clip bounds plus every decision boundary strictly inside.
    // Between edges the code is constant, so the error moments reduce to
    // gaussian moments M0/M1/M2 over the cell.
    std::vector<double> edges;
    edges.push_back(-clip);
    for (long long q = p.q_min; q < p.q_max; ++q) {
        double b = p.scale * (static_cast<double>(q) + p.offset + 0.5);
        if (b > -clip && b < clip) edges.push_back(b);
    }
    edges.push_back(clip);

    double e_xd = 0.0, e_dd = 0.0;
    for (size_t i = 0; i + 1 < edges.size(); ++i) {
        double a = edges[i], b = edges[i + 1];
        double v = fake_quant_scalar(0.5 * (a + b), p);
        double m0 = Phi(b) - Phi(a);
        double m1 = phi(a) - phi(b);
        double m2 = m0 + a * phi(a) - b * phi(b);
        // integrals of x*(v-x)*phi and (v-x)^2*phi over [a, b]
        e_xd += v * m1 - m2;
        e_dd += v * v * m0 - 2.0 * v * m1 + m2;
    }
    row.e_xd = e_xd;
    row.e_dd = e_dd;
    return row;
}

double k_value(const ExpectationRow& w, const ExpectationRow& x) {
    return w.e_dd * x.e_xx + w.e_xx * x.e_dd + w.e_dd * x.e_dd + 2.0 * w.e_xd * x.e_xd +
           2.0 * w.e_xd * x.e_dd + 2.0 * w.e_dd * x.e_xd;
}

double ReconRatioTable::k_at(int bits) const {
    // Outside the tabulated range the ratio per bit is clamped to the
    // asymptotic factor 4.
    if (bits < b_min) return rows.front().k * std::pow(4.0, b_min - bits);
    if (bits > b_max) return rows.back().k / std::pow(4.0, bits - b_max);
    return rows[bits - b_min].k;
}

ReconRatioTable recon_ratio_table(int b_min, int b_max, double clip) {
    if (b_min < 1 || b_max < b_min)
        throw std::runtime_error("recon_ratio_table: bad bit range");
    ReconRatioTable t;
    t.b_min = b_min;
    t.b_max = b_max;
    t.clip = clip;
    for (int b = b_min; b <= b_max; ++b) {
        ExpectationRow row = gaussian_expectations(b, clip);
        RatioRow r;
        r.bits = b;
        r.k = k_value(row, row);
        t.rows.push_back(r);
    }
    double k0 = t.rows.front().k;
    for (size_t i = 0; i < t.rows.size(); ++i) {
        t.rows[i].k_norm = t.rows[i].k / k0;
        if (i > 0) t.rows[i].ratio = t.rows[i - 1].k / t.rows[i].k;
    }
    return t;
}

std::vector<McEstimate> mc_expectations(Rng& rng, const std::vector<int>& bits, double clip,
                                        long long samples) {
    if (samples < 2) throw std::runtime_error("mc_expectations: need at least 2 samples");
    std::vector<QuantParams> params;
    params.reserve(bits.size());
    for (int b : bits) params.push_back(make_quant_params(b, -clip, clip));

    std::vector<double> s1(bits.size(), 0.0), s1sq(bits.size(), 0.0);
    std::vector<double> s2(bits.size(), 0.0), s2sq(bits.size(), 0.0);
    for (long long n = 0; n < samples; ++n) {
        double x = rng.normal();
        bool in = x > -clip && x < clip;
        for (size_t i = 0; i < params.size(); ++i) {
            double w1 = 0.0, w2 = 0.0;
            if (in) {
                double d = fake_quant_scalar(x, params[i]) - x;
                w1 = x * d;
                w2 = d * d;
            }
            s1[i] += w1;
            s1sq[i] += w1 * w1;
            s2[i] += w2;
            s2sq[i] += w2 * w2;
        }
    }

    std::vector<McEstimate> out;
    double n = static_cast<double>(samples);
    for (size_t i = 0; i < bits.size(); ++i) {
        McEstimate e;
        e.bits = bits[i];
        e.e_xd = s1[i] / n;
        e.e_dd = s2[i] / n;
        double var1 = std::max(0.0, s1sq[i] / n - e.e_xd * e.e_xd);
        double var2 = std::max(0.0, s2sq[i] / n - e.e_dd * e.e_dd);
        e.se_xd = std::sqrt(var1 / n);
        e.se_dd = std::sqrt(var2 / n);
        out.push_back(e);
    }
    return out;
}

RatioCheck empirical_ratio_check(Rng& rng, int bits, int rows, int inner, int cols) {
    if (bits < 2) throw std::runtime_error("empirical_ratio_check: bits must be >= 2");
    Matrix w = gaussian_matrix(rng, rows, inner);
    Matrix x = gaussian_matrix(rng, cols, inner);
    QuantParams hi = make_quant_params(bits, -3.0, 3.0);
    QuantParams lo = make_quant_params(bits - 1, -3.0, 3.0);
    double loss_hi = recon_loss(w, {&x}, hi, hi);
    RatioCheck rc;
    if (loss_hi == 0.0) return rc;  // exact quantization, ratio undefined
    double loss_lo = recon_loss(w, {&x}, lo, lo);
    rc.defined = true;
    rc.measured = loss_lo / loss_hi;
    return rc;
}

const std::vector<ReferenceEntry>& reference_table() {
    static const std::vector<ReferenceEntry> table = {
        {1, 1.396e+0, 5.212e+0, 1.000e+0, 0.0},
        {2, 1.655e-2, 3.359e-1, 1.209e-2, 82.74},
        {3, 7.123e-4, 6.109e-2, 1.835e-3, 6.59},
        {4, 1.723e-4, 1.330e-2, 3.903e-4, 4.70},
        {5, 4.123e-5, 3.113e-3, 9.093e-5, 4.29},
        {6, 1.003e-5, 7.538e-4, 2.199e-5, 4.13},
        {7, 2.472e-6, 1.855e-4, 5.339e-6, 4.12},
        {8, 6.134e-7, 4.601e-5, 1.324e-6, 4.03},
    };
    return table;
}

}  // namespace mpq
