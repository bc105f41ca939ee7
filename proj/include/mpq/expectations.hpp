#pragma once

#include <vector>

#include "mpq/quantizer.hpp"
#include "mpq/rng.hpp"

namespace mpq {

// Quantization-error moments of a standard normal X under the asymmetric
// uniform quantizer on (-clip, clip): e_xd = E[X Delta], e_dd = E[Delta^2]
// with Delta(x) = fake_quant(x) - x. Both integrals are taken over the
// clipping interval only (unnormalized); that convention is what the
// reference table tabulates. e_xx is analytically 1.
struct ExpectationRow {
    int bits = 0;
    double e_xx = 1.0;
    double e_xd = 0.0;
    double e_dd = 0.0;
};

// Piecewise-exact integration: the integrand is polynomial-times-gaussian
// between adjacent codebook decision boundaries, so each cell reduces to
// closed-form gaussian moments (erf/exp). Absolute error is at rounding level,
// far below the 1e-7 contract.
ExpectationRow gaussian_expectations(int bits, double clip = 3.0);

// Composite error factor for a product of quantized gaussian weight and
// activation: six-term expansion of E[(Delta_W X + W Delta_X + Delta_W
// Delta_X)^2] with W, X independent.
double k_value(const ExpectationRow& w, const ExpectationRow& x);

struct RatioRow {
    int bits = 0;
    double k = 0.0;
    double k_norm = 0.0;  // k / k(b_min)
    double ratio = 0.0;   // k(bits-1)/k(bits), 0 for the first row
};

struct ReconRatioTable {
    int b_min = 0, b_max = 0;
    double clip = 3.0;
    std::vector<RatioRow> rows;

    // k extended beyond the tabulated range by the asymptotic factor 4 per bit.
    double k_at(int bits) const;
    double ratio(int from_bits, int to_bits) const { return k_at(from_bits) / k_at(to_bits); }
};

ReconRatioTable recon_ratio_table(int b_min, int b_max, double clip = 3.0);

struct McEstimate {
    int bits = 0;
    double e_xd = 0.0, e_dd = 0.0;
    double se_xd = 0.0, se_dd = 0.0;  // Monte-Carlo standard errors
};

// Independent oracle: sample mean of the masked integrands over `samples`
// standard normal draws. One pass evaluates every requested bit-width.
std::vector<McEstimate> mc_expectations(Rng& rng, const std::vector<int>& bits, double clip,
                                        long long samples);

struct RatioCheck {
    bool defined = false;
    double measured = 0.0;  // recon loss at bits-1 over recon loss at bits
};

// Draws gaussian W (rows x inner) and X (cols x inner) and measures the actual
// reconstruction-loss ratio between bits-1 and bits on (-3, 3) ranges.
RatioCheck empirical_ratio_check(Rng& rng, int bits, int rows = 32, int inner = 32,
                                 int cols = 32);

// Reference values this implementation reproduces; used by the tables CLI to
// print side-by-side deltas and by the regression suite as tolerances.
struct ReferenceEntry {
    int bits;
    double e_xd, e_dd;  // expectation table
    double k_norm;      // normalized composite factor
    double ratio;       // k(B-1)/k(B), 0 for B=1
};

const std::vector<ReferenceEntry>& reference_table();

}  // namespace mpq
