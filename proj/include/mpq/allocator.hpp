#pragma once

#include <string>
#include <vector>

#include "mpq/sensitivity.hpp"

namespace mpq {

// Budget arithmetic is integer-exact: the average-bit target b_t is a decimal
// rational num/den, and the constraint sum(c_i B_i) <= b_t * sum(c_i) is
// checked as sum(c_i B_i) * den <= num * sum(c_i).
struct BtRational {
    long long num = 0;
    long long den = 1;
    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

BtRational parse_bt(const std::string& text);

struct IlpConfig {
    std::vector<int> bit_set;
    std::string b_t = "3";
    double gamma = 6.0;
};

struct IlpInstance {
    std::vector<double> omega;       // >= 0 per layer
    std::vector<long long> counts;   // > 0 per layer
    std::vector<int> bit_set;        // sorted distinct, >= 1
    BtRational b_t;
    double gamma = 0.0;              // > 1

    long long total_count() const;
    // true when sum(c_i * bits_i) fits the budget
    bool budget_ok(const std::vector<int>& bits) const;
    double objective(const std::vector<int>& bits) const;  // canonical layer order
    double avg_bits(const std::vector<int>& bits) const;
};

IlpInstance make_instance(std::vector<double> omega, std::vector<long long> counts,
                          std::vector<int> bit_set, const std::string& b_t, double gamma);
IlpInstance build_instance(const SensitivityProfile& profile, const IlpConfig& cfg);

struct Allocation {
    std::vector<int> bits;
    double objective = 0.0;
    double avg_bits = 0.0;
};

// Exact optimum of min sum(gamma^-B_i omega_i) subject to the budget, one bit
// choice per layer. Depth-first branch-and-bound over layers in descending
// count order with a fractional multiple-choice-knapsack bound; among
// equal-objective optima returns the lexicographically smallest bit vector.
Allocation solve_ilp(const IlpInstance& inst);

// Exhaustive oracle with the identical tie-break; errors out beyond 1e7
// combinations.
Allocation brute_force_alloc(const IlpInstance& inst);

nlohmann::ordered_json allocation_to_json(const Allocation& a, const IlpInstance& inst);

}  // namespace mpq
