#include "mpq/allocator.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace mpq {

namespace {

long long gcd_ll(long long a, long long b) {
    while (b) {
        long long t = a % b;
        a = b;
        b = t;
    }
    return a;
}

}  // namespace

BtRational parse_bt(const std::string& text) {
    // Decimal literal with optional fraction part, e.g. "3", "3.5", "2.75".
    if (text.empty()) throw std::runtime_error("parse_bt: empty target");
    size_t dot = text.find('.');
    std::string whole = dot == std::string::npos ? text : text.substr(0, dot);
    std::string frac = dot == std::string::npos ? "" : text.substr(dot + 1);
    if (whole.empty() || (dot != std::string::npos && frac.empty()))
        throw std::runtime_error("parse_bt: bad target " + text);
    for (const std::string& part : {whole, frac})
        for (char ch : part)
            if (!std::isdigit(static_cast<unsigned char>(ch)))
                throw std::runtime_error("parse_bt: bad target " + text);
    if (frac.size() > 6) throw std::runtime_error("parse_bt: at most 6 decimal places");

    BtRational r;
    r.num = whole.empty() ? 0 : std::stoll(whole);
    r.den = 1;
    for (char ch : frac) {
        r.num = r.num * 10 + (ch - '0');
        r.den *= 10;
    }
    if (r.num <= 0) throw std::runtime_error("parse_bt: target must be positive");
    if (r.num > 1000000000LL) throw std::runtime_error("parse_bt: target too large");
    long long g = gcd_ll(r.num, r.den);
    r.num /= g;
    r.den /= g;
    return r;
}

long long IlpInstance::total_count() const {
    long long s = 0;
    for (long long c : counts) s += c;
    return s;
}

bool IlpInstance::budget_ok(const std::vector<int>& bits) const {
    long long lhs = 0;
    for (size_t i = 0; i < counts.size(); ++i) lhs += counts[i] * bits[i];
    return lhs * b_t.den <= b_t.num * total_count();
}

double IlpInstance::objective(const std::vector<int>& bits) const {
    double s = 0.0;
    for (size_t i = 0; i < omega.size(); ++i)
        s += std::pow(gamma, -static_cast<double>(bits[i])) * omega[i];
    return s;
}

double IlpInstance::avg_bits(const std::vector<int>& bits) const {
    double lhs = 0.0;
    for (size_t i = 0; i < counts.size(); ++i)
        lhs += static_cast<double>(counts[i]) * bits[i];
    return lhs / static_cast<double>(total_count());
}

IlpInstance make_instance(std::vector<double> omega, std::vector<long long> counts,
                          std::vector<int> bit_set, const std::string& b_t, double gamma) {
    if (omega.empty() || omega.size() != counts.size())
        throw std::runtime_error("make_instance: omega/counts size mismatch");
    for (double w : omega)
        if (!(w >= 0.0)) throw std::runtime_error("make_instance: omega must be nonnegative");
    for (long long c : counts)
        if (c <= 0) throw std::runtime_error("make_instance: counts must be positive");
    if (!(gamma > 1.0)) throw std::runtime_error("make_instance: gamma must exceed 1");
    std::sort(bit_set.begin(), bit_set.end());
    bit_set.erase(std::unique(bit_set.begin(), bit_set.end()), bit_set.end());
    if (bit_set.empty()) throw std::runtime_error("make_instance: empty bit set");
    if (bit_set.front() < 1) throw std::runtime_error("make_instance: bits must be >= 1");

    IlpInstance inst;
    inst.omega = std::move(omega);
    inst.counts = std::move(counts);
    inst.bit_set = std::move(bit_set);
    inst.b_t = parse_bt(b_t);
    inst.gamma = gamma;

    std::vector<int> min_bits(inst.omega.size(), inst.bit_set.front());
    if (!inst.budget_ok(min_bits))
        throw std::runtime_error("make_instance: infeasible, b_t below the minimum bit-width");
    return inst;
}

IlpInstance build_instance(const SensitivityProfile& profile, const IlpConfig& cfg) {
    std::vector<double> omega;
    std::vector<long long> counts;
    for (const auto& l : profile.layers) {
        omega.push_back(l.omega);
        counts.push_back(l.c);
    }
    return make_instance(std::move(omega), std::move(counts), cfg.bit_set, cfg.b_t, cfg.gamma);
}

namespace {

// One total order decides optimality in both solvers: smaller canonical
// objective wins, then the lexicographically smaller bit vector.
bool better_than(double obj, const std::vector<int>& bits, double best_obj,
                 const std::vector<int>& best_bits) {
    if (best_bits.empty()) return true;
    if (obj < best_obj) return true;
    if (obj > best_obj) return false;
    return bits < best_bits;
}

struct Increment {
    int layer;   // original index
    double gain;
    long long weight;  // scaled by b_t.den
    double efficiency;
};

}  // namespace

Allocation solve_ilp(const IlpInstance& inst) {
    size_t n = inst.omega.size();
    int min_bit = inst.bit_set.front();
    size_t n_choices = inst.bit_set.size();
    long long den = inst.b_t.den;
    long long limit = inst.b_t.num * inst.total_count();

    // cost[i][j] = gamma^-bit_j * omega_i
    std::vector<std::vector<double>> cost(n, std::vector<double>(n_choices));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n_choices; ++j)
            cost[i][j] = std::pow(inst.gamma, -static_cast<double>(inst.bit_set[j])) *
                         inst.omega[i];

    std::vector<int> bits(n, min_bit);
    long long base_weight = 0;
    for (size_t i = 0; i < n; ++i) base_weight += inst.counts[i] * min_bit * den;
    if (base_weight > limit) throw std::runtime_error("solve_ilp: infeasible instance");

    // Zero-omega layers never change the objective; min bits is optimal and
    // lexicographically smallest, and it frees the most budget.
    std::vector<size_t> active;
    for (size_t i = 0; i < n; ++i)
        if (inst.omega[i] > 0.0) active.push_back(i);

    // Search order: descending count, then ascending original index.
    std::sort(active.begin(), active.end(), [&](size_t a, size_t b) {
        if (inst.counts[a] != inst.counts[b]) return inst.counts[a] > inst.counts[b];
        return a < b;
    });

    // Fractional relaxation material: per-layer +1-choice increments. gamma^-B
    // is convex in B, so within a layer efficiencies decrease and a greedy
    // fractional fill over the global list is the LP optimum for the suffix.
    std::vector<Increment> incs;
    for (size_t i : active)
        for (size_t j = 0; j + 1 < n_choices; ++j) {
            Increment inc;
            inc.layer = static_cast<int>(i);
            inc.gain = cost[i][j] - cost[i][j + 1];
            inc.weight = inst.counts[i] * (inst.bit_set[j + 1] - inst.bit_set[j]) * den;
            inc.efficiency = inc.gain / static_cast<double>(inc.weight);
            incs.push_back(inc);
        }
    std::sort(incs.begin(), incs.end(), [](const Increment& a, const Increment& b) {
        if (a.efficiency != b.efficiency) return a.efficiency > b.efficiency;
        if (a.layer != b.layer) return a.layer < b.layer;
        return a.weight < b.weight;
    });

    // suffix_min_weight[k]: weight of giving every layer from position k on
    // its min bits. suffix_top_cost[k] is their cost at min bits (the most
    // expensive assignment, the fractional bound's starting point);
    // suffix_low_cost[k] is their cost at max bits (a budget-free lower bound).
    size_t m = active.size();
    std::vector<long long> suffix_min_weight(m + 1, 0);
    std::vector<double> suffix_top_cost(m + 1, 0.0);
    std::vector<double> suffix_low_cost(m + 1, 0.0);
    for (size_t k = m; k-- > 0;) {
        size_t i = active[k];
        suffix_min_weight[k] = suffix_min_weight[k + 1] + inst.counts[i] * min_bit * den;
        suffix_top_cost[k] = suffix_top_cost[k + 1] + cost[i][0];
        suffix_low_cost[k] = suffix_low_cost[k + 1] + cost[i][n_choices - 1];
    }

    double best_obj = std::numeric_limits<double>::infinity();
    std::vector<int> best_bits;
    std::vector<char> assigned(n, 0);

    // weight_used covers assigned active layers plus all fixed zero-omega
    // layers; cost_used covers assigned active layers only.
    long long fixed_weight = base_weight;
    for (size_t i : active) fixed_weight -= inst.counts[i] * min_bit * den;

    auto fractional_bound = [&](size_t k, long long weight_used, double cost_used) {
        double bound = cost_used + suffix_top_cost[k];
        long long room = limit - weight_used - suffix_min_weight[k];
        for (const Increment& inc : incs) {
            if (room <= 0) break;
            if (assigned[inc.layer]) continue;
            if (inc.weight <= room) {
                bound -= inc.gain;
                room -= inc.weight;
            } else {
                bound -= inc.gain * static_cast<double>(room) / static_cast<double>(inc.weight);
                room = 0;
            }
        }
        return bound;
    };

    // Safety margin: the fractional bound is exact in real arithmetic but can
    // round above the true subtree optimum; relaxing it only costs node visits.
    auto margin = [&](double obj) { return 1e-9 * (1.0 + std::abs(obj)); };

    std::function<void(size_t, long long, double)> dfs = [&](size_t k, long long weight_used,
                                                             double cost_used) {
        if (k == m) {
            double obj = inst.objective(bits);
            if (better_than(obj, bits, best_obj, best_bits)) {
                best_obj = obj;
                best_bits = bits;
            }
            return;
        }
        if (!best_bits.empty() &&
            fractional_bound(k, weight_used, cost_used) > best_obj + margin(best_obj))
            return;
        size_t i = active[k];
        assigned[i] = 1;
        // Highest bits first reaches cheap incumbents early.
        for (size_t j = n_choices; j-- > 0;) {
            long long w = inst.counts[i] * inst.bit_set[j] * den;
            if (weight_used + w + suffix_min_weight[k + 1] > limit) continue;
            if (!best_bits.empty()) {
                double lower = cost_used + cost[i][j] + suffix_low_cost[k + 1];
                if (lower > best_obj + margin(best_obj)) continue;
            }
            bits[i] = inst.bit_set[j];
            dfs(k + 1, weight_used + w, cost_used + cost[i][j]);
        }
        bits[i] = min_bit;
        assigned[i] = 0;
    };
    dfs(0, fixed_weight, 0.0);

    Allocation a;
    a.bits = best_bits;
    a.objective = inst.objective(a.bits);
    a.avg_bits = inst.avg_bits(a.bits);
    return a;
}

Allocation brute_force_alloc(const IlpInstance& inst) {
    size_t n = inst.omega.size();
    size_t n_choices = inst.bit_set.size();
    double combos = std::pow(static_cast<double>(n_choices), static_cast<double>(n));
    if (combos > 1e7) throw std::runtime_error("brute_force_alloc: instance too large");

    std::vector<size_t> idx(n, 0);
    std::vector<int> bits(n, inst.bit_set[0]);
    double best_obj = std::numeric_limits<double>::infinity();
    std::vector<int> best_bits;
    for (;;) {
        for (size_t i = 0; i < n; ++i) bits[i] = inst.bit_set[idx[i]];
        if (inst.budget_ok(bits)) {
            double obj = inst.objective(bits);
            if (better_than(obj, bits, best_obj, best_bits)) {
                best_obj = obj;
                best_bits = bits;
            }
        }
        size_t pos = n;
        while (pos-- > 0) {
            if (++idx[pos] < n_choices) break;
            idx[pos] = 0;
            if (pos == 0) {
                if (best_bits.empty())
                    throw std::runtime_error("brute_force_alloc: infeasible instance");
                Allocation a;
                a.bits = best_bits;
                a.objective = inst.objective(a.bits);
                a.avg_bits = inst.avg_bits(a.bits);
                return a;
            }
        }
    }
}

nlohmann::ordered_json allocation_to_json(const Allocation& a, const IlpInstance& inst) {
    nlohmann::ordered_json j;
    j["schema"] = "allocation/1";
    j["bits"] = a.bits;
    j["objective"] = a.objective;
    j["avg_bits"] = a.avg_bits;
    j["b_t"] = inst.b_t.value();
    j["gamma"] = inst.gamma;
    j["bit_set"] = inst.bit_set;
    return j;
}

}  // namespace mpq
