#include "mpq/refiner.hpp"

#include <algorithm>
#include <stdexcept>

namespace mpq {

ReconMeasurement measure_recon(const QuantizedModel& qm, int layer_id, const ActCache& calib) {
    if (layer_id < 0 || static_cast<size_t>(layer_id) >= qm.base->layers.size())
        throw std::runtime_error("measure_recon: layer_id out of range");
    if (static_cast<size_t>(layer_id) >= calib.inputs.size() ||
        calib.inputs[layer_id].empty())
        throw std::runtime_error("measure_recon: no cached activations for layer");
    std::vector<const Matrix*> xs;
    xs.reserve(calib.inputs[layer_id].size());
    for (const Matrix& x : calib.inputs[layer_id]) xs.push_back(&x);

    ReconMeasurement m;
    m.layer_id = layer_id;
    m.bits = qm.bits[layer_id];
    m.loss = recon_loss(qm.base->layers[layer_id].weight, xs, qm.weight_q[layer_id],
                        qm.act_q[layer_id]);
    return m;
}

NeighborEstimate estimate_neighbors(const ReconMeasurement& m, const ReconRatioTable& table) {
    NeighborEstimate e;
    e.down_ok = m.bits - 1 >= 1;
    e.up_ok = m.bits + 1 < 32;
    if (e.down_ok) {
        e.loss_down = m.loss * table.ratio(m.bits - 1, m.bits);
        e.degradation = e.loss_down - m.loss;
    }
    if (e.up_ok) {
        e.loss_up = m.loss * table.ratio(m.bits + 1, m.bits);
        e.gain = m.loss - e.loss_up;
    }
    return e;
}

std::optional<SwapCandidate> select_swap(const RefineState& state,
                                         const std::vector<ReconMeasurement>& measurements,
                                         const ReconRatioTable& table) {
    const std::vector<int>& bits = state.qm->bits;
    int min_b = state.inst.bit_set.front();
    int max_b = state.inst.bit_set.back();

    struct Ranked {
        int layer;
        double val;
    };
    std::vector<Ranked> ups, downs;
    for (const ReconMeasurement& m : measurements) {
        NeighborEstimate e = estimate_neighbors(m, table);
        if (bits[m.layer_id] < max_b && e.up_ok) ups.push_back({m.layer_id, e.gain});
        if (bits[m.layer_id] > min_b && e.down_ok) downs.push_back({m.layer_id, e.degradation});
    }
    std::sort(ups.begin(), ups.end(), [](const Ranked& a, const Ranked& b) {
        if (a.val != b.val) return a.val > b.val;
        return a.layer < b.layer;
    });
    std::sort(downs.begin(), downs.end(), [](const Ranked& a, const Ranked& b) {
        if (a.val != b.val) return a.val < b.val;
        return a.layer < b.layer;
    });

    for (const Ranked& u : ups)
        for (const Ranked& d : downs) {
            if (d.layer == u.layer) continue;
            std::vector<int> nb = bits;
            nb[u.layer] += 1;
            nb[d.layer] -= 1;
            if (!state.inst.budget_ok(nb)) continue;
            SwapCandidate c;
            c.up_layer = u.layer;
            c.down_layer = d.layer;
            c.gain = u.val;
            c.degradation = d.val;
            c.net_estimate = c.gain - c.degradation;
            c.budget_delta = state.inst.counts[u.layer] - state.inst.counts[d.layer];
            return c;
        }
    return std::nullopt;
}

RefineResult refine(RefineState& state, const ActCache& calib, const Batch& sample_set,
                    const ReconRatioTable& table, int max_iters) {
    QuantizedModel& qm = *state.qm;
    size_t n_layers = qm.base->layers.size();
    if (max_iters <= 0) max_iters = static_cast<int>(n_layers);
    state.max_iters = max_iters;

    RefineResult res;
    double acc = qm.accuracy(sample_set);
    res.initial_accuracy = acc;
    state.accuracy_history.push_back(acc);
    res.stop_reason = "max_iters";

    for (int it = 1; it <= max_iters; ++it) {
        state.iteration = it;
        std::vector<ReconMeasurement> ms;
        ms.reserve(n_layers);
        for (size_t l = 0; l < n_layers; ++l)
            ms.push_back(measure_recon(qm, static_cast<int>(l), calib));

        std::optional<SwapCandidate> cand = select_swap(state, ms, table);
        if (!cand) {
            res.stop_reason = "no_candidate";
            break;
        }
        int u = cand->up_layer, d = cand->down_layer;
        int bu = qm.bits[u], bd = qm.bits[d];
        qm.set_bits(u, bu + 1);
        qm.set_bits(d, bd - 1);
        double acc_new = qm.accuracy(sample_set);

        RefineRecord rec;
        rec.iteration = it;
        rec.up_layer = u;
        rec.down_layer = d;
        rec.est_gain = cand->gain;
        rec.est_degradation = cand->degradation;
        rec.accuracy_before = acc;
        rec.accuracy_after = acc_new;
        rec.accepted = acc_new > acc;
        res.trace.push_back(rec);
        state.accuracy_history.push_back(acc_new);

        if (rec.accepted) {
            acc = acc_new;
            continue;
        }
        // Equal accuracy also stops; reverting keeps the pre-swap allocation.
        qm.set_bits(u, bu);
        qm.set_bits(d, bd);
        res.stop_reason = "no_improvement";
        break;
    }

    res.bits = qm.bits;
    res.final_accuracy = acc;
    res.accuracy_history = state.accuracy_history;
    res.iterations = static_cast<int>(res.trace.size());
    return res;
}

nlohmann::ordered_json refine_to_json(const RefineResult& r) {
    nlohmann::ordered_json j;
    j["schema"] = "refine/1";
    j["bits"] = r.bits;
    j["initial_accuracy"] = r.initial_accuracy;
    j["final_accuracy"] = r.final_accuracy;
    j["iterations"] = r.iterations;
    j["stop_reason"] = r.stop_reason;
    j["accuracy_history"] = r.accuracy_history;
    j["trace"] = nlohmann::ordered_json::array();
    for (const RefineRecord& t : r.trace) {
        nlohmann::ordered_json rec;
        rec["iteration"] = t.iteration;
        rec["up_layer"] = t.up_layer;
        rec["down_layer"] = t.down_layer;
        rec["est_gain"] = t.est_gain;
        rec["est_degradation"] = t.est_degradation;
        rec["accuracy_before"] = t.accuracy_before;
        rec["accuracy_after"] = t.accuracy_after;
        rec["accepted"] = t.accepted;
        j["trace"].push_back(rec);
    }
    return j;
}

}  // namespace mpq
