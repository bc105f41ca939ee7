#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mpq/refiner.hpp"

using namespace mpq;

namespace {

Batch class_batch(const ModelConfig& cfg, int n, uint64_t seed) {
    Rng rng(seed);
    Batch b;
    for (int i = 0; i < n; ++i) {
        int label = static_cast<int>(rng.below(static_cast<uint64_t>(cfg.num_classes)));
        Matrix x(cfg.tokens, cfg.in_dim);
        for (int t = 0; t < cfg.tokens; ++t)
            for (int f = 0; f < cfg.in_dim; ++f)
                x(t, f) = (f % cfg.num_classes == label ? 2.0 : 0.0) + 0.3 * rng.normal();
        b.inputs.push_back(x);
        b.labels.push_back(label);
    }
    return b;
}

ToyViT trained_model(const ModelConfig& cfg, const Batch& train, uint64_t seed) {
    Rng rng(seed);
    ToyViT m = init_model(cfg, rng);
    TrainConfig tc;
    tc.epochs = 30;
    tc.lr = 5e-3;
    tc.batch_size = 16;
    Rng tr(seed + 1);
    train_model(m, train, tc, tr);
    return m;
}

}  // namespace

TEST_CASE("measure_recon matches the direct loss and sees passthrough") {
    ModelConfig cfg;
    cfg.blocks = 1;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.tokens = 3;
    cfg.in_dim = 4;
    Rng rng(1);
    ToyViT m = init_model(cfg, rng);
    Batch calib;
    for (int i = 0; i < 6; ++i) {
        calib.inputs.push_back(gaussian_matrix(rng, cfg.tokens, cfg.in_dim));
        calib.labels.push_back(static_cast<int>(rng.below(4)));
    }
    ActCache acts = collect_activations(m, calib);

    std::vector<int> bits = {3, 32, 4, 5};
    QuantizedModel qm = quantize_model(m, bits, acts);
    for (int l = 0; l < m.num_layers(); ++l) {
        ReconMeasurement mr = measure_recon(qm, l, acts);
        CHECK(mr.layer_id == l);
        CHECK(mr.bits == bits[static_cast<size_t>(l)]);
        std::vector<const Matrix*> xs;
        for (const Matrix& x : acts.inputs[static_cast<size_t>(l)]) xs.push_back(&x);
        double direct = recon_loss(m.layers[static_cast<size_t>(l)].weight, xs, qm.weight_q[l],
                                   qm.act_q[l]);
        CHECK(mr.loss == direct);
    }
    CHECK(measure_recon(qm, 1, acts).loss == 0.0);  // 32-bit passthrough
    CHECK(measure_recon(qm, 0, acts).loss > 0.0);

    CHECK_THROWS(measure_recon(qm, -1, acts));
    CHECK_THROWS(measure_recon(qm, 99, acts));
    ActCache empty;
    CHECK_THROWS(measure_recon(qm, 0, empty));
}

TEST_CASE("neighbor estimates follow the ratio table") {
    ReconRatioTable t = recon_ratio_table(1, 8);

    ReconMeasurement m;
    m.layer_id = 0;
    m.bits = 4;
    m.loss = 0.5;
    NeighborEstimate e = estimate_neighbors(m, t);
    CHECK(e.down_ok);
    CHECK(e.up_ok);
    CHECK(e.loss_down == doctest::Approx(0.5 * t.ratio(3, 4)).epsilon(1e-12));
    CHECK(e.loss_up == doctest::Approx(0.5 * t.ratio(5, 4)).epsilon(1e-12));
    CHECK(e.gain == doctest::Approx(0.5 - e.loss_up).epsilon(1e-12));
    CHECK(e.degradation == doctest::Approx(e.loss_down - 0.5).epsilon(1e-12));
    CHECK(e.gain > 0.0);
    CHECK(e.degradation > 0.0);
    // Dropping a bit hurts far more than adding one helps.
    CHECK(e.degradation > e.gain);

    m.bits = 1;
    e = estimate_neighbors(m, t);
    CHECK(!e.down_ok);
    CHECK(e.up_ok);

    m.bits = 31;
    e = estimate_neighbors(m, t);
    CHECK(e.down_ok);
    CHECK(!e.up_ok);

    m.bits = 4;
    m.loss = 0.0;
    e = estimate_neighbors(m, t);
    CHECK(e.gain == 0.0);
    CHECK(e.degradation == 0.0);
}

TEST_CASE("select_swap ranks by estimated gain and degradation") {
    ReconRatioTable t = recon_ratio_table(1, 8);
    QuantizedModel qm;
    qm.bits = {3, 3, 3};
    RefineState state;
    state.qm = &qm;
    state.inst = make_instance({1, 1, 1}, {1, 1, 1}, {2, 3, 4}, "3.5", 6.0);

    std::vector<ReconMeasurement> ms(3);
    for (int l = 0; l < 3; ++l) {
        ms[l].layer_id = l;
        ms[l].bits = 3;
    }
    ms[0].loss = 100.0;
    ms[1].loss = 10.0;
    ms[2].loss = 1.0;

    auto cand = select_swap(state, ms, t);
    REQUIRE(cand.has_value());
    CHECK(cand->up_layer == 0);    // largest estimated gain
    CHECK(cand->down_layer == 2);  // smallest estimated degradation
    CHECK(cand->gain > cand->net_estimate);
    CHECK(cand->budget_delta == 0);
}

TEST_CASE("select_swap skips budget breaking pairs in ranked order") {
    ReconRatioTable t = recon_ratio_table(1, 8);
    QuantizedModel qm;
    qm.bits = {3, 3, 3};
    RefineState state;
    state.qm = &qm;
    // Tight budget: current weight 5*3+3+3 = 21 = 3 * 7 exactly. Raising the
    // heavy layer cannot be paid for by any single down-shift.
    state.inst = make_instance({1, 1, 1}, {5, 1, 1}, {2, 3, 4}, "3", 6.0);

    std::vector<ReconMeasurement> ms(3);
    for (int l = 0; l < 3; ++l) {
        ms[l].layer_id = l;
        ms[l].bits = 3;
    }
    ms[0].loss = 100.0;
    ms[1].loss = 10.0;
    ms[2].loss = 1.0;

    auto cand = select_swap(state, ms, t);
    REQUIRE(cand.has_value());
    CHECK(cand->up_layer == 1);
    CHECK(cand->down_layer == 2);
    CHECK(cand->budget_delta == 0);
}

TEST_CASE("select_swap returns nothing at the range limits") {
    ReconRatioTable t = recon_ratio_table(1, 8);
    QuantizedModel qm;
    RefineState state;
    state.qm = &qm;
    state.inst = make_instance({1, 1}, {1, 1}, {2, 3, 4}, "4", 6.0);

    std::vector<ReconMeasurement> ms(2);
    for (int l = 0; l < 2; ++l) {
        ms[l].layer_id = l;
        ms[l].loss = 1.0;
    }

    // Everyone at max bits: no up candidates.
    qm.bits = {4, 4};
    ms[0].bits = ms[1].bits = 4;
    CHECK(!select_swap(state, ms, t).has_value());

    // Everyone at min bits: no down candidates.
    qm.bits = {2, 2};
    ms[0].bits = ms[1].bits = 2;
    CHECK(!select_swap(state, ms, t).has_value());

    // A single layer can never trade with itself.
    RefineState solo;
    QuantizedModel qs;
    qs.bits = {3};
    solo.qm = &qs;
    solo.inst = make_instance({1}, {1}, {2, 3, 4}, "4", 6.0);
    std::vector<ReconMeasurement> one(1);
    one[0].layer_id = 0;
    one[0].bits = 3;
    one[0].loss = 1.0;
    CHECK(!select_swap(solo, one, t).has_value());
}

TEST_CASE("refine repairs a deliberately starved sensitive layer") {
    ModelConfig cfg;
    cfg.blocks = 1;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.tokens = 4;
    cfg.num_classes = 4;
    cfg.in_dim = 4;
    Batch data = class_batch(cfg, 96, 7);
    ToyViT m = trained_model(cfg, data, 8);
    REQUIRE(evaluate(m, data) > 0.9);

    ActCache acts = collect_activations(m, data);
    // fc1 (layer 2) starved at 2 bits while everything else sits at 3; the
    // budget has slack for the repair swap.
    std::vector<int> bits = {3, 3, 2, 3};
    QuantizedModel qm = quantize_model(m, bits, acts);

    SensitivityProfile prof;
    for (const auto& l : m.layers) {
        LayerScore s;
        s.layer_id = l.layer_id;
        s.block = l.block_idx;
        s.kind = l.kind;
        s.c = l.param_count();
        s.trace = 1.0;
        s.alpha = 1.0;
        s.omega = 1.0;
        prof.layers.push_back(s);
    }
    IlpConfig icfg;
    icfg.bit_set = {2, 3, 4};
    icfg.b_t = "3";
    icfg.gamma = 6.0;

    RefineState state;
    state.qm = &qm;
    state.inst = build_instance(prof, icfg);
    REQUIRE(state.inst.budget_ok(bits));

    ReconRatioTable table = recon_ratio_table(1, 8);
    RefineResult res = refine(state, acts, data, table, 4);

    CHECK(res.initial_accuracy == doctest::Approx(res.accuracy_history[0]));
    CHECK(res.accuracy_history.size() == static_cast<size_t>(res.iterations) + 1);
    CHECK(state.inst.budget_ok(res.bits));
    CHECK(res.final_accuracy >= res.initial_accuracy);
    REQUIRE(!res.trace.empty());
    // The starved layer gets its bit back first.
    CHECK(res.trace[0].up_layer == 2);

    // Accepted swaps move exactly two layers by one bit each.
    if (res.trace[0].accepted) {
        int ups = 0, downs = 0, moved = 0;
        // Reconstruct the first-step assignment from the trace.
        std::vector<int> step = bits;
        step[static_cast<size_t>(res.trace[0].up_layer)] += 1;
        step[static_cast<size_t>(res.trace[0].down_layer)] -= 1;
        for (size_t i = 0; i < bits.size(); ++i) {
            int d = step[i] - bits[i];
            if (d == 1) ++ups;
            if (d == -1) ++downs;
            if (d != 0) ++moved;
        }
        CHECK(ups == 1);
        CHECK(downs == 1);
        CHECK(moved == 2);
        CHECK(state.inst.budget_ok(step));
    }

    for (int b : res.bits) {
        CHECK(b >= 2);
        CHECK(b <= 4);
    }
    CHECK((res.stop_reason == "no_candidate" || res.stop_reason == "no_improvement" ||
           res.stop_reason == "max_iters"));
}

TEST_CASE("refine reverts and stops when a swap does not strictly improve") {
    ModelConfig cfg;
    cfg.blocks = 1;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.tokens = 4;
    cfg.num_classes = 2;
    cfg.in_dim = 4;
    Batch data = class_batch(cfg, 64, 17);
    ToyViT m = trained_model(cfg, data, 18);
    REQUIRE(evaluate(m, data) == 1.0);

    ActCache acts = collect_activations(m, data);
    // Generous width everywhere: accuracy is already saturated at 1.0, so the
    // first swap cannot strictly improve and must be rolled back.
    std::vector<int> bits(4, 7);
    QuantizedModel qm = quantize_model(m, bits, acts);
    REQUIRE(qm.accuracy(data) == 1.0);

    SensitivityProfile prof;
    for (const auto& l : m.layers) {
        LayerScore s;
        s.layer_id = l.layer_id;
        s.c = l.param_count();
        s.omega = 1.0;
        prof.layers.push_back(s);
    }
    IlpConfig icfg;
    icfg.bit_set = {2, 3, 4, 5, 6, 7, 8};
    icfg.b_t = "7.5";
    icfg.gamma = 6.0;

    RefineState state;
    state.qm = &qm;
    state.inst = build_instance(prof, icfg);

    ReconRatioTable table = recon_ratio_table(1, 8);
    RefineResult res = refine(state, acts, data, table, 10);

    CHECK(res.stop_reason == "no_improvement");
    CHECK(res.iterations == 1);
    CHECK(res.bits == bits);  // reverted
    CHECK(res.final_accuracy == res.initial_accuracy);
    REQUIRE(res.trace.size() == 1);
    CHECK(!res.trace[0].accepted);
    CHECK(res.trace[0].accuracy_after <= res.trace[0].accuracy_before);
    // The rejected probe stays visible in the history.
    REQUIRE(res.accuracy_history.size() == 2);
    CHECK(res.accuracy_history[1] == res.trace[0].accuracy_after);
    for (size_t l = 0; l < bits.size(); ++l) CHECK(qm.bits[l] == bits[l]);
}

TEST_CASE("refine honors the iteration cap and default") {
    ModelConfig cfg;
    cfg.blocks = 1;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.tokens = 3;
    cfg.num_classes = 2;
    cfg.in_dim = 4;
    Batch data = class_batch(cfg, 32, 27);
    Rng rng(28);
    ToyViT m = init_model(cfg, rng);
    ActCache acts = collect_activations(m, data);
    std::vector<int> bits(4, 3);
    QuantizedModel qm = quantize_model(m, bits, acts);

    SensitivityProfile prof;
    for (const auto& l : m.layers) {
        LayerScore s;
        s.layer_id = l.layer_id;
        s.c = l.param_count();
        s.omega = 0.5;
        prof.layers.push_back(s);
    }
    IlpConfig icfg;
    icfg.bit_set = {2, 3, 4};
    icfg.b_t = "3";
    icfg.gamma = 6.0;

    RefineState state;
    state.qm = &qm;
    state.inst = build_instance(prof, icfg);
    ReconRatioTable table = recon_ratio_table(1, 8);

    RefineResult res = refine(state, acts, data, table, 1);
    CHECK(res.iterations <= 1);
    CHECK(state.max_iters == 1);

    // max_iters <= 0 selects one iteration per quantizable layer.
    QuantizedModel qm2 = quantize_model(m, bits, acts);
    RefineState state2;
    state2.qm = &qm2;
    state2.inst = build_instance(prof, icfg);
    RefineResult res2 = refine(state2, acts, data, table, 0);
    CHECK(state2.max_iters == 4);
    CHECK(res2.iterations <= 4);

    nlohmann::ordered_json j = refine_to_json(res2);
    CHECK(j.at("schema") == "refine/1");
    CHECK(j.at("bits").size() == 4);
    CHECK(j.at("iterations") == res2.iterations);
    CHECK(j.at("stop_reason") == res2.stop_reason);
    CHECK(j.at("trace").size() == static_cast<size_t>(res2.iterations));
    CHECK(j.at("accuracy_history").size() == res2.accuracy_history.size());
}
