#include "mpq/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>
#include <utility>

namespace mpq {

namespace {

std::string fmt4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

void check_keys(const nlohmann::json& j, const char* ctx,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw std::runtime_error(std::string(ctx) + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                known = true;
                break;
            }
        if (!known)
            throw std::runtime_error(std::string(ctx) + ": unknown key '" + it.key() + "'");
    }
}

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

Dataset gen_task(Rng& rng, const TaskConfig& tc) {
    if (tc.num_classes < 2) throw std::runtime_error("gen_task: need at least 2 classes");
    if (tc.tokens < 1 || tc.in_dim < 1) throw std::runtime_error("gen_task: bad token shape");
    if (tc.train_n < 1 || tc.calib_n < 1 || tc.test_n < 1)
        throw std::runtime_error("gen_task: splits must be nonempty");
    if (!(tc.pattern_sd > 0.0)) throw std::runtime_error("gen_task: pattern_sd must be positive");
    if (!(tc.noise_sd >= 0.0)) throw std::runtime_error("gen_task: noise_sd must be nonnegative");

    Matrix patterns(tc.num_classes, tc.in_dim);
    for (double& v : patterns.data) v = tc.pattern_sd * rng.normal();

    int total = tc.train_n + tc.calib_n + tc.test_n;
    Batch all;
    all.inputs.reserve(total);
    all.labels.reserve(total);
    for (int i = 0; i < total; ++i) {
        int label = static_cast<int>(rng.below(tc.num_classes));
        Matrix x(tc.tokens, tc.in_dim);
        for (int t = 0; t < tc.tokens; ++t)
            for (int f = 0; f < tc.in_dim; ++f)
                x(t, f) = patterns(label, f) + tc.noise_sd * rng.normal();
        all.inputs.push_back(std::move(x));
        all.labels.push_back(label);
    }

    Dataset d;
    auto slice = [&](int lo, int hi) {
        Batch b;
        b.inputs.assign(all.inputs.begin() + lo, all.inputs.begin() + hi);
        b.labels.assign(all.labels.begin() + lo, all.labels.begin() + hi);
        return b;
    };
    d.train = slice(0, tc.train_n);
    d.calib = slice(tc.train_n, tc.train_n + tc.calib_n);
    d.test = slice(tc.train_n + tc.calib_n, total);
    return d;
}

void validate_config(const RunConfig& cfg) {
    const ModelConfig& m = cfg.model;
    if (m.blocks < 1) throw std::runtime_error("config: model.blocks must be >= 1");
    if (m.heads < 1 || m.dim < m.heads || m.dim % m.heads != 0)
        throw std::runtime_error("config: model.dim must be a positive multiple of model.heads");
    if (m.tokens < 1 || m.in_dim < 1) throw std::runtime_error("config: bad model input shape");
    if (m.num_classes < 2) throw std::runtime_error("config: model.num_classes must be >= 2");
    if (cfg.task.tokens != m.tokens || cfg.task.in_dim != m.in_dim ||
        cfg.task.num_classes != m.num_classes)
        throw std::runtime_error("config: task shape must mirror the model config");
    if (cfg.task.train_n < 1 || cfg.task.calib_n < 1 || cfg.task.test_n < 1)
        throw std::runtime_error("config: task splits must be nonempty");
    if (!(cfg.task.pattern_sd > 0.0) || !(cfg.task.noise_sd >= 0.0))
        throw std::runtime_error("config: bad task noise parameters");
    if (cfg.train.epochs < 0 || cfg.train.batch_size < 1 || !(cfg.train.lr > 0.0))
        throw std::runtime_error("config: bad train parameters");
    if (!(cfg.train.accuracy_threshold >= 0.0 && cfg.train.accuracy_threshold <= 1.0))
        throw std::runtime_error("config: train.accuracy_threshold must be in [0, 1]");
    fisher_mode_from_name(cfg.fisher_mode);  // throws on unknown mode
    if (cfg.label_samples < 0) throw std::runtime_error("config: label_samples must be >= 0");
    if (cfg.bit_set.empty()) throw std::runtime_error("config: bit_set must be nonempty");
    for (int b : cfg.bit_set)
        if (b < 1 || b > 32) throw std::runtime_error("config: bits must lie in [1, 32]");
    BtRational bt = parse_bt(cfg.b_t);  // throws on malformed targets
    int min_bit = *std::min_element(cfg.bit_set.begin(), cfg.bit_set.end());
    if (bt.num < static_cast<long long>(min_bit) * bt.den)
        throw std::runtime_error("config: b_t below the smallest bit width is infeasible");
    if (!(cfg.gamma > 1.0)) throw std::runtime_error("config: gamma must exceed 1");
    if (cfg.mu < 0 || cfg.mu > m.blocks)
        throw std::runtime_error("config: mu must lie in [0, blocks]");
    if (cfg.beta < 1 || cfg.beta > 31)
        throw std::runtime_error("config: beta must lie in [1, 31]");
    if (cfg.max_refine_iters < 0)
        throw std::runtime_error("config: max_refine_iters must be >= 0");
}

nlohmann::ordered_json config_to_json(const RunConfig& cfg) {
    nlohmann::ordered_json j;
    j["schema"] = "run_config/1";
    j["seed"] = cfg.seed;
    j["model"] = {{"blocks", cfg.model.blocks},   {"dim", cfg.model.dim},
                  {"heads", cfg.model.heads},     {"tokens", cfg.model.tokens},
                  {"num_classes", cfg.model.num_classes}, {"in_dim", cfg.model.in_dim}};
    j["task"] = {{"train_n", cfg.task.train_n},
                 {"calib_n", cfg.task.calib_n},
                 {"test_n", cfg.task.test_n},
                 {"pattern_sd", cfg.task.pattern_sd},
                 {"noise_sd", cfg.task.noise_sd}};
    j["train"] = {{"epochs", cfg.train.epochs},
                  {"lr", cfg.train.lr},
                  {"batch_size", cfg.train.batch_size},
                  {"accuracy_threshold", cfg.train.accuracy_threshold}};
    j["fisher"] = {{"mode", cfg.fisher_mode}, {"label_samples", cfg.label_samples}};
    j["quant"] = {{"bit_set", cfg.bit_set}, {"b_t", cfg.b_t},
                  {"gamma", cfg.gamma},     {"mu", cfg.mu},
                  {"beta", cfg.beta},       {"max_refine_iters", cfg.max_refine_iters}};
    j["emit_timings"] = cfg.emit_timings;
    return j;
}

RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig cfg;
    check_keys(j, "config",
               {"schema", "seed", "model", "task", "train", "fisher", "quant", "emit_timings"});
    if (j.contains("schema") && j.at("schema") != "run_config/1")
        throw std::runtime_error("config: unsupported schema");
    take(j, "seed", cfg.seed);
    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m, "config.model", {"blocks", "dim", "heads", "tokens", "num_classes", "in_dim"});
        take(m, "blocks", cfg.model.blocks);
        take(m, "dim", cfg.model.dim);
        take(m, "heads", cfg.model.heads);
        take(m, "tokens", cfg.model.tokens);
        take(m, "num_classes", cfg.model.num_classes);
        take(m, "in_dim", cfg.model.in_dim);
    }
    if (j.contains("task")) {
        const auto& t = j.at("task");
        check_keys(t, "config.task", {"train_n", "calib_n", "test_n", "pattern_sd", "noise_sd"});
        take(t, "train_n", cfg.task.train_n);
        take(t, "calib_n", cfg.task.calib_n);
        take(t, "test_n", cfg.task.test_n);
        take(t, "pattern_sd", cfg.task.pattern_sd);
        take(t, "noise_sd", cfg.task.noise_sd);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        check_keys(t, "config.train", {"epochs", "lr", "batch_size", "accuracy_threshold"});
        take(t, "epochs", cfg.train.epochs);
        take(t, "lr", cfg.train.lr);
        take(t, "batch_size", cfg.train.batch_size);
        take(t, "accuracy_threshold", cfg.train.accuracy_threshold);
    }
    if (j.contains("fisher")) {
        const auto& f = j.at("fisher");
        check_keys(f, "config.fisher", {"mode", "label_samples"});
        take(f, "mode", cfg.fisher_mode);
        take(f, "label_samples", cfg.label_samples);
    }
    if (j.contains("quant")) {
        const auto& q = j.at("quant");
        check_keys(q, "config.quant",
                   {"bit_set", "b_t", "gamma", "mu", "beta", "max_refine_iters"});
        take(q, "bit_set", cfg.bit_set);
        take(q, "b_t", cfg.b_t);
        take(q, "gamma", cfg.gamma);
        take(q, "mu", cfg.mu);
        take(q, "beta", cfg.beta);
        take(q, "max_refine_iters", cfg.max_refine_iters);
    }
    take(j, "emit_timings", cfg.emit_timings);
    // The task always mirrors the model shape; only split sizes and noise are free.
    cfg.task.tokens = cfg.model.tokens;
    cfg.task.in_dim = cfg.model.in_dim;
    cfg.task.num_classes = cfg.model.num_classes;
    validate_config(cfg);
    return cfg;
}

Rng fork_stream(unsigned long long seed, Stream s) {
    Rng root(seed);
    return root.fork(static_cast<unsigned long long>(s));
}

TrainedToy train_toy(const RunConfig& cfg) {
    validate_config(cfg);
    TrainedToy toy;
    Rng task_rng = fork_stream(cfg.seed, Stream::task);
    toy.data = gen_task(task_rng, cfg.task);
    Rng init_rng = fork_stream(cfg.seed, Stream::init);
    toy.model = init_model(cfg.model, init_rng);
    Rng train_rng = fork_stream(cfg.seed, Stream::train);
    train_model(toy.model, toy.data.train, cfg.train, train_rng);
    double acc = evaluate(toy.model, toy.data.test);
    if (acc < cfg.train.accuracy_threshold)
        throw std::runtime_error("train_toy: test accuracy " + fmt4(acc) +
                                 " is below the threshold " +
                                 fmt4(cfg.train.accuracy_threshold) +
                                 "; raise train.epochs, lower task.noise_sd, or enlarge the model");
    return toy;
}

double run_uniform_baseline(const ToyViT& m, int bits, const Batch& calib, const Batch& test) {
    std::vector<int> b(m.layers.size(), bits);
    QuantizedModel qm = quantize_model(m, b, calib);
    return qm.accuracy(test);
}

nlohmann::ordered_json run_pipeline(const RunConfig& cfg) {
    validate_config(cfg);

    std::vector<std::pair<std::string, double>> timings;
    auto run_stage = [&](const char* name, auto&& fn) {
        auto t0 = std::chrono::steady_clock::now();
        try {
            fn();
        } catch (const std::exception& e) {
            throw std::runtime_error(std::string("stage ") + name + ": " + e.what());
        }
        auto t1 = std::chrono::steady_clock::now();
        timings.emplace_back(name, std::chrono::duration<double, std::milli>(t1 - t0).count());
    };

    TrainedToy toy;
    if (cfg.load_model.empty()) {
        run_stage("train", [&] { toy = train_toy(cfg); });
    } else {
        run_stage("load", [&] {
            LoadedCheckpoint lc = load_checkpoint(cfg.load_model);
            const ModelConfig& a = lc.model.cfg;
            const ModelConfig& b = cfg.model;
            if (a.blocks != b.blocks || a.dim != b.dim || a.heads != b.heads ||
                a.tokens != b.tokens || a.num_classes != b.num_classes || a.in_dim != b.in_dim)
                throw std::runtime_error("checkpoint model config does not match the run config");
            Rng task_rng = fork_stream(cfg.seed, Stream::task);
            toy.data = gen_task(task_rng, cfg.task);
            toy.model = std::move(lc.model);
        });
    }
    ToyViT& m = toy.model;
    const Dataset& data = toy.data;

    double fp_test = 0.0, fp_calib = 0.0;
    ActCache acts;
    run_stage("baseline", [&] {
        fp_test = evaluate(m, data.test);
        fp_calib = evaluate(m, data.calib);
        acts = collect_activations(m, data.calib);
    });

    std::vector<FisherEstimate> traces;
    run_stage("fisher", [&] {
        Rng rng = fork_stream(cfg.seed, Stream::fisher);
        traces = fisher_traces(m, data.calib, fisher_mode_from_name(cfg.fisher_mode), rng,
                               cfg.label_samples);
    });

    TypeScales scales;
    SensitivityProfile profile;
    run_stage("type_scales", [&] {
        Rng rng = fork_stream(cfg.seed, Stream::type_scales);
        int mu = cfg.mu == 0 ? cfg.model.blocks : cfg.mu;
        scales = calibrate_type_scales(m, data.calib, acts, traces, mu, cfg.beta, rng);
        profile = score(traces, scales, m);
    });

    IlpInstance inst;
    Allocation alloc;
    run_stage("allocate", [&] {
        IlpConfig icfg;
        icfg.bit_set = cfg.bit_set;
        icfg.b_t = cfg.b_t;
        icfg.gamma = cfg.gamma;
        inst = build_instance(profile, icfg);
        alloc = solve_ilp(inst);
    });

    QuantizedModel qm;
    double init_calib = 0.0, init_test = 0.0;
    std::vector<double> recon_initial;
    run_stage("quantize", [&] {
        qm = quantize_model(m, alloc.bits, acts);
        init_calib = qm.accuracy(data.calib);
        init_test = qm.accuracy(data.test);
        for (int l = 0; l < m.num_layers(); ++l)
            recon_initial.push_back(measure_recon(qm, l, acts).loss);
    });

    RefineResult rr;
    double refined_test = 0.0;
    std::vector<double> recon_final;
    run_stage("refine", [&] {
        ReconRatioTable table = recon_ratio_table(1, 8);
        RefineState st;
        st.qm = &qm;
        st.inst = inst;
        rr = refine(st, acts, data.calib, table, cfg.max_refine_iters);
        refined_test = qm.accuracy(data.test);
        for (int l = 0; l < m.num_layers(); ++l)
            recon_final.push_back(measure_recon(qm, l, acts).loss);
    });

    nlohmann::ordered_json uniform = nlohmann::ordered_json::object();
    run_stage("uniform", [&] {
        std::set<int> widths(cfg.bit_set.begin(), cfg.bit_set.end());
        BtRational bt = parse_bt(cfg.b_t);
        if (bt.den == 1 && bt.num >= 1 && bt.num <= 32)
            widths.insert(static_cast<int>(bt.num));
        for (int b : widths)
            uniform[std::to_string(b)] = run_uniform_baseline(m, b, data.calib, data.test);
    });

    nlohmann::ordered_json report;
    report["schema"] = "run_report/1";
    report["config"] = config_to_json(cfg);

    report["layers"] = nlohmann::ordered_json::array();
    for (size_t l = 0; l < profile.layers.size(); ++l) {
        const LayerScore& s = profile.layers[l];
        nlohmann::ordered_json row;
        row["layer_id"] = s.layer_id;
        row["block"] = s.block;
        row["kind"] = kind_name(s.kind);
        row["c"] = s.c;
        row["trace"] = s.trace;
        row["alpha"] = s.alpha;
        row["omega"] = s.omega;
        row["bits_initial"] = alloc.bits[l];
        row["bits_final"] = rr.bits[l];
        row["recon_initial"] = recon_initial[l];
        row["recon_final"] = recon_final[l];
        report["layers"].push_back(row);
    }

    nlohmann::ordered_json ts;
    for (int k = 0; k < 4; ++k) {
        const char* name = kind_name(static_cast<LayerKind>(k));
        ts["alpha"][name] = scales.alpha[k];
        ts["avg_drop"][name] = scales.avg_drop[k];
        ts["mean_trace"][name] = scales.mean_trace[k];
    }
    ts["mu"] = scales.mu;
    ts["beta"] = scales.beta;
    ts["sampled_blocks"] = scales.sampled_blocks;
    report["type_scales"] = ts;

    report["allocation"] = allocation_to_json(alloc, inst);
    report["refine"] = refine_to_json(rr);

    nlohmann::ordered_json acc;
    acc["fp_test"] = fp_test;
    acc["fp_calib"] = fp_calib;
    acc["initial_calib"] = init_calib;
    acc["initial_test"] = init_test;
    acc["refined_calib"] = rr.final_accuracy;
    acc["refined_test"] = refined_test;
    acc["uniform_test"] = uniform;
    report["accuracy"] = acc;

    report["avg_bits_initial"] = alloc.avg_bits;
    report["avg_bits_final"] = inst.avg_bits(rr.bits);
    report["budget_ok"] = inst.budget_ok(rr.bits);

    if (cfg.emit_timings) {
        nlohmann::ordered_json t;
        for (const auto& [name, ms] : timings) t[name] = ms;
        report["timings_ms"] = t;
    }

    if (!cfg.checkpoint_path.empty()) {
        nlohmann::ordered_json extra;
        extra["run_config"] = config_to_json(cfg);
        extra["bits_initial"] = alloc.bits;
        extra["bits_final"] = rr.bits;
        save_checkpoint(cfg.checkpoint_path, m, extra);
    }
    if (!cfg.report_path.empty()) {
        std::ofstream out(cfg.report_path, std::ios::binary);
        if (!out) throw std::runtime_error("run: cannot write report to " + cfg.report_path);
        out << report.dump(2) << "\n";
    }
    return report;
}

}  // namespace mpq
