#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mpq/pipeline.hpp"

using nlohmann::ordered_json;

namespace {

// Bad flags, bad config files, malformed inputs: exit 2. Failures inside a
// validated run: exit 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const std::exception& e) {
        throw UsageError(path + ": " + e.what());
    }
}

void emit(const ordered_json& j, const std::string& out_path) {
    std::cout << j.dump(2) << "\n";
    if (!out_path.empty()) {
        std::ofstream out(out_path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + out_path);
        out << j.dump(2) << "\n";
    }
}

// Config flags shared by the model-handling subcommands. Only flags the user
// actually set are merged over the base config.
struct ConfigFlags {
    unsigned long long seed = 0;
    std::string config_path;
    std::vector<int> bits;
    std::string bt, fisher_mode;
    double gamma = 0, lr = 0, noise_sd = 0, pattern_sd = 0, threshold = 0;
    int mu = 0, beta = 0, refine_iters = 0, label_samples = 0;
    int epochs = 0, batch_size = 0;
    int train_n = 0, calib_n = 0, test_n = 0;
    int blocks = 0, dim = 0, heads = 0, tokens = 0, classes = 0, in_dim = 0;
    bool emit_timings = false;
    std::map<std::string, CLI::Option*> opt;
};

void add_config_flags(CLI::App* sub, ConfigFlags& f, bool require_seed) {
    f.opt["seed"] = sub->add_option("--seed", f.seed, "root rng seed");
    if (require_seed) f.opt["seed"]->required();
    sub->add_option("--config", f.config_path, "config JSON file (run_config/1)");
    f.opt["bits"] = sub->add_option("--bits", f.bits, "candidate bit-widths")->delimiter(',');
    f.opt["bt"] = sub->add_option("--bt", f.bt, "average-bit budget target (decimal)");
    f.opt["gamma"] = sub->add_option("--gamma", f.gamma, "objective base gamma");
    f.opt["mu"] = sub->add_option("--mu", f.mu, "blocks sampled for type scaling (0: all)");
    f.opt["beta"] = sub->add_option("--beta", f.beta, "probe bit-width for type scaling");
    f.opt["refine-iters"] =
        sub->add_option("--refine-iters", f.refine_iters, "refine cap (0: one per layer)");
    f.opt["fisher-mode"] =
        sub->add_option("--fisher-mode", f.fisher_mode, "trace mode: true or empirical");
    f.opt["label-samples"] = sub->add_option("--label-samples", f.label_samples,
                                             "label draws per example (0: exact)");
    f.opt["epochs"] = sub->add_option("--epochs", f.epochs, "training epochs");
    f.opt["lr"] = sub->add_option("--lr", f.lr, "learning rate");
    f.opt["batch-size"] = sub->add_option("--batch-size", f.batch_size, "minibatch size");
    f.opt["threshold"] =
        sub->add_option("--threshold", f.threshold, "minimum acceptable test accuracy");
    f.opt["noise-sd"] = sub->add_option("--noise-sd", f.noise_sd, "task noise level");
    f.opt["pattern-sd"] = sub->add_option("--pattern-sd", f.pattern_sd, "class pattern scale");
    f.opt["train-n"] = sub->add_option("--train-n", f.train_n, "training examples");
    f.opt["calib-n"] = sub->add_option("--calib-n", f.calib_n, "sample-set size S");
    f.opt["test-n"] = sub->add_option("--test-n", f.test_n, "test examples");
    f.opt["blocks"] = sub->add_option("--blocks", f.blocks, "transformer blocks N");
    f.opt["dim"] = sub->add_option("--dim", f.dim, "model width d");
    f.opt["heads"] = sub->add_option("--heads", f.heads, "attention heads");
    f.opt["tokens"] = sub->add_option("--tokens", f.tokens, "tokens per example");
    f.opt["classes"] = sub->add_option("--classes", f.classes, "number of classes");
    f.opt["in-dim"] = sub->add_option("--in-dim", f.in_dim, "input feature width");
    f.opt["emit-timings"] =
        sub->add_flag("--emit-timings", f.emit_timings,
                      "include per-stage timings (breaks byte-for-byte determinism)");
}

nlohmann::json flags_to_patch(const ConfigFlags& f) {
    nlohmann::json p = nlohmann::json::object();
    auto set = [&](const char* k) {
        auto it = f.opt.find(k);
        return it != f.opt.end() && it->second->count() > 0;
    };
    if (set("seed")) p["seed"] = f.seed;
    if (set("bits")) p["quant"]["bit_set"] = f.bits;
    if (set("bt")) p["quant"]["b_t"] = f.bt;
    if (set("gamma")) p["quant"]["gamma"] = f.gamma;
    if (set("mu")) p["quant"]["mu"] = f.mu;
    if (set("beta")) p["quant"]["beta"] = f.beta;
    if (set("refine-iters")) p["quant"]["max_refine_iters"] = f.refine_iters;
    if (set("fisher-mode")) p["fisher"]["mode"] = f.fisher_mode;
    if (set("label-samples")) p["fisher"]["label_samples"] = f.label_samples;
    if (set("epochs")) p["train"]["epochs"] = f.epochs;
    if (set("lr")) p["train"]["lr"] = f.lr;
    if (set("batch-size")) p["train"]["batch_size"] = f.batch_size;
    if (set("threshold")) p["train"]["accuracy_threshold"] = f.threshold;
    if (set("noise-sd")) p["task"]["noise_sd"] = f.noise_sd;
    if (set("pattern-sd")) p["task"]["pattern_sd"] = f.pattern_sd;
    if (set("train-n")) p["task"]["train_n"] = f.train_n;
    if (set("calib-n")) p["task"]["calib_n"] = f.calib_n;
    if (set("test-n")) p["task"]["test_n"] = f.test_n;
    if (set("blocks")) p["model"]["blocks"] = f.blocks;
    if (set("dim")) p["model"]["dim"] = f.dim;
    if (set("heads")) p["model"]["heads"] = f.heads;
    if (set("tokens")) p["model"]["tokens"] = f.tokens;
    if (set("classes")) p["model"]["num_classes"] = f.classes;
    if (set("in-dim")) p["model"]["in_dim"] = f.in_dim;
    if (set("emit-timings")) p["emit_timings"] = f.emit_timings;
    return p;
}

// base (e.g. a checkpoint's stored config) < --config file < explicit flags.
mpq::RunConfig build_config(const nlohmann::json& base, const ConfigFlags& f) {
    nlohmann::json merged = base.is_object() ? base : nlohmann::json::object();
    merged.erase("schema");
    if (!f.config_path.empty()) {
        nlohmann::json file = read_json_file(f.config_path);
        merged.merge_patch(file);
    }
    merged.merge_patch(flags_to_patch(f));
    try {
        return mpq::config_from_json(merged);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
}

// Loads a checkpoint plus its stored run config (when present) as config base.
struct LoadedModel {
    mpq::ToyViT model;
    nlohmann::json stored_config;  // null when the checkpoint has none
};

LoadedModel load_model_file(const std::string& path) {
    mpq::LoadedCheckpoint lc = mpq::load_checkpoint(path);
    LoadedModel lm;
    lm.model = std::move(lc.model);
    if (lc.header.contains("run_config")) lm.stored_config = lc.header.at("run_config");
    return lm;
}

void check_model_matches(const mpq::ModelConfig& a, const mpq::ModelConfig& b) {
    if (a.blocks != b.blocks || a.dim != b.dim || a.heads != b.heads || a.tokens != b.tokens ||
        a.num_classes != b.num_classes || a.in_dim != b.in_dim)
        throw UsageError("checkpoint model shape does not match the requested config");
}

std::string csv_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9e", v);
    return buf;
}

int cmd_tables(int max_bit, double clip, const std::string& csv_path,
               const std::string& json_path, long long mc_samples, bool have_seed,
               unsigned long long seed) {
    if (max_bit < 1 || max_bit > 20) throw UsageError("--max-bit must lie in [1, 20]");
    if (!(clip > 0.0)) throw UsageError("--clip must be positive");
    if (mc_samples < 0) throw UsageError("--mc-samples must be nonnegative");
    if (mc_samples > 0 && !have_seed) throw UsageError("--seed is required with --mc-samples");

    mpq::ReconRatioTable table = mpq::recon_ratio_table(1, max_bit, clip);
    std::vector<mpq::ExpectationRow> rows;
    for (int b = 1; b <= max_bit; ++b) rows.push_back(mpq::gaussian_expectations(b, clip));

    std::vector<mpq::McEstimate> mc;
    if (mc_samples > 0) {
        mpq::Rng rng(seed);
        std::vector<int> bits;
        for (int b = 1; b <= max_bit; ++b) bits.push_back(b);
        mc = mpq::mc_expectations(rng, bits, clip, mc_samples);
    }

    const auto& ref = mpq::reference_table();
    std::string csv = "bits,e_xx,e_xd,e_dd,k,k_norm,ratio,ref_e_xd,ref_e_dd,ref_k_norm,"
                      "ref_ratio,rel_err_e_xd,rel_err_e_dd";
    if (!mc.empty()) csv += ",mc_e_xd,mc_e_dd,mc_z_xd,mc_z_dd";
    csv += "\n";
    ordered_json jrows = ordered_json::array();
    for (int b = 1; b <= max_bit; ++b) {
        const mpq::ExpectationRow& r = rows[b - 1];
        const mpq::RatioRow& t = table.rows[b - 1];
        ordered_json jr;
        jr["bits"] = b;
        jr["e_xx"] = r.e_xx;
        jr["e_xd"] = r.e_xd;
        jr["e_dd"] = r.e_dd;
        jr["k"] = t.k;
        jr["k_norm"] = t.k_norm;
        jr["ratio"] = t.ratio;
        csv += std::to_string(b) + "," + csv_num(r.e_xx) + "," + csv_num(r.e_xd) + "," +
               csv_num(r.e_dd) + "," + csv_num(t.k) + "," + csv_num(t.k_norm) + "," +
               csv_num(t.ratio);
        if (b <= static_cast<int>(ref.size())) {
            const mpq::ReferenceEntry& e = ref[b - 1];
            double rel_xd = std::abs(r.e_xd - e.e_xd) / std::abs(e.e_xd);
            double rel_dd = std::abs(r.e_dd - e.e_dd) / std::abs(e.e_dd);
            jr["ref_e_xd"] = e.e_xd;
            jr["ref_e_dd"] = e.e_dd;
            jr["ref_k_norm"] = e.k_norm;
            jr["ref_ratio"] = e.ratio;
            jr["rel_err_e_xd"] = rel_xd;
            jr["rel_err_e_dd"] = rel_dd;
            csv += "," + csv_num(e.e_xd) + "," + csv_num(e.e_dd) + "," + csv_num(e.k_norm) +
                   "," + csv_num(e.ratio) + "," + csv_num(rel_xd) + "," + csv_num(rel_dd);
        } else {
            csv += ",,,,,,";
        }
        if (!mc.empty()) {
            const mpq::McEstimate& s = mc[b - 1];
            double z_xd = s.se_xd > 0 ? (s.e_xd - r.e_xd) / s.se_xd : 0.0;
            double z_dd = s.se_dd > 0 ? (s.e_dd - r.e_dd) / s.se_dd : 0.0;
            jr["mc_e_xd"] = s.e_xd;
            jr["mc_e_dd"] = s.e_dd;
            jr["mc_z_xd"] = z_xd;
            jr["mc_z_dd"] = z_dd;
            csv += "," + csv_num(s.e_xd) + "," + csv_num(s.e_dd) + "," + csv_num(z_xd) + "," +
                   csv_num(z_dd);
        }
        csv += "\n";
        jrows.push_back(jr);
    }

    std::cout << csv;
    if (!csv_path.empty()) {
        std::ofstream out(csv_path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + csv_path);
        out << csv;
    }
    if (!json_path.empty()) {
        ordered_json j;
        j["schema"] = "tables/1";
        j["clip"] = clip;
        j["rows"] = jrows;
        std::ofstream out(json_path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + json_path);
        out << j.dump(2) << "\n";
    }
    return 0;
}

int cmd_train_toy(const ConfigFlags& f, const std::string& save_path,
                  const std::string& out_path) {
    mpq::RunConfig cfg = build_config({}, f);
    mpq::TrainedToy toy = mpq::train_toy(cfg);
    ordered_json j;
    j["schema"] = "train_toy/1";
    j["config"] = mpq::config_to_json(cfg);
    j["accuracy"] = {{"train", mpq::evaluate(toy.model, toy.data.train)},
                     {"calib", mpq::evaluate(toy.model, toy.data.calib)},
                     {"test", mpq::evaluate(toy.model, toy.data.test)}};
    if (!save_path.empty()) {
        ordered_json extra;
        extra["run_config"] = mpq::config_to_json(cfg);
        mpq::save_checkpoint(save_path, toy.model, extra);
        j["checkpoint"] = save_path;
    }
    emit(j, out_path);
    return 0;
}

// Returns the model plus regenerated data, either by training or from --load.
mpq::TrainedToy model_for(const ConfigFlags& f, const std::string& load_path,
                          mpq::RunConfig& cfg_out) {
    if (load_path.empty()) {
        cfg_out = build_config({}, f);
        return mpq::train_toy(cfg_out);
    }
    LoadedModel lm = load_model_file(load_path);
    cfg_out = build_config(lm.stored_config, f);
    check_model_matches(lm.model.cfg, cfg_out.model);
    mpq::TrainedToy toy;
    mpq::Rng task_rng = mpq::fork_stream(cfg_out.seed, mpq::Stream::task);
    toy.data = mpq::gen_task(task_rng, cfg_out.task);
    toy.model = std::move(lm.model);
    return toy;
}

int cmd_sweep(const ConfigFlags& f, const std::string& load_path, int bits,
              const std::string& out_path) {
    if (bits < 1 || bits > 32) throw UsageError("--probe-bits must lie in [1, 32]");
    mpq::RunConfig cfg;
    mpq::TrainedToy toy = model_for(f, load_path, cfg);
    double baseline = mpq::evaluate(toy.model, toy.data.calib);
    std::vector<double> drops = mpq::sweep_single_layer(toy.model, toy.data.calib, bits);
    ordered_json j;
    j["schema"] = "sweep/1";
    j["bits"] = bits;
    j["baseline_calib"] = baseline;
    j["drops"] = ordered_json::array();
    for (size_t l = 0; l < drops.size(); ++l) {
        const mpq::LayerRecord& rec = toy.model.layers[l];
        j["drops"].push_back({{"layer_id", rec.layer_id},
                              {"block", rec.block_idx},
                              {"kind", mpq::kind_name(rec.kind)},
                              {"drop", drops[l]}});
    }
    emit(j, out_path);
    return 0;
}

int cmd_sensitivity(const ConfigFlags& f, const std::string& load_path,
                    const std::string& out_path) {
    mpq::RunConfig cfg;
    mpq::TrainedToy toy = model_for(f, load_path, cfg);
    mpq::ActCache acts = mpq::collect_activations(toy.model, toy.data.calib);
    mpq::Rng frng = mpq::fork_stream(cfg.seed, mpq::Stream::fisher);
    std::vector<mpq::FisherEstimate> traces =
        mpq::fisher_traces(toy.model, toy.data.calib, mpq::fisher_mode_from_name(cfg.fisher_mode),
                           frng, cfg.label_samples);
    mpq::Rng tsrng = mpq::fork_stream(cfg.seed, mpq::Stream::type_scales);
    int mu = cfg.mu == 0 ? cfg.model.blocks : cfg.mu;
    mpq::TypeScales scales =
        mpq::calibrate_type_scales(toy.model, toy.data.calib, acts, traces, mu, cfg.beta, tsrng);
    mpq::SensitivityProfile profile = mpq::score(traces, scales, toy.model);
    emit(mpq::profile_to_json(profile), out_path);
    return 0;
}

int cmd_allocate(const std::string& profile_path, const std::string& bt,
                 const std::vector<int>& bits, double gamma, bool brute_check,
                 const std::string& out_path) {
    nlohmann::json pj = read_json_file(profile_path);
    mpq::SensitivityProfile profile;
    try {
        profile = mpq::profile_from_json(pj);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    mpq::IlpConfig icfg;
    icfg.bit_set = bits;
    icfg.b_t = bt;
    icfg.gamma = gamma;
    mpq::IlpInstance inst;
    try {
        inst = mpq::build_instance(profile, icfg);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    mpq::Allocation a = mpq::solve_ilp(inst);
    ordered_json j = mpq::allocation_to_json(a, inst);
    if (brute_check) {
        mpq::Allocation b = mpq::brute_force_alloc(inst);
        j["brute_objective"] = b.objective;
        j["brute_match"] = b.objective == a.objective && b.bits == a.bits;
        if (!j["brute_match"].get<bool>()) {
            emit(j, out_path);
            throw std::runtime_error("solver and brute force disagree");
        }
    }
    emit(j, out_path);
    return 0;
}

int cmd_refine(const ConfigFlags& f, const std::string& load_path,
               const std::string& alloc_path, const std::string& out_path) {
    mpq::RunConfig cfg;
    mpq::TrainedToy toy = model_for(f, load_path, cfg);
    nlohmann::json aj = read_json_file(alloc_path);
    if (!aj.contains("bits") || !aj.at("bits").is_array())
        throw UsageError(alloc_path + ": missing bits array");
    std::vector<int> bits = aj.at("bits").get<std::vector<int>>();
    if (static_cast<int>(bits.size()) != toy.model.num_layers())
        throw UsageError("allocation length does not match the model's layer count");
    for (int b : bits)
        if (b < 1 || b > 32) throw UsageError("allocation bits must lie in [1, 32]");

    mpq::ActCache acts = mpq::collect_activations(toy.model, toy.data.calib);
    std::vector<double> omega(bits.size(), 0.0);
    std::vector<long long> counts;
    for (const auto& rec : toy.model.layers) counts.push_back(rec.param_count());
    mpq::IlpInstance inst =
        mpq::make_instance(std::move(omega), std::move(counts), cfg.bit_set, cfg.b_t, cfg.gamma);
    if (!inst.budget_ok(bits)) throw UsageError("initial allocation violates the budget");

    mpq::QuantizedModel qm = mpq::quantize_model(toy.model, bits, acts);
    mpq::ReconRatioTable table = mpq::recon_ratio_table(1, 8);
    mpq::RefineState st;
    st.qm = &qm;
    st.inst = inst;
    mpq::RefineResult rr =
        mpq::refine(st, acts, toy.data.calib, table, cfg.max_refine_iters);
    ordered_json j = mpq::refine_to_json(rr);
    j["test_accuracy"] = qm.accuracy(toy.data.test);
    emit(j, out_path);
    return 0;
}

int cmd_run(const ConfigFlags& f, const std::string& out_path, const std::string& save_path,
            const std::string& load_path) {
    mpq::RunConfig cfg;
    if (load_path.empty()) {
        cfg = build_config({}, f);
    } else {
        LoadedModel lm = load_model_file(load_path);
        cfg = build_config(lm.stored_config, f);
        cfg.load_model = load_path;
    }
    cfg.report_path = out_path;
    cfg.checkpoint_path = save_path;
    ordered_json report = mpq::run_pipeline(cfg);
    std::cout << report.dump(2) << "\n";
    return 0;
}

int cmd_eval(const ConfigFlags& f, const std::string& load_path, int bits,
             const std::string& out_path) {
    LoadedModel lm = load_model_file(load_path);
    if (lm.stored_config.is_null() && f.opt.at("seed")->count() == 0 && f.config_path.empty())
        throw UsageError("checkpoint stores no config; pass --seed (and task flags)");
    mpq::RunConfig cfg = build_config(lm.stored_config, f);
    check_model_matches(lm.model.cfg, cfg.model);
    mpq::Rng task_rng = mpq::fork_stream(cfg.seed, mpq::Stream::task);
    mpq::Dataset data = mpq::gen_task(task_rng, cfg.task);

    ordered_json j;
    j["schema"] = "eval/1";
    j["accuracy"] = {{"train", mpq::evaluate(lm.model, data.train)},
                     {"calib", mpq::evaluate(lm.model, data.calib)},
                     {"test", mpq::evaluate(lm.model, data.test)}};
    if (bits > 0) {
        if (bits > 32) throw UsageError("--uniform-bits must lie in [1, 32]");
        j["uniform_bits"] = bits;
        j["uniform_test"] = mpq::run_uniform_baseline(lm.model, bits, data.calib, data.test);
    }
    emit(j, out_path);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mpq: mixed-precision post-training quantization laboratory"};
    app.require_subcommand(1);
    int threads = 1;
    app.add_option("--threads", threads,
                   "accepted for interface compatibility; execution is single-threaded");

    // tables
    auto* t_sub = app.add_subcommand(
        "tables", "print the quantization-error expectation and ratio tables as CSV");
    int t_max_bit = 8;
    double t_clip = 3.0;
    std::string t_csv, t_json;
    long long t_mc = 0;
    unsigned long long t_seed = 0;
    t_sub->add_option("--max-bit", t_max_bit, "largest bit-width row");
    t_sub->add_option("--clip", t_clip, "range half-width in standard deviations");
    t_sub->add_option("--csv", t_csv, "also write the CSV here");
    t_sub->add_option("--json", t_json, "also write a JSON table here");
    t_sub->add_option("--mc-samples", t_mc, "Monte-Carlo cross-check sample count");
    auto* t_seed_opt = t_sub->add_option("--seed", t_seed, "rng seed for --mc-samples");

    // train-toy
    auto* tr_sub = app.add_subcommand("train-toy", "train the toy transformer on the synthetic task");
    ConfigFlags tr_f;
    std::string tr_save, tr_out;
    add_config_flags(tr_sub, tr_f, true);
    tr_sub->add_option("--save", tr_save, "write an MPQ1 checkpoint here");
    tr_sub->add_option("--out", tr_out, "also write the summary JSON here");

    // sweep
    auto* sw_sub = app.add_subcommand(
        "sweep", "accuracy drop from quantizing each layer alone to a probe width");
    ConfigFlags sw_f;
    std::string sw_load, sw_out;
    int sw_bits = 1;
    add_config_flags(sw_sub, sw_f, true);
    sw_sub->add_option("--load", sw_load, "MPQ1 checkpoint instead of training");
    sw_sub->add_option("--probe-bits", sw_bits, "single-layer probe bit-width");
    sw_sub->add_option("--out", sw_out, "also write the sweep JSON here");

    // sensitivity
    auto* se_sub = app.add_subcommand(
        "sensitivity", "per-layer Fisher traces with type-aware scaling (profile JSON)");
    ConfigFlags se_f;
    std::string se_load, se_out;
    add_config_flags(se_sub, se_f, true);
    se_sub->add_option("--load", se_load, "MPQ1 checkpoint instead of training");
    se_sub->add_option("--out", se_out, "also write the profile JSON here");

    // allocate
    auto* al_sub = app.add_subcommand(
        "allocate", "exact budgeted bit assignment from a sensitivity profile");
    std::string al_profile, al_out, al_bt = "3";
    std::vector<int> al_bits = {2, 3, 4};
    double al_gamma = 6.0;
    bool al_brute = false;
    al_sub->add_option("--profile", al_profile, "sensitivity profile JSON")->required();
    al_sub->add_option("--bt", al_bt, "average-bit budget target (decimal)");
    al_sub->add_option("--bits", al_bits, "candidate bit-widths")->delimiter(',');
    al_sub->add_option("--gamma", al_gamma, "objective base gamma");
    al_sub->add_flag("--brute-check", al_brute, "cross-check against exhaustive enumeration");
    al_sub->add_option("--out", al_out, "also write the allocation JSON here");

    // refine
    auto* rf_sub = app.add_subcommand(
        "refine", "iterative bit swaps from a checkpoint and an initial allocation");
    ConfigFlags rf_f;
    std::string rf_load, rf_alloc, rf_out;
    add_config_flags(rf_sub, rf_f, true);
    rf_sub->add_option("--load", rf_load, "MPQ1 checkpoint")->required();
    rf_sub->add_option("--alloc", rf_alloc, "allocation JSON with a bits array")->required();
    rf_sub->add_option("--out", rf_out, "also write the refine JSON here");

    // run
    auto* rn_sub = app.add_subcommand("run", "full pipeline; writes the run report");
    ConfigFlags rn_f;
    std::string rn_out, rn_save, rn_load;
    add_config_flags(rn_sub, rn_f, true);
    rn_sub->add_option("--out", rn_out, "write the report JSON here");
    rn_sub->add_option("--save", rn_save, "write an MPQ1 checkpoint here");
    rn_sub->add_option("--load", rn_load, "MPQ1 checkpoint instead of training");

    // eval
    auto* ev_sub = app.add_subcommand("eval", "evaluate a checkpoint on its regenerated task");
    ConfigFlags ev_f;
    std::string ev_load, ev_out;
    int ev_bits = 0;
    add_config_flags(ev_sub, ev_f, false);
    ev_sub->add_option("--load", ev_load, "MPQ1 checkpoint")->required();
    ev_sub->add_option("--uniform-bits", ev_bits, "also report a uniform baseline at this width");
    ev_sub->add_option("--out", ev_out, "also write the eval JSON here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    if (threads < 1) {
        std::cerr << "error: --threads must be >= 1\n";
        return 2;
    }

    try {
        if (t_sub->parsed())
            return cmd_tables(t_max_bit, t_clip, t_csv, t_json, t_mc, t_seed_opt->count() > 0,
                              t_seed);
        if (tr_sub->parsed()) return cmd_train_toy(tr_f, tr_save, tr_out);
        if (sw_sub->parsed()) return cmd_sweep(sw_f, sw_load, sw_bits, sw_out);
        if (se_sub->parsed()) return cmd_sensitivity(se_f, se_load, se_out);
        if (al_sub->parsed())
            return cmd_allocate(al_profile, al_bt, al_bits, al_gamma, al_brute, al_out);
        if (rf_sub->parsed()) return cmd_refine(rf_f, rf_load, rf_alloc, rf_out);
        if (rn_sub->parsed()) return cmd_run(rn_f, rn_out, rn_save, rn_load);
        if (ev_sub->parsed()) return cmd_eval(ev_f, ev_load, ev_bits, ev_out);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no subcommand\n";
    return 2;
}
