#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "mpq/pipeline.hpp"

using namespace mpq;

namespace {

// Small enough to train in seconds, hard enough that quantization matters.
RunConfig fast_config() {
    RunConfig cfg;
    cfg.seed = 5;
    cfg.model.blocks = 1;
    cfg.model.dim = 4;
    cfg.model.heads = 2;
    cfg.model.tokens = 4;
    cfg.model.num_classes = 2;
    cfg.model.in_dim = 4;
    cfg.task.num_classes = 2;
    cfg.task.tokens = 4;
    cfg.task.in_dim = 4;
    cfg.task.train_n = 256;
    cfg.task.calib_n = 64;
    cfg.task.test_n = 128;
    cfg.task.pattern_sd = 1.0;
    cfg.task.noise_sd = 0.4;
    cfg.train.epochs = 12;
    cfg.train.lr = 5e-3;
    cfg.train.batch_size = 32;
    cfg.train.accuracy_threshold = 0.8;
    cfg.mu = 0;
    cfg.beta = 2;
    cfg.max_refine_iters = 2;
    return cfg;
}

}  // namespace

TEST_CASE("task generation is deterministic with disjoint splits") {
    TaskConfig tc;
    tc.train_n = 40;
    tc.calib_n = 12;
    tc.test_n = 20;
    Rng r1(9), r2(9);
    Dataset a = gen_task(r1, tc);
    Dataset b = gen_task(r2, tc);
    CHECK(a.train.size() == 40);
    CHECK(a.calib.size() == 12);
    CHECK(a.test.size() == 20);
    for (size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train.labels[i] == b.train.labels[i]);
        for (size_t j = 0; j < a.train.inputs[i].size(); ++j)
            CHECK(a.train.inputs[i].data[j] == b.train.inputs[i].data[j]);
    }
    for (size_t i = 0; i < a.calib.size(); ++i)
        for (size_t j = 0; j < a.calib.inputs[i].size(); ++j)
            CHECK(a.calib.inputs[i].data[j] == b.calib.inputs[i].data[j]);

    Rng r3(10);
    Dataset c = gen_task(r3, tc);
    bool differs = false;
    for (size_t j = 0; j < a.train.inputs[0].size() && !differs; ++j)
        differs = a.train.inputs[0].data[j] != c.train.inputs[0].data[j];
    CHECK(differs);
}

TEST_CASE("noise free task is linearly classifiable from the patterns") {
    TaskConfig tc;
    tc.num_classes = 4;
    tc.tokens = 4;
    tc.in_dim = 8;
    tc.train_n = 200;
    tc.calib_n = 10;
    tc.test_n = 50;
    tc.noise_sd = 0.0;
    Rng rng(11);
    Dataset d = gen_task(rng, tc);

    // With zero noise every token equals its class pattern, so examples of the
    // same class are identical; nearest-pattern classification is perfect.
    std::vector<Matrix> pattern(static_cast<size_t>(tc.num_classes));
    for (size_t i = 0; i < d.train.size(); ++i)
        pattern[static_cast<size_t>(d.train.labels[i])] = d.train.inputs[i];
    for (size_t i = 0; i < d.test.size(); ++i) {
        int best = -1;
        double best_dist = 1e300;
        for (int k = 0; k < tc.num_classes; ++k) {
            if (pattern[static_cast<size_t>(k)].size() == 0) continue;
            double dist = frobenius_norm_sq(sub(d.test.inputs[i], pattern[static_cast<size_t>(k)]));
            if (dist < best_dist) {
                best_dist = dist;
                best = k;
            }
        }
        CHECK(best == d.test.labels[i]);
    }
}

TEST_CASE("task labels are roughly uniform") {
    TaskConfig tc;
    tc.num_classes = 4;
    tc.train_n = 10000;
    tc.calib_n = 10;
    tc.test_n = 10;
    Rng rng(12);
    Dataset d = gen_task(rng, tc);
    std::vector<int> counts(4, 0);
    for (int l : d.train.labels) ++counts[static_cast<size_t>(l)];
    for (int c : counts) CHECK(std::abs(c / 10000.0 - 0.25) < 0.02);
}

TEST_CASE("gen_task validates shape") {
    TaskConfig tc;
    tc.train_n = 0;
    Rng rng(13);
    CHECK_THROWS(gen_task(rng, tc));
    tc.train_n = 10;
    tc.num_classes = 1;
    CHECK_THROWS(gen_task(rng, tc));
}

TEST_CASE("config json round trips and rejects unknown keys") {
    RunConfig cfg = fast_config();
    cfg.bit_set = {2, 4, 6};
    cfg.b_t = "3.5";
    cfg.gamma = 4.0;
    cfg.fisher_mode = "empirical";
    cfg.label_samples = 3;
    cfg.emit_timings = false;

    nlohmann::ordered_json j = config_to_json(cfg);
    CHECK(j.at("schema") == "run_config/1");
    RunConfig back = config_from_json(j);
    CHECK(back.seed == cfg.seed);
    CHECK(back.model.blocks == cfg.model.blocks);
    CHECK(back.model.dim == cfg.model.dim);
    CHECK(back.task.train_n == cfg.task.train_n);
    CHECK(back.task.noise_sd == cfg.task.noise_sd);
    CHECK(back.train.epochs == cfg.train.epochs);
    CHECK(back.train.lr == cfg.train.lr);
    CHECK(back.fisher_mode == cfg.fisher_mode);
    CHECK(back.label_samples == cfg.label_samples);
    CHECK(back.bit_set == cfg.bit_set);
    CHECK(back.b_t == cfg.b_t);
    CHECK(back.gamma == cfg.gamma);
    CHECK(back.mu == cfg.mu);
    CHECK(back.beta == cfg.beta);
    CHECK(back.max_refine_iters == cfg.max_refine_iters);

    // The echo is canonical: serializing the parsed config reproduces it.
    CHECK(config_to_json(back).dump() == j.dump());

    nlohmann::json bad = j;
    bad["quant"]["surprise"] = 1;
    CHECK_THROWS(config_from_json(bad));
    nlohmann::json bad2 = j;
    bad2["model"]["dim"] = -4;
    CHECK_THROWS(config_from_json(bad2));
    nlohmann::json bad3 = j;
    bad3["schema"] = "run_config/999";
    CHECK_THROWS(config_from_json(bad3));
    nlohmann::json bad4 = j;
    bad4["task"]["tokens"] = 5;  // must mirror the model
    CHECK_THROWS(config_from_json(bad4));
}

TEST_CASE("validate_config rejects out of range settings") {
    RunConfig cfg = fast_config();
    CHECK_NOTHROW(validate_config(cfg));
    RunConfig bad = cfg;
    bad.model.dim = 5;  // not divisible by heads
    CHECK_THROWS(validate_config(bad));
    bad = cfg;
    bad.gamma = 1.0;
    CHECK_THROWS(validate_config(bad));
    bad = cfg;
    bad.beta = 0;
    CHECK_THROWS(validate_config(bad));
    bad = cfg;
    bad.beta = 32;
    CHECK_THROWS(validate_config(bad));
    bad = cfg;
    bad.mu = 7;  // exceeds the block count
    CHECK_THROWS(validate_config(bad));
    bad = cfg;
    bad.bit_set.clear();
    CHECK_THROWS(validate_config(bad));
    bad = cfg;
    bad.b_t = "1.5";  // below min(bit_set)
    CHECK_THROWS(validate_config(bad));
    bad = cfg;
    bad.fisher_mode = "mystery";
    CHECK_THROWS(validate_config(bad));
    bad = cfg;
    bad.task.calib_n = 0;
    CHECK_THROWS(validate_config(bad));
}

TEST_CASE("stream forks are stable and distinct") {
    Rng a = fork_stream(123, Stream::task);
    Rng b = fork_stream(123, Stream::task);
    CHECK(a.next_u64() == b.next_u64());
    Rng c = fork_stream(123, Stream::train);
    Rng d = fork_stream(123, Stream::fisher);
    CHECK(c.next_u64() != d.next_u64());
}

TEST_CASE("train_toy reaches threshold or reports a remedy") {
    RunConfig cfg = fast_config();
    TrainedToy t = train_toy(cfg);
    CHECK(evaluate(t.model, t.data.test) >= cfg.train.accuracy_threshold);

    // Same seed, same model, bit for bit.
    TrainedToy t2 = train_toy(cfg);
    auto p1 = collect_params(static_cast<const ToyViT&>(t.model));
    auto p2 = collect_params(static_cast<const ToyViT&>(t2.model));
    for (size_t p = 0; p < p1.size(); ++p)
        for (size_t i = 0; i < p1[p]->size(); ++i) CHECK(p1[p]->data[i] == p2[p]->data[i]);

    // An impossible threshold produces the documented error text.
    RunConfig hopeless = cfg;
    hopeless.train.epochs = 0;
    hopeless.train.accuracy_threshold = 0.99;
    try {
        train_toy(hopeless);
        CHECK(false);
    } catch (const std::exception& e) {
        std::string msg = e.what();
        CHECK(msg.find("below the threshold") != std::string::npos);
    }
}

TEST_CASE("uniform baseline at full width equals the float model") {
    RunConfig cfg = fast_config();
    TrainedToy t = train_toy(cfg);
    double fp = evaluate(t.model, t.data.test);
    CHECK(run_uniform_baseline(t.model, 32, t.data.calib, t.data.test) == fp);
    double one_bit = run_uniform_baseline(t.model, 1, t.data.calib, t.data.test);
    CHECK(one_bit <= fp + 1e-12);
}

TEST_CASE("run_pipeline produces a complete deterministic report") {
    RunConfig cfg = fast_config();
    nlohmann::ordered_json rep = run_pipeline(cfg);

    CHECK(rep.at("schema") == "run_report/1");
    CHECK(rep.at("config").at("schema") == "run_config/1");
    CHECK(rep.at("budget_ok") == true);

    const auto& layers = rep.at("layers");
    REQUIRE(layers.size() == 4);
    for (const auto& l : layers) {
        int bi = l.at("bits_initial").get<int>();
        int bf = l.at("bits_final").get<int>();
        CHECK(bi >= 2);
        CHECK(bi <= 4);
        CHECK(bf >= 2);
        CHECK(bf <= 4);
        CHECK(l.at("recon_initial").get<double>() >= 0.0);
        CHECK(l.at("recon_final").get<double>() >= 0.0);
        CHECK(l.at("omega").get<double>() >= 0.0);
        CHECK(l.at("c").get<long long>() > 0);
    }

    const auto& acc = rep.at("accuracy");
    double fp_test = acc.at("fp_test").get<double>();
    CHECK(fp_test >= cfg.train.accuracy_threshold);
    CHECK(acc.at("fp_calib").get<double>() > 0.0);
    // Refinement never ends below the initial allocation on the sample set.
    CHECK(acc.at("refined_calib").get<double>() >= acc.at("initial_calib").get<double>());
    CHECK(acc.at("refined_test").get<double>() >= 0.0);
    const auto& uniform = acc.at("uniform_test");
    CHECK(uniform.size() >= 3);
    for (auto it = uniform.begin(); it != uniform.end(); ++it)
        CHECK(it.value().get<double>() >= 0.0);

    CHECK(rep.at("avg_bits_final").get<double>() <= parse_bt(cfg.b_t).value() + 1e-12);
    CHECK(rep.at("allocation").at("schema") == "allocation/1");
    CHECK(rep.at("refine").at("schema") == "refine/1");
    CHECK(rep.at("type_scales").at("alpha").size() == 4);
    CHECK(rep.at("type_scales").at("sampled_blocks").size() ==
          static_cast<size_t>(cfg.model.blocks));

    // Byte determinism: an identical config dumps the identical report.
    nlohmann::ordered_json rep2 = run_pipeline(cfg);
    CHECK(rep.dump() == rep2.dump());
}

TEST_CASE("budget at the top width saturates the allocation") {
    RunConfig cfg = fast_config();
    cfg.bit_set = {2, 3, 4};
    cfg.b_t = "4";
    cfg.max_refine_iters = 1;
    nlohmann::ordered_json rep = run_pipeline(cfg);
    for (const auto& l : rep.at("layers")) CHECK(l.at("bits_initial").get<int>() == 4);
}

TEST_CASE("pipeline errors carry their stage tag") {
    RunConfig cfg = fast_config();
    cfg.load_model = "missing_checkpoint.mpq1";
    try {
        run_pipeline(cfg);
        CHECK(false);
    } catch (const std::exception& e) {
        std::string msg = e.what();
        CHECK(msg.find("stage load") != std::string::npos);
    }
}

TEST_CASE("pipeline writes report and checkpoint files on request") {
    RunConfig cfg = fast_config();
    cfg.report_path = "test_pipeline_report.json";
    cfg.checkpoint_path = "test_pipeline_ckpt.mpq1";
    nlohmann::ordered_json rep = run_pipeline(cfg);

    std::ifstream f(cfg.report_path);
    REQUIRE(f.good());
    nlohmann::json from_disk = nlohmann::json::parse(f);
    CHECK(from_disk.at("schema") == "run_report/1");
    CHECK(from_disk.at("accuracy").at("fp_test") == rep.at("accuracy").at("fp_test"));

    LoadedCheckpoint lc = load_checkpoint(cfg.checkpoint_path);
    CHECK(lc.header.contains("run_config"));
    CHECK(lc.header.contains("bits_final"));
    CHECK(lc.model.cfg.blocks == cfg.model.blocks);

    // Loading the checkpoint back reproduces the trained model's accuracies.
    RunConfig reuse = cfg;
    reuse.report_path.clear();
    reuse.checkpoint_path.clear();
    reuse.load_model = cfg.checkpoint_path;
    nlohmann::ordered_json rep2 = run_pipeline(reuse);
    CHECK(rep2.at("accuracy").at("fp_test") == rep.at("accuracy").at("fp_test"));

    std::remove(cfg.report_path.c_str());
    std::remove(cfg.checkpoint_path.c_str());
}
