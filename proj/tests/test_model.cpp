#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "mpq/checkpoint.hpp"
#include "mpq/model.hpp"

using namespace mpq;

namespace {

Batch random_batch(const ModelConfig& cfg, int n, Rng& rng) {
    Batch b;
    for (int i = 0; i < n; ++i) {
        b.inputs.push_back(gaussian_matrix(rng, cfg.tokens, cfg.in_dim));
        b.labels.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(cfg.num_classes))));
    }
    return b;
}

}  // namespace

TEST_CASE("layer ids and kind names") {
    ModelConfig cfg;
    cfg.blocks = 3;
    Rng rng(1);
    ToyViT m = init_model(cfg, rng);
    CHECK(m.num_layers() == 12);
    for (int b = 0; b < cfg.blocks; ++b) {
        for (LayerKind k : {LayerKind::qkv, LayerKind::proj, LayerKind::fc1, LayerKind::fc2}) {
            const LayerRecord& rec = m.layer(b, k);
            CHECK(rec.layer_id == 4 * b + kind_ordinal(k));
            CHECK(rec.block_idx == b);
            CHECK(rec.kind == k);
            CHECK(kind_from_name(kind_name(k)) == k);
        }
    }
    CHECK_THROWS(kind_from_name("nonsense"));

    long long total = 0;
    for (const auto& l : m.layers) total += l.param_count();
    CHECK(m.total_quantizable_params() == total);
    // qkv 3d*d, proj d*d, fc1 4d*d, fc2 d*4d per block.
    long long d = cfg.dim;
    CHECK(total == cfg.blocks * (3 * d * d + d * d + 4 * d * d + 4 * d * d));
}

TEST_CASE("forward shapes and layer input capture") {
    ModelConfig cfg;
    Rng rng(2);
    ToyViT m = init_model(cfg, rng);
    Matrix x = gaussian_matrix(rng, cfg.tokens, cfg.in_dim);
    std::vector<Matrix> inputs;
    Matrix logits = forward_logits(m, x, nullptr, &inputs);
    CHECK(logits.rows == 1);
    CHECK(logits.cols == cfg.num_classes);
    CHECK(all_finite(logits));
    REQUIRE(static_cast<int>(inputs.size()) == m.num_layers());
    for (const auto& l : m.layers) {
        const Matrix& in = inputs[static_cast<size_t>(l.layer_id)];
        CHECK(in.rows == cfg.tokens);
        CHECK(in.cols == l.weight.cols);
    }

    Batch b = random_batch(cfg, 5, rng);
    Matrix stacked = forward_batch(m, b);
    CHECK(stacked.rows == 5);
    CHECK(stacked.cols == cfg.num_classes);
}

TEST_CASE("all zero model gives uniform logits and ln K loss") {
    ModelConfig cfg;
    cfg.num_classes = 4;
    ToyViT m = model_skeleton(cfg);
    Rng rng(3);
    Batch b = random_batch(cfg, 16, rng);
    double loss = loss_eval(m, b);
    CHECK(loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("nll hand cases and shift invariance") {
    Matrix logits(1, 2);
    logits(0, 0) = 0.0;
    logits(0, 1) = 0.0;
    CHECK(nll_loss(logits, {0}) == doctest::Approx(std::log(2.0)).epsilon(1e-14));

    logits(0, 0) = std::log(3.0);
    logits(0, 1) = 0.0;
    CHECK(nll_loss(logits, {0}) == doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-12));

    // Adding a constant per row leaves the softmax unchanged.
    Matrix big(2, 3);
    big(0, 0) = 1; big(0, 1) = -2; big(0, 2) = 0.5;
    big(1, 0) = 900; big(1, 1) = 901; big(1, 2) = 899;
    Matrix shifted = big;
    for (int c = 0; c < 3; ++c) shifted(0, c) += 7.0;
    double a = nll_loss(big, {1, 0});
    double b = nll_loss(shifted, {1, 0});
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
    CHECK(std::isfinite(a));
}

TEST_CASE("evaluate argmax semantics") {
    ModelConfig cfg;
    cfg.blocks = 1;
    Rng rng(4);
    ToyViT m = init_model(cfg, rng);
    Batch b = random_batch(cfg, 64, rng);
    Matrix logits = forward_batch(m, b);
    Batch agree = b, disagree = b;
    for (int i = 0; i < logits.rows; ++i) {
        int best = 0;
        for (int c = 1; c < logits.cols; ++c)
            if (logits(i, c) > logits(i, best)) best = c;
        agree.labels[static_cast<size_t>(i)] = best;
        disagree.labels[static_cast<size_t>(i)] = (best + 1) % cfg.num_classes;
    }
    CHECK(evaluate(m, agree) == 1.0);
    CHECK(evaluate(m, disagree) == 0.0);
}

TEST_CASE("random model scores chance level on random labels") {
    ModelConfig cfg;
    cfg.blocks = 1;
    cfg.num_classes = 4;
    Rng rng(5);
    ToyViT m = init_model(cfg, rng);
    Batch b = random_batch(cfg, 10000, rng);
    double acc = evaluate(m, b);
    CHECK(acc == doctest::Approx(0.25).epsilon(0.08));  // 0.25 +/- 0.02
    CHECK(std::abs(acc - 0.25) < 0.02);
}

TEST_CASE("zeroed proj and fc2 reduce blocks to the identity") {
    ModelConfig cfg;
    cfg.blocks = 2;
    Rng rng(6);
    ToyViT m = init_model(cfg, rng);
    for (int b = 0; b < cfg.blocks; ++b) {
        for (LayerKind k : {LayerKind::proj, LayerKind::fc2}) {
            LayerRecord& rec = m.layer(b, k);
            rec.weight = Matrix(rec.weight.rows, rec.weight.cols);
            rec.bias = Matrix(1, rec.bias.cols);
        }
    }
    Matrix x = gaussian_matrix(rng, cfg.tokens, cfg.in_dim);
    Matrix logits = forward_logits(m, x);

    // Manual path: embed, final LN, mean pool, head.
    Matrix e = matmul_nt(x, m.embed);
    for (int r = 0; r < e.rows; ++r)
        for (int c = 0; c < e.cols; ++c) e(r, c) += m.embed_bias(0, c);
    Matrix ln(e.rows, e.cols);
    for (int r = 0; r < e.rows; ++r) {
        double mu = 0.0;
        for (int c = 0; c < e.cols; ++c) mu += e(r, c);
        mu /= e.cols;
        double var = 0.0;
        for (int c = 0; c < e.cols; ++c) var += (e(r, c) - mu) * (e(r, c) - mu);
        var /= e.cols;
        double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        for (int c = 0; c < e.cols; ++c)
            ln(r, c) = m.final_gamma(0, c) * (e(r, c) - mu) * inv + m.final_beta(0, c);
    }
    Matrix pooled(1, ln.cols);
    for (int c = 0; c < ln.cols; ++c) {
        double s = 0.0;
        for (int r = 0; r < ln.rows; ++r) s += ln(r, c);
        pooled(0, c) = s / ln.rows;
    }
    Matrix manual = matmul_nt(pooled, m.head);
    for (int c = 0; c < manual.cols; ++c) manual(0, c) += m.head_bias(0, c);

    REQUIRE(manual.cols == logits.cols);
    for (int c = 0; c < logits.cols; ++c)
        CHECK(logits(0, c) == doctest::Approx(manual(0, c)).epsilon(1e-10));
}

TEST_CASE("forward hooks substitute weights and filter inputs") {
    ModelConfig cfg;
    cfg.blocks = 1;
    Rng rng(7);
    ToyViT m = init_model(cfg, rng);
    Matrix x = gaussian_matrix(rng, cfg.tokens, cfg.in_dim);
    Matrix base = forward_logits(m, x);

    // Overriding with the layer's own weight changes nothing.
    ForwardHooks same;
    same.weight_override.resize(static_cast<size_t>(m.num_layers()));
    same.weight_override[2] = m.layers[2].weight;
    Matrix same_logits = forward_logits(m, x, &same);
    for (int c = 0; c < base.cols; ++c) CHECK(same_logits(0, c) == base(0, c));

    // Zero weight override and a zeroing input filter on the same layer agree.
    ForwardHooks zero_w;
    zero_w.weight_override.resize(static_cast<size_t>(m.num_layers()));
    zero_w.weight_override[2] = Matrix(m.layers[2].weight.rows, m.layers[2].weight.cols);
    Matrix via_weight = forward_logits(m, x, &zero_w);

    ForwardHooks zero_in;
    zero_in.input_filter = [](int layer_id, const Matrix& in) {
        if (layer_id != 2) return in;
        return Matrix(in.rows, in.cols);
    };
    Matrix via_input = forward_logits(m, x, &zero_in);
    for (int c = 0; c < base.cols; ++c)
        CHECK(via_weight(0, c) == doctest::Approx(via_input(0, c)).epsilon(1e-12));
    // The zeroed layer actually mattered.
    double diff = 0.0;
    for (int c = 0; c < base.cols; ++c) diff += std::abs(via_weight(0, c) - base(0, c));
    CHECK(diff > 1e-8);
}

TEST_CASE("tape loss matches direct loss and gradients match finite differences") {
    ModelConfig cfg;
    cfg.blocks = 1;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.tokens = 3;
    cfg.num_classes = 3;
    cfg.in_dim = 4;
    Rng rng(8);
    ToyViT m = init_model(cfg, rng);
    Batch b = random_batch(cfg, 2, rng);

    Tape t;
    TapeGraph g = build_tape(t, m, b);
    double tape_loss = t.val(g.loss)(0, 0);
    CHECK(tape_loss == doctest::Approx(loss_eval(m, b)).epsilon(1e-12));

    std::vector<Matrix> grads = backward(m, b);
    std::vector<Matrix*> params = collect_params(m);
    REQUIRE(grads.size() == params.size());

    double step = 1e-5;
    for (size_t p = 0; p < params.size(); ++p) {
        REQUIRE(grads[p].rows == params[p]->rows);
        REQUIRE(grads[p].cols == params[p]->cols);
        for (size_t i = 0; i < params[p]->size(); ++i) {
            double saved = params[p]->data[i];
            params[p]->data[i] = saved + step;
            double up = loss_eval(m, b);
            params[p]->data[i] = saved - step;
            double down = loss_eval(m, b);
            params[p]->data[i] = saved;
            double fd = (up - down) / (2 * step);
            double an = grads[p].data[i];
            CHECK(std::abs(fd - an) < 1e-4 * (1.0 + std::max(std::abs(fd), std::abs(an))));
        }
    }
}

TEST_CASE("zero head blocks all upstream gradients") {
    ModelConfig cfg;
    cfg.blocks = 1;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.tokens = 3;
    cfg.in_dim = 4;
    Rng rng(9);
    ToyViT m = init_model(cfg, rng);
    m.head = Matrix(m.head.rows, m.head.cols);
    Batch b = random_batch(cfg, 3, rng);
    std::vector<Matrix> grads = backward(m, b);
    std::vector<const Matrix*> params = collect_params(static_cast<const ToyViT&>(m));
    // Everything except the head itself and its bias sees zero gradient.
    for (size_t p = 0; p + 2 < params.size(); ++p)
        for (double v : grads[p].data) CHECK(v == 0.0);
}

TEST_CASE("training is deterministic and improves a separable task") {
    ModelConfig cfg;
    cfg.blocks = 1;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.tokens = 4;
    cfg.num_classes = 2;
    cfg.in_dim = 4;

    // Separable toy data: class mean +/- 1 on every feature plus small noise.
    auto make_data = [&](int n, uint64_t seed) {
        Rng rng(seed);
        Batch b;
        for (int i = 0; i < n; ++i) {
            int label = static_cast<int>(rng.below(2));
            Matrix x(cfg.tokens, cfg.in_dim);
            for (size_t j = 0; j < x.size(); ++j)
                x.data[j] = (label == 0 ? 1.0 : -1.0) + 0.3 * rng.normal();
            b.inputs.push_back(x);
            b.labels.push_back(label);
        }
        return b;
    };
    Batch train = make_data(128, 21);
    Batch held = make_data(128, 22);

    TrainConfig tc;
    tc.epochs = 8;
    tc.lr = 1e-2;
    tc.batch_size = 16;

    Rng r1(33), r2(33);
    ToyViT m1 = init_model(cfg, r1);
    ToyViT m2 = init_model(cfg, r2);
    Rng t1(44), t2(44);
    train_model(m1, train, tc, t1);
    train_model(m2, train, tc, t2);
    auto p1 = collect_params(static_cast<const ToyViT&>(m1));
    auto p2 = collect_params(static_cast<const ToyViT&>(m2));
    REQUIRE(p1.size() == p2.size());
    for (size_t p = 0; p < p1.size(); ++p)
        for (size_t i = 0; i < p1[p]->size(); ++i) CHECK(p1[p]->data[i] == p2[p]->data[i]);

    CHECK(evaluate(m1, held) > 0.9);

    // Zero epochs is a no-op on the parameters.
    Rng r3(35), r4(35);
    ToyViT fresh = init_model(cfg, r3);
    ToyViT untouched = init_model(cfg, r4);
    TrainConfig none = tc;
    none.epochs = 0;
    Rng t3(44);
    train_model(fresh, train, none, t3);
    auto pf = collect_params(static_cast<const ToyViT&>(fresh));
    auto pu = collect_params(static_cast<const ToyViT&>(untouched));
    for (size_t p = 0; p < pf.size(); ++p)
        for (size_t i = 0; i < pf[p]->size(); ++i) CHECK(pf[p]->data[i] == pu[p]->data[i]);
}

TEST_CASE("checkpoint roundtrip is bit exact") {
    ModelConfig cfg;
    cfg.blocks = 2;
    Rng rng(10);
    ToyViT m = init_model(cfg, rng);
    nlohmann::ordered_json extra;
    extra["note"] = "roundtrip";
    extra["numbers"] = {1, 2, 3};
    const std::string path = "test_model_ckpt.mpq1";
    save_checkpoint(path, m, extra);

    LoadedCheckpoint lc = load_checkpoint(path);
    CHECK(lc.header.at("note") == "roundtrip");
    CHECK(lc.model.cfg.blocks == cfg.blocks);
    CHECK(lc.model.cfg.dim == cfg.dim);
    auto pa = collect_params(static_cast<const ToyViT&>(m));
    auto pb = collect_params(static_cast<const ToyViT&>(lc.model));
    REQUIRE(pa.size() == pb.size());
    for (size_t p = 0; p < pa.size(); ++p) {
        REQUIRE(pa[p]->size() == pb[p]->size());
        for (size_t i = 0; i < pa[p]->size(); ++i) CHECK(pa[p]->data[i] == pb[p]->data[i]);
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects bad magic and truncation") {
    ModelConfig cfg;
    cfg.blocks = 1;
    Rng rng(11);
    ToyViT m = init_model(cfg, rng);
    const std::string path = "test_model_bad.mpq1";
    save_checkpoint(path, m);

    // Corrupt the magic.
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.put('X');
    }
    CHECK_THROWS(load_checkpoint(path));

    // Rewrite, then truncate the tensor section.
    save_checkpoint(path, m);
    std::string all;
    {
        std::ifstream f(path, std::ios::binary);
        all.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    }
    {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f.write(all.data(), static_cast<std::streamsize>(all.size() / 2));
    }
    CHECK_THROWS(load_checkpoint(path));

    CHECK_THROWS(load_checkpoint("does_not_exist.mpq1"));
    std::remove(path.c_str());
}
