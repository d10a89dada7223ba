#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <vector>

#include "test_support.hpp"
#include "voxgene/model.hpp"
#include "voxgene/rng.hpp"

using namespace voxgene;
using testsupport::fd_check;
using testsupport::rand_tensor;
using testsupport::temp_dir;

namespace {

ModelConfig mini_config() {
    ModelConfig cfg;
    cfg.input_size = 8;
    cfg.cnn_channels = {4};
    cfg.token_dim = 8;
    cfg.encoder_layers = 2;
    cfg.heads = 2;
    cfg.mlp_hidden = 16;
    cfg.head_dropout = 0.5;
    cfg.gene_count = 3;
    cfg.seed = 5;
    return cfg;
}

std::vector<Tensor> mini_slices(const ModelConfig& cfg, Rng& rng, std::size_t n) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(rand_tensor({1, cfg.input_size, cfg.input_size}, rng));
    return out;
}

}  // namespace

TEST_CASE("model config validation and token arithmetic") {
    ModelConfig ok = mini_config();
    REQUIRE_NOTHROW(ok.validate());
    REQUIRE(ok.grid() == 4);
    REQUIRE(ok.tokens() == 16);

    ModelConfig three = mini_config();
    three.input_size = 64;
    three.cnn_channels = {8, 16, 32};
    REQUIRE(three.tokens() == 64);

    ModelConfig odd = mini_config();
    odd.input_size = 10;
    odd.cnn_channels = {4, 8};  // 10 -> 5 -> not divisible
    REQUIRE_THROWS_AS(odd.validate(), config_error);

    ModelConfig heads = mini_config();
    heads.heads = 3;  // 8 % 3 != 0
    REQUIRE_THROWS_AS(heads.validate(), config_error);

    ModelConfig drop = mini_config();
    drop.head_dropout = 1.0;
    REQUIRE_THROWS_AS(drop.validate(), config_error);

    ModelConfig genes = mini_config();
    genes.gene_count = 0;
    REQUIRE_THROWS_AS(genes.validate(), config_error);

    ModelConfig layers = mini_config();
    layers.encoder_layers = 0;
    REQUIRE_THROWS_AS(layers.validate(), config_error);
}

TEST_CASE("parameter creation order is stable and seeded init is reproducible") {
    const EncoderModel m1(mini_config());
    const EncoderModel m2(mini_config());
    ModelConfig other = mini_config();
    other.seed = 6;
    const EncoderModel m3(other);

    const std::vector<std::string> expected{
        "enc.stage0.w", "enc.stage0.b", "enc.proj.w",   "enc.proj.b",   "enc.pos",
        "enc.l0.ln1.g", "enc.l0.ln1.b", "enc.l0.attn.q.w", "enc.l0.attn.q.b",
        "enc.l0.attn.k.w", "enc.l0.attn.k.b", "enc.l0.attn.v.w", "enc.l0.attn.v.b",
        "enc.l0.attn.o.w", "enc.l0.attn.o.b", "enc.l0.ln2.g", "enc.l0.ln2.b",
        "enc.l0.mlp.w1", "enc.l0.mlp.b1", "enc.l0.mlp.w2", "enc.l0.mlp.b2",
        "enc.l1.ln1.g", "enc.l1.ln1.b", "enc.l1.attn.q.w", "enc.l1.attn.q.b",
        "enc.l1.attn.k.w", "enc.l1.attn.k.b", "enc.l1.attn.v.w", "enc.l1.attn.v.b",
        "enc.l1.attn.o.w", "enc.l1.attn.o.b", "enc.l1.ln2.g", "enc.l1.ln2.b",
        "enc.l1.mlp.w1", "enc.l1.mlp.b1", "enc.l1.mlp.w2", "enc.l1.mlp.b2",
        "enc.final.g",  "enc.final.b",  "head.w",       "head.b"};
    REQUIRE(m1.params().size() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) REQUIRE(m1.params().name(i) == expected[i]);

    bool any_diff = false;
    for (std::size_t i = 0; i < m1.params().size(); ++i) {
        REQUIRE(m1.params().tensor(i).values() == m2.params().tensor(i).values());
        if (m1.params().tensor(i).values() != m3.params().tensor(i).values()) any_diff = true;
    }
    REQUIRE(any_diff);
}

TEST_CASE("encode_slice produces the token grid and rejects bad shapes") {
    const ModelConfig cfg = mini_config();
    const EncoderModel model(cfg);
    Rng rng(9);
    Tape tape;
    const Tensor tokens = model.encode_slice(tape, rand_tensor({1, 8, 8}, rng));
    REQUIRE(tokens.shape() == Shape{cfg.tokens(), cfg.token_dim});
    REQUIRE_THROWS_AS(model.encode_slice(tape, rand_tensor({1, 8, 9}, rng)), dimension_error);
    REQUIRE_THROWS_AS(model.encode_slice(tape, rand_tensor({2, 8, 8}, rng)), dimension_error);
}

TEST_CASE("embed_patient is order invariant and duplication stable") {
    const EncoderModel model(mini_config());
    Rng rng(10);
    const auto slices = mini_slices(model.config(), rng, 3);

    Tape tape;
    const std::vector<Tensor> abc{slices[0], slices[1], slices[2]};
    const std::vector<Tensor> cab{slices[2], slices[0], slices[1]};
    const Tensor e1 = model.embed_patient(tape, abc);
    const Tensor e2 = model.embed_patient(tape, cab);
    REQUIRE(e1.values() == e2.values());  // bitwise, via per-element sorted sums

    const std::vector<Tensor> doubled{slices[0], slices[1], slices[2],
                                      slices[0], slices[1], slices[2]};
    const Tensor e3 = model.embed_patient(tape, doubled);
    for (std::size_t i = 0; i < e1.size(); ++i)
        REQUIRE(std::abs(e3[i] - e1[i]) <= 1e-12 * std::max(1.0, std::abs(e1[i])));

    const std::vector<Tensor> none;
    REQUIRE_THROWS_AS(model.embed_patient(tape, none), input_error);
}

TEST_CASE("prediction head: single token and constant-token cases") {
    const ModelConfig cfg = mini_config();
    const EncoderModel model(cfg);
    Rng rng(11);
    Rng unused(0);
    const Tensor& w = model.params().at("head.w");
    const Tensor& b = model.params().at("head.b");

    // T = 1: the head is exactly the affine map of that token
    const Tensor one = rand_tensor({1, cfg.token_dim}, rng);
    Tape tape;
    const Tensor out1 = model.predict_genes(tape, one, /*train=*/false, unused);
    REQUIRE(out1.shape() == Shape{cfg.gene_count});
    for (std::size_t g = 0; g < cfg.gene_count; ++g) {
        double acc = b[g];
        for (std::size_t d = 0; d < cfg.token_dim; ++d) acc += w.at2(g, d) * one[d];
        REQUIRE(std::abs(out1[g] - acc) <= 1e-14 * std::max(1.0, std::abs(acc)));
    }

    // all tokens equal (T = 4): averaging changes nothing
    Tensor four({4, cfg.token_dim});
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t d = 0; d < cfg.token_dim; ++d) four[t * cfg.token_dim + d] = one[d];
    const Tensor out4 = model.predict_genes(tape, four, /*train=*/false, unused);
    for (std::size_t g = 0; g < cfg.gene_count; ++g)
        REQUIRE(std::abs(out4[g] - out1[g]) <= 1e-14 * std::max(1.0, std::abs(out1[g])));

    REQUIRE_THROWS_AS(model.predict_genes(tape, rand_tensor({3, 5}, rng), false, unused),
                      dimension_error);
}

TEST_CASE("training-mode dropout is seeded and eval mode is deterministic") {
    const EncoderModel model(mini_config());
    Rng rng(12);
    const auto slices = mini_slices(model.config(), rng, 2);

    const auto run = [&](bool train, std::uint64_t seed) {
        Rng stream(seed);
        Tape tape;
        return model.forward_patient(tape, slices, train, stream).values();
    };
    REQUIRE(run(false, 1) == run(false, 2));   // eval ignores the stream
    REQUIRE(run(true, 3) == run(true, 3));     // same stream, same mask
    REQUIRE(run(true, 3) != run(true, 4));     // different mask moves the output
}

TEST_CASE("mse_loss values and gradient") {
    Tape tape;
    const Tensor a({2}, {0.0, 0.0});
    const Tensor b({2}, {3.0, 4.0});
    REQUIRE(mse_loss(tape, a, a).value() == 0.0);
    REQUIRE(mse_loss(tape, a, b).value() == 12.5);  // (9 + 16) / 2
    REQUIRE_THROWS_AS(mse_loss(tape, a, Tensor({3}, 0.0)), dimension_error);

    Rng rng(13);
    ParamStore ps;
    ps.add("pred", rand_tensor({4}, rng));
    const Tensor target = rand_tensor({4}, rng);
    const auto value = [&] {
        Tape t;
        return mse_loss(t, ps.at("pred"), target).value();
    };
    const auto backward = [&] {
        Tape t;
        t.backward(mse_loss(t, ps.at("pred"), target));
    };
    const auto res = oracles::check_gradients(ps, value, backward, 1e-6, 1e-6, 1e-10);
    INFO(res.worst);
    REQUIRE(res.failures == 0);
    // analytic form: 2 (pred - target) / n
    Tape t;
    ps.zero_grads();
    t.backward(mse_loss(t, ps.at("pred"), target));
    for (std::size_t i = 0; i < 4; ++i)
        REQUIRE(std::abs(ps.at("pred").grad()[i] -
                         2.0 * (ps.at("pred")[i] - target[i]) / 4.0) <= 1e-15);
}

TEST_CASE("whole-model gradients vs finite differences") {
    EncoderModel model(mini_config());
    Rng rng(14);
    // jitter every parameter off its initial value (residual projections start
    // at zero) so no gradient path is checked at a vacuous zero-zero match
    for (std::size_t i = 0; i < model.params().size(); ++i)
        for (auto& v : model.params().tensor(i).values()) v += 0.1 * rng.normal();
    const auto slices = mini_slices(model.config(), rng, 2);
    const Tensor target = rand_tensor({model.config().gene_count}, rng);
    Rng unused(0);

    const auto value = [&] {
        Tape tape;
        const Tensor pred = model.forward_patient(tape, slices, /*train=*/false, unused);
        return mse_loss(tape, pred, target).value();
    };
    const auto backward = [&] {
        Tape tape;
        const Tensor pred = model.forward_patient(tape, slices, /*train=*/false, unused);
        tape.backward(mse_loss(tape, pred, target));
    };
    const auto res =
        oracles::check_gradients(model.params(), value, backward, 1e-5, 1e-3, 1e-5);
    INFO("checked " << res.checked << " elements, worst: " << res.worst);
    REQUIRE(res.checked == model.params().total_elements());
    REQUIRE(res.failures == 0);
}

TEST_CASE("gene target transform") {
    // log1p then standardize with the population std, fitted per gene
    const std::vector<std::vector<double>> rows{{0.0, 1.0}, {std::exp(2.0) - 1.0, 3.0}};
    const auto t = GeneTargetTransform::fit(rows);
    // gene 0: log1p values {0, 2} -> mean 1, std 1
    REQUIRE(std::abs(t.mean[0] - 1.0) <= 1e-15);
    REQUIRE(std::abs(t.stddev[0] - 1.0) <= 1e-12);
    const auto z0 = t.apply(rows[0]);
    const auto z1 = t.apply(rows[1]);
    REQUIRE(std::abs(z0[0] + 1.0) <= 1e-12);
    REQUIRE(std::abs(z1[0] - 1.0) <= 1e-12);
    // standardized train rows average to zero per gene
    for (std::size_t g = 0; g < 2; ++g)
        REQUIRE(std::abs(z0[g] + z1[g]) <= 1e-12);

    const std::vector<std::vector<double>> constant{{5.0, 1.0}, {5.0, 2.0}};
    REQUIRE_THROWS_AS(GeneTargetTransform::fit(constant), numeric_error);
    REQUIRE_THROWS_AS(t.apply(std::vector<double>{1.0}), dimension_error);
    const std::vector<std::vector<double>> empty;
    REQUIRE_THROWS_AS(GeneTargetTransform::fit(empty), input_error);
}

TEST_CASE("checkpoint round trip preserves behavior bit-for-bit") {
    const auto dir = temp_dir("model_ckpt");
    EncoderModel model(mini_config());
    Rng rng(15);
    const auto slices = mini_slices(model.config(), rng, 2);
    Rng unused(0);

    GeneTargetTransform tf;
    tf.mean = {0.1, 0.2, 0.3};
    tf.stddev = {1.0, 2.0, 3.0};
    TrainingMeta meta;
    meta.epochs = 4;
    meta.best_epoch = 2;
    meta.final_train_loss = 0.5;
    meta.final_val_loss = 0.75;
    meta.best_val_loss = 0.7;
    meta.seed = 5;
    meta.data_digest = "feedbeef";
    const Checkpoint ck = checkpoint_from_model(model, tf, {"G1", "G2", "G3"}, meta);

    save_checkpoint(dir / "model.json", ck);
    REQUIRE(std::filesystem::exists(dir / "model.bin"));
    const Checkpoint back = load_checkpoint(dir / "model.json");
    REQUIRE(back.digest() == ck.digest());
    REQUIRE(back.gene_ids == ck.gene_ids);
    REQUIRE(back.meta.best_epoch == 2);
    REQUIRE(back.transform.stddev == tf.stddev);

    const EncoderModel restored = model_from_checkpoint(back);
    Tape t1, t2;
    const Tensor before = model.forward_patient(t1, slices, false, unused);
    const Tensor after = restored.forward_patient(t2, slices, false, unused);
    REQUIRE(before.values() == after.values());

    SECTION("NaN losses survive the JSON round trip as NaN") {
        Checkpoint fresh = ck;
        fresh.meta.epochs = 0;
        fresh.meta.final_train_loss = std::numeric_limits<double>::quiet_NaN();
        fresh.meta.final_val_loss = std::numeric_limits<double>::quiet_NaN();
        fresh.meta.best_val_loss = std::numeric_limits<double>::quiet_NaN();
        save_checkpoint(dir / "fresh.json", fresh);
        const Checkpoint fb = load_checkpoint(dir / "fresh.json");
        REQUIRE(std::isnan(fb.meta.final_train_loss));
        REQUIRE(std::isnan(fb.meta.best_val_loss));
        REQUIRE(fb.digest() == fresh.digest());
    }

    SECTION("tampered blob fails the digest check") {
        save_checkpoint(dir / "tamper.json", ck);
        std::fstream f(dir / "tamper.bin",
                       std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(16);
        const char junk = 0x5a;
        f.write(&junk, 1);
        f.close();
        REQUIRE_THROWS_AS(load_checkpoint(dir / "tamper.json"), input_error);
    }

    SECTION("architecture mismatch is rejected") {
        Checkpoint wrong = ck;
        wrong.config.gene_count = 4;  // head shapes no longer match
        REQUIRE_THROWS_AS(model_from_checkpoint(wrong), input_error);
        Checkpoint reordered = ck;
        std::swap(reordered.params[0].name, reordered.params[1].name);
        REQUIRE_THROWS_AS(model_from_checkpoint(reordered), input_error);
    }

    SECTION("non-checkpoint manifest is rejected") {
        write_json_file(dir / "bogus.json", json{{"format", "something-else"}});
        REQUIRE_THROWS_AS(load_checkpoint(dir / "bogus.json"), input_error);
    }
}
