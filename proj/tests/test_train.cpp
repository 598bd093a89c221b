#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <iostream>

#include "support.hpp"

using namespace nodal;

namespace {

struct Toy {
    Vocab vocab;
    ModelConfig config;
    std::vector<TokenSequence> corpus;
};

Toy toy_corpus(std::size_t sentences, std::uint64_t seed = 3) {
    auto texts = generate_synthetic_corpus(sentences, seed, 1);
    Toy t{build_vocab(texts, 96), {}, {}};
    t.config.layers = 1;
    t.config.heads = 2;
    t.config.width = 16;
    t.config.head_width = 8;
    t.config.vocab_size = t.vocab.size();
    t.config.seq_len = 16;
    t.config.num_classes = 8;
    t.config.ff_mult = 2;
    for (const auto& s : texts) t.corpus.push_back(tokenize(s, t.vocab, t.config.seq_len));
    return t;
}

TrainConfig fast_cfg(std::size_t epochs, double eta = 5e-3) {
    TrainConfig c;
    c.eta = eta;
    c.epochs = epochs;
    c.batch_size = 8;
    c.alpha = 0.0;
    return c;
}

// Textbook AdamW on one scalar, written out independently.
double scalar_adamw(double w, const std::vector<double>& grads, const std::vector<double>& lrs, double alpha) {
    double m = 0, v = 0;
    for (std::size_t t = 1; t <= grads.size(); ++t) {
        const double g = grads[t - 1], lr = lrs[t - 1];
        w -= lr * alpha * w;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1 - std::pow(0.9, static_cast<double>(t)));
        const double vh = v / (1 - std::pow(0.999, static_cast<double>(t)));
        w -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    return w;
}

}  // namespace

TEST(LinearLr, Endpoints) {
    TrainState<float> s;
    s.total_steps = 10;
    EXPECT_DOUBLE_EQ(linear_lr(s, 0.3), 0.3);
    s.step = 5;
    EXPECT_NEAR(linear_lr(s, 0.3), 0.15, 1e-12);
    s.step = 10;
    EXPECT_DOUBLE_EQ(linear_lr(s, 0.3), 0.0);
    s.step = 12;
    EXPECT_DOUBLE_EQ(linear_lr(s, 0.3), 0.0);
    s.total_steps = 0;
    EXPECT_THROW(linear_lr(s, 0.3), ConfigError);
}

TEST(AdamW, ScalarReferenceOracle) {
    Rng rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        Matrix<double> w(1, 1), g(1, 1);
        const double w0 = rng.normal() * 2;
        w.data[0] = w0;
        TrainConfig cfg;
        cfg.alpha = trial % 2 ? 0.0 : rng.uniform() * 0.1;
        std::vector<TensorRef<double>> refs{{"w", &w, true}};
        TrainState<double> st;
        std::vector<double> grads, lrs;
        for (int k = 0; k < 3; ++k) {
            g.data[0] = rng.normal() * std::pow(10.0, rng.uniform() * 4 - 2);
            const double lr = rng.uniform() * 0.1;
            grads.push_back(g.data[0]);
            lrs.push_back(lr);
            adamw_step<double>(refs, {&g}, st, cfg, lr);
        }
        EXPECT_NEAR(w.data[0], scalar_adamw(w0, grads, lrs, cfg.alpha), 1e-12);
    }
}

TEST(AdamW, ZeroGradients) {
    Matrix<double> w(2, 3), b(1, 3), gw(2, 3), gb(1, 3);
    for (std::size_t i = 0; i < w.data.size(); ++i) w.data[i] = 0.1 * static_cast<double>(i) - 0.2;
    b.fill(0.5);
    const auto w0 = w, b0 = b;
    std::vector<TensorRef<double>> refs{{"w", &w, true}, {"b", &b, false}};
    TrainConfig cfg;
    cfg.alpha = 0.0;
    TrainState<double> st;
    adamw_step<double>(refs, {&gw, &gb}, st, cfg, 0.01);
    EXPECT_EQ(w.data, w0.data);
    EXPECT_EQ(b.data, b0.data);
    cfg.alpha = 0.3;
    adamw_step<double>(refs, {&gw, &gb}, st, cfg, 0.01);
    for (std::size_t i = 0; i < w.data.size(); ++i) EXPECT_DOUBLE_EQ(w.data[i], w0.data[i] * (1 - 0.01 * 0.3));
    EXPECT_EQ(b.data, b0.data);  // biases are not decayed
}

TEST(AdamW, NonFiniteGradientNamesTensor) {
    Matrix<float> w(1, 2), g(1, 2);
    g.data[1] = std::nanf("");
    std::vector<TensorRef<float>> refs{{"layer0.ff1.weight", &w, true}};
    TrainState<float> st;
    try {
        adamw_step<float>(refs, {&g}, st, TrainConfig{}, 0.1);
        FAIL();
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("layer0.ff1.weight"), std::string::npos);
    }
}

TEST(AdamW, FrozenTensorsUntouched) {
    Matrix<float> w(1, 2), g(1, 2);
    w.fill(1.0f);
    g.fill(std::nanf(""));  // frozen, so not even checked
    std::vector<TensorRef<float>> refs{{"layer0.ff1.weight", &w, true}};
    TrainState<float> st;
    TrainConfig cfg;
    cfg.freeze = {"encoder"};
    adamw_step<float>(refs, {&g}, st, cfg, 0.1);
    EXPECT_EQ(w.data, (std::vector<float>{1.0f, 1.0f}));
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    c.eta = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.alpha = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Pretrain, OverfitsSmallCorpus) {
    auto t = toy_corpus(50);
    t.config.width = 32;
    t.config.head_width = 16;
    t.config.ff_mult = 4;
    t.config.layers = 2;
    auto p = init_params<float>(t.config);
    // every content position masked once; far less noisy than a training epoch
    std::vector<MaskedExample> probe;
    for (const auto& s : t.corpus)
        for (auto& ex : enumerate_eval_masks(s)) probe.push_back(std::move(ex));
    const double initial = mlm_loss(p, std::span<const MaskedExample>(probe));
    const std::size_t E = 800;
    const double eta = 2e-3;
    auto cfg = fast_cfg(E, eta);
    cfg.batch_size = 2;
    const auto curve = pretrain_mlm(p, t.corpus, cfg, MaskPolicy{});
    ASSERT_EQ(curve.size(), E);
    EXPECT_EQ(curve.front().split, "train");
    EXPECT_DOUBLE_EQ(curve.front().lr, eta);
    const double final = mlm_loss(p, std::span<const MaskedExample>(probe));
    EXPECT_LT(final, 0.2 * initial) << "initial " << initial;
    std::cout << "masked-position loss " << initial << " -> " << final << "\n";
    EXPECT_LT(curve.back().loss, curve.front().loss);
}

TEST(Pretrain, DeterministicCheckpoints) {
    auto t = toy_corpus(30);
    auto a = init_params<float>(t.config);
    auto b = init_params<float>(t.config);
    pretrain_mlm(a, t.corpus, fast_cfg(3), MaskPolicy{});
    pretrain_mlm(b, t.corpus, fast_cfg(3), MaskPolicy{});
    EXPECT_EQ(params_hash(a), params_hash(b));
    auto c = init_params<float>(t.config);
    auto cfg = fast_cfg(3);
    cfg.seed = 8;
    pretrain_mlm(c, t.corpus, cfg, MaskPolicy{});
    EXPECT_NE(params_hash(a), params_hash(c));
}

TEST(Pretrain, ThreadCountDoesNotMatter) {
    auto t = toy_corpus(30);
    auto a = init_params<float>(t.config);
    auto b = a;
    setenv("NODAL_THREADS", "1", 1);
    pretrain_mlm(a, t.corpus, fast_cfg(2), MaskPolicy{});
    setenv("NODAL_THREADS", "3", 1);
    pretrain_mlm(b, t.corpus, fast_cfg(2), MaskPolicy{});
    unsetenv("NODAL_THREADS");
    EXPECT_EQ(params_hash(a), params_hash(b));
}

TEST(Pretrain, FreezeEverythingIsFlat) {
    auto t = toy_corpus(30);
    auto p = init_params<float>(t.config);
    const auto before = params_hash(p);
    auto cfg = fast_cfg(4);
    cfg.freeze = {"encoder", "mlm_head", "task_head"};
    // same masks every epoch so the loss is comparable
    MaskPolicy policy;
    const auto curve = pretrain_mlm(p, t.corpus, cfg, policy);
    EXPECT_EQ(params_hash(p), before);
    for (const auto& r : curve) EXPECT_GT(r.loss, 0.0);
    const auto eval = fixed_eval_examples(t.corpus, policy, t.config.vocab_size);
    const double l1 = mlm_loss(p, std::span<const MaskedExample>(eval));
    EXPECT_NEAR(l1, mlm_loss(init_params<float>(t.config), std::span<const MaskedExample>(eval)), 0.0);
}

TEST(Pretrain, ZeroEpochsIsIdentity) {
    auto t = toy_corpus(10);
    auto p = init_params<float>(t.config);
    const auto h = params_hash(p);
    EXPECT_TRUE(pretrain_mlm(p, t.corpus, fast_cfg(0), MaskPolicy{}).empty());
    EXPECT_EQ(params_hash(p), h);
    EXPECT_THROW(pretrain_mlm(p, std::vector<TokenSequence>{}, fast_cfg(1), MaskPolicy{}), ConfigError);
}

TEST(Gradient, DuplicatedBatchIsInvariant) {
    const auto c = nodal::testing::gradcheck_config();
    auto prob = nodal::testing::make_gradcheck_problem(c, 5);
    const auto g1 = mlm_loss_and_grad(prob.params, std::span<const MaskedExample>(prob.mlm));
    auto twice = prob.mlm;
    twice.insert(twice.end(), prob.mlm.begin(), prob.mlm.end());
    const auto g2 = mlm_loss_and_grad(prob.params, std::span<const MaskedExample>(twice));
    EXPECT_NEAR(g1.loss, g2.loss, 1e-12);
    std::vector<double> a, b;
    visit_tensors(const_cast<ModelParams<double>&>(g1.grad),
                  [&](const std::string&, Matrix<double>& m, bool) { a.insert(a.end(), m.data.begin(), m.data.end()); });
    visit_tensors(const_cast<ModelParams<double>&>(g2.grad),
                  [&](const std::string&, Matrix<double>& m, bool) { b.insert(b.end(), m.data.begin(), m.data.end()); });
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-10);
}

TEST(Probe, EncoderUnchangedAndOnlyHeadTrains) {
    auto t = toy_corpus(40);
    auto p = init_params<float>(t.config);
    pretrain_mlm(p, t.corpus, fast_cfg(2), MaskPolicy{});
    const auto h = params_hash(p);
    LossCurve curve;
    const auto head = train_mlm_probe(p, 0, t.corpus, fast_cfg(20, 1e-2), MaskPolicy{}, 17, &curve);
    EXPECT_EQ(params_hash(p), h);
    ASSERT_EQ(curve.size(), 20u);
    EXPECT_LT(curve.back().loss, curve.front().loss);
    const auto init = init_mlm_head<float>(t.config, 17);
    EXPECT_NE(head.fc2.data, init.fc2.data);
    EXPECT_THROW(train_mlm_probe(p, 1, t.corpus, fast_cfg(1), MaskPolicy{}, 17), ConfigError);
}

TEST(Probe, FinetuneHelpsAndTunedProbeBeatsChance) {
    auto t = toy_corpus(200);
    const auto split = generate_synthetic_classification(8, 60, 20, 4);
    std::vector<std::string> texts;
    for (const auto& x : split.train) texts.push_back(x.text);
    t.vocab = build_vocab(texts, 160);
    t.config.vocab_size = t.vocab.size();
    const auto train = tokenize_labeled(split.train, t.vocab, t.config.seq_len);
    const auto test = tokenize_labeled(split.test, t.vocab, t.config.seq_len);
    auto p = init_params<float>(t.config);
    std::vector<TokenSequence> seqs;
    for (const auto& x : train) seqs.push_back(x.input);
    pretrain_mlm(p, seqs, fast_cfg(10, 5e-3), MaskPolicy{});

    const auto probe_acc = [&](const ModelParams<float>& m) {
        const auto head = train_task_probe(m, 0, train, fast_cfg(60, 1e-2), 23);
        return accuracy(accumulate_confusion_task(head, ApertureMask::full(m.config.width),
                                                  build_task_eval_cache(m, 0, test)));
    };
    const double before = probe_acc(p);

    auto ft = p;
    auto cfg = fast_cfg(30, 2e-3);
    cfg.alpha = 1e-2;
    const auto h = params_hash(ft);
    EXPECT_TRUE(finetune_classification(ft, train, fast_cfg(0)).empty());
    EXPECT_EQ(params_hash(ft), h);
    finetune_classification(ft, train, cfg);
    const double tuned = classification_accuracy(ft, test);
    EXPECT_GE(tuned, before) << "probe-only " << before;
    const double after = probe_acc(ft);
    EXPECT_GT(after, 3.0 / 8.0);
    std::cout << "pretrained-only probe " << before << ", fine-tuned " << tuned << ", probe after fine-tuning " << after
              << "\n";

    auto again = p;
    finetune_classification(again, train, cfg);
    EXPECT_EQ(params_hash(again), params_hash(ft));
}
