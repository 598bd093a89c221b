#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace nodal;

namespace {

struct Fixture {
    ModelConfig config;
    ModelParams<float> model;
    MlmProbe mlm;
    TaskProbe task;
    std::vector<TokenSequence> eval;
    std::vector<LabeledExample> labeled;
};

Fixture make_fixture() {
    Fixture f;
    auto& c = f.config;
    c.layers = 2;
    c.heads = 4;
    c.width = 16;
    c.head_width = 4;
    c.vocab_size = 30;
    c.seq_len = 12;
    c.num_classes = 5;
    c.init_std = 0.3;
    c.init_seed = 21;
    f.model = init_params<float>(c);
    f.mlm = {c, 1, init_mlm_head<float>(c, 3)};
    f.task = {c, 1, init_task_head<float>(c, 3)};
    Rng rng(8);
    for (int i = 0; i < 40; ++i) {
        const auto s = nodal::testing::random_sequence(c, 1 + rng.below(c.seq_len - 2), rng);
        f.eval.push_back(s);
        f.labeled.push_back({s, static_cast<int>(rng.below(c.num_classes))});
    }
    return f;
}

// Independent double-precision probe evaluation with no silencing machinery.
std::size_t reference_mlm_prediction(const MlmHead<float>& h, std::span<const float> x, double* margin) {
    const std::size_t D = h.fc1.rows, V = h.fc2.cols;
    std::vector<double> z(D, 0.0), logits(V, 0.0);
    for (std::size_t j = 0; j < D; ++j) {
        for (std::size_t i = 0; i < D; ++i) z[j] += double(x[i]) * h.fc1(i, j);
        z[j] = 0.5 * z[j] * (1.0 + std::erf(z[j] / std::sqrt(2.0)));
    }
    for (std::size_t v = 0; v < V; ++v)
        for (std::size_t j = 0; j < D; ++j) logits[v] += z[j] * h.fc2(j, v);
    std::vector<double> sorted = logits;
    std::sort(sorted.rbegin(), sorted.rend());
    *margin = sorted[0] - sorted[1];
    return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

}  // namespace

TEST(MakeAperture, Examples) {
    const auto h0 = ApertureMask::single_head(32, 8, 0);
    EXPECT_EQ(h0.kept(), (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}));
    const auto h2 = ApertureMask::single_head(32, 8, 2);
    EXPECT_EQ(h2.kept().front(), 16u);
    EXPECT_EQ(h2.kept().back(), 23u);
    EXPECT_EQ(ApertureMask::random_subset(32, 3, 9).kept(), ApertureMask::random_subset(32, 3, 9).kept());
    EXPECT_EQ(ApertureMask::random_subset(32, 3, 9).size(), 3u);
    EXPECT_THROW(ApertureMask::explicit_list(32, {5, 5}), ApertureError);
    EXPECT_THROW(ApertureMask::explicit_list(32, {32}), ApertureError);
    EXPECT_THROW(ApertureMask::random_subset(32, 33, 1), ApertureError);
    EXPECT_THROW(ApertureMask::single_head(32, 8, 4), ApertureError);
    EXPECT_EQ(ApertureMask::random_subset(32, 32, 4).kept(), ApertureMask::full(32).kept());
    EXPECT_EQ(ApertureMask::heads(32, 8, {3, 1}).size(), 16u);
    EXPECT_TRUE(ApertureMask::heads(32, 8, {3, 1}).contains(31));
}

TEST(MakeAperture, RandomSubsetsAreUniformish) {
    std::vector<int> hits(16, 0);
    for (std::uint64_t s = 0; s < 4000; ++s) {
        const auto ap = ApertureMask::random_subset(16, 4, s);
        for (auto i : ap.kept()) ++hits[i];
    }
    for (int h : hits) EXPECT_NEAR(h, 1000, 120);
}

TEST(Confusion, Basics) {
    ConfusionMatrix cm(3);
    cm.add(0, 1);
    cm.add(0, 1, 2);
    cm.add(2, 2);
    EXPECT_EQ(cm.count(0, 1), 3u);
    EXPECT_EQ(cm.row_total(0), 3u);
    EXPECT_EQ(cm.column_total(1), 3u);
    EXPECT_EQ(cm.total(), 4u);
    EXPECT_TRUE(cm.consistent());
    EXPECT_THROW(cm.add(3, 0), ApertureError);
    EXPECT_THROW(cm += ConfusionMatrix(4), ApertureError);
    std::ostringstream out;
    cm.write_csv(out);
    EXPECT_EQ(out.str(), "true_id,pred_id,count\n0,1,3\n2,2,1\n");
}

TEST(Confusion, EmptyApertureMlmPredictsTokenZero) {
    const auto f = make_fixture();
    const auto cm = accumulate_confusion_mlm(f.model, f.mlm, ApertureMask::explicit_list(16, {}), f.eval);
    EXPECT_EQ(cm.column_total(0), cm.total());
    std::size_t nonzero = 0, diag = 0;
    for (std::size_t j = 0; j < cm.dim(); ++j) nonzero += cm.column_total(j) > 0;
    for (std::size_t i = 0; i < cm.dim(); ++i) diag += cm.count(i, i) > 0;
    EXPECT_EQ(nonzero, 1u);
    EXPECT_LE(diag, 1u);
}

TEST(Confusion, EmptyApertureTaskPredictsBiasArgmax) {
    auto f = make_fixture();
    f.task.head.bias.data = {0.1f, -0.2f, 0.7f, 0.7f, 0.3f};
    const auto cm = accumulate_confusion_task(f.model, f.task, ApertureMask::explicit_list(16, {}), f.labeled);
    EXPECT_EQ(cm.column_total(2), cm.total());
    EXPECT_EQ(cm.total(), f.labeled.size());
}

TEST(Confusion, FullApertureMatchesUnsilencedReference) {
    const auto f = make_fixture();
    const auto cache = build_mlm_eval_cache(f.model, 1, f.eval);
    const auto cm = accumulate_confusion_mlm(f.mlm.head, f.config.mlm_activation, ApertureMask::full(16), cache);
    ConfusionMatrix ref(f.config.vocab_size);
    std::size_t close = 0;
    const auto pred = predict_mlm(f.mlm.head, f.config.mlm_activation, ApertureMask::full(16), cache);
    for (std::size_t e = 0; e < cache.targets.size(); ++e) {
        double margin = 0;
        const auto r = reference_mlm_prediction(f.mlm.head, cache.features.row(e), &margin);
        if (margin < 1e-5) {
            ++close;
            ref.add(cache.targets[e], pred[e]);
            continue;
        }
        ref.add(cache.targets[e], r);
    }
    EXPECT_EQ(cm, ref);
    EXPECT_LT(close, cache.targets.size() / 20);

    std::size_t diag = 0;
    for (std::size_t i = 0; i < cm.dim(); ++i) diag += cm.count(i, i);
    const auto tf = build_task_eval_cache(f.model, 1, f.labeled);
    const auto tc = accumulate_confusion_task(f.task.head, ApertureMask::full(16), tf);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < f.labeled.size(); ++i) {
        const auto logits = task_logits(f.task.head, tf.features.row(i), ApertureMask::full(16));
        hits += argmax_lowest(std::span<const float>(logits)) == static_cast<std::size_t>(f.labeled[i].label);
    }
    EXPECT_DOUBLE_EQ(accuracy(tc), static_cast<double>(hits) / static_cast<double>(f.labeled.size()));
}

TEST(Confusion, ShardAdditivityAndRowTotals) {
    const auto f = make_fixture();
    const auto ap = ApertureMask::random_subset(16, 6, 2);
    const std::vector<TokenSequence> a(f.eval.begin(), f.eval.begin() + 17), b(f.eval.begin() + 17, f.eval.end());
    const auto whole = accumulate_confusion_mlm(f.model, f.mlm, ap, f.eval);
    EXPECT_EQ(accumulate_confusion_mlm(f.model, f.mlm, ap, a) + accumulate_confusion_mlm(f.model, f.mlm, ap, b), whole);
    EXPECT_EQ(accumulate_confusion_mlm(f.model, f.mlm, ap, b) + accumulate_confusion_mlm(f.model, f.mlm, ap, a), whole);
    EXPECT_TRUE(whole.consistent());

    std::vector<std::uint64_t> freq(f.config.vocab_size, 0);
    for (const auto& s : f.eval)
        for (std::size_t i = 0; i < s.length(); ++i)
            if (s.content_mask[i]) ++freq[s.ids[i]];
    for (std::size_t i = 0; i < freq.size(); ++i) EXPECT_EQ(whole.row_total(i), freq[i]);

    const std::vector<LabeledExample> la(f.labeled.begin(), f.labeled.begin() + 9),
        lb(f.labeled.begin() + 9, f.labeled.end());
    EXPECT_EQ(accumulate_confusion_task(f.model, f.task, ap, la) + accumulate_confusion_task(f.model, f.task, ap, lb),
              accumulate_confusion_task(f.model, f.task, ap, f.labeled));
}

TEST(Confusion, DeterministicAcrossThreadCounts) {
    const auto f = make_fixture();
    const auto ap = ApertureMask::single_head(16, 4, 1);
    setenv("NODAL_THREADS", "1", 1);
    const auto one = accumulate_confusion_mlm(f.model, f.mlm, ap, f.eval);
    setenv("NODAL_THREADS", "4", 1);
    const auto four = accumulate_confusion_mlm(f.model, f.mlm, ap, f.eval);
    unsetenv("NODAL_THREADS");
    EXPECT_EQ(one, four);
    std::ostringstream x, y;
    one.write_csv(x);
    four.write_csv(y);
    EXPECT_EQ(x.str(), y.str());
}

TEST(Confusion, SidecarDescribesAperture) {
    ConfusionMatrix cm(4);
    cm.add(1, 1);
    const auto j = confusion_sidecar(cm, ApertureMask::single_head(8, 4, 1), "abc");
    EXPECT_EQ(j["dim"], 4);
    EXPECT_EQ(j["aperture"], "head(1)");
    EXPECT_EQ(j["checkpoint_hash"], "abc");
}
