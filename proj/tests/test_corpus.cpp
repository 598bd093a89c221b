#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "support.hpp"

using namespace nodal;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("nodal_corpus_" + name)).string();
}

}  // namespace

TEST(Vocab, FrequencyOrderThenLexicographic) {
    const auto v = build_vocab({"a b a"}, 7);
    EXPECT_EQ(v.size(), 7u);
    EXPECT_EQ(v.token(Vocab::kNumSpecials), "a");
    EXPECT_EQ(v.token(Vocab::kNumSpecials + 1), "b");
    const auto tie = build_vocab({"zeta alpha"}, 10);
    EXPECT_EQ(tie.token(Vocab::kNumSpecials), "alpha");
    EXPECT_EQ(tie.size(), 7u);
}

TEST(Vocab, Errors) {
    EXPECT_THROW(build_vocab({}, 10), IngestionError);
    EXPECT_THROW(build_vocab({"a"}, 5), ConfigError);
}

TEST(Vocab, SpecialsAndUnknown) {
    const auto v = build_vocab({"x y"}, 8);
    EXPECT_EQ(v.lookup("[PAD]"), Vocab::kPadId);
    EXPECT_EQ(v.lookup("[MASK]"), Vocab::kMaskId);
    EXPECT_EQ(v.lookup("never-seen"), Vocab::kUnkId);
    EXPECT_TRUE(v.is_special(Vocab::kClsId));
    EXPECT_FALSE(v.is_special(v.lookup("x")));
}

TEST(Vocab, SyntheticCorpusFillsTheBudget) {
    const auto texts = generate_synthetic_corpus(400, 3);
    std::set<std::string> distinct;
    for (const auto& t : texts)
        for (const auto& w : split_words(t)) distinct.insert(w);
    ASSERT_GE(distinct.size(), 123u);
    const auto v = build_vocab(texts, 128);
    EXPECT_EQ(v.size(), 128u);
    std::size_t content = 0;
    for (std::size_t i = 0; i < v.size(); ++i) content += !v.is_special(static_cast<TokenId>(i));
    EXPECT_EQ(content, 123u);
}

TEST(Vocab, SaveLoadRoundTrip) {
    const auto v = build_vocab(generate_synthetic_corpus(50, 1), 64);
    const auto path = temp_path("vocab.txt");
    v.save(path);
    const auto w = Vocab::load(path);
    ASSERT_EQ(w.size(), v.size());
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(w.token(static_cast<TokenId>(i)), v.token(static_cast<TokenId>(i)));
}

TEST(Tokenize, Layout) {
    const auto v = build_vocab({"x y"}, 8);
    const auto s = tokenize("x y", v, 6);
    const std::vector<TokenId> want{Vocab::kClsId, v.lookup("x"), v.lookup("y"), Vocab::kSepId, Vocab::kPadId,
                                    Vocab::kPadId};
    EXPECT_EQ(s.ids, want);
    EXPECT_EQ(s.content_mask, (std::vector<std::uint8_t>{0, 1, 1, 0, 0, 0}));
    const auto e = tokenize("", v, 4);
    EXPECT_EQ(e.ids, (std::vector<TokenId>{Vocab::kClsId, Vocab::kSepId, Vocab::kPadId, Vocab::kPadId}));
    EXPECT_EQ(e.content_count(), 0u);
    EXPECT_THROW(tokenize("x", v, 2), ConfigError);
}

TEST(Tokenize, TruncatesLongText) {
    std::string text;
    for (int i = 0; i < 200; ++i) text += "w" + std::to_string(i % 50) + " ";
    const auto v = build_vocab({text}, 64);
    const auto s = tokenize(text, v, 128);
    EXPECT_EQ(s.length(), 128u);
    EXPECT_EQ(s.content_count(), 126u);
    EXPECT_EQ(s.ids.back(), Vocab::kSepId);
}

TEST(Tokenize, DetokenizeIsIdentityInVocab) {
    const auto texts = generate_synthetic_corpus(30, 8);
    const auto v = build_vocab(texts, 400);
    for (const auto& t : texts) {
        auto words = split_words(t);
        if (words.size() > 30) words.resize(30);
        EXPECT_EQ(detokenize(tokenize(t, v, 32), v), words);
    }
}

TEST(Masking, NoContentNoTargets) {
    const auto v = build_vocab({"a"}, 8);
    Rng rng(1);
    EXPECT_TRUE(apply_training_mask(tokenize("", v, 8), MaskPolicy{}, v.size(), rng).targets.empty());
}

TEST(Masking, SameSeedSameExample) {
    const auto v = build_vocab(generate_synthetic_corpus(20, 1), 64);
    const auto s = tokenize(generate_synthetic_corpus(1, 9)[0], v, 32);
    MaskPolicy p;
    p.select_rate = 0.5;
    Rng a(42), b(42);
    EXPECT_EQ(apply_training_mask(s, p, v.size(), a), apply_training_mask(s, p, v.size(), b));
}

TEST(Masking, RatesConvergeAndSpecialsStay) {
    const std::size_t V = 64;
    TokenSequence s;
    s.ids.assign(32, Vocab::kPadId);
    s.content_mask.assign(32, 0);
    s.ids[0] = Vocab::kClsId;
    for (std::size_t i = 1; i < 31; ++i) {
        s.ids[i] = static_cast<TokenId>(Vocab::kNumSpecials + i);
        s.content_mask[i] = 1;
    }
    s.ids[31] = Vocab::kSepId;
    Rng rng(123);
    MaskPolicy p;
    std::size_t positions = 0, selected = 0, masked = 0, random = 0, kept = 0;
    while (positions < 200000) {
        const auto ex = apply_training_mask(s, p, V, rng);
        positions += 30;
        for (const auto& t : ex.targets) {
            ASSERT_TRUE(s.content_mask[t.position]);
            ASSERT_EQ(t.token, s.ids[t.position]);
            ++selected;
            const auto id = ex.input.ids[t.position];
            if (id == Vocab::kMaskId)
                ++masked;
            else if (id == t.token)
                ++kept;  // includes random draws that hit the original token
            else
                ++random;
            ASSERT_FALSE(id != Vocab::kMaskId && id < Vocab::kNumSpecials);
        }
        for (std::size_t i = 0; i < 32; ++i) {
            if (!s.content_mask[i]) {
                ASSERT_EQ(ex.input.ids[i], s.ids[i]);
            }
        }
    }
    const double sel = static_cast<double>(selected) / static_cast<double>(positions);
    EXPECT_NEAR(sel, 0.15, 0.01);
    const double n = static_cast<double>(selected);
    EXPECT_NEAR(masked / n, 0.8, 0.02);
    EXPECT_NEAR(random / n, 0.1, 0.02);
    EXPECT_NEAR(kept / n, 0.1, 0.02);
}

TEST(Masking, PolicyValidation) {
    MaskPolicy p;
    p.select_rate = 0.0;
    EXPECT_THROW(p.validate(), ConfigError);
    p = {};
    p.keep_rate = 0.2;
    EXPECT_THROW(p.validate(), ConfigError);
}

TEST(EvalMasks, OnePerContentPosition) {
    const auto v = build_vocab({"a b"}, 8);
    const auto s = tokenize("a b", v, 6);
    const auto masks = enumerate_eval_masks(s);
    ASSERT_EQ(masks.size(), 2u);
    EXPECT_EQ(masks[0].targets[0].position, 1u);
    EXPECT_EQ(masks[0].targets[0].token, v.lookup("a"));
    EXPECT_EQ(masks[0].input.ids[1], Vocab::kMaskId);
    EXPECT_EQ(masks[0].input.ids[2], v.lookup("b"));
    EXPECT_EQ(masks[1].targets[0].token, v.lookup("b"));
    EXPECT_TRUE(enumerate_eval_masks(tokenize("", v, 6)).empty());
}

TEST(EvalMasks, TargetsFollowEmpiricalFrequency) {
    const auto v = build_vocab({"a a b a c"}, 10);
    std::vector<TokenSequence> eval{tokenize("a b", v, 8), tokenize("a c a", v, 8)};
    std::map<TokenId, int> seen;
    for (const auto& s : eval)
        for (const auto& ex : enumerate_eval_masks(s)) ++seen[ex.targets[0].token];
    EXPECT_EQ(seen[v.lookup("a")], 3);
    EXPECT_EQ(seen[v.lookup("b")], 1);
}

TEST(Classification, SyntheticCounts) {
    const auto split = generate_synthetic_classification(8, 40, 10, 5);
    EXPECT_EQ(split.train.size(), 320u);
    EXPECT_EQ(split.test.size(), 80u);
    std::map<int, int> train_counts, test_counts;
    for (const auto& x : split.train) ++train_counts[x.label];
    for (const auto& x : split.test) ++test_counts[x.label];
    for (int c = 0; c < 8; ++c) {
        EXPECT_EQ(train_counts[c], 40);
        EXPECT_EQ(test_counts[c], 10);
    }
}

TEST(Classification, JsonlRoundTripAndErrors) {
    const auto split = generate_synthetic_classification(4, 3, 1, 5);
    const auto path = temp_path("cls.jsonl");
    write_classification_jsonl(path, split.train);
    const auto back = read_classification_jsonl(path, 4);
    ASSERT_EQ(back.size(), split.train.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].text, split.train[i].text);
        EXPECT_EQ(back[i].label, split.train[i].label);
    }
    {
        std::ofstream out(path);
        out << "{\"text\": \"ok\", \"label\": 1}\n{\"text\": \"bad\", \"label\": 64}\n";
    }
    try {
        read_classification_jsonl(path, 64);
        FAIL();
    } catch (const IngestionError& e) {
        EXPECT_EQ(e.line(), 2u);
    }
    {
        std::ofstream out(path);
        out << "{\"text\": \"ok\", \"label\": 1}\n\n{not json\n";
    }
    try {
        read_classification_jsonl(path, 4);
        FAIL();
    } catch (const IngestionError& e) {
        EXPECT_EQ(e.line(), 3u);
    }
}

TEST(Classification, KeywordsAreClassSpecific) {
    // every item contains at least one keyword of its own class
    const auto split = generate_synthetic_classification(8, 20, 0, 11);
    std::map<std::string, std::set<int>> owners;
    for (const auto& x : split.train)
        for (const auto& w : split_words(x.text)) owners[w].insert(x.label);
    std::size_t exclusive_words = 0;
    for (const auto& [w, labels] : owners) exclusive_words += labels.size() == 1;
    EXPECT_GE(exclusive_words, 8u);
}

TEST(Synthetic, DeterministicAndHeavyTailed) {
    EXPECT_EQ(generate_synthetic_corpus(50, 4), generate_synthetic_corpus(50, 4));
    EXPECT_NE(generate_synthetic_corpus(50, 4), generate_synthetic_corpus(50, 5));
    std::map<std::string, int> freq;
    for (const auto& t : generate_synthetic_corpus(2000, 1))
        for (const auto& w : split_words(t)) ++freq[w];
    std::vector<int> counts;
    for (const auto& [_, c] : freq) counts.push_back(c);
    std::sort(counts.rbegin(), counts.rend());
    ASSERT_GT(counts.size(), 100u);
    EXPECT_GT(counts[0], 20 * counts[counts.size() / 2]);
}
