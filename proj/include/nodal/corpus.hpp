#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "rng.hpp"

namespace nodal {

using TokenId = std::int32_t;

// Token ids are dense in [0, size()); the five specials occupy ids 0..4.
class Vocab {
public:
    static constexpr std::string_view kPad = "[PAD]";
    static constexpr std::string_view kUnk = "[UNK]";
    static constexpr std::string_view kCls = "[CLS]";
    static constexpr std::string_view kSep = "[SEP]";
    static constexpr std::string_view kMask = "[MASK]";
    static constexpr TokenId kPadId = 0;
    static constexpr TokenId kUnkId = 1;
    static constexpr TokenId kClsId = 2;
    static constexpr TokenId kSepId = 3;
    static constexpr TokenId kMaskId = 4;
    static constexpr TokenId kNumSpecials = 5;

    Vocab() {
        for (auto s : {kPad, kUnk, kCls, kSep, kMask}) add(std::string(s));
    }

    // Builds from an ordered token list whose first five entries are the specials.
    static Vocab from_tokens(const std::vector<std::string>& tokens) {
        if (tokens.size() < static_cast<std::size_t>(kNumSpecials))
            throw IngestionError("vocabulary shorter than the special-token block");
        Vocab v;
        for (TokenId i = 0; i < kNumSpecials; ++i)
            if (tokens[static_cast<std::size_t>(i)] != v.tokens_[static_cast<std::size_t>(i)])
                throw IngestionError("vocabulary special tokens out of order", static_cast<std::size_t>(i) + 1);
        for (std::size_t i = kNumSpecials; i < tokens.size(); ++i) {
            if (v.index_.count(tokens[i])) throw IngestionError("duplicate vocabulary token '" + tokens[i] + "'", i + 1);
            v.add(tokens[i]);
        }
        return v;
    }

    TokenId lookup(std::string_view token) const {
        auto it = index_.find(std::string(token));
        return it == index_.end() ? kUnkId : it->second;
    }

    const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    std::size_t size() const { return tokens_.size(); }
    bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

    static bool is_special(TokenId id) { return id >= 0 && id < kNumSpecials; }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw Error("cannot write vocabulary " + path);
        for (const auto& t : tokens_) out << t << '\n';
    }

    static Vocab load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IngestionError("cannot open vocabulary " + path);
        std::vector<std::string> tokens;
        for (std::string line; std::getline(in, line);)
            if (!line.empty()) tokens.push_back(line);
        return from_tokens(tokens);
    }

private:
    void add(std::string t) {
        index_.emplace(t, static_cast<TokenId>(tokens_.size()));
        tokens_.push_back(std::move(t));
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) words.push_back(std::move(cur)), cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

// Specials first, then the max_size - 5 most frequent lowercase words; ties
// broken lexicographically.
inline Vocab build_vocab(const std::vector<std::string>& texts, std::size_t max_size) {
    if (max_size < 6) throw ConfigError("vocabulary max_size must be at least 6");
    if (texts.empty()) throw IngestionError("cannot build a vocabulary from an empty corpus");
    std::map<std::string, std::size_t> freq;
    for (const auto& text : texts)
        for (auto& w : split_words(text)) ++freq[w];
    Vocab specials;
    std::vector<std::pair<std::string, std::size_t>> ranked;
    for (auto& [w, c] : freq)
        if (!specials.contains(w)) ranked.emplace_back(w, c);
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens = specials.tokens();
    for (const auto& [w, c] : ranked) {
        if (tokens.size() >= max_size) break;
        tokens.push_back(w);
    }
    return Vocab::from_tokens(tokens);
}

struct TokenSequence {
    std::vector<TokenId> ids;
    std::vector<std::uint8_t> content_mask;

    std::size_t length() const { return ids.size(); }
    std::size_t content_count() const {
        return static_cast<std::size_t>(std::count(content_mask.begin(), content_mask.end(), 1));
    }
    // One past the last non-[PAD] position.
    std::size_t active_length() const {
        std::size_t n = ids.size();
        while (n > 0 && ids[n - 1] == Vocab::kPadId) --n;
        return n;
    }
    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// [CLS] t1 .. tk [SEP] [PAD]..., truncated to fit and padded to exactly seq_len.
inline TokenSequence tokenize(std::string_view text, const Vocab& vocab, std::size_t seq_len) {
    if (seq_len < 3) throw ConfigError("sequence length must be at least 3");
    const auto words = split_words(text);
    const std::size_t k = std::min(words.size(), seq_len - 2);
    TokenSequence seq;
    seq.ids.assign(seq_len, Vocab::kPadId);
    seq.content_mask.assign(seq_len, 0);
    seq.ids[0] = Vocab::kClsId;
    for (std::size_t i = 0; i < k; ++i) {
        seq.ids[i + 1] = vocab.lookup(words[i]);
        seq.content_mask[i + 1] = 1;
    }
    seq.ids[k + 1] = Vocab::kSepId;
    return seq;
}

inline std::vector<std::string> detokenize(const TokenSequence& seq, const Vocab& vocab) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < seq.ids.size(); ++i)
        if (seq.content_mask[i]) out.push_back(vocab.token(seq.ids[i]));
    return out;
}

struct MaskPolicy {
    double select_rate = 0.15;
    double replace_mask_rate = 0.8;
    double replace_random_rate = 0.1;
    double keep_rate = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(select_rate > 0.0 && select_rate < 1.0)) throw ConfigError("select_rate must lie in (0, 1)");
        for (double r : {replace_mask_rate, replace_random_rate, keep_rate})
            if (r < 0.0 || r > 1.0) throw ConfigError("mask sub-rates must lie in [0, 1]");
        if (std::abs(replace_mask_rate + replace_random_rate + keep_rate - 1.0) > 1e-12)
            throw ConfigError("mask sub-rates must sum to 1");
    }
};

struct MaskTarget {
    std::size_t position;
    TokenId token;
    friend bool operator==(const MaskTarget&, const MaskTarget&) = default;
};

struct MaskedExample {
    TokenSequence input;
    std::vector<MaskTarget> targets;  // ascending position
    friend bool operator==(const MaskedExample&, const MaskedExample&) = default;
};

// Independent Bernoulli selection per content position, then 80/10/10 corruption.
inline MaskedExample apply_training_mask(const TokenSequence& seq, const MaskPolicy& policy,
                                         std::size_t vocab_size, Rng& rng) {
    MaskedExample ex{seq, {}};
    const auto random_span = vocab_size > static_cast<std::size_t>(Vocab::kNumSpecials)
                                 ? vocab_size - static_cast<std::size_t>(Vocab::kNumSpecials)
                                 : 0;
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
        if (!seq.content_mask[i]) continue;
        if (rng.uniform() >= policy.select_rate) continue;
        ex.targets.push_back({i, seq.ids[i]});
        const double u = rng.uniform();
        if (u < policy.replace_mask_rate) {
            ex.input.ids[i] = Vocab::kMaskId;
        } else if (u < policy.replace_mask_rate + policy.replace_random_rate && random_span > 0) {
            ex.input.ids[i] = Vocab::kNumSpecials + static_cast<TokenId>(rng.below(random_span));
        }
    }
    return ex;
}

// One example per content position, in position order, with exactly that position masked.
inline std::vector<MaskedExample> enumerate_eval_masks(const TokenSequence& seq) {
    std::vector<MaskedExample> out;
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
        if (!seq.content_mask[i]) continue;
        MaskedExample ex{seq, {{i, seq.ids[i]}}};
        ex.input.ids[i] = Vocab::kMaskId;
        out.push_back(std::move(ex));
    }
    return out;
}

struct LabeledText {
    std::string text;
    int label = 0;
};

struct LabeledExample {
    TokenSequence input;
    int label = 0;
};

struct ClassificationSplit {
    std::vector<LabeledText> train;
    std::vector<LabeledText> test;
};

// JSON lines, each {"text": string, "label": integer}.
inline std::vector<LabeledText> read_classification_jsonl(const std::string& path, int num_classes) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot open classification file " + path);
    std::vector<LabeledText> out;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error&) {
            throw IngestionError("malformed JSON record in " + path, line_no);
        }
        if (!rec.is_object() || !rec.contains("text") || !rec["text"].is_string() || !rec.contains("label") ||
            !rec["label"].is_number_integer())
            throw IngestionError("record needs string 'text' and integer 'label' in " + path, line_no);
        const auto label = rec["label"].get<long long>();
        if (label < 0 || label >= num_classes)
            throw IngestionError("label " + std::to_string(label) + " outside [0, " + std::to_string(num_classes) +
                                     ") in " + path,
                                 line_no);
        out.push_back({rec["text"].get<std::string>(), static_cast<int>(label)});
    }
    return out;
}

inline void write_classification_jsonl(const std::string& path, const std::vector<LabeledText>& items) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    for (const auto& it : items) out << nlohmann::json{{"text", it.text}, {"label", it.label}}.dump() << '\n';
}

inline std::vector<LabeledExample> tokenize_labeled(const std::vector<LabeledText>& items, const Vocab& vocab,
                                                    std::size_t seq_len) {
    std::vector<LabeledExample> out;
    out.reserve(items.size());
    for (const auto& it : items) out.push_back({tokenize(it.text, vocab, seq_len), it.label});
    return out;
}

inline std::vector<LabeledExample> load_classification_dataset(const std::string& path, int num_classes,
                                                               const Vocab& vocab, std::size_t seq_len) {
    return tokenize_labeled(read_classification_jsonl(path, num_classes), vocab, seq_len);
}

// Plain text, one paragraph per line; blank lines skipped.
inline std::vector<std::string> read_text_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot open corpus " + path);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") != std::string::npos) out.push_back(line);
    }
    return out;
}

inline void write_text_corpus(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    for (const auto& l : lines) out << l << '\n';
}

// Stochastic template grammar over a fixed pseudo-word lexicon. Each sentence
// picks a topic that biases its content words, so masked words are predictable
// from context, and Zipf weights inside every word class give heavy-tailed
// token frequencies.
class SyntheticGrammar {
public:
    static constexpr int kTopics = 8;

    SyntheticGrammar() {
        Rng rng(0x5eed1e81c0ULL);
        auto make = [&](std::size_t n) {
            std::vector<std::string> words;
            while (words.size() < n) {
                auto w = pseudo_word(rng);
                if (used_.insert(w).second) words.push_back(w);
            }
            return words;
        };
        determiners_ = {"the", "a", "this", "that", "every", "some"};
        pronouns_ = {"she", "he", "they", "we", "it"};
        prepositions_ = {"in", "on", "near", "with", "under", "over", "from", "beyond"};
        conjunctions_ = {"and", "but", "while", "because"};
        for (const auto& group : {determiners_, pronouns_, prepositions_, conjunctions_})
            for (const auto& w : group) used_.insert(w);
        adverbs_ = make(20);
        shared_adjectives_ = make(12);
        shared_nouns_ = make(20);
        for (int t = 0; t < kTopics; ++t) {
            Topic topic;
            topic.nouns = make(12);
            topic.adjectives = make(6);
            topic.transitive = make(5);
            topic.intransitive = make(4);
            topics_.push_back(std::move(topic));
        }
    }

    std::size_t lexicon_size() const { return used_.size(); }

    std::string sentence(Rng& rng) const {
        const Topic& topic = topics_[rng.below(kTopics)];
        std::vector<std::string> out;
        auto noun_phrase = [&] {
            out.push_back(zipf(determiners_, rng));
            if (rng.uniform() < 0.5) out.push_back(rng.uniform() < 0.75 ? zipf(topic.adjectives, rng)
                                                                         : zipf(shared_adjectives_, rng));
            out.push_back(rng.uniform() < 0.8 ? zipf(topic.nouns, rng) : zipf(shared_nouns_, rng));
        };
        const auto form = rng.below(4);
        if (form == 0) {
            noun_phrase();
            out.push_back(zipf(topic.transitive, rng));
            noun_phrase();
            if (rng.uniform() < 0.5) {
                out.push_back(zipf(prepositions_, rng));
                noun_phrase();
            }
        } else if (form == 1) {
            noun_phrase();
            out.push_back(zipf(topic.intransitive, rng));
            if (rng.uniform() < 0.6) out.push_back(zipf(adverbs_, rng));
        } else if (form == 2) {
            out.push_back(zipf(pronouns_, rng));
            out.push_back(zipf(topic.transitive, rng));
            noun_phrase();
            out.push_back(zipf(conjunctions_, rng));
            out.push_back(zipf(pronouns_, rng));
            out.push_back(zipf(topic.intransitive, rng));
        } else {
            out.push_back(zipf(prepositions_, rng));
            noun_phrase();
            noun_phrase();
            out.push_back(zipf(topic.intransitive, rng));
            if (rng.uniform() < 0.5) out.push_back(zipf(adverbs_, rng));
        }
        std::string s;
        for (const auto& w : out) {
            if (!s.empty()) s.push_back(' ');
            s += w;
        }
        return s;
    }

    std::string paragraph(Rng& rng, std::size_t max_sentences = 2) const {
        std::string p = sentence(rng);
        const auto extra = rng.below(max_sentences);
        for (std::uint64_t i = 0; i < extra; ++i) p += ' ' + sentence(rng);
        return p;
    }

    // Frequent topic words, disjoint across classes when drawn without replacement.
    std::vector<std::string> keyword_pool() const {
        std::vector<std::string> pool;
        for (const auto& t : topics_) {
            for (std::size_t i = 0; i < 8; ++i) pool.push_back(t.nouns[i]);
            for (std::size_t i = 0; i < 3; ++i) pool.push_back(t.adjectives[i]);
            for (std::size_t i = 0; i < 3; ++i) pool.push_back(t.transitive[i]);
        }
        return pool;
    }

private:
    struct Topic {
        std::vector<std::string> nouns, adjectives, transitive, intransitive;
    };

    static std::string pseudo_word(Rng& rng) {
        static constexpr std::array<const char*, 16> onsets{"b", "d", "f", "g", "k", "l", "m", "n",
                                                            "p", "r", "s", "t", "v", "z", "br", "st"};
        static constexpr std::array<const char*, 6> vowels{"a", "e", "i", "o", "u", "ai"};
        std::string w;
        const auto syllables = 2 + rng.below(2);
        for (std::uint64_t i = 0; i < syllables; ++i) {
            w += onsets[rng.below(onsets.size())];
            w += vowels[rng.below(vowels.size())];
        }
        return w;
    }

    static const std::string& zipf(const std::vector<std::string>& words, Rng& rng) {
        double total = 0.0;
        for (std::size_t i = 0; i < words.size(); ++i) total += 1.0 / std::pow(static_cast<double>(i + 1), 1.1);
        double u = rng.uniform() * total;
        for (std::size_t i = 0; i < words.size(); ++i) {
            u -= 1.0 / std::pow(static_cast<double>(i + 1), 1.1);
            if (u < 0.0) return words[i];
        }
        return words.back();
    }

    std::vector<std::string> determiners_, pronouns_, prepositions_, conjunctions_;
    std::vector<std::string> adverbs_, shared_adjectives_, shared_nouns_;
    std::vector<Topic> topics_;
    std::set<std::string> used_;
};

inline std::vector<std::string> generate_synthetic_corpus(std::size_t paragraphs, std::uint64_t seed,
                                                          std::size_t max_sentences = 2) {
    static const SyntheticGrammar grammar;
    Rng rng(derive_seed(seed, 0xc0));
    std::vector<std::string> out;
    out.reserve(paragraphs);
    for (std::size_t i = 0; i < paragraphs; ++i) out.push_back(grammar.paragraph(rng, max_sentences));
    return out;
}

// Each class owns a disjoint set of keywords; an item is a grammar sentence
// with one or two of its class keywords inserted, plus an occasional
// distractor keyword from another class.
inline ClassificationSplit generate_synthetic_classification(int num_classes, std::size_t per_class_train,
                                                             std::size_t per_class_test, std::uint64_t seed,
                                                             std::size_t keywords_per_class = 3,
                                                             double distractor_rate = 0.3) {
    if (num_classes < 1 || per_class_train + per_class_test == 0 || keywords_per_class == 0)
        throw ConfigError("synthetic classification needs positive class and item counts");
    static const SyntheticGrammar grammar;
    auto pool = grammar.keyword_pool();
    if (static_cast<std::size_t>(num_classes) * keywords_per_class > pool.size())
        throw ConfigError("synthetic classification supports at most " +
                          std::to_string(pool.size() / keywords_per_class) + " classes");
    Rng rng(derive_seed(seed, 0xc1a55));
    rng.shuffle(std::span<std::string>(pool));
    std::vector<std::vector<std::string>> keywords(static_cast<std::size_t>(num_classes));
    for (std::size_t c = 0; c < keywords.size(); ++c)
        keywords[c].assign(pool.begin() + static_cast<long>(c * keywords_per_class),
                           pool.begin() + static_cast<long>((c + 1) * keywords_per_class));

    auto make_item = [&](int label) {
        auto words = split_words(grammar.sentence(rng));
        const auto& own = keywords[static_cast<std::size_t>(label)];
        std::vector<std::string> inserts{own[rng.below(own.size())]};
        if (rng.uniform() < 0.5) inserts.push_back(own[rng.below(own.size())]);
        if (num_classes > 1 && rng.uniform() < distractor_rate) {
            auto other = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(num_classes - 1)));
            if (other >= static_cast<std::size_t>(label)) ++other;
            inserts.push_back(keywords[other][rng.below(keywords[other].size())]);
        }
        for (const auto& w : inserts) {
            const auto at = static_cast<long>(rng.below(words.size() + 1));
            words.insert(words.begin() + at, w);
        }
        std::string text;
        for (const auto& w : words) {
            if (!text.empty()) text.push_back(' ');
            text += w;
        }
        return LabeledText{text, label};
    };

    ClassificationSplit split;
    for (std::size_t i = 0; i < per_class_train; ++i)
        for (int c = 0; c < num_classes; ++c) split.train.push_back(make_item(c));
    for (std::size_t i = 0; i < per_class_test; ++i)
        for (int c = 0; c < num_classes; ++c) split.test.push_back(make_item(c));
    return split;
}

}  // namespace nodal
