#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "aperture_mask.hpp"
#include "checkpoint.hpp"
#include "corpus.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "train.hpp"

namespace nodal {

// Sparse counts of (true id i -> predicted id j). Rows are the true token or
// label, columns the prediction.
class ConfusionMatrix {
public:
    using Key = std::pair<std::size_t, std::size_t>;

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(std::size_t dim) : dim_(dim), row_totals_(dim, 0), column_totals_(dim, 0) {}

    void add(std::size_t truth, std::size_t predicted, std::uint64_t count = 1) {
        if (truth >= dim_ || predicted >= dim_) throw ApertureError("confusion index out of range");
        if (count == 0) return;
        counts_[{truth, predicted}] += count;
        row_totals_[truth] += count;
        column_totals_[predicted] += count;
        total_ += count;
    }

    std::uint64_t count(std::size_t truth, std::size_t predicted) const {
        auto it = counts_.find({truth, predicted});
        return it == counts_.end() ? 0 : it->second;
    }

    std::size_t dim() const { return dim_; }
    std::uint64_t row_total(std::size_t i) const { return row_totals_.at(i); }
    std::uint64_t column_total(std::size_t j) const { return column_totals_.at(j); }
    std::uint64_t total() const { return total_; }
    const std::map<Key, std::uint64_t>& entries() const { return counts_; }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        if (o.dim_ != dim_) throw ApertureError("cannot add confusion matrices of different dimension");
        for (const auto& [k, c] : o.counts_) add(k.first, k.second, c);
        return *this;
    }

    friend ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) { return a += b; }

    friend bool operator==(const ConfusionMatrix& a, const ConfusionMatrix& b) {
        return a.dim_ == b.dim_ && a.counts_ == b.counts_;
    }

    // Σ_j counts[i][j] == row_totals[i] and the grand total matches.
    bool consistent() const {
        std::vector<std::uint64_t> rows(dim_, 0), cols(dim_, 0);
        std::uint64_t total = 0;
        for (const auto& [k, c] : counts_) {
            rows[k.first] += c;
            cols[k.second] += c;
            total += c;
        }
        return rows == row_totals_ && cols == column_totals_ && total == total_;
    }

    // CSV triples true_id,pred_id,count in ascending key order.
    void write_csv(std::ostream& out) const {
        out << "true_id,pred_id,count\n";
        for (const auto& [k, c] : counts_) out << k.first << ',' << k.second << ',' << c << '\n';
    }

private:
    std::size_t dim_ = 0;
    std::map<Key, std::uint64_t> counts_;
    std::vector<std::uint64_t> row_totals_;
    std::vector<std::uint64_t> column_totals_;
    std::uint64_t total_ = 0;
};

// Layer-ℓ attention outputs at every deterministically masked position of an
// eval set, computed once so many apertures can be scored against them.
struct MlmEvalCache {
    std::size_t layer = 0;
    Matrix<float> features;         // events x D
    std::vector<TokenId> targets;   // true token per event
    std::vector<std::size_t> input; // eval-sequence index per event
};

// Pooled layer-ℓ attention outputs of a labeled eval set.
struct TaskEvalCache {
    std::size_t layer = 0;
    Matrix<float> features;  // examples x D
    std::vector<int> labels;
};

// Events are ordered by sequence, then by position within the sequence.
inline MlmEvalCache build_mlm_eval_cache(const ModelParams<float>& model, std::size_t layer,
                                         const std::vector<TokenSequence>& eval) {
    if (layer >= model.config.layers) throw ConfigError("probe layer out of range");
    const std::size_t D = model.config.width;
    std::vector<std::vector<float>> rows(eval.size());
    std::vector<std::vector<TokenId>> targets(eval.size());
    parallel_for(eval.size(), [&](std::size_t s) {
        try {
            for (const auto& ex : enumerate_eval_masks(eval[s])) {
                const auto feats = attention_features(model, ex.input, layer);
                const auto r = feats.row(ex.targets[0].position);
                rows[s].insert(rows[s].end(), r.begin(), r.end());
                targets[s].push_back(ex.targets[0].token);
            }
        } catch (const NumericalError& e) {
            throw NumericalError(std::string(e.what()) + " (eval input " + std::to_string(s) + ")",
                                 static_cast<long>(s));
        }
    });
    MlmEvalCache cache;
    cache.layer = layer;
    std::size_t events = 0;
    for (const auto& t : targets) events += t.size();
    cache.features = Matrix<float>(events, D);
    std::size_t e = 0;
    for (std::size_t s = 0; s < eval.size(); ++s) {
        std::copy(rows[s].begin(), rows[s].end(), cache.features.data.begin() + static_cast<long>(e * D));
        for (TokenId t : targets[s]) {
            cache.targets.push_back(t);
            cache.input.push_back(s);
            ++e;
        }
    }
    return cache;
}

inline TaskEvalCache build_task_eval_cache(const ModelParams<float>& model, std::size_t layer,
                                           const std::vector<LabeledExample>& eval) {
    const auto pooled = pooled_attention_features(model, layer, eval);
    TaskEvalCache cache;
    cache.layer = layer;
    cache.features = Matrix<float>(eval.size(), model.config.width);
    for (std::size_t i = 0; i < eval.size(); ++i) {
        std::copy(pooled[i].begin(), pooled[i].end(), cache.features.row(i).begin());
        cache.labels.push_back(eval[i].label);
    }
    return cache;
}

// Predicted token per cached event under the aperture, lowest index winning ties.
inline std::vector<std::size_t> predict_mlm(const MlmHead<float>& probe, Activation act, const ApertureMask& aperture,
                                            const MlmEvalCache& cache) {
    std::vector<std::size_t> pred(cache.targets.size());
    parallel_for(pred.size(), [&](std::size_t e) {
        const auto logits = mlm_logits(probe, cache.features.row(e), aperture, act);
        pred[e] = argmax_lowest(std::span<const float>(logits));
    });
    return pred;
}

inline ConfusionMatrix accumulate_confusion_mlm(const MlmHead<float>& probe, Activation act,
                                                const ApertureMask& aperture, const MlmEvalCache& cache) {
    ConfusionMatrix cm(probe.fc2.cols);
    const auto pred = predict_mlm(probe, act, aperture, cache);
    for (std::size_t e = 0; e < pred.size(); ++e) cm.add(static_cast<std::size_t>(cache.targets[e]), pred[e]);
    return cm;
}

inline ConfusionMatrix accumulate_confusion_mlm(const ModelParams<float>& model, const MlmProbe& probe,
                                                const ApertureMask& aperture, const std::vector<TokenSequence>& eval) {
    return accumulate_confusion_mlm(probe.head, model.config.mlm_activation, aperture,
                                    build_mlm_eval_cache(model, probe.layer, eval));
}

inline ConfusionMatrix accumulate_confusion_task(const TaskHead<float>& probe, const ApertureMask& aperture,
                                                 const TaskEvalCache& cache) {
    ConfusionMatrix cm(probe.weight.cols);
    for (std::size_t i = 0; i < cache.labels.size(); ++i) {
        const auto logits = task_logits(probe, cache.features.row(i), aperture);
        cm.add(static_cast<std::size_t>(cache.labels[i]), argmax_lowest(std::span<const float>(logits)));
    }
    return cm;
}

inline ConfusionMatrix accumulate_confusion_task(const ModelParams<float>& model, const TaskProbe& probe,
                                                 const ApertureMask& aperture,
                                                 const std::vector<LabeledExample>& eval) {
    return accumulate_confusion_task(probe.head, aperture, build_task_eval_cache(model, probe.layer, eval));
}

inline double accuracy(const ConfusionMatrix& cm) {
    if (cm.total() == 0) return 0.0;
    std::uint64_t diag = 0;
    for (const auto& [k, c] : cm.entries())
        if (k.first == k.second) diag += c;
    return static_cast<double>(diag) / static_cast<double>(cm.total());
}

inline nlohmann::json confusion_sidecar(const ConfusionMatrix& cm, const ApertureMask& aperture,
                                        const std::string& checkpoint_hash) {
    return {{"dim", cm.dim()},
            {"aperture", aperture.description()},
            {"aperture_size", aperture.size()},
            {"events", cm.total()},
            {"checkpoint_hash", checkpoint_hash}};
}

}  // namespace nodal
