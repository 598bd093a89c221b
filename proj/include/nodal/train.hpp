#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace nodal {

template <class T>
struct TensorRef {
    std::string name;
    Matrix<T>* value;
    bool decays;
};

template <class T>
std::vector<TensorRef<T>> tensor_refs(ModelParams<T>& p) {
    std::vector<TensorRef<T>> out;
    visit_tensors(p, [&](const std::string& n, Matrix<T>& m, bool d) { out.push_back({n, &m, d}); });
    return out;
}

template <class T, class Head>
std::vector<TensorRef<T>> head_refs(Head& h, const std::string& prefix) {
    std::vector<TensorRef<T>> out;
    visit_tensors(h, prefix, [&](const std::string& n, Matrix<T>& m, bool d) { out.push_back({n, &m, d}); });
    return out;
}

template <class T>
struct TrainState {
    std::size_t step = 0;         // scheduler position
    std::size_t total_steps = 1;  // scheduler horizon
    std::size_t adam_steps = 0;   // optimizer updates taken, for bias correction
    std::vector<Matrix<T>> first_moment;
    std::vector<Matrix<T>> second_moment;
    std::uint64_t shuffle_seed = 0;
};

// eta0 * (1 - step / total_steps), clamped at zero.
template <class T>
double linear_lr(const TrainState<T>& state, double eta0) {
    if (state.total_steps == 0) throw ConfigError("total_steps must be at least 1");
    const double frac = static_cast<double>(state.step) / static_cast<double>(state.total_steps);
    return std::max(0.0, eta0 * (1.0 - frac));
}

// One AdamW update with decoupled weight decay: w <- w * (1 - lr * alpha), then
// the bias-corrected Adam step. Frozen tensors are skipped entirely.
template <class T>
void adamw_step(const std::vector<TensorRef<T>>& params, const std::vector<const Matrix<T>*>& grads,
                TrainState<T>& state, const TrainConfig& cfg, double lr) {
    if (params.size() != grads.size()) throw ConfigError("parameter/gradient count mismatch");
    if (state.first_moment.size() != params.size()) {
        state.first_moment.clear();
        state.second_moment.clear();
        for (const auto& p : params) {
            state.first_moment.emplace_back(p.value->rows, p.value->cols);
            state.second_moment.emplace_back(p.value->rows, p.value->cols);
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!grads[i]->same_shape(*params[i].value)) throw ConfigError("gradient shape mismatch for " + params[i].name);
        if (!is_frozen(cfg.freeze, params[i].name) && !grads[i]->all_finite())
            throw NumericalError("non-finite gradient in tensor " + params[i].name);
    }
    ++state.adam_steps;
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T bc1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.adam_steps)));
    const T bc2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.adam_steps)));
    const T step_lr = static_cast<T>(lr);
    const T decay = static_cast<T>(1.0 - lr * cfg.alpha);
    const T eps = static_cast<T>(cfg.adam_eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (is_frozen(cfg.freeze, params[i].name)) continue;
        auto& w = params[i].value->data;
        const auto& g = grads[i]->data;
        auto& m = state.first_moment[i].data;
        auto& v = state.second_moment[i].data;
        const bool decays = params[i].decays && cfg.alpha != 0.0;
        for (std::size_t k = 0; k < w.size(); ++k) {
            if (decays) w[k] *= decay;
            m[k] = b1 * m[k] + (T(1) - b1) * g[k];
            v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
            const T mhat = m[k] / bc1;
            const T vhat = v[k] / bc2;
            w[k] -= step_lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

struct LossRecord {
    std::size_t epoch;
    std::string split;
    double loss;
    double lr;
};

using LossCurve = std::vector<LossRecord>;
using EpochCallback = std::function<void(const LossRecord&)>;

namespace detail {

inline std::size_t scheduler_horizon(const TrainConfig& cfg, std::size_t examples) {
    const std::size_t batches = (examples + cfg.batch_size - 1) / cfg.batch_size;
    return std::max<std::size_t>(1, cfg.step_unit == StepUnit::epoch ? cfg.epochs : cfg.epochs * batches);
}

// Epoch/batch driver. `batch_fn(indices, lr)` performs one update and returns
// (summed loss, event count). Shuffles with a full permutation per epoch.
template <class T, class BatchFn>
LossCurve run_epochs(std::size_t examples, const TrainConfig& cfg, TrainState<T>& state, BatchFn&& batch_fn,
                     const std::function<double()>& eval_fn, const EpochCallback& on_epoch) {
    cfg.validate();
    LossCurve curve;
    if (examples == 0) throw ConfigError("training set is empty");
    state.total_steps = scheduler_horizon(cfg, examples);
    std::vector<std::size_t> order(examples);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(cfg.seed, 0x5f1e, epoch));
        rng.shuffle(std::span<std::size_t>(order));
        const double epoch_lr = linear_lr(state, cfg.eta);
        double loss_sum = 0.0;
        std::size_t events = 0;
        for (std::size_t start = 0; start < examples; start += cfg.batch_size) {
            const std::size_t end = std::min(examples, start + cfg.batch_size);
            std::span<const std::size_t> idx(order.data() + start, end - start);
            const auto [l, e] = batch_fn(idx, linear_lr(state, cfg.eta), epoch);
            loss_sum += l;
            events += e;
            if (cfg.step_unit == StepUnit::batch) ++state.step;
        }
        if (cfg.step_unit == StepUnit::epoch) ++state.step;
        LossRecord rec{epoch, "train", events ? loss_sum / static_cast<double>(events) : 0.0, epoch_lr};
        curve.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (eval_fn) {
            LossRecord ev{epoch, "eval", eval_fn(), epoch_lr};
            curve.push_back(ev);
            if (on_epoch) on_epoch(ev);
        }
    }
    return curve;
}

template <class T>
void add_params(ModelParams<T>& dst, const ModelParams<T>& src) {
    std::vector<Matrix<T>*> d;
    visit_tensors(dst, [&](const std::string&, Matrix<T>& m, bool) { d.push_back(&m); });
    std::size_t i = 0;
    visit_tensors(src, [&](const std::string&, const Matrix<T>& m, bool) { add_into(*d[i++], m); });
}

template <class T>
void fill_zero(ModelParams<T>& p) {
    visit_tensors(p, [](const std::string&, Matrix<T>& m, bool) { m.fill(T{0}); });
}

template <class T>
std::vector<const Matrix<T>*> grad_ptrs(ModelParams<T>& g) {
    std::vector<const Matrix<T>*> out;
    visit_tensors(g, [&](const std::string&, Matrix<T>& m, bool) { out.push_back(&m); });
    return out;
}

}  // namespace detail

inline MaskedExample training_example(const TokenSequence& seq, const MaskPolicy& policy, std::size_t vocab_size,
                                      std::size_t epoch, std::size_t index) {
    Rng rng(derive_seed(policy.seed, epoch, index));
    return apply_training_mask(seq, policy, vocab_size, rng);
}

// Fixed held-out masks: the same draw every epoch.
inline std::vector<MaskedExample> fixed_eval_examples(const std::vector<TokenSequence>& seqs,
                                                      const MaskPolicy& policy, std::size_t vocab_size) {
    std::vector<MaskedExample> out;
    for (std::size_t i = 0; i < seqs.size(); ++i)
        out.push_back(training_example(seqs[i], policy, vocab_size, 0xe7a1, i));
    return out;
}

struct TrainOptions {
    std::vector<TokenSequence> eval;  // optional held-out sequences for an eval loss per epoch
    EpochCallback on_epoch;
};

// Full-model MLM training; deterministic for fixed seeds when dropout is off.
template <class T>
LossCurve pretrain_mlm(ModelParams<T>& params, const std::vector<TokenSequence>& corpus, const TrainConfig& cfg,
                       const MaskPolicy& policy, const TrainOptions& opts = {}) {
    policy.validate();
    if (corpus.empty()) throw ConfigError("pretraining corpus is empty");
    TrainState<T> state;
    auto refs = tensor_refs(params);
    ModelParams<T> total = zeros_like(params);
    std::vector<ModelParams<T>> buffers;
    std::vector<T> losses;
    std::vector<std::size_t> counts;
    const auto V = params.config.vocab_size;
    std::vector<MaskedExample> eval_set;
    if (!opts.eval.empty()) eval_set = fixed_eval_examples(opts.eval, policy, V);

    auto batch_fn = [&](std::span<const std::size_t> idx, double lr, std::size_t epoch) {
        const std::size_t n = idx.size();
        while (buffers.size() < n) buffers.push_back(zeros_like(params));
        losses.assign(n, T{0});
        counts.assign(n, 0);
        std::vector<MaskedExample> batch(n);
        std::size_t targets = 0;
        for (std::size_t i = 0; i < n; ++i) {
            batch[i] = training_example(corpus[idx[i]], policy, V, epoch, idx[i]);
            targets += batch[i].targets.size();
        }
        if (targets == 0) return std::pair<double, std::size_t>{0.0, 0};
        const T scale = T(1) / static_cast<T>(targets);
        parallel_for(n, [&](std::size_t i) {
            detail::fill_zero(buffers[i]);
            Rng drop(derive_seed(cfg.seed, 0xd409, epoch, idx[i]));
            losses[i] = mlm_example_backward(params, batch[i], scale, buffers[i],
                                             params.config.dropout_rate > 0 ? &drop : nullptr);
        });
        detail::fill_zero(total);
        double loss_sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            detail::add_params(total, buffers[i]);
            loss_sum += static_cast<double>(losses[i]);
        }
        zero_frozen(total, cfg.freeze);
        adamw_step(refs, detail::grad_ptrs(total), state, cfg, lr);
        return std::pair<double, std::size_t>{loss_sum, targets};
    };
    std::function<double()> eval_fn;
    if (!eval_set.empty())
        eval_fn = [&] { return static_cast<double>(mlm_loss(params, std::span<const MaskedExample>(eval_set))); };
    return detail::run_epochs(corpus.size(), cfg, state, batch_fn, eval_fn, opts.on_epoch);
}

// Full-model fine-tuning on the task-head objective. Zero epochs leaves params unchanged.
template <class T>
LossCurve finetune_classification(ModelParams<T>& params, const std::vector<LabeledExample>& data,
                                  const TrainConfig& cfg, const std::vector<LabeledExample>& eval = {},
                                  const EpochCallback& on_epoch = {}) {
    if (cfg.epochs == 0) return {};
    TrainState<T> state;
    auto refs = tensor_refs(params);
    ModelParams<T> total = zeros_like(params);
    std::vector<ModelParams<T>> buffers;
    std::vector<T> losses;
    auto batch_fn = [&](std::span<const std::size_t> idx, double lr, std::size_t epoch) {
        const std::size_t n = idx.size();
        while (buffers.size() < n) buffers.push_back(zeros_like(params));
        losses.assign(n, T{0});
        const T scale = T(1) / static_cast<T>(n);
        parallel_for(n, [&](std::size_t i) {
            detail::fill_zero(buffers[i]);
            Rng drop(derive_seed(cfg.seed, 0xd409, epoch, idx[i]));
            losses[i] = classification_example_backward(params, data[idx[i]], scale, buffers[i],
                                                        params.config.dropout_rate > 0 ? &drop : nullptr);
        });
        detail::fill_zero(total);
        double loss_sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            detail::add_params(total, buffers[i]);
            loss_sum += static_cast<double>(losses[i]);
        }
        zero_frozen(total, cfg.freeze);
        adamw_step(refs, detail::grad_ptrs(total), state, cfg, lr);
        return std::pair<double, std::size_t>{loss_sum, n};
    };
    std::function<double()> eval_fn;
    if (!eval.empty())
        eval_fn = [&] { return static_cast<double>(classification_loss(params, std::span<const LabeledExample>(eval))); };
    return detail::run_epochs(data.size(), cfg, state, batch_fn, eval_fn, on_epoch);
}

// MLM probe on the frozen layer-`layer` attention outputs. The encoder is only
// read; the probe is initialized from probe_seed (symmetric across head blocks
// under symmetric_heads).
template <class T>
MlmHead<T> train_mlm_probe(const ModelParams<T>& model, std::size_t layer, const std::vector<TokenSequence>& corpus,
                           const TrainConfig& cfg, const MaskPolicy& policy, std::uint64_t probe_seed,
                           LossCurve* curve_out = nullptr, const EpochCallback& on_epoch = {}) {
    policy.validate();
    if (layer >= model.config.layers) throw ConfigError("probe layer out of range");
    if (corpus.empty()) throw ConfigError("probe corpus is empty");
    MlmHead<T> head = init_mlm_head<T>(model.config, probe_seed);
    TrainState<T> state;
    auto refs = head_refs<T>(head, "probe.");
    MlmHead<T> total = zeros_like_head<T>(head);
    std::vector<MlmHead<T>> buffers;
    std::vector<T> losses;
    const auto V = model.config.vocab_size;
    const auto act = model.config.mlm_activation;
    auto batch_fn = [&](std::span<const std::size_t> idx, double lr, std::size_t epoch) {
        const std::size_t n = idx.size();
        while (buffers.size() < n) buffers.push_back(zeros_like_head<T>(head));
        losses.assign(n, T{0});
        std::vector<MaskedExample> batch(n);
        std::size_t targets = 0;
        for (std::size_t i = 0; i < n; ++i) {
            batch[i] = training_example(corpus[idx[i]], policy, V, epoch, idx[i]);
            targets += batch[i].targets.size();
        }
        if (targets == 0) return std::pair<double, std::size_t>{0.0, 0};
        const T scale = T(1) / static_cast<T>(targets);
        parallel_for(n, [&](std::size_t i) {
            buffers[i].fc1.fill(T{0});
            buffers[i].fc2.fill(T{0});
            if (batch[i].targets.empty()) return;
            const auto feats = attention_features(model, batch[i].input, layer);
            for (const auto& t : batch[i].targets)
                losses[i] += mlm_head_backward(head, feats.row(t.position), t.token, act, scale, buffers[i], {});
        });
        total.fc1.fill(T{0});
        total.fc2.fill(T{0});
        double loss_sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            add_into(total.fc1, buffers[i].fc1);
            add_into(total.fc2, buffers[i].fc2);
            loss_sum += static_cast<double>(losses[i]);
        }
        adamw_step(refs, {&total.fc1, &total.fc2}, state, cfg, lr);
        return std::pair<double, std::size_t>{loss_sum, targets};
    };
    auto curve = detail::run_epochs(corpus.size(), cfg, state, batch_fn, {}, on_epoch);
    if (curve_out) *curve_out = std::move(curve);
    return head;
}

// Pooled layer-`layer` attention output of each example.
template <class T>
std::vector<std::vector<T>> pooled_attention_features(const ModelParams<T>& model, std::size_t layer,
                                                      const std::vector<LabeledExample>& data) {
    std::vector<std::vector<T>> feats(data.size());
    parallel_for(data.size(), [&](std::size_t i) {
        feats[i] = pool_features(attention_features(model, data[i].input, layer), data[i].input,
                                 model.config.pooling);
    });
    return feats;
}

// Task probe on the frozen pooled layer-`layer` attention outputs.
template <class T>
TaskHead<T> train_task_probe(const ModelParams<T>& model, std::size_t layer, const std::vector<LabeledExample>& data,
                             const TrainConfig& cfg, std::uint64_t probe_seed, LossCurve* curve_out = nullptr,
                             const EpochCallback& on_epoch = {}) {
    if (layer >= model.config.layers) throw ConfigError("probe layer out of range");
    if (data.empty()) throw ConfigError("probe training set is empty");
    const auto feats = pooled_attention_features(model, layer, data);
    TaskHead<T> head = init_task_head<T>(model.config, probe_seed);
    TrainState<T> state;
    auto refs = head_refs<T>(head, "probe.");
    TaskHead<T> total = zeros_like_head<T>(head);
    auto batch_fn = [&](std::span<const std::size_t> idx, double lr, std::size_t) {
        total.weight.fill(T{0});
        total.bias.fill(T{0});
        const T scale = T(1) / static_cast<T>(idx.size());
        double loss_sum = 0.0;
        for (std::size_t i : idx)
            loss_sum += static_cast<double>(
                task_head_backward(head, std::span<const T>(feats[i]), data[i].label, scale, total, {}));
        adamw_step(refs, {&total.weight, &total.bias}, state, cfg, lr);
        return std::pair<double, std::size_t>{loss_sum, idx.size()};
    };
    auto curve = detail::run_epochs(data.size(), cfg, state, batch_fn, {}, on_epoch);
    if (curve_out) *curve_out = std::move(curve);
    return head;
}

// Accuracy of the model's own task head on pooled final hidden states.
template <class T>
double classification_accuracy(const ModelParams<T>& p, const std::vector<LabeledExample>& data) {
    if (data.empty()) return 0.0;
    std::vector<std::uint8_t> hit(data.size(), 0);
    const auto full = ApertureMask::full(p.config.width);
    parallel_for(data.size(), [&](std::size_t i) {
        const auto& ex = data[i];
        auto cache = encode(p, std::span<const TokenId>(ex.input.ids), std::max<std::size_t>(ex.input.active_length(), 1));
        const auto pooled = pool_features(cache.output, ex.input, p.config.pooling);
        const auto logits = task_logits(p.task_head, std::span<const T>(pooled), full);
        hit[i] = argmax_lowest(std::span<const T>(logits)) == static_cast<std::size_t>(ex.label);
    });
    return static_cast<double>(std::accumulate(hit.begin(), hit.end(), std::size_t{0})) /
           static_cast<double>(data.size());
}

}  // namespace nodal
