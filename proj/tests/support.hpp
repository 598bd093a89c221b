#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <nodal/nodal.hpp>

namespace nodal::testing {

// Small double-precision model with a large init so every path carries gradient.
inline ModelConfig gradcheck_config() {
    ModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.width = 8;
    c.head_width = 4;
    c.vocab_size = 24;
    c.seq_len = 8;
    c.num_classes = 3;
    c.ff_mult = 2;
    c.init_std = 0.4;
    c.init_seed = 11;
    return c;
}

inline TokenSequence random_sequence(const ModelConfig& c, std::size_t content, Rng& rng) {
    TokenSequence s;
    s.ids.assign(c.seq_len, Vocab::kPadId);
    s.content_mask.assign(c.seq_len, 0);
    s.ids[0] = Vocab::kClsId;
    for (std::size_t i = 1; i <= content; ++i) {
        s.ids[i] = static_cast<TokenId>(Vocab::kNumSpecials + rng.below(c.vocab_size - Vocab::kNumSpecials));
        s.content_mask[i] = 1;
    }
    s.ids[content + 1] = Vocab::kSepId;
    return s;
}

// Largest relative error |analytic - numeric| / max(|analytic|, |numeric|, floor)
// over up to `per_tensor` coordinates of every tensor, by central differences.
// The floor sits well above the roundoff of the difference quotient, which
// matters for gradients that vanish exactly (key biases cancel in softmax).
struct GradCheck {
    std::map<std::string, double> worst;
    std::size_t coordinates = 0;

    double max_error() const {
        double m = 0;
        for (const auto& [_, e] : worst) m = std::max(m, e);
        return m;
    }
};

template <class LossFn>
GradCheck gradient_check(ModelParams<double>& p, const ModelParams<double>& grad, LossFn&& loss,
                         std::size_t per_tensor, std::uint64_t seed, double h = 1e-5, double floor = 1e-6) {
    GradCheck out;
    std::vector<std::pair<std::string, Matrix<double>*>> values;
    std::vector<const Matrix<double>*> grads;
    visit_tensors(p, [&](const std::string& n, Matrix<double>& m, bool) { values.push_back({n, &m}); });
    visit_tensors(grad, [&](const std::string&, const Matrix<double>& m, bool) { grads.push_back(&m); });
    Rng rng(seed);
    for (std::size_t t = 0; t < values.size(); ++t) {
        auto& w = values[t].second->data;
        std::vector<std::size_t> coords(w.size());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        rng.shuffle(std::span<std::size_t>(coords));
        coords.resize(std::min(per_tensor, coords.size()));
        double worst = 0;
        for (std::size_t k : coords) {
            const double saved = w[k];
            w[k] = saved + h;
            const double up = loss();
            w[k] = saved - h;
            const double down = loss();
            w[k] = saved;
            const double numeric = (up - down) / (2 * h);
            const double analytic = grads[t]->data[k];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
            worst = std::max(worst, std::abs(analytic - numeric) / denom);
            ++out.coordinates;
        }
        out.worst[values[t].first] = worst;
    }
    return out;
}

// Combined MLM + classification objective so every tensor, both heads
// included, receives gradient.
struct GradcheckProblem {
    ModelParams<double> params;
    std::vector<MaskedExample> mlm;
    std::vector<LabeledExample> labeled;

    double loss() const {
        return mlm_loss(params, std::span<const MaskedExample>(mlm)) +
               classification_loss(params, std::span<const LabeledExample>(labeled));
    }

    ModelParams<double> grad() const {
        auto g = mlm_loss_and_grad(params, std::span<const MaskedExample>(mlm)).grad;
        add_into_params(g, classification_loss_and_grad(params, std::span<const LabeledExample>(labeled)).grad);
        return g;
    }

    static void add_into_params(ModelParams<double>& a, const ModelParams<double>& b) {
        std::vector<Matrix<double>*> dst;
        visit_tensors(a, [&](const std::string&, Matrix<double>& m, bool) { dst.push_back(&m); });
        std::size_t i = 0;
        visit_tensors(b, [&](const std::string&, const Matrix<double>& m, bool) { add_into(*dst[i++], m); });
    }
};

inline GradcheckProblem make_gradcheck_problem(const ModelConfig& c, std::uint64_t seed) {
    GradcheckProblem prob{init_params<double>(c), {}, {}};
    Rng rng(seed);
    MaskPolicy policy;
    policy.select_rate = 0.4;
    for (std::size_t i = 0; i < 3; ++i) {
        const auto seq = random_sequence(c, 3 + i, rng);
        Rng mrng(derive_seed(seed, i));
        auto ex = apply_training_mask(seq, policy, c.vocab_size, mrng);
        if (ex.targets.empty()) ex = enumerate_eval_masks(seq)[i % seq.content_count()];
        prob.mlm.push_back(ex);
        prob.labeled.push_back({random_sequence(c, 2 + i, rng), static_cast<int>(i % c.num_classes)});
    }
    return prob;
}

inline ConfusionMatrix from_dense(const std::vector<std::vector<std::uint64_t>>& d) {
    ConfusionMatrix cm(d.size());
    for (std::size_t i = 0; i < d.size(); ++i)
        for (std::size_t j = 0; j < d.size(); ++j)
            if (d[i][j]) cm.add(i, j, d[i][j]);
    return cm;
}

// Straight from the definitions, on the dense array.
inline MetricsReport dense_oracle(const std::vector<std::vector<std::uint64_t>>& d) {
    const std::size_t n = d.size();
    MetricsReport r;
    double apt = 0, diag = 0, cols = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t row = 0, col = 0;
        for (std::size_t j = 0; j < n; ++j) {
            row += d[i][j];
            col += d[j][i];
        }
        if (col > 0) r.nonzero_column_count += 1;
        if (row == 0 || d[i][i] == 0) continue;
        r.positive_diagonal_count += 1;
        apt += static_cast<double>(d[i][i]) / static_cast<double>(row);
        diag += static_cast<double>(d[i][i]);
        cols += static_cast<double>(col);
    }
    if (r.positive_diagonal_count > 0) {
        r.mean_diagonal_apt = apt / r.positive_diagonal_count;
        r.diagonal_confidence = diag / cols;
        r.random_guess_baseline = 1.0 / r.positive_diagonal_count;
    }
    return r;
}

// Gaussian instance, sometimes with planted degeneracies: duplicated labels,
// parallel weights with shifted bias, dominated constants.
inline HullInstance random_hull_instance(Rng& rng, std::size_t C, std::size_t n) {
    HullInstance inst;
    inst.C = C;
    inst.n = n;
    inst.W = Matrix<double>(C, n);
    for (auto& v : inst.W.data) v = rng.normal();
    for (std::size_t j = 0; j < C; ++j) inst.b.push_back(rng.normal());
    if (C >= 3 && rng.uniform() < 0.3) {
        const std::size_t a = rng.below(C), z = rng.below(C);
        if (a != z) {
            for (std::size_t i = 0; i < n; ++i) inst.W(z, i) = inst.W(a, i);
            inst.b[z] = rng.uniform() < 0.5 ? inst.b[a] : inst.b[a] - std::abs(rng.normal());
        }
    }
    return inst;
}

inline HullInstance restrict_columns(const HullInstance& inst, const std::vector<std::size_t>& cols) {
    HullInstance out;
    out.C = inst.C;
    out.n = cols.size();
    out.W = Matrix<double>(inst.C, cols.size());
    for (std::size_t j = 0; j < inst.C; ++j)
        for (std::size_t i = 0; i < cols.size(); ++i) out.W(j, i) = inst.W(j, cols[i]);
    out.b = inst.b;
    return out;
}

}  // namespace nodal::testing
