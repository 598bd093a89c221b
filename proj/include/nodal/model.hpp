#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "aperture_mask.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "errors.hpp"
#include "matrix.hpp"
#include "rng.hpp"

namespace nodal {

template <class T>
struct LayerParams {
    Matrix<T> query_w, query_b, key_w, key_b, value_w, value_b;
    Matrix<T> proj_w, proj_b, ln1_g, ln1_b;
    Matrix<T> ff1_w, ff1_b, ff2_w, ff2_b, ln2_g, ln2_b;
};

// Two bias-free FC layers with a nonlinearity in between.
template <class T>
struct MlmHead {
    Matrix<T> fc1;  // D x D
    Matrix<T> fc2;  // D x V
};

// One FC layer with biases.
template <class T>
struct TaskHead {
    Matrix<T> weight;  // D x C
    Matrix<T> bias;    // 1 x C
};

template <class T>
struct ModelParams {
    ModelConfig config;
    Matrix<T> token_embedding;     // V x D
    Matrix<T> position_embedding;  // S x D
    std::vector<LayerParams<T>> layers;
    MlmHead<T> mlm_head;
    TaskHead<T> task_head;
};

// Calls f(name, tensor, decays) for every tensor in a fixed order. `decays`
// marks tensors that take decoupled weight decay (not biases or layer-norm).
template <class Head, class F>
    requires std::is_same_v<std::remove_const_t<Head>, MlmHead<float>> ||
             std::is_same_v<std::remove_const_t<Head>, MlmHead<double>>
void visit_tensors(Head& head, const std::string& prefix, F&& f) {
    f(prefix + "fc1.weight", head.fc1, true);
    f(prefix + "fc2.weight", head.fc2, true);
}

template <class Head, class F>
    requires std::is_same_v<std::remove_const_t<Head>, TaskHead<float>> ||
             std::is_same_v<std::remove_const_t<Head>, TaskHead<double>>
void visit_tensors(Head& head, const std::string& prefix, F&& f) {
    f(prefix + "weight", head.weight, true);
    f(prefix + "bias", head.bias, false);
}

template <class Params, class F>
    requires std::is_same_v<std::remove_const_t<Params>, ModelParams<float>> ||
             std::is_same_v<std::remove_const_t<Params>, ModelParams<double>>
void visit_tensors(Params& p, F&& f) {
    f(std::string("embeddings.token"), p.token_embedding, true);
    f(std::string("embeddings.position"), p.position_embedding, true);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& L = p.layers[l];
        const std::string pre = "layer" + std::to_string(l) + ".";
        f(pre + "attn.query.weight", L.query_w, true);
        f(pre + "attn.query.bias", L.query_b, false);
        f(pre + "attn.key.weight", L.key_w, true);
        f(pre + "attn.key.bias", L.key_b, false);
        f(pre + "attn.value.weight", L.value_w, true);
        f(pre + "attn.value.bias", L.value_b, false);
        f(pre + "proj.weight", L.proj_w, true);
        f(pre + "proj.bias", L.proj_b, false);
        f(pre + "ln1.gain", L.ln1_g, false);
        f(pre + "ln1.offset", L.ln1_b, false);
        f(pre + "ff1.weight", L.ff1_w, true);
        f(pre + "ff1.bias", L.ff1_b, false);
        f(pre + "ff2.weight", L.ff2_w, true);
        f(pre + "ff2.bias", L.ff2_b, false);
        f(pre + "ln2.gain", L.ln2_g, false);
        f(pre + "ln2.offset", L.ln2_b, false);
    }
    visit_tensors(p.mlm_head, "mlm_head.", f);
    visit_tensors(p.task_head, "task_head.", f);
}

template <class T>
ModelParams<T> zeros_like(const ModelParams<T>& p) {
    ModelParams<T> z = p;
    visit_tensors(z, [](const std::string&, Matrix<T>& m, bool) { m.fill(T{0}); });
    return z;
}

template <class T, class Head>
Head zeros_like_head(const Head& h) {
    Head z = h;
    visit_tensors(z, "", [](const std::string&, Matrix<T>& m, bool) { m.fill(T{0}); });
    return z;
}

template <class To, class From>
ModelParams<To> cast_params(const ModelParams<From>& p) {
    ModelParams<To> out;
    out.config = p.config;
    out.token_embedding = p.token_embedding.template cast<To>();
    out.position_embedding = p.position_embedding.template cast<To>();
    out.layers.resize(p.layers.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& a = p.layers[l];
        auto& b = out.layers[l];
        b.query_w = a.query_w.template cast<To>();
        b.query_b = a.query_b.template cast<To>();
        b.key_w = a.key_w.template cast<To>();
        b.key_b = a.key_b.template cast<To>();
        b.value_w = a.value_w.template cast<To>();
        b.value_b = a.value_b.template cast<To>();
        b.proj_w = a.proj_w.template cast<To>();
        b.proj_b = a.proj_b.template cast<To>();
        b.ln1_g = a.ln1_g.template cast<To>();
        b.ln1_b = a.ln1_b.template cast<To>();
        b.ff1_w = a.ff1_w.template cast<To>();
        b.ff1_b = a.ff1_b.template cast<To>();
        b.ff2_w = a.ff2_w.template cast<To>();
        b.ff2_b = a.ff2_b.template cast<To>();
        b.ln2_g = a.ln2_g.template cast<To>();
        b.ln2_b = a.ln2_b.template cast<To>();
    }
    out.mlm_head = {p.mlm_head.fc1.template cast<To>(), p.mlm_head.fc2.template cast<To>()};
    out.task_head = {p.task_head.weight.template cast<To>(), p.task_head.bias.template cast<To>()};
    return out;
}

namespace detail {

template <class T>
Matrix<T> random_matrix(std::size_t r, std::size_t c, double stddev, Rng& rng) {
    Matrix<T> m(r, c);
    for (auto& v : m.data) v = static_cast<T>(rng.truncated_normal(stddev));
    return m;
}

// D x D weight whose output-column blocks are identical across heads.
template <class T>
Matrix<T> head_column_blocks(const ModelConfig& c, double stddev, Rng& rng) {
    Matrix<T> block = random_matrix<T>(c.width, c.head_width, stddev, rng);
    Matrix<T> m(c.width, c.width);
    for (std::size_t r = 0; r < c.width; ++r)
        for (std::size_t h = 0; h < c.heads; ++h)
            for (std::size_t k = 0; k < c.head_width; ++k) m(r, h * c.head_width + k) = block(r, k);
    return m;
}

// (D x cols) weight whose input-row blocks are identical across heads.
template <class T>
Matrix<T> head_row_blocks(const ModelConfig& c, std::size_t cols, double stddev, Rng& rng) {
    Matrix<T> block = random_matrix<T>(c.head_width, cols, stddev, rng);
    Matrix<T> m(c.width, cols);
    for (std::size_t h = 0; h < c.heads; ++h)
        for (std::size_t k = 0; k < c.head_width; ++k)
            for (std::size_t j = 0; j < cols; ++j) m(h * c.head_width + k, j) = block(k, j);
    return m;
}

}  // namespace detail

// Probe heads read attention outputs, so under symmetric_heads their input
// rows are copied across head blocks as well.
template <class T>
MlmHead<T> init_mlm_head(const ModelConfig& c, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x3d1));
    MlmHead<T> h;
    h.fc1 = c.init_mode == InitMode::symmetric_heads ? detail::head_row_blocks<T>(c, c.width, c.init_std, rng)
                                                     : detail::random_matrix<T>(c.width, c.width, c.init_std, rng);
    h.fc2 = detail::random_matrix<T>(c.width, c.vocab_size, c.init_std, rng);
    return h;
}

template <class T>
TaskHead<T> init_task_head(const ModelConfig& c, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x7a5c));
    TaskHead<T> h;
    h.weight = c.init_mode == InitMode::symmetric_heads
                   ? detail::head_row_blocks<T>(c, c.num_classes, c.init_std, rng)
                   : detail::random_matrix<T>(c.width, c.num_classes, c.init_std, rng);
    h.bias = Matrix<T>(1, c.num_classes);
    return h;
}

template <class T>
ModelParams<T> init_params(const ModelConfig& c) {
    c.validate();
    Rng rng(derive_seed(c.init_seed, 0xe1c));
    const double sd = c.init_std;
    const bool sym = c.init_mode == InitMode::symmetric_heads;
    ModelParams<T> p;
    p.config = c;
    p.token_embedding = detail::random_matrix<T>(c.vocab_size, c.width, sd, rng);
    p.position_embedding = detail::random_matrix<T>(c.seq_len, c.width, sd, rng);
    const std::size_t F = c.ff_width();
    for (std::size_t l = 0; l < c.layers; ++l) {
        LayerParams<T> L;
        auto qkv = [&] {
            return sym ? detail::head_column_blocks<T>(c, sd, rng) : detail::random_matrix<T>(c.width, c.width, sd, rng);
        };
        L.query_w = qkv();
        L.query_b = Matrix<T>(1, c.width);
        L.key_w = qkv();
        L.key_b = Matrix<T>(1, c.width);
        L.value_w = qkv();
        L.value_b = Matrix<T>(1, c.width);
        L.proj_w = sym ? detail::head_row_blocks<T>(c, c.width, sd, rng)
                       : detail::random_matrix<T>(c.width, c.width, sd, rng);
        L.proj_b = Matrix<T>(1, c.width);
        L.ln1_g = Matrix<T>(1, c.width, T{1});
        L.ln1_b = Matrix<T>(1, c.width);
        L.ff1_w = detail::random_matrix<T>(c.width, F, sd, rng);
        L.ff1_b = Matrix<T>(1, F);
        L.ff2_w = detail::random_matrix<T>(F, c.width, sd, rng);
        L.ff2_b = Matrix<T>(1, c.width);
        L.ln2_g = Matrix<T>(1, c.width, T{1});
        L.ln2_b = Matrix<T>(1, c.width);
        p.layers.push_back(std::move(L));
    }
    p.mlm_head.fc1 = detail::random_matrix<T>(c.width, c.width, sd, rng);
    p.mlm_head.fc2 = detail::random_matrix<T>(c.width, c.vocab_size, sd, rng);
    p.task_head.weight = detail::random_matrix<T>(c.width, c.num_classes, sd, rng);
    p.task_head.bias = Matrix<T>(1, c.num_classes);
    return p;
}

// ---------------------------------------------------------------------------
// activations

template <class T>
T activate(Activation a, T x) {
    switch (a) {
        case Activation::gelu:
            return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
        case Activation::tanh:
            return std::tanh(x);
        case Activation::relu:
            return x > T(0) ? x : T(0);
    }
    return x;
}

template <class T>
T activate_grad(Activation a, T x) {
    switch (a) {
        case Activation::gelu: {
            const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
            const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
            return cdf + x * pdf;
        }
        case Activation::tanh: {
            const T t = std::tanh(x);
            return T(1) - t * t;
        }
        case Activation::relu:
            return x > T(0) ? T(1) : T(0);
    }
    return T(1);
}

// ---------------------------------------------------------------------------
// encoder forward with cached intermediates

template <class T>
struct LayerCache {
    Matrix<T> input;  // rows x D
    Matrix<T> q, k, v;
    std::vector<Matrix<T>> probs;  // per head, rows x rows, zero on masked keys
    Matrix<T> attn;                // concatenated head outputs, pre-projection
    Matrix<T> drop1;               // inverted-dropout scale, empty when off
    Matrix<T> xhat1, h1;
    std::vector<T> rstd1;
    Matrix<T> u, g;  // feed-forward pre/post activation
    Matrix<T> drop2;
    Matrix<T> xhat2;
    std::vector<T> rstd2;
};

template <class T>
struct EncoderCache {
    std::vector<TokenId> ids;
    std::vector<std::uint8_t> key_valid;
    std::size_t rows = 0;
    std::vector<LayerCache<T>> layers;
    Matrix<T> output;  // rows x D
};

namespace detail {

template <class T>
void layer_norm_forward(const Matrix<T>& x, const Matrix<T>& g, const Matrix<T>& b, T eps, Matrix<T>& xhat,
                        std::vector<T>& rstd, Matrix<T>& y) {
    xhat = Matrix<T>(x.rows, x.cols);
    y = Matrix<T>(x.rows, x.cols);
    rstd.assign(x.rows, T{0});
    const T n = static_cast<T>(x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        auto xr = x.row(i);
        T mean{0};
        for (T v : xr) mean += v;
        mean /= n;
        T var{0};
        for (T v : xr) var += (v - mean) * (v - mean);
        var /= n;
        const T r = T(1) / std::sqrt(var + eps);
        rstd[i] = r;
        for (std::size_t j = 0; j < x.cols; ++j) {
            const T xh = (xr[j] - mean) * r;
            xhat(i, j) = xh;
            y(i, j) = g.data[j] * xh + b.data[j];
        }
    }
}

// dy -> dx, accumulating gain/offset gradients.
template <class T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& xhat, const std::vector<T>& rstd,
                              const Matrix<T>& g, Matrix<T>& dg, Matrix<T>& db) {
    Matrix<T> dx(dy.rows, dy.cols);
    const T n = static_cast<T>(dy.cols);
    for (std::size_t i = 0; i < dy.rows; ++i) {
        T sum_d{0}, sum_dx{0};
        for (std::size_t j = 0; j < dy.cols; ++j) {
            const T d = dy(i, j);
            dg.data[j] += d * xhat(i, j);
            db.data[j] += d;
            const T dxh = d * g.data[j];
            sum_d += dxh;
            sum_dx += dxh * xhat(i, j);
        }
        for (std::size_t j = 0; j < dy.cols; ++j) {
            const T dxh = dy(i, j) * g.data[j];
            dx(i, j) = rstd[i] * (dxh - sum_d / n - xhat(i, j) * sum_dx / n);
        }
    }
    return dx;
}

template <class T>
Matrix<T> dropout_mask(std::size_t r, std::size_t c, double rate, Rng* rng) {
    if (rate <= 0.0 || rng == nullptr) return {};
    Matrix<T> m(r, c);
    const T keep = static_cast<T>(1.0 / (1.0 - rate));
    for (auto& v : m.data) v = rng->uniform() >= rate ? keep : T{0};
    return m;
}

template <class T>
void apply_mask(Matrix<T>& x, const Matrix<T>& mask) {
    if (mask.data.empty()) return;
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] *= mask.data[i];
}

template <class T>
void check_finite(const Matrix<T>& m, std::size_t layer, const char* what) {
    if (!m.all_finite())
        throw NumericalError(std::string("non-finite ") + what + " in layer " + std::to_string(layer),
                             static_cast<long>(layer));
}

template <class T>
void attention_forward(const ModelConfig& c, const LayerParams<T>& L, const std::vector<std::uint8_t>& key_valid,
                       LayerCache<T>& lc) {
    const std::size_t n = lc.input.rows;
    matmul(lc.input, L.query_w, lc.q);
    add_row_bias(lc.q, L.query_b);
    matmul(lc.input, L.key_w, lc.k);
    add_row_bias(lc.k, L.key_b);
    matmul(lc.input, L.value_w, lc.v);
    add_row_bias(lc.v, L.value_b);
    const T scale = T(1) / std::sqrt(static_cast<T>(c.head_width));
    lc.attn = Matrix<T>(n, c.width);
    lc.probs.assign(c.heads, Matrix<T>(n, n));
    std::vector<T> scores(n);
    for (std::size_t h = 0; h < c.heads; ++h) {
        const std::size_t off = h * c.head_width;
        Matrix<T>& P = lc.probs[h];
        for (std::size_t i = 0; i < n; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                if (!key_valid[j]) continue;
                T s{0};
                for (std::size_t d = 0; d < c.head_width; ++d) s += lc.q(i, off + d) * lc.k(j, off + d);
                scores[j] = s * scale;
                if (scores[j] > mx) mx = scores[j];
            }
            T total{0};
            for (std::size_t j = 0; j < n; ++j) {
                if (!key_valid[j]) continue;
                const T e = std::exp(scores[j] - mx);
                P(i, j) = e;
                total += e;
            }
            if (total > T{0})
                for (std::size_t j = 0; j < n; ++j) P(i, j) /= total;
            for (std::size_t j = 0; j < n; ++j) {
                const T p = P(i, j);
                if (p == T{0}) continue;
                for (std::size_t d = 0; d < c.head_width; ++d) lc.attn(i, off + d) += p * lc.v(j, off + d);
            }
        }
    }
}

template <class T>
void rest_forward(const ModelConfig& c, const LayerParams<T>& L, LayerCache<T>& lc, Rng* dropout_rng,
                  Matrix<T>& out) {
    const T eps = static_cast<T>(c.layer_norm_eps);
    Matrix<T> proj;
    matmul(lc.attn, L.proj_w, proj);
    add_row_bias(proj, L.proj_b);
    lc.drop1 = dropout_mask<T>(proj.rows, proj.cols, c.dropout_rate, dropout_rng);
    apply_mask(proj, lc.drop1);
    add_into(proj, lc.input);
    layer_norm_forward(proj, L.ln1_g, L.ln1_b, eps, lc.xhat1, lc.rstd1, lc.h1);
    matmul(lc.h1, L.ff1_w, lc.u);
    add_row_bias(lc.u, L.ff1_b);
    lc.g = lc.u;
    for (auto& x : lc.g.data) x = activate(Activation::gelu, x);
    Matrix<T> f;
    matmul(lc.g, L.ff2_w, f);
    add_row_bias(f, L.ff2_b);
    lc.drop2 = dropout_mask<T>(f.rows, f.cols, c.dropout_rate, dropout_rng);
    apply_mask(f, lc.drop2);
    add_into(f, lc.h1);
    layer_norm_forward(f, L.ln2_g, L.ln2_b, eps, lc.xhat2, lc.rstd2, out);
}

}  // namespace detail

// Runs the encoder over the first `rows` positions. Keys at [PAD] positions are
// masked out of attention, so outputs at positions < rows do not depend on
// positions >= rows when those are padding. When `stop_at_layer` is set, layer
// `stop_at_layer` is evaluated only up to its attention output.
template <class T>
EncoderCache<T> encode(const ModelParams<T>& p, std::span<const TokenId> ids, std::size_t rows,
                       std::size_t stop_at_layer = std::numeric_limits<std::size_t>::max(),
                       Rng* dropout_rng = nullptr) {
    const ModelConfig& c = p.config;
    if (ids.size() != c.seq_len)
        throw ConfigError("sequence length " + std::to_string(ids.size()) + " != model seq_len " +
                          std::to_string(c.seq_len));
    EncoderCache<T> cache;
    cache.ids.assign(ids.begin(), ids.end());
    cache.rows = rows;
    cache.key_valid.assign(rows, 0);
    for (std::size_t j = 0; j < rows; ++j) cache.key_valid[j] = ids[j] != Vocab::kPadId;
    Matrix<T> x(rows, c.width);
    for (std::size_t i = 0; i < rows; ++i) {
        const auto id = static_cast<std::size_t>(ids[i]);
        if (id >= c.vocab_size) throw ConfigError("token id " + std::to_string(id) + " outside the vocabulary");
        for (std::size_t d = 0; d < c.width; ++d)
            x(i, d) = p.token_embedding(id, d) + p.position_embedding(i, d);
    }
    const std::size_t last = std::min(stop_at_layer, c.layers - 1);
    cache.layers.resize(last + 1);
    for (std::size_t l = 0; l <= last; ++l) {
        LayerCache<T>& lc = cache.layers[l];
        lc.input = std::move(x);
        detail::attention_forward(c, p.layers[l], cache.key_valid, lc);
        detail::check_finite(lc.attn, l, "attention output");
        if (l == stop_at_layer) return cache;
        detail::rest_forward(c, p.layers[l], lc, dropout_rng, x);
        detail::check_finite(x, l, "layer output");
    }
    cache.output = std::move(x);
    return cache;
}

template <class T>
struct ForwardResult {
    std::vector<Matrix<T>> attention;  // per layer, S x D; head h owns columns [h*d_h, (h+1)*d_h)
    Matrix<T> hidden;                  // S x D
};

// Full-length forward over all S positions.
template <class T>
ForwardResult<T> forward(const ModelParams<T>& p, const TokenSequence& seq) {
    auto cache = encode(p, std::span<const TokenId>(seq.ids), seq.ids.size());
    ForwardResult<T> r;
    for (auto& lc : cache.layers) r.attention.push_back(std::move(lc.attn));
    r.hidden = std::move(cache.output);
    return r;
}

// Layer-`layer` attention output over the active (non-trailing-pad) prefix.
template <class T>
Matrix<T> attention_features(const ModelParams<T>& p, const TokenSequence& seq, std::size_t layer) {
    auto cache = encode(p, std::span<const TokenId>(seq.ids), seq.active_length(), layer);
    return std::move(cache.layers[layer].attn);
}

// ---------------------------------------------------------------------------
// probe heads with silencing

// Sum over kept coordinates in ascending order: zeroed coordinates would only
// add exact zeros, so the full aperture reproduces the unsilenced head.
template <class T>
std::vector<T> mlm_logits(const MlmHead<T>& head, std::type_identity_t<std::span<const T>> feature, const ApertureMask& aperture,
                          Activation act, std::vector<T>* hidden_pre = nullptr) {
    const std::size_t D = head.fc1.rows, Dh = head.fc1.cols, V = head.fc2.cols;
    if (aperture.width() != D) throw ApertureError("aperture width does not match the probe input width");
    std::vector<T> z(Dh, T{0});
    for (std::size_t r : aperture.kept()) {
        const T x = feature[r];
        if (x == T{0}) continue;
        const T* w = head.fc1.data.data() + r * Dh;
        for (std::size_t j = 0; j < Dh; ++j) z[j] += x * w[j];
    }
    if (hidden_pre) *hidden_pre = z;
    std::vector<T> logits(V, T{0});
    for (std::size_t j = 0; j < Dh; ++j) {
        const T a = activate(act, z[j]);
        if (a == T{0}) continue;
        const T* w = head.fc2.data.data() + j * V;
        for (std::size_t k = 0; k < V; ++k) logits[k] += a * w[k];
    }
    return logits;
}

template <class T>
Matrix<T> mlm_logits(const MlmHead<T>& head, const Matrix<T>& features, const ApertureMask& aperture,
                     Activation act) {
    Matrix<T> out(features.rows, head.fc2.cols);
    for (std::size_t i = 0; i < features.rows; ++i) {
        auto l = mlm_logits(head, features.row(i), aperture, act);
        std::copy(l.begin(), l.end(), out.row(i).begin());
    }
    return out;
}

// Biases are added after the silenced FC layer, so an empty aperture yields the bias vector.
template <class T>
std::vector<T> task_logits(const TaskHead<T>& head, std::type_identity_t<std::span<const T>> pooled, const ApertureMask& aperture) {
    const std::size_t D = head.weight.rows, C = head.weight.cols;
    if (aperture.width() != D) throw ApertureError("aperture width does not match the probe input width");
    std::vector<T> z(C, T{0});
    for (std::size_t r : aperture.kept()) {
        const T x = pooled[r];
        if (x == T{0}) continue;
        const T* w = head.weight.data.data() + r * C;
        for (std::size_t j = 0; j < C; ++j) z[j] += x * w[j];
    }
    for (std::size_t j = 0; j < C; ++j) z[j] += head.bias.data[j];
    return z;
}

// Pooled classification feature: the [CLS] row, or the mean of content rows.
template <class T>
std::vector<T> pool_features(const Matrix<T>& features, const TokenSequence& seq, Pooling pooling) {
    std::vector<T> out(features.cols, T{0});
    if (pooling == Pooling::cls) {
        auto r = features.row(0);
        std::copy(r.begin(), r.end(), out.begin());
        return out;
    }
    std::size_t count = 0;
    for (std::size_t i = 0; i < features.rows; ++i) {
        if (!seq.content_mask[i]) continue;
        ++count;
        for (std::size_t d = 0; d < features.cols; ++d) out[d] += features(i, d);
    }
    if (count)
        for (auto& v : out) v /= static_cast<T>(count);
    return out;
}

template <class T>
std::size_t argmax_lowest(std::span<const T> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

// Softmax cross-entropy; writes (softmax - onehot) * scale into dlogits.
template <class T>
T cross_entropy(std::span<const T> logits, std::size_t target, T scale, std::vector<T>& dlogits) {
    T mx = logits[0];
    for (T v : logits) mx = std::max(mx, v);
    T total{0};
    dlogits.resize(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) {
        dlogits[k] = std::exp(logits[k] - mx);
        total += dlogits[k];
    }
    for (std::size_t k = 0; k < logits.size(); ++k) dlogits[k] = dlogits[k] / total * scale;
    dlogits[target] -= scale;
    return std::log(total) + mx - logits[target];
}

// Loss and gradient of one MLM head application at one feature row. Returns the
// CE loss; accumulates head gradients and, when dfeature is given, the feature gradient.
template <class T>
T mlm_head_backward(const MlmHead<T>& head, std::type_identity_t<std::span<const T>> feature, TokenId target, Activation act, T scale,
                    MlmHead<T>& grad, std::span<T> dfeature) {
    const std::size_t D = head.fc1.rows, Dh = head.fc1.cols, V = head.fc2.cols;
    std::vector<T> z;
    const auto logits = mlm_logits(head, feature, ApertureMask::full(D), act, &z);
    std::vector<T> dlogits;
    const T loss = cross_entropy(std::span<const T>(logits), static_cast<std::size_t>(target), scale, dlogits);
    std::vector<T> dz(Dh, T{0});
    for (std::size_t j = 0; j < Dh; ++j) {
        const T a = activate(act, z[j]);
        const T* w = head.fc2.data.data() + j * V;
        T* gw = grad.fc2.data.data() + j * V;
        T da{0};
        for (std::size_t k = 0; k < V; ++k) {
            gw[k] += a * dlogits[k];
            da += w[k] * dlogits[k];
        }
        dz[j] = da * activate_grad(act, z[j]);
    }
    for (std::size_t r = 0; r < D; ++r) {
        const T x = feature[r];
        const T* w = head.fc1.data.data() + r * Dh;
        T* gw = grad.fc1.data.data() + r * Dh;
        T dx{0};
        for (std::size_t j = 0; j < Dh; ++j) {
            gw[j] += x * dz[j];
            dx += w[j] * dz[j];
        }
        if (!dfeature.empty()) dfeature[r] += dx;
    }
    return loss;
}

template <class T>
T task_head_backward(const TaskHead<T>& head, std::type_identity_t<std::span<const T>> pooled, int label, T scale, TaskHead<T>& grad,
                     std::span<T> dpooled) {
    const std::size_t D = head.weight.rows, C = head.weight.cols;
    const auto logits = task_logits(head, pooled, ApertureMask::full(D));
    std::vector<T> dlogits;
    const T loss = cross_entropy(std::span<const T>(logits), static_cast<std::size_t>(label), scale, dlogits);
    for (std::size_t j = 0; j < C; ++j) grad.bias.data[j] += dlogits[j];
    for (std::size_t r = 0; r < D; ++r) {
        const T* w = head.weight.data.data() + r * C;
        T* gw = grad.weight.data.data() + r * C;
        T dx{0};
        for (std::size_t j = 0; j < C; ++j) {
            gw[j] += pooled[r] * dlogits[j];
            dx += w[j] * dlogits[j];
        }
        if (!dpooled.empty()) dpooled[r] += dx;
    }
    return loss;
}

// ---------------------------------------------------------------------------
// encoder backward

template <class T>
void encoder_backward(const ModelParams<T>& p, const EncoderCache<T>& cache, Matrix<T> dout, ModelParams<T>& g) {
    const ModelConfig& c = p.config;
    const std::size_t n = cache.rows;
    const T scale = T(1) / std::sqrt(static_cast<T>(c.head_width));
    for (std::size_t li = cache.layers.size(); li-- > 0;) {
        const LayerParams<T>& L = p.layers[li];
        LayerParams<T>& G = g.layers[li];
        const LayerCache<T>& lc = cache.layers[li];

        Matrix<T> dsum2 = detail::layer_norm_backward(dout, lc.xhat2, lc.rstd2, L.ln2_g, G.ln2_g, G.ln2_b);
        Matrix<T> dh1 = dsum2;
        Matrix<T> df = dsum2;
        detail::apply_mask(df, lc.drop2);
        matmul_tn(lc.g, df, G.ff2_w, true);
        add_column_sums(df, G.ff2_b);
        Matrix<T> du;
        matmul_nt(df, L.ff2_w, du);
        for (std::size_t i = 0; i < du.data.size(); ++i) du.data[i] *= activate_grad(Activation::gelu, lc.u.data[i]);
        matmul_tn(lc.h1, du, G.ff1_w, true);
        add_column_sums(du, G.ff1_b);
        matmul_nt(du, L.ff1_w, dh1, true);

        Matrix<T> dsum1 = detail::layer_norm_backward(dh1, lc.xhat1, lc.rstd1, L.ln1_g, G.ln1_g, G.ln1_b);
        Matrix<T> dx = dsum1;
        Matrix<T> dproj = dsum1;
        detail::apply_mask(dproj, lc.drop1);
        matmul_tn(lc.attn, dproj, G.proj_w, true);
        add_column_sums(dproj, G.proj_b);
        Matrix<T> dattn;
        matmul_nt(dproj, L.proj_w, dattn);

        Matrix<T> dq(n, c.width), dk(n, c.width), dv(n, c.width);
        std::vector<T> dP(n);
        for (std::size_t h = 0; h < c.heads; ++h) {
            const std::size_t off = h * c.head_width;
            const Matrix<T>& P = lc.probs[h];
            for (std::size_t i = 0; i < n; ++i) {
                T dot{0};
                for (std::size_t j = 0; j < n; ++j) {
                    const T pij = P(i, j);
                    if (pij == T{0}) {
                        dP[j] = T{0};
                        continue;
                    }
                    T s{0};
                    for (std::size_t d = 0; d < c.head_width; ++d) {
                        s += dattn(i, off + d) * lc.v(j, off + d);
                        dv(j, off + d) += pij * dattn(i, off + d);
                    }
                    dP[j] = s;
                    dot += pij * s;
                }
                for (std::size_t j = 0; j < n; ++j) {
                    const T pij = P(i, j);
                    if (pij == T{0}) continue;
                    const T ds = pij * (dP[j] - dot) * scale;
                    for (std::size_t d = 0; d < c.head_width; ++d) {
                        dq(i, off + d) += ds * lc.k(j, off + d);
                        dk(j, off + d) += ds * lc.q(i, off + d);
                    }
                }
            }
        }
        matmul_tn(lc.input, dq, G.query_w, true);
        add_column_sums(dq, G.query_b);
        matmul_tn(lc.input, dk, G.key_w, true);
        add_column_sums(dk, G.key_b);
        matmul_tn(lc.input, dv, G.value_w, true);
        add_column_sums(dv, G.value_b);
        matmul_nt(dq, L.query_w, dx, true);
        matmul_nt(dk, L.key_w, dx, true);
        matmul_nt(dv, L.value_w, dx, true);
        dout = std::move(dx);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto id = static_cast<std::size_t>(cache.ids[i]);
        for (std::size_t d = 0; d < c.width; ++d) {
            g.token_embedding(id, d) += dout(i, d);
            g.position_embedding(i, d) += dout(i, d);
        }
    }
}

// MLM loss of one masked example, each target weighted by `scale`; accumulates into g.
template <class T>
T mlm_example_backward(const ModelParams<T>& p, const MaskedExample& ex, T scale, ModelParams<T>& g,
                       Rng* dropout_rng = nullptr) {
    if (ex.targets.empty()) return T{0};
    const auto& c = p.config;
    const std::size_t rows = std::max(ex.input.active_length(), ex.targets.back().position + 1);
    auto cache = encode(p, std::span<const TokenId>(ex.input.ids), rows, std::numeric_limits<std::size_t>::max(),
                        dropout_rng);
    Matrix<T> dout(rows, c.width);
    T loss{0};
    for (const auto& t : ex.targets)
        loss += mlm_head_backward(p.mlm_head, cache.output.row(t.position), t.token, c.mlm_activation, scale,
                                  g.mlm_head, dout.row(t.position));
    encoder_backward(p, cache, std::move(dout), g);
    return loss;
}

template <class T>
T classification_example_backward(const ModelParams<T>& p, const LabeledExample& ex, T scale, ModelParams<T>& g,
                                  Rng* dropout_rng = nullptr) {
    const auto& c = p.config;
    const std::size_t rows = std::max<std::size_t>(ex.input.active_length(), 1);
    auto cache = encode(p, std::span<const TokenId>(ex.input.ids), rows, std::numeric_limits<std::size_t>::max(),
                        dropout_rng);
    const auto pooled = pool_features(cache.output, ex.input, c.pooling);
    std::vector<T> dpooled(c.width, T{0});
    const T loss = task_head_backward(p.task_head, std::span<const T>(pooled), ex.label, scale, g.task_head,
                                      std::span<T>(dpooled));
    Matrix<T> dout(rows, c.width);
    if (c.pooling == Pooling::cls) {
        std::copy(dpooled.begin(), dpooled.end(), dout.row(0).begin());
    } else {
        const auto count = static_cast<T>(ex.input.content_count());
        for (std::size_t i = 0; i < rows; ++i)
            if (ex.input.content_mask[i])
                for (std::size_t d = 0; d < c.width; ++d) dout(i, d) = dpooled[d] / count;
    }
    encoder_backward(p, cache, std::move(dout), g);
    return loss;
}

enum class LossKind { mlm, classification };

template <class T>
struct LossAndGrad {
    T loss{0};
    std::size_t events = 0;  // targets (MLM) or examples (classification)
    ModelParams<T> grad;
};

template <class T>
void zero_frozen(ModelParams<T>& g, const std::set<std::string>& freeze) {
    if (freeze.empty()) return;
    visit_tensors(g, [&](const std::string& name, Matrix<T>& m, bool) {
        if (is_frozen(freeze, name)) m.fill(T{0});
    });
}

// Mean cross-entropy over all MLM targets of the batch and its exact gradient.
template <class T>
LossAndGrad<T> mlm_loss_and_grad(const ModelParams<T>& p, std::span<const MaskedExample> batch,
                                 const std::set<std::string>& freeze = {}) {
    LossAndGrad<T> r{T{0}, 0, zeros_like(p)};
    for (const auto& ex : batch) r.events += ex.targets.size();
    if (r.events == 0) return r;
    const T scale = T(1) / static_cast<T>(r.events);
    for (const auto& ex : batch) r.loss += mlm_example_backward(p, ex, scale, r.grad);
    r.loss /= static_cast<T>(r.events);
    zero_frozen(r.grad, freeze);
    return r;
}

template <class T>
LossAndGrad<T> classification_loss_and_grad(const ModelParams<T>& p, std::span<const LabeledExample> batch,
                                            const std::set<std::string>& freeze = {}) {
    LossAndGrad<T> r{T{0}, batch.size(), zeros_like(p)};
    if (batch.empty()) return r;
    const T scale = T(1) / static_cast<T>(batch.size());
    for (const auto& ex : batch) r.loss += classification_example_backward(p, ex, scale, r.grad);
    r.loss /= static_cast<T>(batch.size());
    zero_frozen(r.grad, freeze);
    return r;
}

// Loss only, no gradient bookkeeping.
template <class T>
T mlm_loss(const ModelParams<T>& p, std::span<const MaskedExample> batch) {
    std::size_t events = 0;
    T total{0};
    for (const auto& ex : batch) {
        if (ex.targets.empty()) continue;
        const std::size_t rows = std::max(ex.input.active_length(), ex.targets.back().position + 1);
        auto cache = encode(p, std::span<const TokenId>(ex.input.ids), rows);
        const auto full = ApertureMask::full(p.config.width);
        for (const auto& t : ex.targets) {
            auto logits = mlm_logits(p.mlm_head, cache.output.row(t.position), full, p.config.mlm_activation);
            std::vector<T> dummy;
            total += cross_entropy(std::span<const T>(logits), static_cast<std::size_t>(t.token), T{0}, dummy);
            ++events;
        }
    }
    return events ? total / static_cast<T>(events) : T{0};
}

template <class T>
T classification_loss(const ModelParams<T>& p, std::span<const LabeledExample> batch) {
    if (batch.empty()) return T{0};
    T total{0};
    const auto full = ApertureMask::full(p.config.width);
    for (const auto& ex : batch) {
        const std::size_t rows = std::max<std::size_t>(ex.input.active_length(), 1);
        auto cache = encode(p, std::span<const TokenId>(ex.input.ids), rows);
        const auto pooled = pool_features(cache.output, ex.input, p.config.pooling);
        auto logits = task_logits(p.task_head, std::span<const T>(pooled), full);
        std::vector<T> dummy;
        total += cross_entropy(std::span<const T>(logits), static_cast<std::size_t>(ex.label), T{0}, dummy);
    }
    return total / static_cast<T>(batch.size());
}

}  // namespace nodal
