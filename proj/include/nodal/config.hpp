#pragma once

#include <cstdint>
#include <set>
#include <string>

#include <json.hpp>

#include "errors.hpp"

namespace nodal {

enum class InitMode { random_per_head, symmetric_heads };
enum class Pooling { cls, mean };
enum class Activation { gelu, tanh, relu };

NLOHMANN_JSON_SERIALIZE_ENUM(InitMode, {{InitMode::random_per_head, "random_per_head"},
                                        {InitMode::symmetric_heads, "symmetric_heads"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Pooling, {{Pooling::cls, "cls"}, {Pooling::mean, "mean"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Activation, {{Activation::gelu, "gelu"}, {Activation::tanh, "tanh"},
                                          {Activation::relu, "relu"}})

struct ModelConfig {
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t width = 32;       // D
    std::size_t head_width = 8;   // d_h
    std::size_t vocab_size = 256;
    std::size_t seq_len = 32;
    std::size_t num_classes = 8;
    std::size_t ff_mult = 4;
    double dropout_rate = 0.0;
    std::uint64_t init_seed = 1;
    InitMode init_mode = InitMode::random_per_head;
    double init_std = 0.02;
    double layer_norm_eps = 1e-12;
    Activation mlm_activation = Activation::gelu;
    Pooling pooling = Pooling::cls;

    std::size_t ff_width() const { return ff_mult * width; }

    void validate() const {
        if (layers == 0 || heads == 0 || width == 0 || head_width == 0 || vocab_size == 0 || seq_len == 0 ||
            num_classes == 0 || ff_mult == 0)
            throw ConfigError("model dimensions must be positive");
        if (width != heads * head_width)
            throw ConfigError("model width " + std::to_string(width) + " != heads * head_width (" +
                              std::to_string(heads) + " * " + std::to_string(head_width) + ")");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
        if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
    }

    // The 6 x 12 x 768 encoder with the 30,522-token vocabulary and 128-token inputs.
    static ModelConfig bert6() {
        ModelConfig c;
        c.layers = 6;
        c.heads = 12;
        c.width = 768;
        c.head_width = 64;
        c.vocab_size = 30522;
        c.seq_len = 128;
        c.num_classes = 64;
        return c;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, layers, heads, width, head_width, vocab_size, seq_len,
                                                num_classes, ff_mult, dropout_rate, init_seed, init_mode, init_std,
                                                layer_norm_eps, mlm_activation, pooling)

enum class Schedule { linear_to_zero };
enum class StepUnit { epoch, batch };

NLOHMANN_JSON_SERIALIZE_ENUM(Schedule, {{Schedule::linear_to_zero, "linear_to_zero"}})
NLOHMANN_JSON_SERIALIZE_ENUM(StepUnit, {{StepUnit::epoch, "epoch"}, {StepUnit::batch, "batch"}})

struct TrainConfig {
    double eta = 5.5e-5;
    double alpha = 1e-2;
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    Schedule schedule = Schedule::linear_to_zero;
    // Scheduler steps once per epoch by default (total steps == epochs).
    StepUnit step_unit = StepUnit::epoch;
    std::uint64_t seed = 7;
    std::set<std::string> freeze;

    void validate() const {
        if (!(eta > 0.0)) throw ConfigError("eta must be positive");
        if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
        if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas in [0, 1)");
        if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, eta, alpha, epochs, batch_size, beta1, beta2, adam_eps,
                                                schedule, step_unit, seed, freeze)

// True when `name` equals a freeze entry or lies under it as a dotted prefix.
// "encoder" covers the embeddings and every layer.
inline bool is_frozen(const std::set<std::string>& freeze, const std::string& name) {
    for (const auto& f : freeze) {
        if (f == "encoder" && (name.rfind("embeddings.", 0) == 0 || name.rfind("layer", 0) == 0)) return true;
        if (name == f || (name.size() > f.size() && name.rfind(f, 0) == 0 && name[f.size()] == '.')) return true;
    }
    return false;
}

}  // namespace nodal
