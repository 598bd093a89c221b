#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "errors.hpp"
#include "hash.hpp"
#include "matrix.hpp"
#include "model.hpp"

namespace nodal {

// File layout:
//   magic "NODALCKP" | u32 version | u64 header length | header JSON
//   u32 tensor count, then per tensor:
//   u32 name length | name | u8 dtype (0 = float32) | u32 ndim | u64 dims[ndim] | data
// All integers and floats little-endian.
inline constexpr char kCheckpointMagic[8] = {'N', 'O', 'D', 'A', 'L', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Matrix<float> value;
};

struct CheckpointData {
    nlohmann::json header;  // "kind", "config", free-form extras
    std::vector<NamedTensor> tensors;
};

namespace detail {

template <class U>
void put_le(std::ostream& out, U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
    out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U get_le(std::istream& in, const std::string& what) {
    unsigned char buf[sizeof(U)];
    in.read(reinterpret_cast<char*>(buf), sizeof(U));
    if (in.gcount() != static_cast<std::streamsize>(sizeof(U))) throw TruncatedError("checkpoint truncated reading " + what);
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
    U v;
    std::memcpy(&v, buf, sizeof(U));
    return v;
}

inline std::string get_bytes(std::istream& in, std::size_t n, const std::string& what) {
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (in.gcount() != static_cast<std::streamsize>(n)) throw TruncatedError("checkpoint truncated reading " + what);
    return s;
}

}  // namespace detail

// Written to a temporary sibling and renamed into place.
inline void write_checkpoint(const std::string& path, const CheckpointData& data) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write checkpoint " + tmp);
        out.write(kCheckpointMagic, sizeof kCheckpointMagic);
        detail::put_le<std::uint32_t>(out, kCheckpointVersion);
        const std::string header = data.header.dump();
        detail::put_le<std::uint64_t>(out, header.size());
        out.write(header.data(), static_cast<std::streamsize>(header.size()));
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(data.tensors.size()));
        for (const auto& t : data.tensors) {
            detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
            out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
            detail::put_le<std::uint8_t>(out, 0);
            detail::put_le<std::uint32_t>(out, 2);
            detail::put_le<std::uint64_t>(out, t.value.rows);
            detail::put_le<std::uint64_t>(out, t.value.cols);
            for (float v : t.value.data) detail::put_le<float>(out, v);
        }
        if (!out) throw Error("failed writing checkpoint " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline CheckpointData read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path);
    char magic[8];
    in.read(magic, sizeof magic);
    if (in.gcount() != sizeof magic || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw FormatError(path + " is not a checkpoint (bad magic)");
    const auto version = detail::get_le<std::uint32_t>(in, "version");
    if (version != kCheckpointVersion)
        throw VersionError("checkpoint format version " + std::to_string(version) + " unsupported (expected " +
                           std::to_string(kCheckpointVersion) + ")");
    const auto header_len = detail::get_le<std::uint64_t>(in, "header length");
    if (header_len > (std::uint64_t{1} << 30)) throw FormatError("implausible checkpoint header length");
    CheckpointData data;
    try {
        data.header = nlohmann::json::parse(detail::get_bytes(in, header_len, "header"));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    const auto count = detail::get_le<std::uint32_t>(in, "tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const auto name_len = detail::get_le<std::uint32_t>(in, "tensor name length");
        if (name_len > 4096) throw FormatError("implausible tensor name length");
        t.name = detail::get_bytes(in, name_len, "tensor name");
        if (detail::get_le<std::uint8_t>(in, "dtype") != 0) throw FormatError("tensor " + t.name + ": unknown dtype");
        const auto ndim = detail::get_le<std::uint32_t>(in, "ndim");
        if (ndim != 2) throw FormatError("tensor " + t.name + ": expected 2 dimensions");
        const auto rows = detail::get_le<std::uint64_t>(in, "shape");
        const auto cols = detail::get_le<std::uint64_t>(in, "shape");
        if (rows * cols > (std::uint64_t{1} << 34)) throw FormatError("tensor " + t.name + ": implausible size");
        t.value = Matrix<float>(rows, cols);
        for (auto& v : t.value.data) v = detail::get_le<float>(in, "tensor " + t.name);
        data.tensors.push_back(std::move(t));
    }
    return data;
}

namespace detail {

template <class Visit>
std::vector<NamedTensor> collect(Visit&& visit) {
    std::vector<NamedTensor> out;
    visit([&](const std::string& name, const Matrix<float>& m, bool) { out.push_back({name, m}); });
    return out;
}

// Copies tensors from `data` into the structure visited by `visit`, checking names and shapes.
template <class Visit>
void assign(const CheckpointData& data, Visit&& visit) {
    std::size_t i = 0;
    visit([&](const std::string& name, Matrix<float>& m, bool) {
        if (i >= data.tensors.size()) throw ShapeMismatchError("checkpoint lacks tensor " + name);
        const auto& t = data.tensors[i++];
        if (t.name != name) throw ShapeMismatchError("checkpoint tensor " + t.name + " where " + name + " expected");
        if (!t.value.same_shape(m))
            throw ShapeMismatchError("tensor " + name + " has shape " + std::to_string(t.value.rows) + "x" +
                                     std::to_string(t.value.cols) + ", config expects " + std::to_string(m.rows) +
                                     "x" + std::to_string(m.cols));
        m = t.value;
    });
    if (i != data.tensors.size()) throw ShapeMismatchError("checkpoint has extra tensors");
}

inline ModelConfig header_config(const CheckpointData& data, const std::string& kind) {
    if (data.header.value("kind", "") != kind)
        throw FormatError("checkpoint kind '" + data.header.value("kind", "") + "', expected '" + kind + "'");
    try {
        return data.header.at("config").get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint config unreadable: ") + e.what());
    }
}

inline ModelParams<float> empty_model(const ModelConfig& c) {
    ModelConfig shape = c;
    shape.init_std = 1.0;
    return init_params<float>(shape);
}

}  // namespace detail

inline void save_model(const std::string& path, const ModelParams<float>& p, const nlohmann::json& extra = {}) {
    CheckpointData data;
    data.header = {{"kind", "model"}, {"config", p.config}};
    if (!extra.is_null()) data.header["extra"] = extra;
    data.tensors = detail::collect([&](auto&& f) { visit_tensors(p, f); });
    write_checkpoint(path, data);
}

// Shapes are checked against the stored config, and against `expected` when given.
inline ModelParams<float> load_model(const std::string& path, const ModelConfig* expected = nullptr) {
    const auto data = read_checkpoint(path);
    ModelConfig c = detail::header_config(data, "model");
    if (expected) {
        ModelConfig shape = *expected;
        shape.init_seed = c.init_seed;
        auto p = detail::empty_model(shape);
        detail::assign(data, [&](auto&& f) { visit_tensors(p, f); });
        p.config = *expected;
        return p;
    }
    auto p = detail::empty_model(c);
    detail::assign(data, [&](auto&& f) { visit_tensors(p, f); });
    p.config = c;
    return p;
}

struct MlmProbe {
    ModelConfig config;
    std::size_t layer = 0;
    MlmHead<float> head;
};

struct TaskProbe {
    ModelConfig config;
    std::size_t layer = 0;
    TaskHead<float> head;
};

inline void save_probe(const std::string& path, const MlmProbe& probe, const nlohmann::json& extra = {}) {
    CheckpointData data;
    data.header = {{"kind", "mlm_probe"}, {"config", probe.config}, {"layer", probe.layer}};
    if (!extra.is_null()) data.header["extra"] = extra;
    data.tensors = detail::collect([&](auto&& f) { visit_tensors(probe.head, "probe.", f); });
    write_checkpoint(path, data);
}

inline void save_probe(const std::string& path, const TaskProbe& probe, const nlohmann::json& extra = {}) {
    CheckpointData data;
    data.header = {{"kind", "task_probe"}, {"config", probe.config}, {"layer", probe.layer}};
    if (!extra.is_null()) data.header["extra"] = extra;
    data.tensors = detail::collect([&](auto&& f) { visit_tensors(probe.head, "probe.", f); });
    write_checkpoint(path, data);
}

inline MlmProbe load_mlm_probe(const std::string& path) {
    const auto data = read_checkpoint(path);
    MlmProbe probe;
    probe.config = detail::header_config(data, "mlm_probe");
    probe.layer = data.header.value("layer", std::size_t{0});
    probe.head = {Matrix<float>(probe.config.width, probe.config.width),
                  Matrix<float>(probe.config.width, probe.config.vocab_size)};
    detail::assign(data, [&](auto&& f) { visit_tensors(probe.head, "probe.", f); });
    return probe;
}

inline TaskProbe load_task_probe(const std::string& path) {
    const auto data = read_checkpoint(path);
    TaskProbe probe;
    probe.config = detail::header_config(data, "task_probe");
    probe.layer = data.header.value("layer", std::size_t{0});
    probe.head = {Matrix<float>(probe.config.width, probe.config.num_classes),
                  Matrix<float>(1, probe.config.num_classes)};
    detail::assign(data, [&](auto&& f) { visit_tensors(probe.head, "probe.", f); });
    return probe;
}

// Fingerprint of every tensor's bytes, in visit order.
template <class T>
std::string params_hash(const ModelParams<T>& p) {
    Fnv1a h;
    visit_tensors(p, [&](const std::string& name, const Matrix<T>& m, bool) {
        h.update(name);
        h.update(m.data.data(), m.data.size() * sizeof(T));
    });
    return h.hex();
}

}  // namespace nodal
