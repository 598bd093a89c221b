#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace nodal;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("nodal_ckpt_" + name)).string();
}

ModelConfig small() {
    ModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.width = 8;
    c.head_width = 4;
    c.vocab_size = 20;
    c.seq_len = 8;
    c.num_classes = 3;
    c.init_seed = 5;
    return c;
}

std::string read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void write_all(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
}

}  // namespace

TEST(Checkpoint, ModelRoundTripIsExact) {
    const auto p = init_params<float>(small());
    const auto path = temp_path("model.ckpt");
    save_model(path, p, {{"note", "x"}});
    const auto q = load_model(path);
    EXPECT_EQ(params_hash(p), params_hash(q));
    EXPECT_EQ(q.config.vocab_size, 20u);
    EXPECT_EQ(read_checkpoint(path).header["extra"]["note"], "x");
    EXPECT_FALSE(std::filesystem::exists(path + ".tmp"));
}

TEST(Checkpoint, ProbeRoundTrip) {
    const auto c = small();
    const auto path = temp_path("probe.ckpt");
    MlmProbe m{c, 1, init_mlm_head<float>(c, 4)};
    save_probe(path, m);
    const auto m2 = load_mlm_probe(path);
    EXPECT_EQ(m2.layer, 1u);
    EXPECT_EQ(m2.head.fc1.data, m.head.fc1.data);
    EXPECT_EQ(m2.head.fc2.data, m.head.fc2.data);
    EXPECT_THROW(load_task_probe(path), FormatError);
    TaskProbe t{c, 0, init_task_head<float>(c, 4)};
    save_probe(path, t);
    const auto t2 = load_task_probe(path);
    EXPECT_EQ(t2.head.weight.data, t.head.weight.data);
    EXPECT_EQ(t2.head.bias.data, t.head.bias.data);
}

TEST(Checkpoint, VocabMismatchIsShapeError) {
    const auto path = temp_path("v.ckpt");
    save_model(path, init_params<float>(small()));
    auto other = small();
    other.vocab_size = 21;
    EXPECT_THROW(load_model(path, &other), ShapeMismatchError);
    auto same = small();
    EXPECT_NO_THROW(load_model(path, &same));
}

TEST(Checkpoint, BadMagicVersionAndTruncation) {
    const auto path = temp_path("bad.ckpt");
    save_model(path, init_params<float>(small()));
    const auto good = read_all(path);

    auto bytes = good;
    bytes[0] = 'X';
    write_all(path, bytes);
    EXPECT_THROW(load_model(path), FormatError);

    bytes = good;
    bytes[8] = 9;  // version field follows the 8-byte magic
    write_all(path, bytes);
    EXPECT_THROW(load_model(path), VersionError);

    for (std::size_t cut : {good.size() - 1, good.size() / 2, std::size_t{10}}) {
        write_all(path, good.substr(0, cut));
        EXPECT_THROW(load_model(path), TruncatedError) << cut;
    }

    write_all(path, good);
    EXPECT_NO_THROW(load_model(path));
    EXPECT_THROW(load_model(temp_path("missing.ckpt")), FormatError);
}

TEST(Checkpoint, SavingIsDeterministic) {
    const auto a = temp_path("a.ckpt"), b = temp_path("b.ckpt");
    save_model(a, init_params<float>(small()));
    save_model(b, init_params<float>(small()));
    EXPECT_EQ(read_all(a), read_all(b));
    EXPECT_EQ(hash_file(a), hash_file(b));
}
