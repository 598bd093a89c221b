#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aperture.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "errors.hpp"
#include "hash.hpp"
#include "hullbound.hpp"
#include "metrics.hpp"
#include "train.hpp"

namespace nodal {

inline constexpr const char* kToolVersion = "0.3.0";

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MaskPolicy, select_rate, replace_mask_rate, replace_random_rate,
                                                keep_rate, seed)

// Text corpus for pretraining and the MLM probe. Empty paths select the
// synthetic grammar; every tenth paragraph is held out for evaluation.
struct CorpusConfig {
    std::string train_path;
    std::string eval_path;
    std::size_t paragraphs = 4000;
    std::size_t max_sentences = 2;
    std::size_t eval_every = 10;
};

struct ClassificationConfig {
    std::string train_path;
    std::string test_path;
    std::size_t per_class_train = 100;
    std::size_t per_class_test = 25;
    std::size_t keywords_per_class = 3;
    double distractor_rate = 0.3;
};

struct SweepConfig {
    std::vector<std::size_t> n_list{1, 2, 3, 4, 6, 8, 12, 16, 24, 32};
    std::size_t trials = 20;
};

struct HullConfig {
    std::vector<std::size_t> sizes{1, 2, 4, 8};
    std::size_t trials = 20;
    double tol = kHullTol;
};

inline TrainConfig default_phase(double eta, std::size_t epochs, std::size_t batch, double alpha) {
    TrainConfig t;
    t.eta = eta;
    t.epochs = epochs;
    t.batch_size = batch;
    t.alpha = alpha;
    return t;
}

// Defaults are the bundled toy preset.
struct RunConfig {
    ModelConfig model;
    MaskPolicy mask;
    TrainConfig pretrain = default_phase(2e-3, 30, 32, 1e-2);
    TrainConfig probe = default_phase(3e-3, 20, 32, 0.0);
    TrainConfig finetune = default_phase(1e-3, 20, 16, 1e-2);
    TrainConfig task_probe = default_phase(3e-3, 40, 16, 0.0);
    CorpusConfig corpus;
    ClassificationConfig classification;
    long probe_layer = -1;  // -1: last layer
    SweepConfig sweep;
    HullConfig hull;
    std::uint64_t seed = 1;

    std::size_t layer() const {
        const long l = probe_layer < 0 ? static_cast<long>(model.layers) + probe_layer : probe_layer;
        if (l < 0 || l >= static_cast<long>(model.layers))
            throw ConfigError("probe_layer " + std::to_string(probe_layer) + " out of range");
        return static_cast<std::size_t>(l);
    }

    void validate() const {
        model.validate();
        mask.validate();
        for (const auto* t : {&pretrain, &probe, &finetune, &task_probe}) t->validate();
        layer();
        if (sweep.trials == 0 || hull.trials == 0) throw ConfigError("trials must be at least 1");
        for (auto n : sweep.n_list)
            if (n > model.width) throw ConfigError("sweep size " + std::to_string(n) + " exceeds the model width");
        for (auto n : hull.sizes)
            if (n > model.width) throw ConfigError("hull size " + std::to_string(n) + " exceeds the model width");
        if (corpus.eval_every < 2) throw ConfigError("corpus.eval_every must be at least 2");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CorpusConfig, train_path, eval_path, paragraphs, max_sentences,
                                                eval_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ClassificationConfig, train_path, test_path, per_class_train,
                                                per_class_test, keywords_per_class, distractor_rate)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SweepConfig, n_list, trials)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(HullConfig, sizes, trials, tol)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, model, mask, pretrain, probe, finetune, task_probe, corpus,
                                                classification, probe_layer, sweep, hull, seed)

// Component seeds all come from the run seed so one number pins a run.
enum class SeedTag : std::uint64_t {
    corpus = 1,
    classification,
    init,
    mask,
    pretrain,
    probe,
    probe_init,
    finetune,
    task_probe,
    task_probe_init,
    sweep,
    hull,
    random_system,
};

inline std::uint64_t run_seed(const RunConfig& c, SeedTag tag) {
    return derive_seed(c.seed, static_cast<std::uint64_t>(tag));
}

inline void derive_component_seeds(RunConfig& c) {
    c.model.init_seed = run_seed(c, SeedTag::init);
    c.mask.seed = run_seed(c, SeedTag::mask);
    c.pretrain.seed = run_seed(c, SeedTag::pretrain);
    c.probe.seed = run_seed(c, SeedTag::probe);
    c.finetune.seed = run_seed(c, SeedTag::finetune);
    c.task_probe.seed = run_seed(c, SeedTag::task_probe);
}

// "a.b.c=value": value is parsed as JSON, falling back to a plain string.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
    std::string pointer;
    std::stringstream keys(assignment.substr(0, eq));
    for (std::string k; std::getline(keys, k, '.');) pointer += "/" + k;
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    const nlohmann::json::json_pointer ptr(pointer);
    if (!doc.contains(ptr)) throw ConfigError("unknown config field " + assignment.substr(0, eq));
    doc[ptr] = value;
}

inline RunConfig parse_run_config(const nlohmann::json& doc) {
    try {
        return doc.get<RunConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad config: ") + e.what());
    }
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    auto doc = nlohmann::json::parse(in, nullptr, false);
    if (doc.is_discarded()) throw ConfigError("config " + path + " is not valid JSON");
    return doc;
}

// Loads `path` (or the defaults) and applies overrides on top.
inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
    nlohmann::json doc = RunConfig{};
    if (!path.empty()) doc.merge_patch(read_json_file(path));
    for (const auto& o : overrides) apply_override(doc, o);
    return parse_run_config(doc);
}

// ---------------------------------------------------------------------------
// run directory

namespace fs = std::filesystem;

// Exclusive lock on a run directory, released on destruction.
class RunLock {
public:
    explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
        fs::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw ConfigError("run directory " + dir.string() + " is locked by another process (remove " +
                              path_.string() + " if it is stale)");
    }
    ~RunLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            fs::remove(path_, ec);
        }
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path path_;
    int fd_ = -1;
};

// Writes through a temporary file and renames it into place.
inline void atomic_write(const fs::path& path, const std::function<void(std::ostream&)>& body) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw Error("cannot write " + tmp.string());
        body(out);
        out.flush();
        if (!out) throw Error("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline void atomic_write(const fs::path& path, const std::string& content) {
    atomic_write(path, [&](std::ostream& out) { out << content; });
}

// Functions that take a path write to a temporary name first.
inline void atomic_via(const fs::path& path, const std::function<void(const std::string&)>& writer) {
    const fs::path tmp = path.string() + ".tmp";
    writer(tmp.string());
    fs::rename(tmp, path);
}

struct RunFiles {
    fs::path dir;

    fs::path operator()(const std::string& name) const { return dir / name; }
    fs::path config() const { return dir / "config.json"; }
    fs::path vocab() const { return dir / "vocab.txt"; }
    fs::path corpus_train() const { return dir / "corpus_train.txt"; }
    fs::path corpus_eval() const { return dir / "corpus_eval.txt"; }
    fs::path cls_train() const { return dir / "classification_train.jsonl"; }
    fs::path cls_test() const { return dir / "classification_test.jsonl"; }
    fs::path pretrain_ckpt() const { return dir / "pretrain.ckpt"; }
    fs::path probe_ckpt() const { return dir / "probe_mlm.ckpt"; }
    fs::path finetune_ckpt() const { return dir / "finetune.ckpt"; }
    fs::path task_probe_ckpt() const { return dir / "probe_task.ckpt"; }
};

inline void require(const fs::path& file, const std::string& command) {
    if (!fs::exists(file))
        throw PrerequisiteError("missing " + file.filename().string() + " in " + file.parent_path().string() +
                                "; run `nodal " + command + "` first");
}

inline std::string config_hash(const RunConfig& c) { return hash_string(nlohmann::json(c).dump()); }

// CSV plus <name>.json describing where it came from.
inline void write_csv(const RunFiles& files, const RunConfig& cfg, const std::string& name, const std::string& csv,
                      const std::map<std::string, std::string>& checkpoints, const nlohmann::json& extra = {}) {
    atomic_write(files(name), csv);
    nlohmann::json side = {{"file", name},
                           {"file_hash", hash_string(csv)},
                           {"config_hash", config_hash(cfg)},
                           {"checkpoint_hash", checkpoints},
                           {"seed", cfg.seed},
                           {"tool_version", kToolVersion}};
    if (!extra.is_null()) side["extra"] = extra;
    atomic_write(files(name.substr(0, name.rfind('.')) + ".json"), side.dump(2) + "\n");
}

inline std::string loss_csv(const LossCurve& curve) {
    std::ostringstream out;
    out.precision(8);
    out << "epoch,split,loss,lr\n";
    for (const auto& r : curve) out << r.epoch << ',' << r.split << ',' << r.loss << ',' << r.lr << '\n';
    return out.str();
}

using Log = std::function<void(const std::string&)>;

inline Log stderr_log(bool quiet) {
    if (quiet) return [](const std::string&) {};
    return [](const std::string& s) { std::cerr << s << '\n'; };
}

inline EpochCallback epoch_logger(const Log& log, const std::string& phase) {
    return [log, phase](const LossRecord& r) {
        std::ostringstream s;
        s.precision(5);
        s << '[' << phase << "] epoch " << r.epoch << ' ' << r.split << " loss " << r.loss << " lr " << r.lr;
        log(s.str());
    };
}

// ---------------------------------------------------------------------------
// data

struct RunData {
    Vocab vocab;
    std::vector<TokenSequence> train, eval;
    std::vector<LabeledExample> cls_train, cls_test;
};

inline RunData load_run_data(const RunFiles& f, const RunConfig& cfg) {
    RunData d{Vocab::load(f.vocab().string()), {}, {}, {}, {}};
    for (const auto& t : read_text_corpus(f.corpus_train().string()))
        d.train.push_back(tokenize(t, d.vocab, cfg.model.seq_len));
    for (const auto& t : read_text_corpus(f.corpus_eval().string()))
        d.eval.push_back(tokenize(t, d.vocab, cfg.model.seq_len));
    const int C = static_cast<int>(cfg.model.num_classes);
    d.cls_train = load_classification_dataset(f.cls_train().string(), C, d.vocab, cfg.model.seq_len);
    d.cls_test = load_classification_dataset(f.cls_test().string(), C, d.vocab, cfg.model.seq_len);
    return d;
}

// Materializes corpus, labeled data and vocabulary inside the run directory.
inline void prepare_data(const RunFiles& f, RunConfig& cfg) {
    std::vector<std::string> train, eval;
    if (cfg.corpus.train_path.empty()) {
        const auto all = generate_synthetic_corpus(cfg.corpus.paragraphs, run_seed(cfg, SeedTag::corpus),
                                                   cfg.corpus.max_sentences);
        for (std::size_t i = 0; i < all.size(); ++i) (i % cfg.corpus.eval_every == 0 ? eval : train).push_back(all[i]);
    } else {
        train = read_text_corpus(cfg.corpus.train_path);
        if (!cfg.corpus.eval_path.empty()) {
            eval = read_text_corpus(cfg.corpus.eval_path);
        } else {
            std::vector<std::string> keep;
            for (std::size_t i = 0; i < train.size(); ++i)
                (i % cfg.corpus.eval_every == 0 ? eval : keep).push_back(train[i]);
            train = std::move(keep);
        }
    }
    if (train.empty() || eval.empty()) throw IngestionError("corpus needs both training and evaluation paragraphs");

    std::vector<LabeledText> cls_train, cls_test;
    const int C = static_cast<int>(cfg.model.num_classes);
    if (cfg.classification.train_path.empty()) {
        auto split = generate_synthetic_classification(C, cfg.classification.per_class_train,
                                                       cfg.classification.per_class_test,
                                                       run_seed(cfg, SeedTag::classification),
                                                       cfg.classification.keywords_per_class,
                                                       cfg.classification.distractor_rate);
        cls_train = std::move(split.train);
        cls_test = std::move(split.test);
    } else {
        if (cfg.classification.test_path.empty()) throw ConfigError("classification.test_path is required");
        cls_train = read_classification_jsonl(cfg.classification.train_path, C);
        cls_test = read_classification_jsonl(cfg.classification.test_path, C);
    }

    std::vector<std::string> texts = train;
    for (const auto& t : cls_train) texts.push_back(t.text);
    const auto vocab = build_vocab(texts, cfg.model.vocab_size);
    cfg.model.vocab_size = vocab.size();

    atomic_via(f.corpus_train(), [&](const std::string& p) { write_text_corpus(p, train); });
    atomic_via(f.corpus_eval(), [&](const std::string& p) { write_text_corpus(p, eval); });
    atomic_via(f.cls_train(), [&](const std::string& p) { write_classification_jsonl(p, cls_train); });
    atomic_via(f.cls_test(), [&](const std::string& p) { write_classification_jsonl(p, cls_test); });
    atomic_via(f.vocab(), [&](const std::string& p) { vocab.save(p); });
}

inline void write_effective_config(const RunFiles& f, const RunConfig& cfg) {
    atomic_write(f.config(), nlohmann::json(cfg).dump(2) + "\n");
}

inline RunConfig read_effective_config(const RunFiles& f, const std::vector<std::string>& overrides = {}) {
    require(f.config(), "pretrain");
    auto doc = read_json_file(f.config().string());
    for (const auto& o : overrides) apply_override(doc, o);
    auto cfg = parse_run_config(doc);
    cfg.validate();
    return cfg;
}

inline std::string file_hash(const fs::path& p) { return hash_file(p.string()); }

// ---------------------------------------------------------------------------
// commands

inline void cmd_pretrain(RunConfig cfg, const fs::path& dir, const Log& log) {
    derive_component_seeds(cfg);
    cfg.validate();
    RunLock lock(dir);
    const RunFiles f{dir};
    prepare_data(f, cfg);
    cfg.validate();
    write_effective_config(f, cfg);
    const auto data = load_run_data(f, cfg);
    log("[pretrain] " + std::to_string(data.train.size()) + " paragraphs, vocabulary " +
        std::to_string(data.vocab.size()));
    auto params = init_params<float>(cfg.model);
    TrainOptions opts;
    opts.eval = data.eval;
    opts.on_epoch = epoch_logger(log, "pretrain");
    const auto curve = pretrain_mlm(params, data.train, cfg.pretrain, cfg.mask, opts);
    atomic_via(f.pretrain_ckpt(), [&](const std::string& p) { save_model(p, params); });
    write_csv(f, cfg, "pretrain_loss.csv", loss_csv(curve), {{"pretrain", file_hash(f.pretrain_ckpt())}});
}

inline void cmd_probe(const fs::path& dir, const std::vector<std::string>& overrides, const Log& log) {
    const RunFiles f{dir};
    auto cfg = read_effective_config(f, overrides);
    require(f.pretrain_ckpt(), "pretrain");
    RunLock lock(dir);
    if (!overrides.empty()) write_effective_config(f, cfg);
    const auto data = load_run_data(f, cfg);
    const auto model = load_model(f.pretrain_ckpt().string(), &cfg.model);
    LossCurve curve;
    MlmProbe probe{cfg.model, cfg.layer(),
                   train_mlm_probe(model, cfg.layer(), data.train, cfg.probe, cfg.mask,
                                   run_seed(cfg, SeedTag::probe_init), &curve, epoch_logger(log, "probe"))};
    atomic_via(f.probe_ckpt(), [&](const std::string& p) { save_probe(p, probe); });
    write_csv(f, cfg, "probe_mlm_loss.csv", loss_csv(curve),
              {{"pretrain", file_hash(f.pretrain_ckpt())}, {"probe_mlm", file_hash(f.probe_ckpt())}});
}

inline void cmd_finetune(const fs::path& dir, const std::vector<std::string>& overrides, const Log& log) {
    const RunFiles f{dir};
    auto cfg = read_effective_config(f, overrides);
    require(f.pretrain_ckpt(), "pretrain");
    RunLock lock(dir);
    if (!overrides.empty()) write_effective_config(f, cfg);
    const auto data = load_run_data(f, cfg);
    auto model = load_model(f.pretrain_ckpt().string(), &cfg.model);
    const auto curve =
        finetune_classification(model, data.cls_train, cfg.finetune, data.cls_test, epoch_logger(log, "finetune"));
    log("[finetune] test accuracy " + std::to_string(classification_accuracy(model, data.cls_test)));
    atomic_via(f.finetune_ckpt(), [&](const std::string& p) { save_model(p, model); });
    write_csv(f, cfg, "finetune_loss.csv", loss_csv(curve), {{"finetune", file_hash(f.finetune_ckpt())}});

    LossCurve probe_curve;
    TaskProbe probe{cfg.model, cfg.layer(),
                    train_task_probe(model, cfg.layer(), data.cls_train, cfg.task_probe,
                                     run_seed(cfg, SeedTag::task_probe_init), &probe_curve,
                                     epoch_logger(log, "task_probe"))};
    atomic_via(f.task_probe_ckpt(), [&](const std::string& p) { save_probe(p, probe); });
    write_csv(f, cfg, "probe_task_loss.csv", loss_csv(probe_curve),
              {{"finetune", file_hash(f.finetune_ckpt())}, {"probe_task", file_hash(f.task_probe_ckpt())}});
}

inline std::string to_csv(const std::function<void(std::ostream&)>& body) {
    std::ostringstream s;
    body(s);
    return s.str();
}

inline void cmd_sweep(const fs::path& dir, const std::vector<std::string>& overrides, const Log& log) {
    const RunFiles f{dir};
    auto cfg = read_effective_config(f, overrides);
    require(f.pretrain_ckpt(), "pretrain");
    require(f.probe_ckpt(), "probe");
    require(f.finetune_ckpt(), "finetune");
    require(f.task_probe_ckpt(), "finetune");
    RunLock lock(dir);
    if (!overrides.empty()) write_effective_config(f, cfg);
    const auto data = load_run_data(f, cfg);
    const std::size_t D = cfg.model.width;
    const auto seed = run_seed(cfg, SeedTag::sweep);

    {
        const auto model = load_model(f.pretrain_ckpt().string(), &cfg.model);
        const auto probe = load_mlm_probe(f.probe_ckpt().string());
        const std::map<std::string, std::string> ck{{"pretrain", file_hash(f.pretrain_ckpt())},
                                                    {"probe_mlm", file_hash(f.probe_ckpt())}};
        const auto cache = build_mlm_eval_cache(model, probe.layer, data.eval);
        log("[sweep] mlm: " + std::to_string(cache.targets.size()) + " masked evaluation events");
        const auto eval = mlm_evaluator(probe.head, cfg.model.mlm_activation, cache);
        const auto full = ApertureMask::full(D);
        const auto cm = eval(full);
        write_csv(f, cfg, "confusion_mlm_full.csv", to_csv([&](std::ostream& o) { cm.write_csv(o); }), ck,
                  confusion_sidecar(cm, full, ck.at("probe_mlm")));
        const auto rows = crossover_sweep(eval, D, cfg.sweep.n_list, cfg.sweep.trials, seed);
        write_csv(f, cfg, "sweep_mlm.csv", to_csv([&](std::ostream& o) { write_sweep_csv(o, rows); }), ck);
        const auto heads = per_head_report(eval, D, cfg.model.head_width);
        write_csv(f, cfg, "heads_mlm.csv", to_csv([&](std::ostream& o) { write_head_csv(o, heads); }), ck);
    }
    {
        const auto model = load_model(f.finetune_ckpt().string(), &cfg.model);
        const auto probe = load_task_probe(f.task_probe_ckpt().string());
        const std::map<std::string, std::string> ck{{"finetune", file_hash(f.finetune_ckpt())},
                                                    {"probe_task", file_hash(f.task_probe_ckpt())}};
        const auto cache = build_task_eval_cache(model, probe.layer, data.cls_test);
        log("[sweep] task: " + std::to_string(cache.labels.size()) + " labeled evaluation inputs");
        const auto eval = task_evaluator(probe.head, cache);
        const auto full = ApertureMask::full(D);
        const auto cm = eval(full);
        write_csv(f, cfg, "confusion_task_full.csv", to_csv([&](std::ostream& o) { cm.write_csv(o); }), ck,
                  confusion_sidecar(cm, full, ck.at("probe_task")));
        const auto rows = crossover_sweep(eval, D, cfg.sweep.n_list, cfg.sweep.trials, derive_seed(seed, 2));
        write_csv(f, cfg, "sweep_task.csv", to_csv([&](std::ostream& o) { write_sweep_csv(o, rows); }), ck);
        const auto heads = per_head_report(eval, D, cfg.model.head_width);
        write_csv(f, cfg, "heads_task.csv", to_csv([&](std::ostream& o) { write_head_csv(o, heads); }), ck);
    }
}

// Bound vs realized labels for random apertures of each size.
inline std::vector<GapReport> gap_rows(const TaskHead<float>& head, const ApertureEvaluator& eval,
                                       const HullConfig& hc, std::size_t D, std::uint64_t seed) {
    std::vector<GapReport> rows;
    for (std::size_t n : hc.sizes)
        for (std::size_t t = 0; t < hc.trials; ++t) {
            const auto a = ApertureMask::random_subset(D, n, derive_seed(seed, n, t));
            rows.push_back(compare_realized_vs_bound(eval(a), bound_for_aperture(head, a, hc.tol), a));
        }
    return rows;
}

// Random-init system: nonzero confusion columns per aperture size.
inline std::string column_count_csv(const ApertureEvaluator& eval, const HullConfig& hc, std::size_t D,
                                    std::uint64_t seed) {
    std::ostringstream out;
    out.precision(10);
    out << "n,trials,nonzero_cols_mean,nonzero_cols_std,diag_count_mean\n";
    for (std::size_t n : hc.sizes) {
        std::vector<MetricsReport> reports;
        for (std::size_t t = 0; t < hc.trials; ++t)
            reports.push_back(compute_metrics(eval(ApertureMask::random_subset(D, n, derive_seed(seed, n, t)))));
        const auto row = aggregate(n, reports);
        out << n << ',' << row.trials << ',' << row.nonzero_cols.mean << ',' << row.nonzero_cols.stddev << ','
            << row.diag_count.mean << '\n';
    }
    return out.str();
}

inline void cmd_hullbound(const fs::path& dir, const std::vector<std::string>& overrides, const Log& log) {
    const RunFiles f{dir};
    auto cfg = read_effective_config(f, overrides);
    require(f.finetune_ckpt(), "finetune");
    require(f.task_probe_ckpt(), "finetune");
    RunLock lock(dir);
    if (!overrides.empty()) write_effective_config(f, cfg);
    const auto data = load_run_data(f, cfg);
    const std::size_t D = cfg.model.width;
    const auto seed = run_seed(cfg, SeedTag::hull);

    const auto model = load_model(f.finetune_ckpt().string(), &cfg.model);
    const auto probe = load_task_probe(f.task_probe_ckpt().string());
    const std::map<std::string, std::string> ck{{"finetune", file_hash(f.finetune_ckpt())},
                                                {"probe_task", file_hash(f.task_probe_ckpt())}};
    const auto cache = build_task_eval_cache(model, probe.layer, data.cls_test);
    const auto rows = gap_rows(probe.head, task_evaluator(probe.head, cache), cfg.hull, D, seed);
    write_csv(f, cfg, "bound.csv", to_csv([&](std::ostream& o) { write_bound_csv(o, rows); }), ck);
    log("[hullbound] trained task head: " + std::to_string(rows.size()) + " apertures");

    // Untrained system: fresh encoder and fresh task head from the run seed.
    auto random_cfg = cfg.model;
    random_cfg.init_seed = run_seed(cfg, SeedTag::random_system);
    const auto random_model = init_params<float>(random_cfg);
    const auto random_head = init_task_head<float>(random_cfg, derive_seed(random_cfg.init_seed, 1));
    const auto random_cache = build_task_eval_cache(random_model, cfg.layer(), data.cls_test);
    const auto random_eval = task_evaluator(random_head, random_cache);
    const std::map<std::string, std::string> rk{{"random_system", params_hash(random_model)}};
    const auto random_rows = gap_rows(random_head, random_eval, cfg.hull, D, seed);
    write_csv(f, cfg, "bound_random.csv", to_csv([&](std::ostream& o) { write_bound_csv(o, random_rows); }), rk);
    write_csv(f, cfg, "columns_random.csv", column_count_csv(random_eval, cfg.hull, D, seed), rk);
}

// Every CSV in the run directory as arrays of row objects, plus file hashes
// and a few headline numbers.
inline nlohmann::json read_csv_table(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    std::vector<std::string> header;
    {
        std::stringstream s(line);
        for (std::string h; std::getline(s, h, ',');) header.push_back(h);
    }
    nlohmann::json rows = nlohmann::json::array();
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cell;
        bool quoted = false;
        for (char ch : line) {
            if (ch == '"') {
                quoted = !quoted;
            } else if (ch == ',' && !quoted) {
                cells.push_back(cell);
                cell.clear();
            } else {
                cell.push_back(ch);
            }
        }
        cells.push_back(cell);
        nlohmann::json row = nlohmann::json::object();
        for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) {
            auto v = nlohmann::json::parse(cells[i], nullptr, false);
            row[header[i]] = v.is_discarded() || v.is_object() || v.is_array() ? nlohmann::json(cells[i]) : v;
        }
        rows.push_back(row);
    }
    return rows;
}

inline void cmd_report(const fs::path& dir, const Log& log) {
    const RunFiles f{dir};
    const auto cfg = read_effective_config(f);
    RunLock lock(dir);
    nlohmann::json report = {{"tool_version", kToolVersion}, {"config_hash", config_hash(cfg)}, {"seed", cfg.seed}};
    std::vector<fs::path> entries;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file()) entries.push_back(e.path());
    std::sort(entries.begin(), entries.end());
    for (const auto& p : entries) {
        const auto name = p.filename().string();
        if (name == "report.json" || name == ".lock" || name.ends_with(".tmp")) continue;
        report["files"][name] = file_hash(p);
        if (p.extension() == ".csv" && !name.starts_with("confusion_"))
            report["tables"][p.stem().string()] = read_csv_table(p);
    }
    auto& tables = report["tables"];
    // Aperture size with the lowest mean APT, per sweep.
    for (const char* s : {"sweep_mlm", "sweep_task"}) {
        if (!tables.contains(s) || tables[s].empty()) continue;
        const auto& rows = tables[s];
        std::size_t best = 0;
        for (std::size_t i = 1; i < rows.size(); ++i)
            if (rows[i]["apt_mean"].get<double>() < rows[best]["apt_mean"].get<double>()) best = i;
        report["summary"][std::string(s) + "_apt_minimum_at_n"] = rows[best]["n"];
    }
    for (const char* s : {"pretrain_loss", "probe_mlm_loss", "finetune_loss", "probe_task_loss"}) {
        if (!tables.contains(s)) continue;
        for (const auto& r : tables[s]) report["summary"][std::string(s) + "_final_" + r["split"].get<std::string>()] = r["loss"];
    }
    if (tables.contains("bound")) {
        std::map<std::size_t, std::pair<double, std::size_t>> gaps;
        for (const auto& r : tables["bound"]) {
            auto& g = gaps[r["n"].get<std::size_t>()];
            g.first += r["gap"].get<double>();
            ++g.second;
        }
        for (const auto& [n, g] : gaps)
            report["summary"]["bound_mean_gap"][std::to_string(n)] = g.first / static_cast<double>(g.second);
    }
    atomic_write(f("report.json"), report.dump(2) + "\n");
    log("[report] wrote " + f("report.json").string());
}

}  // namespace nodal
