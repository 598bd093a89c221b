#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "aperture.hpp"
#include "aperture_mask.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace nodal {

struct MetricsReport {
    double positive_diagonal_count = 0;
    double mean_diagonal_apt = 0;
    double diagonal_confidence = 0;
    double random_guess_baseline = 0;
    double nonzero_column_count = 0;

    friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline double random_guess_baseline(double positive_diagonal_count) {
    return positive_diagonal_count > 0 ? 1.0 / positive_diagonal_count : 0.0;
}

inline double random_guess_baseline(const MetricsReport& r) { return random_guess_baseline(r.positive_diagonal_count); }

// Rows with a zero total never reach the diagonal, so they drop out of every statistic.
inline MetricsReport compute_metrics(const ConfusionMatrix& cm) {
    MetricsReport r;
    std::size_t diag_tokens = 0;
    double apt_sum = 0;
    std::uint64_t diag_sum = 0, col_sum = 0;
    for (const auto& [key, c] : cm.entries()) {
        if (key.first != key.second || c == 0) continue;
        ++diag_tokens;
        apt_sum += static_cast<double>(c) / static_cast<double>(cm.row_total(key.first));
        diag_sum += c;
        col_sum += cm.column_total(key.first);
    }
    std::size_t cols = 0;
    for (std::size_t j = 0; j < cm.dim(); ++j) cols += cm.column_total(j) > 0;
    r.positive_diagonal_count = static_cast<double>(diag_tokens);
    r.mean_diagonal_apt = diag_tokens ? apt_sum / static_cast<double>(diag_tokens) : 0.0;
    r.diagonal_confidence = col_sum ? static_cast<double>(diag_sum) / static_cast<double>(col_sum) : 0.0;
    r.random_guess_baseline = random_guess_baseline(r.positive_diagonal_count);
    r.nonzero_column_count = static_cast<double>(cols);
    return r;
}

struct Stat {
    double mean = 0;
    double stddev = 0;
};

// Unbiased stddev; a single value has stddev 0.
inline Stat summarize(const std::vector<double>& v) {
    Stat s;
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return s;
}

struct SweepRow {
    std::size_t n = 0;
    std::size_t trials = 0;
    Stat diag_count, apt, confidence, baseline, nonzero_cols;
    std::vector<MetricsReport> per_trial;
};

inline SweepRow aggregate(std::size_t n, std::vector<MetricsReport> reports) {
    SweepRow row;
    row.n = n;
    row.trials = reports.size();
    auto field = [&](double MetricsReport::*f) {
        std::vector<double> v;
        for (const auto& r : reports) v.push_back(r.*f);
        return summarize(v);
    };
    row.diag_count = field(&MetricsReport::positive_diagonal_count);
    row.apt = field(&MetricsReport::mean_diagonal_apt);
    row.confidence = field(&MetricsReport::diagonal_confidence);
    row.baseline = field(&MetricsReport::random_guess_baseline);
    row.nonzero_cols = field(&MetricsReport::nonzero_column_count);
    row.per_trial = std::move(reports);
    return row;
}

// Scores one aperture against a fixed encoder/probe pair.
using ApertureEvaluator = std::function<ConfusionMatrix(const ApertureMask&)>;

inline ApertureEvaluator mlm_evaluator(const MlmHead<float>& probe, Activation act, const MlmEvalCache& cache) {
    return [&probe, act, &cache](const ApertureMask& a) { return accumulate_confusion_mlm(probe, act, a, cache); };
}

inline ApertureEvaluator task_evaluator(const TaskHead<float>& probe, const TaskEvalCache& cache) {
    return [&probe, &cache](const ApertureMask& a) { return accumulate_confusion_task(probe, a, cache); };
}

inline std::uint64_t sweep_aperture_seed(std::uint64_t seed, std::size_t n, std::size_t trial) {
    return derive_seed(seed, n, trial);
}

// Random apertures of each size; rows come back in ascending n.
inline std::vector<SweepRow> crossover_sweep(const ApertureEvaluator& eval, std::size_t width,
                                             std::vector<std::size_t> n_list, std::size_t trials,
                                             std::uint64_t seed) {
    if (trials == 0) throw ConfigError("sweep needs at least one trial");
    std::sort(n_list.begin(), n_list.end());
    n_list.erase(std::unique(n_list.begin(), n_list.end()), n_list.end());
    std::vector<SweepRow> rows;
    for (std::size_t n : n_list) {
        if (n > width) throw ApertureError("aperture size " + std::to_string(n) + " exceeds width");
        std::vector<MetricsReport> reports;
        for (std::size_t t = 0; t < trials; ++t)
            reports.push_back(
                compute_metrics(eval(ApertureMask::random_subset(width, n, sweep_aperture_seed(seed, n, t)))));
        rows.push_back(aggregate(n, std::move(reports)));
    }
    return rows;
}

inline std::vector<SweepRow> crossover_sweep(const MlmHead<float>& probe, Activation act, const MlmEvalCache& cache,
                                             const std::vector<std::size_t>& n_list, std::size_t trials,
                                             std::uint64_t seed) {
    return crossover_sweep(mlm_evaluator(probe, act, cache), probe.fc1.rows, n_list, trials, seed);
}

inline std::vector<SweepRow> crossover_sweep(const TaskHead<float>& probe, const TaskEvalCache& cache,
                                             const std::vector<std::size_t>& n_list, std::size_t trials,
                                             std::uint64_t seed) {
    return crossover_sweep(task_evaluator(probe, cache), probe.weight.rows, n_list, trials, seed);
}

// Union of m heads, averaged over the H windows of m cyclically consecutive heads.
struct HeadUnionRow {
    std::size_t heads = 0;
    SweepRow summary;
};

struct HeadReport {
    std::vector<MetricsReport> per_head;
    std::vector<HeadUnionRow> unions;
};

inline std::vector<std::size_t> union_sizes(std::size_t H) {
    std::vector<std::size_t> m;
    for (std::size_t k : {std::size_t{1}, std::size_t{2}, std::size_t{4}, H})
        if (k <= H && (m.empty() || m.back() < k)) m.push_back(k);
    return m;
}

inline HeadReport per_head_report(const ApertureEvaluator& eval, std::size_t width, std::size_t head_width) {
    if (head_width == 0 || width % head_width != 0) throw ConfigError("width is not a multiple of head_width");
    const std::size_t H = width / head_width;
    HeadReport out;
    for (std::size_t h = 0; h < H; ++h)
        out.per_head.push_back(compute_metrics(eval(ApertureMask::single_head(width, head_width, h))));
    for (std::size_t m : union_sizes(H)) {
        std::vector<MetricsReport> reports;
        if (m == 1) {
            reports = out.per_head;
        } else if (m == H) {
            reports.push_back(compute_metrics(eval(ApertureMask::heads(width, head_width, [&] {
                std::vector<std::size_t> all(H);
                std::iota(all.begin(), all.end(), std::size_t{0});
                return all;
            }()))));
        } else {
            for (std::size_t start = 0; start < H; ++start) {
                std::vector<std::size_t> hs;
                for (std::size_t k = 0; k < m; ++k) hs.push_back((start + k) % H);
                reports.push_back(compute_metrics(eval(ApertureMask::heads(width, head_width, hs))));
            }
        }
        out.unions.push_back({m, aggregate(m * head_width, std::move(reports))});
    }
    return out;
}

inline void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
    out << "n,trials,diag_count_mean,diag_count_std,apt_mean,apt_std,confidence_mean,confidence_std,"
           "baseline_mean,nonzero_cols_mean\n";
    out.precision(10);
    for (const auto& r : rows)
        out << r.n << ',' << r.trials << ',' << r.diag_count.mean << ',' << r.diag_count.stddev << ','
            << r.apt.mean << ',' << r.apt.stddev << ',' << r.confidence.mean << ',' << r.confidence.stddev << ','
            << r.baseline.mean << ',' << r.nonzero_cols.mean << '\n';
}

// Per-head rows, then union rows labelled by head count.
inline void write_head_csv(std::ostream& out, const HeadReport& report) {
    out << "group,heads,diag_count,apt,confidence,baseline,nonzero_cols\n";
    out.precision(10);
    for (std::size_t h = 0; h < report.per_head.size(); ++h) {
        const auto& r = report.per_head[h];
        out << "head" << h << ",1," << r.positive_diagonal_count << ',' << r.mean_diagonal_apt << ','
            << r.diagonal_confidence << ',' << r.random_guess_baseline << ',' << r.nonzero_column_count << '\n';
    }
    for (const auto& u : report.unions) {
        const auto& s = u.summary;
        out << "union" << u.heads << ',' << u.heads << ',' << s.diag_count.mean << ',' << s.apt.mean << ','
            << s.confidence.mean << ',' << s.baseline.mean << ',' << s.nonzero_cols.mean << '\n';
    }
}

}  // namespace nodal
