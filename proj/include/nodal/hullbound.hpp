#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "aperture.hpp"
#include "aperture_mask.hpp"
#include "errors.hpp"
#include "matrix.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace nodal {

// Scores s_j(x) = W[j]·x + b[j] of a single affine layer over x ∈ R^n.
struct HullInstance {
    std::size_t n = 0;
    std::size_t C = 0;
    Matrix<double> W;  // C x n
    std::vector<double> b;

    void validate() const {
        if (W.rows != C || W.cols != n || b.size() != C) throw ConfigError("hull instance shape mismatch");
        if (!W.all_finite()) throw NumericalError("non-finite hull weights");
        for (double v : b)
            if (!std::isfinite(v)) throw NumericalError("non-finite hull bias");
    }

    double scale() const {
        double s = 0;
        for (double v : W.data) s = std::max(s, std::abs(v));
        for (double v : b) s = std::max(s, std::abs(v));
        return s;
    }
};

enum class HullMethod { lp_margin, envelope_1d, sampling_oracle };

inline std::string to_string(HullMethod m) {
    switch (m) {
    case HullMethod::lp_margin: return "lp_margin";
    case HullMethod::envelope_1d: return "envelope_1d";
    case HullMethod::sampling_oracle: return "sampling_oracle";
    }
    return "?";
}

struct HullResult {
    std::set<std::size_t> realizable;
    std::set<std::size_t> indeterminate;  // LP trouble; these are counted in `realizable`
    std::map<std::size_t, std::vector<double>> witness;  // an input where the label wins, when the LP produced one
    std::size_t bound = 0;
    HullMethod method = HullMethod::lp_margin;
    double margin_used = 0;
};

inline constexpr double kHullTol = 1e-9;

namespace detail {

// Dense tableau simplex for max c·y s.t. A y <= rhs, y >= 0, rhs >= 0, with
// Bland's rule. Returns y, or nothing if the iteration limit is hit or the
// problem is unbounded.
inline std::optional<std::vector<double>> simplex_max(const Matrix<double>& A, const std::vector<double>& rhs,
                                                      const std::vector<double>& c) {
    const std::size_t m = A.rows, N = A.cols, cols = N + m + 1;
    Matrix<double> T(m + 1, cols);
    std::vector<std::size_t> basis(m);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < N; ++j) T(i, j) = A(i, j);
        T(i, N + i) = 1.0;
        T(i, cols - 1) = rhs[i];
        basis[i] = N + i;
    }
    for (std::size_t j = 0; j < N; ++j) T(m, j) = -c[j];
    constexpr double eps = 1e-12;
    const std::size_t limit = 50 * (m + N + 10);
    for (std::size_t iter = 0;; ++iter) {
        if (iter > limit) return std::nullopt;
        std::size_t enter = cols;
        for (std::size_t j = 0; j + 1 < cols; ++j)
            if (T(m, j) < -eps) {
                enter = j;
                break;
            }
        if (enter == cols) break;
        std::size_t leave = m;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < m; ++i) {
            if (T(i, enter) <= eps) continue;
            const double ratio = T(i, cols - 1) / T(i, enter);
            if (leave == m || ratio < best - eps) {
                leave = i;
                best = ratio;
            } else if (ratio <= best + eps && basis[i] < basis[leave]) {
                leave = i;
                best = std::min(best, ratio);
            }
        }
        if (leave == m) return std::nullopt;
        const double piv = T(leave, enter);
        for (std::size_t j = 0; j < cols; ++j) T(leave, j) /= piv;
        for (std::size_t i = 0; i <= m; ++i) {
            if (i == leave) continue;
            const double f = T(i, enter);
            if (f == 0.0) continue;
            for (std::size_t j = 0; j < cols; ++j) T(i, j) -= f * T(leave, j);
        }
        basis[leave] = enter;
    }
    std::vector<double> y(N, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        if (basis[i] < N) y[basis[i]] = T(i, cols - 1);
    return y;
}

// Worst-case strict margin of label j at x, on the normalized scale.
inline double win_margin(const HullInstance& inst, std::size_t j, const std::vector<double>& x, double inv_scale) {
    auto score = [&](std::size_t k) {
        double s = inst.b[k];
        for (std::size_t i = 0; i < inst.n; ++i) s += inst.W(k, i) * x[i];
        return s * inv_scale;
    };
    const double sj = score(j);
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < inst.C; ++k)
        if (k != j) m = std::min(m, sj - score(k));
    return m;
}

}  // namespace detail

// Per label: maximize t subject to (w_j - w_k)·x + (b_j - b_k) >= t for all
// k != j and t <= 1; j is realizable iff t* > tol. Entries are normalized by
// the largest absolute value first, so tol is relative.
inline HullResult realizable_labels(const HullInstance& inst, double tol = kHullTol) {
    inst.validate();
    HullResult res;
    res.method = HullMethod::lp_margin;
    res.margin_used = tol;
    if (inst.C == 1) {
        res.realizable = {0};
        res.bound = 1;
        return res;
    }
    const double scale = inst.scale();
    if (scale == 0.0) return res;  // all labels tie everywhere
    const double inv = 1.0 / scale;
    const std::size_t n = inst.n, C = inst.C;
    for (std::size_t j = 0; j < C; ++j) {
        std::vector<double> e;
        Matrix<double> d(C - 1, n);
        for (std::size_t k = 0, r = 0; k < C; ++k) {
            if (k == j) continue;
            for (std::size_t i = 0; i < n; ++i) d(r, i) = (inst.W(j, i) - inst.W(k, i)) * inv;
            e.push_back((inst.b[j] - inst.b[k]) * inv);
            ++r;
        }
        const double t0 = *std::min_element(e.begin(), e.end());
        if (t0 > tol) {  // wins at the origin already
            res.realizable.insert(j);
            continue;
        }
        if (n == 0) continue;
        // t = t0 - 1 + s keeps the origin feasible with right-hand sides >= 1.
        // Variables: x+ (n), x- (n), s.
        const std::size_t N = 2 * n + 1;
        Matrix<double> A(C, N);
        std::vector<double> rhs(C);
        for (std::size_t r = 0; r + 1 < C; ++r) {
            for (std::size_t i = 0; i < n; ++i) {
                A(r, i) = -d(r, i);
                A(r, n + i) = d(r, i);
            }
            A(r, 2 * n) = 1.0;
            rhs[r] = e[r] - (t0 - 1.0);
        }
        A(C - 1, 2 * n) = 1.0;
        rhs[C - 1] = 2.0 - t0;
        std::vector<double> c(N, 0.0);
        c[2 * n] = 1.0;
        const auto y = detail::simplex_max(A, rhs, c);
        if (!y) {
            res.realizable.insert(j);
            res.indeterminate.insert(j);
            continue;
        }
        const double t = t0 - 1.0 + (*y)[2 * n];
        if (t <= tol) continue;
        std::vector<double> x(n);
        for (std::size_t i = 0; i < n; ++i) x[i] = (*y)[i] - (*y)[n + i];
        res.realizable.insert(j);
        if (detail::win_margin(inst, j, x, inv) <= tol) res.indeterminate.insert(j);
        res.witness[j] = std::move(x);
    }
    res.bound = res.realizable.size();
    return res;
}

// Exact upper envelope of C lines y = W[j]·x + b[j] (n == 1): sort by slope,
// keep the top line of each parallel class, then a convex-chain scan. A line
// counts when it owns an envelope interval of nonzero length.
inline HullResult upper_envelope_1d(const HullInstance& inst, double tol = kHullTol) {
    inst.validate();
    if (inst.n != 1) throw ConfigError("upper_envelope_1d needs n == 1");
    HullResult res;
    res.method = HullMethod::envelope_1d;
    res.margin_used = tol;
    if (inst.C == 1) {
        res.realizable = {0};
        res.bound = 1;
        return res;
    }
    const double scale = inst.scale();
    if (scale == 0.0) return res;
    struct Line {
        double a, c;
        std::size_t id;
        bool tied;
    };
    std::vector<Line> lines;
    for (std::size_t j = 0; j < inst.C; ++j) lines.push_back({inst.W(j, 0) / scale, inst.b[j] / scale, j, false});
    std::sort(lines.begin(), lines.end(), [](const Line& p, const Line& q) {
        if (p.a != q.a) return p.a < q.a;
        return p.c > q.c;
    });
    std::vector<Line> tops;  // one per slope class, the highest intercept
    for (std::size_t i = 0; i < lines.size();) {
        std::size_t k = i + 1;
        while (k < lines.size() && std::abs(lines[k].a - lines[i].a) <= tol) ++k;
        Line top = lines[i];
        for (std::size_t q = i + 1; q < k; ++q)
            if (lines[q].c > top.c) top = lines[q];
        for (std::size_t q = i; q < k; ++q)
            if (lines[q].id != top.id && top.c - lines[q].c <= tol) top.tied = true;
        tops.push_back(top);
        i = k;
    }
    auto cross = [](const Line& p, const Line& q) { return (p.c - q.c) / (q.a - p.a); };
    std::vector<Line> hull;
    for (const auto& l : tops) {
        while (hull.size() >= 2 && cross(hull[hull.size() - 2], l) <= cross(hull[hull.size() - 2], hull.back()))
            hull.pop_back();
        hull.push_back(l);
    }
    for (std::size_t i = 0; i < hull.size(); ++i) {
        if (hull[i].tied) continue;
        const double lo = i == 0 ? -std::numeric_limits<double>::infinity() : cross(hull[i - 1], hull[i]);
        const double hi = i + 1 == hull.size() ? std::numeric_limits<double>::infinity() : cross(hull[i], hull[i + 1]);
        if (hi - lo > tol) res.realizable.insert(hull[i].id);
    }
    res.bound = res.realizable.size();
    return res;
}

struct OracleOptions {
    std::size_t samples = 100000;
    std::vector<double> radii;       // empty: geometric schedule around the natural scale
    std::size_t grid_per_axis = 9;  // local grid on [-r0, r0]^n, skipped when too large
    std::uint64_t seed = 1;
    std::size_t walk_steps = 4;   // boundary crossings taken from each sample
    std::size_t walk_fanout = 3;  // each crossing heads for one of this many closest rivals
};

// Strict argmax winners over sampled inputs. Every label returned truly wins
// somewhere, so the result is a subset of the realizable set.
inline std::set<std::size_t> oracle_realizable(const HullInstance& inst, const OracleOptions& opt,
                                               double tol = kHullTol) {
    inst.validate();
    std::set<std::size_t> won;
    if (inst.C == 0) return won;
    if (inst.C == 1) return {0};
    const double scale = inst.scale();
    if (scale == 0.0) return won;
    const double inv = 1.0 / scale;
    const std::size_t n = inst.n;
    std::vector<double> scores(inst.C);
    std::vector<double> y(n);
    auto score_at = [&](const std::vector<double>& at) {
        for (std::size_t k = 0; k < inst.C; ++k) {
            double s = inst.b[k];
            for (std::size_t i = 0; i < n; ++i) s += inst.W(k, i) * at[i];
            scores[k] = s * inv;
        }
        std::size_t best = 0;
        for (std::size_t k = 1; k < inst.C; ++k)
            if (scores[k] > scores[best]) best = k;
        std::size_t second = best == 0 ? 1 : 0;
        for (std::size_t k = 0; k < inst.C; ++k)
            if (k != best && scores[k] > scores[second]) second = k;
        if (scores[best] - scores[second] > tol) won.insert(best);
        return std::pair{best, second};
    };
    // Each sample then walks a few cells across boundaries, each time towards
    // one of the closest competitors; thin cells that uniform draws rarely hit
    // are usually next to a big one.
    Rng rng(derive_seed(opt.seed, 0x0bac1e));
    std::vector<double> cur(n);
    std::vector<std::size_t> order(inst.C);
    auto probe = [&](const std::vector<double>& at) {
        auto best = score_at(at).first;
        if (n == 0) return;
        cur = at;
        for (std::size_t step = 0; step < opt.walk_steps; ++step) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            const std::size_t m = std::min<std::size_t>(opt.walk_fanout, inst.C - 1);
            std::partial_sort(order.begin(), order.begin() + static_cast<long>(m + 1), order.end(),
                              [&](std::size_t p, std::size_t q) { return scores[p] > scores[q]; });
            std::size_t target = order[1 + rng.below(m)];
            if (target == best) target = order[0];
            const double gap = (scores[best] - scores[target]) / inv;
            double dd = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = inst.W(target, i) - inst.W(best, i);
                dd += d * d;
            }
            if (dd == 0) return;
            const double a = (gap + 1e-4 * (std::abs(gap) + 1.0 / inv)) / dd;
            for (std::size_t i = 0; i < n; ++i) cur[i] += a * (inst.W(target, i) - inst.W(best, i));
            best = score_at(cur).first;
        }
    };
    std::vector<double> x(n, 0.0);
    probe(x);
    if (n == 0) return won;
    // Crossings of two labels sit near |Δb| / |Δw| ~ 1 on the normalized scale.
    std::vector<double> radii = opt.radii;
    if (radii.empty())
        for (int k = -6; k <= 10; ++k) radii.push_back(std::pow(2.0, k));
    const double r0 = 1.0;
    double cells = 1;
    for (std::size_t i = 0; i < n; ++i) cells *= static_cast<double>(opt.grid_per_axis);
    if (opt.grid_per_axis >= 2 && cells <= 2e5) {
        std::vector<std::size_t> idx(n, 0);
        for (;;) {
            for (std::size_t i = 0; i < n; ++i)
                x[i] = -r0 + 2.0 * r0 * static_cast<double>(idx[i]) / static_cast<double>(opt.grid_per_axis - 1);
            probe(x);
            std::size_t i = 0;
            while (i < n && ++idx[i] == opt.grid_per_axis) idx[i++] = 0;
            if (i == n) break;
        }
    }
    for (std::size_t s = 0; s < opt.samples; ++s) {
        const double r = radii[s % radii.size()] * (0.5 + rng.uniform());
        double norm = 0;
        for (auto& v : x) {
            v = rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        if (norm == 0) continue;
        for (auto& v : x) v *= r / norm;
        probe(x);
    }
    return won;
}

// Instance restricted to the aperture columns of a task head (weights are D x C).
inline HullInstance hull_instance(const TaskHead<float>& head, const ApertureMask& aperture) {
    if (aperture.width() != head.weight.rows) throw ApertureError("aperture width does not match the task head");
    HullInstance inst;
    inst.n = aperture.size();
    inst.C = head.weight.cols;
    inst.W = Matrix<double>(inst.C, inst.n);
    for (std::size_t i = 0; i < inst.n; ++i)
        for (std::size_t j = 0; j < inst.C; ++j) inst.W(j, i) = head.weight(aperture.kept()[i], j);
    for (std::size_t j = 0; j < inst.C; ++j) inst.b.push_back(head.bias.data[j]);
    return inst;
}

inline HullResult bound_for_aperture(const TaskHead<float>& head, const ApertureMask& aperture,
                                     double tol = kHullTol) {
    const auto inst = hull_instance(head, aperture);
    return inst.n == 1 ? upper_envelope_1d(inst, tol) : realizable_labels(inst, tol);
}

struct GapReport {
    std::string aperture;
    std::size_t n = 0;
    std::size_t bound = 0;
    std::size_t realized = 0;
    long gap = 0;
    HullMethod method = HullMethod::lp_margin;
    double margin = 0;
};

inline GapReport compare_realized_vs_bound(const ConfusionMatrix& cm, const HullResult& result,
                                           const ApertureMask& aperture) {
    GapReport g;
    g.aperture = aperture.description();
    g.n = aperture.size();
    g.bound = result.bound;
    g.realized = static_cast<std::size_t>(compute_metrics(cm).positive_diagonal_count);
    g.gap = static_cast<long>(g.bound) - static_cast<long>(g.realized);
    g.method = result.method;
    g.margin = result.margin_used;
    return g;
}

inline void write_bound_csv(std::ostream& out, const std::vector<GapReport>& rows) {
    out << "aperture,n,bound,realized_count,gap,method,margin\n";
    for (const auto& r : rows)
        out << '"' << r.aperture << "\"," << r.n << ',' << r.bound << ',' << r.realized << ',' << r.gap << ','
            << to_string(r.method) << ',' << r.margin << '\n';
}

}  // namespace nodal
