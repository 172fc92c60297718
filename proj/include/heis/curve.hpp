#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "heis/core.hpp"
#include "heis/detail/quad.hpp"

namespace heis {

struct CurveMeta {
    std::optional<double> claimed_lambda;
    std::optional<double> slope_bound;
    bool unit_speed = false;
};

// Ordered samples (t_i, p_i) of a curve, t strictly increasing.
struct SampledCurve {
    using Meta = CurveMeta;

    std::vector<double> t;
    std::vector<Point> p;
    CurveMeta meta;

    SampledCurve() = default;
    SampledCurve(std::vector<double> params, std::vector<Point> points, CurveMeta m = {})
        : t(std::move(params)), p(std::move(points)), meta(m) {
        validate();
    }

    std::size_t size() const { return p.size(); }

    void validate() const {
        if (p.size() < 2) throw std::invalid_argument("SampledCurve: need at least 2 samples");
        if (t.size() != p.size())
            throw std::invalid_argument("SampledCurve: parameter/point count mismatch");
        for (std::size_t i = 0; i + 1 < t.size(); ++i)
            if (!(t[i] < t[i + 1]))
                throw std::invalid_argument("SampledCurve: parameters must strictly increase");
        for (std::size_t i = 0; i < p.size(); ++i)
            if (!std::isfinite(p[i].x) || !std::isfinite(p[i].y) || !std::isfinite(p[i].z) ||
                !std::isfinite(t[i]))
                throw std::invalid_argument("SampledCurve: non-finite sample");
    }
};

// Smooth curve as a pair of evaluators: position and left-trivialized
// velocity. `osc_hint` is an upper bound on the angular frequency of the
// velocity components (rad per unit parameter); quadratures use it to pick
// resolutions. `unit_speed` marks z(vel) == 1 identically.
struct SmoothCurveSpec {
    std::function<Point(double)> pos;
    std::function<TangentVector(double)> vel;
    double t0 = 0.0;
    double t1 = 1.0;
    bool unit_speed = false;
    double osc_hint = 0.0;

    double length() const { return t1 - t0; }
    void require_in_domain(double t) const {
        if (!(t >= t0 - 1e-12 && t <= t1 + 1e-12))
            throw std::domain_error("curve parameter outside domain");
    }
};

// Builds the spec from coordinate evaluators: dpos is the plain coordinate
// derivative (dx, dy, dz); the left-trivialized z component picks up the
// half-area twist.
inline SmoothCurveSpec from_coordinate_curve(std::function<Point(double)> pos,
                                             std::function<Point(double)> dpos, double t0,
                                             double t1) {
    SmoothCurveSpec spec;
    spec.pos = pos;
    spec.vel = [pos, dpos](double t) -> TangentVector {
        const Point p = pos(t);
        const Point d = dpos(t);
        return {d.x, d.y, d.z + 0.5 * (d.x * p.y - p.x * d.y)};
    };
    spec.t0 = t0;
    spec.t1 = t1;
    return spec;
}

inline TangentVector left_derivative(const SmoothCurveSpec& c, double t) {
    c.require_in_domain(t);
    return c.vel(t);
}

struct QuadratureOptions {
    double points_per_wavelength = 24.0;
    std::size_t base_panels_per_unit = 1u << 14;
    std::size_t max_panels = 1u << 29;
};

inline std::size_t quadrature_panels(const SmoothCurveSpec& c, const QuadratureOptions& q = {}) {
    const double len = c.length();
    const double base = static_cast<double>(q.base_panels_per_unit) * std::max(len, 1e-9);
    const double osc =
        q.points_per_wavelength * c.osc_hint * len / (2.0 * 3.14159265358979323846);
    double want = std::max({base, osc, 16.0});
    if (want > static_cast<double>(q.max_panels))
        throw std::runtime_error("quadrature_panels: oscillation budget exceeded");
    return static_cast<std::size_t>(want);
}

// Curve measure \int |z(gamma'(t))| dt (the 2-dimensional gauge measure of a
// smooth curve).
inline double h2_measure(const SmoothCurveSpec& c, const QuadratureOptions& q = {}) {
    if (c.unit_speed) return c.length();
    const std::size_t panels = quadrature_panels(c, q);
    return detail::simpson([&](double t) { return std::fabs(c.vel(t).c); }, c.t0, c.t1, panels);
}

// Discrete analogue on samples: sum of |z(p_i^{-1} p_{i+1})|.
inline double h2_measure(const SampledCurve& c) {
    if (c.size() < 2) throw std::domain_error("h2_measure: need at least 2 samples");
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < c.size(); ++i)
        total += std::fabs(group_diff(c.p[i + 1], c.p[i]).z);
    return total;
}

// Slope of the velocity against the horizontal plane: z / |pi|, +inf for
// purely vertical velocity. Requires positive orientation at t.
inline double h_slope(const SmoothCurveSpec& c, double t) {
    const TangentVector v = left_derivative(c, t);
    if (!(v.c > 0.0)) throw std::domain_error("h_slope: curve not positively oriented at t");
    const double h = pi_norm(v);
    if (h == 0.0) return std::numeric_limits<double>::infinity();
    return v.c / h;
}

// Order relation: p comes before q when the displacement q seen from p has
// positive vertical part. Mutually exclusive with precedes(q, p); not
// transitive on the whole group.
inline bool precedes(const Point& p, const Point& q, double tol = 0.0) {
    return group_diff(q, p).z > tol;
}

struct PairWitness {
    std::size_t i = 0;
    std::size_t j = 0;
};

// Checks the cone condition on every sample pair; returns the first
// violating pair if any.
inline std::optional<PairWitness> verify_vertical(const SampledCurve& c, double lambda,
                                                  double tol = kDefaultTol) {
    for (std::size_t i = 0; i + 1 < c.size(); ++i)
        for (std::size_t j = i + 1; j < c.size(); ++j)
            if (!in_vcone(lambda, group_diff(c.p[j], c.p[i]), tol)) return PairWitness{i, j};
    return std::nullopt;
}

enum class Monotonicity { increasing, decreasing, neither };

inline Monotonicity verify_monotone(const SampledCurve& c, double tol = 0.0) {
    bool inc = true, dec = true;
    for (std::size_t i = 0; i + 1 < c.size() && (inc || dec); ++i)
        for (std::size_t j = i + 1; j < c.size() && (inc || dec); ++j) {
            if (!precedes(c.p[i], c.p[j], tol)) inc = false;
            if (!precedes(c.p[j], c.p[i], tol)) dec = false;
        }
    if (inc) return Monotonicity::increasing;
    if (dec) return Monotonicity::decreasing;
    return Monotonicity::neither;
}

struct MonotonicityReport {
    double min_z_ratio = std::numeric_limits<double>::infinity();
    double min_d_ratio = std::numeric_limits<double>::infinity();
    std::size_t z_violations = 0;
    std::size_t d_violations = 0;
    std::size_t triples_checked = 0;
    double c_lambda_used = 0.0;
};

// For ordered sample triples a < b < c checks z(a^{-1}c) >= c_lambda z(a^{-1}b)
// and d(a,c) >= c_lambda d(a,b); reports minimal observed ratios. Exhaustive
// when the triple count is small, otherwise a seeded random sample.
inline MonotonicityReport monotonicity_constants_check(const SampledCurve& c, double lambda,
                                                       std::size_t max_triples = 2000000,
                                                       std::uint64_t seed = 20240901,
                                                       double tol = kDefaultTol) {
    if (verify_monotone(c) != Monotonicity::increasing)
        throw std::domain_error("monotonicity_constants_check: curve must be increasing");
    MonotonicityReport rep;
    rep.c_lambda_used = c_lambda(lambda);
    const std::size_t n = c.size();
    auto eval_triple = [&](std::size_t i, std::size_t j, std::size_t k) {
        const Point ab = group_diff(c.p[j], c.p[i]);
        const Point ac = group_diff(c.p[k], c.p[i]);
        if (!(ab.z > 0.0)) return;
        const double rz = ac.z / ab.z;
        const double db = koranyi_norm(ab);
        const double rd = db > 0.0 ? koranyi_norm(ac) / db : std::numeric_limits<double>::infinity();
        rep.min_z_ratio = std::min(rep.min_z_ratio, rz);
        rep.min_d_ratio = std::min(rep.min_d_ratio, rd);
        if (rz < rep.c_lambda_used - tol) ++rep.z_violations;
        if (rd < rep.c_lambda_used - tol) ++rep.d_violations;
        ++rep.triples_checked;
    };
    const double total = static_cast<double>(n) * (n - 1) * (n - 2) / 6.0;
    if (total <= static_cast<double>(max_triples)) {
        for (std::size_t i = 0; i + 2 < n; ++i)
            for (std::size_t j = i + 1; j + 1 < n; ++j)
                for (std::size_t k = j + 1; k < n; ++k) eval_triple(i, j, k);
    } else {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        while (rep.triples_checked < max_triples) {
            std::size_t i = pick(rng), j = pick(rng), k = pick(rng);
            if (i == j || j == k || i == k) continue;
            if (i > j) std::swap(i, j);
            if (j > k) std::swap(j, k);
            if (i > j) std::swap(i, j);
            eval_triple(i, j, k);
        }
    }
    return rep;
}

// Raised when the sample spacing is too coarse for a requested chain step.
struct ResolutionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Chain v = q_0 < q_1 < ... < q_n = w on the samples with steps bounded by
// eps * d(v,w): each intermediate step leaves a ball of radius eps/2 * d(v,w),
// mirroring the ball-exit construction behind the packing bound. Returns
// sample indices.
inline std::vector<std::size_t> subdivide(const SampledCurve& c, std::size_t v_idx,
                                          std::size_t w_idx, double eps,
                                          std::optional<double> lambda = std::nullopt,
                                          double tol = kDefaultTol) {
    if (!(eps > 0.0 && eps < 1.0)) throw std::domain_error("subdivide: eps must lie in (0,1)");
    if (v_idx >= c.size() || w_idx >= c.size() || v_idx >= w_idx)
        throw std::domain_error("subdivide: bad endpoint indices");
    if (!precedes(c.p[v_idx], c.p[w_idx]))
        throw std::domain_error("subdivide: endpoints not ordered");
    const double lam = lambda ? *lambda
                              : (c.meta.claimed_lambda
                                     ? *c.meta.claimed_lambda
                                     : throw std::domain_error("subdivide: lambda unknown"));
    const double d_vw = dist(c.p[v_idx], c.p[w_idx]);
    const double step_lo = 0.5 * eps * d_vw;
    const double step_hi = eps * d_vw;

    std::vector<std::size_t> chain{v_idx};
    std::size_t cur = v_idx;
    while (dist(c.p[cur], c.p[w_idx]) > step_hi + tol) {
        std::size_t next = cur;
        bool found = false;
        for (std::size_t j = cur + 1; j <= w_idx; ++j) {
            if (dist(c.p[cur], c.p[j]) >= step_lo - tol) {
                next = j;
                found = true;
                break;
            }
        }
        if (!found) throw ResolutionError("subdivide: ran out of samples before target");
        if (dist(c.p[cur], c.p[next]) > step_hi + tol)
            throw ResolutionError("subdivide: sampling too coarse for requested eps");
        chain.push_back(next);
        cur = next;
    }
    chain.push_back(w_idx);

    // Packing bound on the chain length.
    const double C = compact_intersection_const(lam);
    const double cl = c_lambda(lam);
    const double N = std::pow(C + cl, 4.0) * std::pow(cl * eps / 4.0, -4.0);
    if (static_cast<double>(chain.size() - 1) > N)
        throw std::runtime_error("subdivide: chain exceeds packing bound");
    return chain;
}

struct BiHolderResult {
    SampledCurve curve;              // same points, parameters in [0,1]
    double alpha = 0.0;              // upper exponent (d <= C |dt|^alpha)
    double beta = 0.0;               // lower exponent (d >= C^{-1} |dt|^beta)
    double C = 1.0;
    double ls_slope = 0.0;           // least-squares log-log slope
    std::size_t depth = 0;           // refinement depth reached
    double worst_upper_ratio = 0.0;  // max over depths of max-step / 2^{-l} d
    double worst_lower_ratio = 0.0;  // min over depths of min-sep / (theta/2)^l d
};

// Parametrizes a compact increasing vertical curve on [0,1]. The recursive
// half-step refinement certifies the two-sided chord bounds level by level;
// the output parameter is proportional to the discrete curve measure, and the
// exponents are fitted on sampled log-log pairs.
inline BiHolderResult biholder_parametrize(const SampledCurve& c,
                                           std::optional<double> lambda = std::nullopt,
                                           std::size_t fit_pairs = 200000,
                                           std::uint64_t seed = 20240902) {
    if (verify_monotone(c) != Monotonicity::increasing)
        throw std::domain_error("biholder_parametrize: curve must be increasing");
    const double lam = lambda ? *lambda
                              : (c.meta.claimed_lambda
                                     ? *c.meta.claimed_lambda
                                     : throw std::domain_error("biholder_parametrize: lambda unknown"));
    const std::size_t n = c.size();

    // Measure-proportional parameter.
    std::vector<double> cum(n, 0.0);
    for (std::size_t i = 1; i < n; ++i)
        cum[i] = cum[i - 1] + std::fabs(group_diff(c.p[i], c.p[i - 1]).z);
    const double total = cum.back();
    if (!(total > 0.0)) throw std::domain_error("biholder_parametrize: degenerate curve");
    std::vector<double> params(n);
    for (std::size_t i = 0; i < n; ++i) params[i] = cum[i] / total;
    // Strictly increasing parameters are required; merge-free curves from the
    // constructions here always have positive chord measure.
    for (std::size_t i = 0; i + 1 < n; ++i)
        if (!(params[i] < params[i + 1]))
            throw std::domain_error("biholder_parametrize: zero-measure chord");

    BiHolderResult out;
    out.curve = SampledCurve(params, c.p, c.meta);

    // Level-by-level refinement with eps = 1/2.
    const double theta = 0.5 * c_lambda(lam);
    const double d_vw = dist(c.p.front(), c.p.back());
    out.worst_lower_ratio = std::numeric_limits<double>::infinity();
    std::vector<std::pair<std::size_t, std::size_t>> level{{0, n - 1}};
    std::size_t depth = 0;
    while (!level.empty() && depth < 48) {
        std::vector<std::pair<std::size_t, std::size_t>> next;
        double max_step = 0.0;
        double min_sep_ratio = std::numeric_limits<double>::infinity();
        for (auto [i, j] : level) {
            if (j <= i + 1) continue;
            std::vector<std::size_t> chain;
            try {
                chain = subdivide(c, i, j, 0.5, lam);
            } catch (const ResolutionError&) {
                continue;  // segment at sample granularity; keep as a leaf
            }
            const double dseg = dist(c.p[i], c.p[j]);
            for (std::size_t k = 0; k + 1 < chain.size(); ++k) {
                max_step = std::max(max_step, dist(c.p[chain[k]], c.p[chain[k + 1]]));
                next.emplace_back(chain[k], chain[k + 1]);
            }
            for (std::size_t a = 0; a + 1 < chain.size(); ++a)
                for (std::size_t b = a + 1; b < chain.size(); ++b) {
                    // Separation against theta * eps * d(segment ends); skip the
                    // terminal short hop which the construction does not bound.
                    if (b == chain.size() - 1 && a == chain.size() - 2) continue;
                    const double sep = dist(c.p[chain[a]], c.p[chain[b]]);
                    min_sep_ratio = std::min(min_sep_ratio, sep / (theta * 0.5 * dseg));
                }
        }
        if (max_step == 0.0 && next.empty()) break;
        ++depth;
        const double budget = std::pow(0.5, static_cast<double>(depth)) * d_vw;
        out.worst_upper_ratio = std::max(out.worst_upper_ratio, max_step / budget);
        if (std::isfinite(min_sep_ratio))
            out.worst_lower_ratio = std::min(out.worst_lower_ratio, min_sep_ratio);
        bool all_adjacent = true;
        for (auto [i, j] : next)
            if (j > i + 1) all_adjacent = false;
        level = std::move(next);
        if (all_adjacent) break;
    }
    out.depth = depth;

    // Exponent fit on log d vs log |dt| pairs.
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::pair<double, double>> logs;
    const std::size_t want = std::min<std::size_t>(fit_pairs, n * (n - 1) / 2);
    if (n * (n - 1) / 2 <= fit_pairs) {
        for (std::size_t i = 0; i + 1 < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j)
                logs.emplace_back(std::log(params[j] - params[i]),
                                  std::log(dist(c.p[i], c.p[j])));
    } else {
        while (logs.size() < want) {
            std::size_t i = pick(rng), j = pick(rng);
            if (i == j) continue;
            if (i > j) std::swap(i, j);
            logs.emplace_back(std::log(params[j] - params[i]), std::log(dist(c.p[i], c.p[j])));
        }
    }
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (auto [lx, ly] : logs) {
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double m = static_cast<double>(logs.size());
    const double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    out.ls_slope = slope;
    // Exponent order is strict; the constant absorbs the fit residuals.
    const double gap = 1e-6;
    out.alpha = slope - gap;
    out.beta = slope + gap;
    double c_needed = 1.0;
    for (auto [lx, ly] : logs) {
        c_needed = std::max(c_needed, std::exp(ly - out.alpha * lx));
        c_needed = std::max(c_needed, std::exp(out.beta * lx - ly));
    }
    out.C = c_needed * (1.0 + 1e-9);
    for (auto [lx, ly] : logs) {
        const double d = std::exp(ly), dt = std::exp(lx);
        if (!(d < out.C * std::pow(dt, out.alpha)) || !(d > std::pow(dt, out.beta) / out.C))
            throw std::runtime_error("biholder_parametrize: two-sided bound violated");
    }
    return out;
}

struct SlopeVerticalityReport {
    double sigma = 0.0;
    double pi_chord = 0.0;
    double z_chord = 0.0;
    double chord_dist = 0.0;
    bool pi_bound_ok = false;
    bool z_bound_ok = false;
    bool dist_bound_ok = false;
    std::optional<double> cone_lambda;  // set when sigma < m^2
    bool cone_ok = true;
};

// Quantitative near-verticality of a positively oriented arc with slope at
// least m: the chord displacement has small horizontal part, vertical part
// within sigma^2/m^2 of sigma, and for sigma < m^2 lies in a vertical cone.
inline SlopeVerticalityReport slope_verticality_check(const SmoothCurveSpec& c, double m,
                                                      double s, double t,
                                                      std::size_t slope_samples = 512,
                                                      const QuadratureOptions& q = {},
                                                      double tol = 1e-9) {
    if (!(m > 0.0)) throw std::domain_error("slope_verticality_check: m must be positive");
    c.require_in_domain(s);
    c.require_in_domain(t);
    if (s > t) std::swap(s, t);
    for (std::size_t k = 0; k <= slope_samples; ++k) {
        const double tau = s + (t - s) * static_cast<double>(k) / static_cast<double>(slope_samples);
        const TangentVector v = c.vel(tau);
        if (!(v.c > 0.0) || v.c < m * pi_norm(v) * (1.0 - 1e-9))
            throw std::domain_error("slope_verticality_check: slope precondition violated");
    }
    SmoothCurveSpec arc = c;
    arc.t0 = s;
    arc.t1 = t;
    const double sigma =
        std::fabs(detail::simpson([&](double tau) { return c.vel(tau).c; }, s, t,
                                  quadrature_panels(arc, q)));
    const Point chord = group_diff(c.pos(t), c.pos(s));
    SlopeVerticalityReport rep;
    rep.sigma = sigma;
    rep.pi_chord = pi_norm(chord);
    rep.z_chord = chord.z;
    rep.chord_dist = koranyi_norm(chord);
    rep.pi_bound_ok = rep.pi_chord <= sigma / m + tol;
    rep.z_bound_ok = std::fabs(chord.z - sigma) <= sigma * sigma / (m * m) + tol;
    rep.dist_bound_ok = rep.chord_dist <= 4.0 * std::sqrt(sigma) + 5.0 * sigma / m + tol;
    if (sigma < m * m && sigma > 0.0) {
        rep.cone_lambda = m * m / sigma - 1.0;
        rep.cone_ok = in_vcone(*rep.cone_lambda, chord, tol);
    }
    return rep;
}

// Uniform sampling helper.
inline SampledCurve sample_curve(const SmoothCurveSpec& c, std::size_t n,
                                 SampledCurve::Meta meta = {}) {
    if (n < 2) throw std::invalid_argument("sample_curve: need n >= 2");
    std::vector<double> ts(n);
    std::vector<Point> ps(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double t =
            c.t0 + (c.t1 - c.t0) * static_cast<double>(i) / static_cast<double>(n - 1);
        ts[i] = t;
        ps[i] = c.pos(t);
    }
    meta.unit_speed = meta.unit_speed || c.unit_speed;
    return SampledCurve(std::move(ts), std::move(ps), meta);
}

namespace fixtures {

inline SmoothCurveSpec vertical_segment(double height = 1.0) {
    SmoothCurveSpec s;
    s.pos = [](double t) { return Point{0.0, 0.0, t}; };
    s.vel = [](double) { return TangentVector{0.0, 0.0, 1.0}; };
    s.t0 = 0.0;
    s.t1 = height;
    s.unit_speed = true;
    return s;
}

inline SmoothCurveSpec horizontal_segment(double len = 1.0) {
    SmoothCurveSpec s;
    s.pos = [](double t) { return Point{t, 0.0, 0.0}; };
    s.vel = [](double) { return TangentVector{1.0, 0.0, 0.0}; };
    s.t0 = 0.0;
    s.t1 = len;
    return s;
}

// Closed horizontal-circle trace (cos t, -sin t, 0).
inline SmoothCurveSpec circle(double t1 = 2.0 * 3.14159265358979323846) {
    auto pos = [](double t) { return Point{std::cos(t), -std::sin(t), 0.0}; };
    auto dpos = [](double t) { return Point{-std::sin(t), -std::cos(t), 0.0}; };
    auto s = from_coordinate_curve(pos, dpos, 0.0, t1);
    s.osc_hint = 1.0;
    return s;
}

// Unit-speed round helix with slope exactly 1/kappa: radius kappa/omega,
// vertical drift adjusted so the trivialized vertical speed is one.
inline SmoothCurveSpec slope_helix(double kappa, double omega, double len = 1.0) {
    const double R = kappa / omega;
    const double drift = 1.0 - 0.5 * R * R * omega;
    auto pos = [R, omega, drift](double t) {
        return Point{R * std::cos(omega * t), -R * std::sin(omega * t), drift * t};
    };
    auto dpos = [R, omega, drift](double t) {
        return Point{-R * omega * std::sin(omega * t), -R * omega * std::cos(omega * t), drift};
    };
    auto s = from_coordinate_curve(pos, dpos, 0.0, len);
    s.unit_speed = true;  // z(vel) == 1 by construction
    s.osc_hint = omega;
    return s;
}

}  // namespace fixtures

}  // namespace heis
