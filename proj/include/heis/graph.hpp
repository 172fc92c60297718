#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "heis/core.hpp"
#include "heis/curve.hpp"

namespace heis {

// Entire graph over a vertical plane: for plane coordinates (u, zeta) the
// graph point is w(u, zeta) shifted by f(u, zeta) along the horizontal unit
// normal of the plane.
struct ILipGraph {
    VerticalPlane plane;
    double L = 0.5;
    std::function<double(double, double)> f;  // (u, zeta) -> normal offset
};

// Coordinates of the splitting H = W · V: `u` along the plane's horizontal
// direction, `zeta` along the center, `v` the offset along the normal.
struct PlaneCoords {
    double u = 0.0;
    double zeta = 0.0;
    double v = 0.0;
};

inline PlaneCoords plane_split(const Point& p, const VerticalPlane& w) {
    double dx, dy, nx, ny;
    w.direction(dx, dy);
    w.normal(nx, ny);
    PlaneCoords pc;
    pc.u = p.x * dx + p.y * dy;
    pc.v = p.x * nx + p.y * ny;
    pc.zeta = p.z - 0.5 * pc.u * pc.v;
    return pc;
}

inline Point plane_join(const VerticalPlane& w, const PlaneCoords& pc) {
    double dx, dy, nx, ny;
    w.direction(dx, dy);
    w.normal(nx, ny);
    return {pc.u * dx + pc.v * nx, pc.u * dy + pc.v * ny, pc.zeta + 0.5 * pc.u * pc.v};
}

inline Point graph_point(const ILipGraph& g, double u, double zeta) {
    return plane_join(g.plane, {u, zeta, g.f(u, zeta)});
}

// Offset discrepancy of p against the graph: zero exactly on the graph, and
// an upper bound for the gauge distance to it (the graph point over the same
// plane projection is at gauge distance |residual|).
inline double graph_residual(const ILipGraph& g, const Point& p) {
    const PlaneCoords pc = plane_split(p, g.plane);
    return pc.v - g.f(pc.u, pc.zeta);
}

// Samples graph-point pairs and checks the plane-cone condition; returns the
// first violating pair of plane coordinates.
struct IlipWitness {
    PlaneCoords a, b;
};

inline std::optional<IlipWitness> verify_ilip(const ILipGraph& g, std::size_t n_pairs,
                                              double box_halfwidth = 2.0,
                                              std::uint64_t seed = 20240904,
                                              double tol = kDefaultTol) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(-box_halfwidth, box_halfwidth);
    for (std::size_t k = 0; k < n_pairs; ++k) {
        PlaneCoords a{unif(rng), unif(rng), 0.0};
        PlaneCoords b{unif(rng), unif(rng), 0.0};
        const Point pa = graph_point(g, a.u, a.zeta);
        const Point pb = graph_point(g, b.u, b.zeta);
        if (!in_ilip_cone(g.plane, g.L, group_diff(pb, pa), tol)) return IlipWitness{a, b};
    }
    return std::nullopt;
}

struct SignedDistanceOptions {
    double initial_step = 0.25;
    double min_step = 1e-10;
    int max_iters = 400;
};

// Signed gauge distance to the graph: magnitude by local pattern-search
// minimization over the plane coordinates (seeded at the projection of p),
// sign by the side of the normal offset.
inline double signed_distance(const ILipGraph& g, const Point& p,
                              const SignedDistanceOptions& opts = {}) {
    const PlaneCoords pc = plane_split(p, g.plane);
    double cu = pc.u, cz = pc.zeta;
    auto objective = [&](double u, double zeta) { return dist(p, graph_point(g, u, zeta)); };
    double best = objective(cu, cz);
    double step = std::max(opts.initial_step, std::fabs(graph_residual(g, p)));
    int it = 0;
    while (step > opts.min_step && it < opts.max_iters) {
        ++it;
        bool improved = false;
        const double cand_u[4] = {cu + step, cu - step, cu, cu};
        // zeta moves scale quadratically: vertical displacements cost sqrt.
        const double zs = step * step + step * std::fabs(cu);
        const double cand_z[4] = {cz, cz, cz + zs, cz - zs};
        for (int k = 0; k < 4; ++k) {
            const double val = objective(cand_u[k], cand_z[k]);
            if (val < best - 1e-15) {
                best = val;
                cu = cand_u[k];
                cz = cand_z[k];
                improved = true;
            }
        }
        if (!improved) step *= 0.5;
    }
    const double res = graph_residual(g, p);
    const double sign = res > 0.0 ? 1.0 : (res < 0.0 ? -1.0 : 0.0);
    return sign * best;
}

struct WindingInconclusive : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct WindingOptions {
    int max_points = 1u << 14;
    double vanish_rel_tol = 1e-9;
    bool use_signed_distance = false;  // residuals by default (same zero set)
};

// Discrete winding number of (f1, f2) along the dilated horizontal circle
// through `base`. The sample is refined until consecutive argument steps stay
// below pi/2; a vanishing loop value raises WindingInconclusive.
inline int winding_number_check(const ILipGraph& g1, const ILipGraph& g2, const Point& base,
                                double t, int n_theta, const WindingOptions& opts = {}) {
    if (!(t > 0.0)) throw std::domain_error("winding_number_check: t must be positive");
    if (n_theta < 4) n_theta = 4;
    auto F = [&](double theta) -> std::pair<double, double> {
        const Point circle{t * std::cos(theta), t * std::sin(theta), 0.0};
        const Point p = group_mul(base, circle);
        if (opts.use_signed_distance)
            return {signed_distance(g1, p), signed_distance(g2, p)};
        return {graph_residual(g1, p), graph_residual(g2, p)};
    };
    std::vector<double> thetas(static_cast<std::size_t>(n_theta) + 1);
    for (int k = 0; k <= n_theta; ++k)
        thetas[static_cast<std::size_t>(k)] = 2.0 * kPi * static_cast<double>(k) / n_theta;
    std::vector<std::pair<double, double>> vals(thetas.size());
    for (std::size_t k = 0; k < thetas.size(); ++k) vals[k] = F(thetas[k]);

    auto arg_of = [&](const std::pair<double, double>& v) {
        const double mag = std::hypot(v.first, v.second);
        if (mag < opts.vanish_rel_tol * t)
            throw WindingInconclusive("loop value vanishes; refine t or n_theta");
        return std::atan2(v.second, v.first);
    };
    // Refine until adjacent samples subtend less than pi/2.
    for (;;) {
        bool refined = false;
        for (std::size_t k = 0; k + 1 < thetas.size(); ++k) {
            double d = arg_of(vals[k + 1]) - arg_of(vals[k]);
            while (d > kPi) d -= 2.0 * kPi;
            while (d < -kPi) d += 2.0 * kPi;
            if (std::fabs(d) >= 0.5 * kPi) {
                if (static_cast<int>(thetas.size()) >= opts.max_points)
                    throw WindingInconclusive("angle refinement budget exhausted");
                const double mid = 0.5 * (thetas[k] + thetas[k + 1]);
                thetas.insert(thetas.begin() + static_cast<long>(k) + 1, mid);
                vals.insert(vals.begin() + static_cast<long>(k) + 1, F(mid));
                refined = true;
                break;
            }
        }
        if (!refined) break;
    }
    double total = 0.0;
    for (std::size_t k = 0; k + 1 < thetas.size(); ++k) {
        double d = arg_of(vals[k + 1]) - arg_of(vals[k]);
        while (d > kPi) d -= 2.0 * kPi;
        while (d < -kPi) d += 2.0 * kPi;
        total += d;
    }
    const double w = total / (2.0 * kPi);
    const double rounded = std::round(w);
    if (std::fabs(w - rounded) > 0.1)
        throw WindingInconclusive("winding number did not settle near an integer");
    return static_cast<int>(rounded);
}

struct TraceOptions {
    double newton_tol = 1e-12;
    int newton_iters = 40;
    int max_step_halvings = 8;
    double fd_step = 1e-7;
    double winding_t = 1.0;
    int winding_n_theta = 64;
    bool check_winding = true;
    Point seed{0.0, 0.0, 0.0};  // x,y used as the horizontal seed at z_lo
};

struct TraceError : std::runtime_error {
    Point last_good;
    TraceError(const std::string& what, Point last) : std::runtime_error(what), last_good(last) {}
};

namespace detail_trace {

// Damped Newton for (res1, res2) = 0 over the horizontal disc through q.
inline std::optional<Point> newton_on_disc(const ILipGraph& g1, const ILipGraph& g2,
                                           const Point& q, const TraceOptions& opts) {
    double x1 = 0.0, x2 = 0.0;
    auto value = [&](double a, double b) {
        const Point p = group_mul(q, Point{a, b, 0.0});
        return std::pair<double, double>{graph_residual(g1, p), graph_residual(g2, p)};
    };
    auto norm2 = [](const std::pair<double, double>& v) {
        return v.first * v.first + v.second * v.second;
    };
    auto cur = value(x1, x2);
    for (int it = 0; it < opts.newton_iters; ++it) {
        if (std::sqrt(norm2(cur)) < opts.newton_tol)
            return group_mul(q, Point{x1, x2, 0.0});
        const double h = opts.fd_step;
        const auto fpx = value(x1 + h, x2), fmx = value(x1 - h, x2);
        const auto fpy = value(x1, x2 + h), fmy = value(x1, x2 - h);
        const double j11 = (fpx.first - fmx.first) / (2 * h);
        const double j21 = (fpx.second - fmx.second) / (2 * h);
        const double j12 = (fpy.first - fmy.first) / (2 * h);
        const double j22 = (fpy.second - fmy.second) / (2 * h);
        const double det = j11 * j22 - j12 * j21;
        if (std::fabs(det) < 1e-14) return std::nullopt;
        const double dx1 = (-cur.first * j22 + cur.second * j12) / det;
        const double dx2 = (-cur.second * j11 + cur.first * j21) / det;
        double damp = 1.0;
        bool ok = false;
        for (int ls = 0; ls < 12; ++ls) {
            const auto trial = value(x1 + damp * dx1, x2 + damp * dx2);
            if (norm2(trial) < norm2(cur)) {
                x1 += damp * dx1;
                x2 += damp * dx2;
                cur = trial;
                ok = true;
                break;
            }
            damp *= 0.5;
        }
        if (!ok) return std::nullopt;
    }
    if (std::sqrt(norm2(cur)) < opts.newton_tol) return group_mul(q, Point{x1, x2, 0.0});
    return std::nullopt;
}

}  // namespace detail_trace

// Traces the intersection of two entire graphs by marching the order
// parameter: from each accepted point, push up by `step` along the center and
// solve the two residuals on the transverse horizontal disc. Output samples
// carry the cumulative order measure as parameter.
inline SampledCurve trace_intersection(const ILipGraph& g1, const ILipGraph& g2, double z_lo,
                                       double z_hi, double step, double claimed_lambda,
                                       const TraceOptions& opts = {}) {
    if (!(z_hi > z_lo)) throw std::domain_error("trace_intersection: empty z range");
    if (!(step > 0.0)) throw std::domain_error("trace_intersection: step must be positive");
    if (opts.check_winding) {
        for (double zc : {z_lo, z_hi}) {
            const Point base{opts.seed.x, opts.seed.y, zc};
            const int w =
                winding_number_check(g1, g2, base, opts.winding_t, opts.winding_n_theta);
            if (w != 1)
                throw std::domain_error("trace_intersection: winding precondition failed");
        }
    }

    auto first = detail_trace::newton_on_disc(
        g1, g2, Point{opts.seed.x, opts.seed.y, z_lo}, opts);
    if (!first) throw TraceError("failed to locate the curve at z_lo", opts.seed);

    std::vector<Point> pts{*first};
    std::vector<double> params{0.0};
    Point cur = *first;
    double cur_step = step;
    while (cur.z < z_hi - 1e-15) {
        bool advanced = false;
        double try_step = cur_step;
        for (int h = 0; h <= opts.max_step_halvings; ++h) {
            const Point pushed = group_mul(cur, Point{0.0, 0.0, try_step});
            if (auto next = detail_trace::newton_on_disc(g1, g2, pushed, opts)) {
                const double dz = group_diff(*next, cur).z;
                if (dz > 0.0) {
                    params.push_back(params.back() + dz);
                    pts.push_back(*next);
                    cur = *next;
                    advanced = true;
                    cur_step = std::min(step, try_step * 2.0);
                    break;
                }
            }
            try_step *= 0.5;
        }
        if (!advanced) throw TraceError("continuation stalled", cur);
    }
    SampledCurve::Meta meta;
    meta.claimed_lambda = claimed_lambda;
    return SampledCurve(std::move(params), std::move(pts), meta);
}

struct ConeCertificationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConeCertOptions {
    std::size_t angle_grid = 512;
    std::size_t height_grid = 257;
    std::size_t mc_samples = 200000;
    double safety = 0.999;
    double horizontal_floor = 1e-9;
    std::uint64_t seed = 20240905;
};

// Certifies the largest lambda with: every unit-sphere point lying in all the
// plane cones of aperture L lies in the vertical cone of parameter lambda.
// Scale invariance reduces the check to the unit sphere; failure means the
// intersection reaches the horizontal plane.
inline double intersection_cone_lambda(double L, const std::vector<VerticalPlane>& planes,
                                       const ConeCertOptions& opts = {}) {
    if (!(L > 0.0 && L < 1.0))
        throw std::domain_error("intersection_cone_lambda: L must lie in (0,1)");
    if (planes.size() < 2)
        throw std::domain_error("intersection_cone_lambda: need at least two planes");
    double lambda_min = std::numeric_limits<double>::infinity();
    bool any_member = false;
    auto consider = [&](const Point& p) {
        for (const auto& w : planes)
            if (dist_to_plane(p, w) > L) return;
        any_member = true;
        const double h2 = pi_norm_sq(p);
        if (h2 < opts.horizontal_floor * opts.horizontal_floor) return;  // no constraint
        const double ratio = std::fabs(p.z) / h2;
        if (ratio < opts.horizontal_floor)
            throw ConeCertificationError(
                "intersection contains near-horizontal directions; L too large");
        lambda_min = std::min(lambda_min, ratio);
    };
    // Unit sphere parametrization: |pi|^2 = cos(psi), 4 z = sin(psi).
    for (std::size_t ia = 0; ia < opts.angle_grid; ++ia) {
        const double ang = 2.0 * kPi * static_cast<double>(ia) / static_cast<double>(opts.angle_grid);
        for (std::size_t ih = 0; ih < opts.height_grid; ++ih) {
            const double psi =
                -0.5 * kPi + kPi * static_cast<double>(ih) / static_cast<double>(opts.height_grid - 1);
            const double u = std::sqrt(std::max(0.0, std::cos(psi)));
            consider(Point{u * std::cos(ang), u * std::sin(ang), std::sin(psi) / 4.0});
        }
    }
    std::mt19937_64 rng(opts.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (std::size_t k = 0; k < opts.mc_samples; ++k) {
        const double ang = 2.0 * kPi * unif(rng);
        const double psi = -0.5 * kPi + kPi * unif(rng);
        const double u = std::sqrt(std::max(0.0, std::cos(psi)));
        consider(Point{u * std::cos(ang), u * std::sin(ang), std::sin(psi) / 4.0});
    }
    if (!any_member || !std::isfinite(lambda_min))
        throw ConeCertificationError("no cone-intersection directions sampled");
    return lambda_min * opts.safety;
}

inline double intersection_cone_lambda(double L, const VerticalPlane& w1,
                                       const VerticalPlane& w2,
                                       const ConeCertOptions& opts = {}) {
    if (std::fabs(w1.theta - w2.theta) < 1e-12)
        throw std::domain_error("intersection_cone_lambda: planes must differ");
    return intersection_cone_lambda(L, std::vector<VerticalPlane>{w1, w2}, opts);
}

// Left-translate an entire graph: the result is again an entire graph over
// the same plane, with the function read off through the splitting.
inline ILipGraph translate_graph(const ILipGraph& g, const Point& q) {
    ILipGraph out;
    out.plane = g.plane;
    out.L = g.L;
    const VerticalPlane plane = g.plane;
    auto f = g.f;
    const Point qinv = group_inv(q);
    out.f = [plane, f, qinv](double u, double zeta) {
        // Solve for the offset c with q^{-1} · w(u,zeta) · (c N) on the graph:
        // the V part of the product is affine in c with unit coefficient.
        const Point base = group_mul(qinv, plane_join(plane, {u, zeta, 0.0}));
        const PlaneCoords pc = plane_split(base, plane);
        return f(pc.u, pc.zeta) - pc.v;
    };
    return out;
}

// Entire graph through scattered samples: inverse-distance (Shepard)
// interpolation in plane coordinates, exact at the data sites.
inline ILipGraph tabulated_graph(const VerticalPlane& plane, double L,
                                 std::vector<PlaneCoords> data, double power = 4.0) {
    if (data.size() < 1) throw std::invalid_argument("tabulated_graph: need data");
    ILipGraph g;
    g.plane = plane;
    g.L = L;
    g.f = [data = std::move(data), power](double u, double zeta) {
        double wsum = 0.0, fsum = 0.0;
        for (const auto& d : data) {
            const double du = u - d.u, dz = zeta - d.zeta;
            const double r2 = du * du + std::fabs(dz);  // graded plane metric
            if (r2 < 1e-30) return d.v;
            const double w = std::pow(r2, -0.5 * power);
            wsum += w;
            fsum += w * d.v;
        }
        return fsum / wsum;
    };
    return g;
}

}  // namespace heis
