#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "heis/core.hpp"
#include "heis/curve.hpp"
#include "heis/detail/quad.hpp"

namespace heis {

// Parameters of one helical perturbation. `r` controls the wavelength
// (roughly 2*pi/r^2 in arc measure) and the slope budget; `gain` scales the
// amplitude beyond the conservative default for exaggerated demonstration
// constructions (1 = proof-grade constants).
struct HelixParams {
    double kappa = 0.1;
    int phi = +1;               // +1 grows the measure, -1 shrinks it
    double r = 1024.0;
    double beta_const = 1.0 / 400.0;
    double gain = 1.0;

    void validate() const {
        if (!(kappa > 0.0 && kappa < 1.0))
            throw std::domain_error("HelixParams: kappa must lie in (0,1)");
        if (phi != 1 && phi != -1) throw std::domain_error("HelixParams: phi must be +1 or -1");
        if (!(r > 0.0)) throw std::domain_error("HelixParams: r must be positive");
        if (!(beta_const > 0.0)) throw std::domain_error("HelixParams: beta_const must be positive");
        if (!(gain > 0.0)) throw std::domain_error("HelixParams: gain must be positive");
    }
};

namespace detail_helix {

// Phase evaluated through the cycle fraction: `frac` is the fraction of the
// total arc measure, so integer cycle counts land on an exact zero phase and
// the perturbation closes up exactly at the endpoints.
inline double reduced_phase(double cycles, double frac) {
    return 2.0 * kPi * std::fmod(cycles * frac, 1.0);
}

inline Point w_of_phase(double A, int phi, double phase) {
    const double c = std::cos(phase), s = std::sin(phase);
    return {A * (c - 1.0), -A * static_cast<double>(phi) * s,
            0.5 * A * A * static_cast<double>(phi) * s};
}

// Left-trivialized derivative of w with respect to the arc parameter; the
// vertical component is constant.
inline TangentVector wp_of_phase(double A, double xi, int phi, double phase) {
    const double c = std::cos(phase), s = std::sin(phase);
    return {-A * xi * s, -A * static_cast<double>(phi) * xi * c,
            0.5 * static_cast<double>(phi) * A * A * xi};
}

struct ArcTable {
    std::shared_ptr<const detail::MonotoneTable> table;  // null = identity (unit speed)
    double t0 = 0.0;
    double eval(double t) const { return table ? (*table)(t) : (t - t0); }
};

}  // namespace detail_helix

// Minimum sampled slope z/|pi| of the velocity over a uniform grid.
inline double min_slope_sampled(const SmoothCurveSpec& c, std::size_t samples = 1024) {
    double worst = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k <= samples; ++k) {
        const double t =
            c.t0 + (c.t1 - c.t0) * static_cast<double>(k) / static_cast<double>(samples);
        const TangentVector v = c.vel(t);
        if (!(v.c > 0.0)) return 0.0;
        const double h = pi_norm(v);
        if (h > 0.0) worst = std::min(worst, v.c / h);
    }
    return worst;
}

// Replaces the curve by itself times a small helix riding its arc measure.
// Endpoints are preserved exactly; the vertical speed is multiplied by
// 1 + phi * A^2 * xi / 2 up to a cross term bounded by |pi(w)| |pi(vel)|.
inline SmoothCurveSpec helix_perturb(const SmoothCurveSpec& g, const HelixParams& hp,
                                     const QuadratureOptions& q = {},
                                     std::size_t table_nodes_cap = 1u << 20) {
    hp.validate();
    const double slope = min_slope_sampled(g);
    if (!(slope * hp.kappa >= 1.0 - 1e-9))
        throw std::domain_error("helix_perturb: slope precondition violated");

    detail_helix::ArcTable arc;
    arc.t0 = g.t0;
    double ell;
    if (g.unit_speed) {
        ell = g.length();
    } else {
        const std::size_t panels = quadrature_panels(g, q);
        const std::size_t nodes =
            std::min<std::size_t>(table_nodes_cap, std::max<std::size_t>(4096, panels / 8));
        arc.table = std::make_shared<detail::MonotoneTable>(detail::cumulative_integral(
            [&](double t) { return g.vel(t).c; }, g.t0, g.t1, nodes, panels));
        ell = arc.table->back();
    }
    if (!(ell >= 1.0 - 1e-9))
        throw std::domain_error("helix_perturb: curve measure must be at least 1");

    const double A = hp.gain * hp.kappa / (8.0 * hp.r);
    const double turns = std::ceil(hp.r * hp.r * ell / (2.0 * kPi));
    const double xi = 2.0 * kPi * turns / ell;
    const int phi = hp.phi;

    SmoothCurveSpec out;
    out.t0 = g.t0;
    out.t1 = g.t1;
    out.unit_speed = false;
    double max_z = 0.0;
    for (std::size_t k = 0; k <= 64; ++k) {
        const double t = g.t0 + g.length() * static_cast<double>(k) / 64.0;
        max_z = std::max(max_z, g.vel(t).c);
    }
    out.osc_hint = g.osc_hint + 1.25 * xi * max_z;
    auto gpos = g.pos;
    auto gvel = g.vel;
    out.pos = [gpos, gvel, arc, A, turns, ell, phi](double t) {
        const double phase = detail_helix::reduced_phase(turns, arc.eval(t) / ell);
        return group_mul(gpos(t), detail_helix::w_of_phase(A, phi, phase));
    };
    out.vel = [gvel, arc, A, xi, turns, ell, phi](double t) {
        const TangentVector base = gvel(t);
        const double phase = detail_helix::reduced_phase(turns, arc.eval(t) / ell);
        const Point w = detail_helix::w_of_phase(A, phi, phase);
        const TangentVector wp = detail_helix::wp_of_phase(A, xi, phi, phase);
        TangentVector v = adjoint(group_inv(w), base);
        v.a += wp.a * base.c;
        v.b += wp.b * base.c;
        v.c += wp.c * base.c;
        return v;
    };
    return out;
}

// ---------------------------------------------------------------------------
// Cone leeway and the perturbation budget
// ---------------------------------------------------------------------------

struct LeewayOptions {
    std::size_t slab_grid = 32;        // radial samples of the |z|=1 cone slab
    std::size_t ball_samples = 160;    // low-discrepancy samples of the gauge ball
    int bisection_iters = 36;
    std::size_t mc_certificate = 1000000;
    double delta_hi = 2.0;
    double safety = 0.95;
    std::uint64_t seed = 20240903;
};

namespace detail_leeway {

// Deterministic sample of the closed gauge ball of radius delta, with the
// boundary sphere included.
inline std::vector<Point> ball_sample(double delta, std::size_t n) {
    std::vector<Point> pts;
    pts.reserve(2 * n + 1);
    detail::Halton3 h;
    while (pts.size() < n) {
        auto u = h.next();
        Point p{delta * (2.0 * u[0] - 1.0), delta * (2.0 * u[1] - 1.0),
                delta * delta * (2.0 * u[2] - 1.0) / 4.0};
        const double norm = koranyi_norm(p);
        if (norm <= delta) {
            pts.push_back(p);
            if (norm > 1e-12) pts.push_back(dilate(delta / norm, p));  // boundary copy
        }
    }
    pts.push_back(Point{0.0, 0.0, 0.0});
    return pts;
}

inline bool triple_check(double lambda, double lambda_prime, double delta,
                         const std::vector<Point>& ball, std::size_t slab_grid) {
    const double u_max = 1.0 / std::sqrt(lambda);
    for (std::size_t iu = 0; iu <= slab_grid; ++iu) {
        const double u = u_max * static_cast<double>(iu) / static_cast<double>(slab_grid);
        for (int sign = -1; sign <= 1; sign += 2) {
            const Point v{u, 0.0, static_cast<double>(sign)};
            const double scale = std::sqrt(std::fabs(v.z));
            for (const Point& g : ball)
                for (const Point& gp : ball) {
                    const Point prod = group_mul(group_mul(dilate(scale, g), v),
                                                 dilate(scale, gp));
                    if (!in_vcone(lambda_prime, prod, 0.0)) return false;
                }
        }
    }
    return true;
}

}  // namespace detail_leeway

// Largest certified delta such that multiplying a lambda-cone vector v on
// both sides by gauge balls of radius delta*sqrt(|z(v)|) stays inside the
// lambda'-cone. Bisection over sampled products plus a Monte-Carlo
// certificate at the returned value.
inline double leeway_delta(double lambda, double lambda_prime, const LeewayOptions& opts = {}) {
    if (!(lambda_prime > 0.0 && lambda_prime < lambda))
        throw std::domain_error("leeway_delta: need 0 < lambda' < lambda");
    double lo = 0.0, hi = opts.delta_hi;
    // The scale-invariant reduction: it is enough to check |z(v)| = 1 with the
    // perturbing factors drawn from the ball of radius delta.
    for (int it = 0; it < opts.bisection_iters; ++it) {
        const double mid = 0.5 * (lo + hi);
        const auto ball = detail_leeway::ball_sample(mid, opts.ball_samples);
        if (detail_leeway::triple_check(lambda, lambda_prime, mid, ball, opts.slab_grid))
            lo = mid;
        else
            hi = mid;
    }
    double delta = lo * opts.safety;
    // Randomized certificate; shrink until it passes.
    std::mt19937_64 rng(opts.seed);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    std::uniform_real_distribution<double> unif01(0.0, 1.0);
    const double u_max = 1.0 / std::sqrt(lambda);
    for (int round = 0; round < 8; ++round) {
        bool pass = true;
        for (std::size_t k = 0; k < opts.mc_certificate && pass; ++k) {
            const double u = (k % 16 == 0) ? u_max : u_max * unif01(rng);
            const double ang = kPi * unif01(rng);
            const double zsign = unif(rng) >= 0.0 ? 1.0 : -1.0;
            const Point v{u * std::cos(ang), u * std::sin(ang), zsign};
            Point g, gp;
            for (Point* tgt : {&g, &gp}) {
                for (;;) {
                    Point cand{delta * unif(rng), delta * unif(rng),
                               delta * delta * unif(rng) / 4.0};
                    if (koranyi_norm(cand) <= delta) {
                        *tgt = cand;
                        break;
                    }
                }
            }
            if (!in_vcone(lambda_prime, group_mul(group_mul(g, v), gp), 0.0)) pass = false;
        }
        if (pass) return delta;
        delta *= 0.9;
    }
    throw std::runtime_error("leeway_delta: certificate failed to stabilize");
}

struct KappaBranches {
    double inv_sq = 0.0;   // (lambda + 1)^{-2}
    double tenth = 0.1;
    double leeway = 0.0;   // delta sqrt(c) / 4
    double half_eps = 0.0;
    double delta_used = 0.0;
    double value = 0.0;
};

// Perturbation budget: the minimum of the four constraints that keep every
// cascade level inside the lambda'-cone.
inline KappaBranches kappa_for(double lambda, double lambda_prime, double epsilon, double c,
                               std::optional<double> delta = std::nullopt,
                               const LeewayOptions& opts = {}) {
    if (!(lambda_prime > 0.0 && lambda_prime < lambda))
        throw std::domain_error("kappa_for: need 0 < lambda' < lambda");
    if (!(epsilon > 0.0)) throw std::domain_error("kappa_for: epsilon must be positive");
    if (!(c > 0.0)) throw std::domain_error("kappa_for: c must be positive");
    KappaBranches out;
    out.delta_used = delta ? *delta : leeway_delta(lambda, lambda_prime, opts);
    out.inv_sq = std::pow(lambda + 1.0, -2.0);
    out.tenth = 0.1;
    out.leeway = out.delta_used * std::sqrt(c) / 4.0;
    out.half_eps = epsilon / 2.0;
    out.value = std::min({out.inv_sq, out.tenth, out.leeway, out.half_eps});
    return out;
}

// ---------------------------------------------------------------------------
// Iterated cascade
// ---------------------------------------------------------------------------

struct CascadeError : std::runtime_error {
    int level;
    CascadeError(int lvl, const std::string& what)
        : std::runtime_error("cascade level " + std::to_string(lvl) + ": " + what), level(lvl) {}
};

// Concrete multi-level evaluator: the level-k curve is the base curve times
// one dilated helix factor per level, each riding the arc measure of the
// curve below it. Velocities are propagated exactly through the adjoint
// action, so no finite differencing is involved.
class CascadeCurve {
  public:
    struct Level {
        double amplitude = 0.0;    // helix amplitude at the zoomed scale
        double xi = 0.0;           // angular frequency in arc measure
        double cycles = 0.0;       // whole turns over the zoomed curve
        double total = 0.0;        // zoomed arc measure (phase_scale * ell)
        double scale = 1.0;        // rho^{-i}: zoom-out applied to the factor
        double phase_scale = 1.0;  // rho^{2i}: arc measure magnification
        int phi = +1;
        detail_helix::ArcTable arc;
    };

    CascadeCurve() = default;
    explicit CascadeCurve(SmoothCurveSpec base) : base_(std::move(base)) {}

    const SmoothCurveSpec& base() const { return base_; }
    const std::vector<Level>& levels() const { return levels_; }
    void push_level(Level lvl) { levels_.push_back(std::move(lvl)); }

    double t0() const { return base_.t0; }
    double t1() const { return base_.t1; }

    void eval(double t, std::size_t depth, Point& pos, TangentVector& vel) const {
        pos = base_.pos(t);
        vel = base_.vel(t);
        const std::size_t n = std::min(depth, levels_.size());
        for (std::size_t i = 0; i < n; ++i) {
            const Level& L = levels_[i];
            const double sig = L.phase_scale * L.arc.eval(t);
            const double sigp = L.phase_scale * vel.c;
            const double phase = detail_helix::reduced_phase(L.cycles, sig / L.total);
            Point w = detail_helix::w_of_phase(L.amplitude, L.phi, phase);
            TangentVector wp = detail_helix::wp_of_phase(L.amplitude, L.xi, L.phi, phase);
            const Point u = dilate(L.scale, w);
            vel = adjoint(group_inv(u), vel);
            vel.a += L.scale * wp.a * sigp;
            vel.b += L.scale * wp.b * sigp;
            vel.c += L.scale * L.scale * wp.c * sigp;
            pos = group_mul(pos, u);
        }
    }

    Point pos(double t, std::size_t depth) const {
        Point p;
        TangentVector v;
        eval(t, depth, p, v);
        return p;
    }
    TangentVector vel(double t, std::size_t depth) const {
        Point p;
        TangentVector v;
        eval(t, depth, p, v);
        return v;
    }

    // Wraps a fixed depth as a generic curve spec.
    SmoothCurveSpec spec(std::size_t depth, double osc_hint) const {
        SmoothCurveSpec s;
        CascadeCurve self = *this;  // levels share arc tables
        s.pos = [self, depth](double t) { return self.pos(t, depth); };
        s.vel = [self, depth](double t) { return self.vel(t, depth); };
        s.t0 = base_.t0;
        s.t1 = base_.t1;
        s.unit_speed = (depth == 0) && base_.unit_speed;
        s.osc_hint = osc_hint;
        return s;
    }

  private:
    SmoothCurveSpec base_;
    std::vector<Level> levels_;
};

struct CascadeConfig {
    double lambda = 1.0;
    double lambda_prime = 0.5;
    double epsilon = 0.5;
    int phi = +1;
    int levels = 3;
    double rho = 1000.0;
    std::optional<double> kappa;  // budget from kappa_for when absent
    double gain = 1.0;
    std::size_t dense_check_samples = 1024;
    std::size_t out_samples = 4096;
    QuadratureOptions quad;
    std::size_t table_nodes_cap = 1u << 20;
    double tol = 1e-9;
};

// Per-level record; drift and bracket fields describe the transition from
// this level to the next one (zero/unit on the deepest state).
struct CascadeState {
    int level = 0;
    double ell = 0.0;                // measure of the level curve
    double slope_floor = 0.0;        // kappa^{-1} rho^{-i}
    double min_slope_measured = 0.0;
    double drift_to_next = 0.0;      // sup_t d(alpha_i(t), alpha_{i+1}(t))
    double drift_budget = 0.0;
    double z_ratio_min = 1.0;        // bracket of z(alpha_{i+1}')/z(alpha_i')
    double z_ratio_max = 1.0;
};

struct CascadeResult {
    std::vector<CascadeState> states;  // levels 0..n
    SampledCurve final_curve;
    CascadeCurve curve;
    std::vector<double> osc_hints;     // per level
    double kappa_used = 0.0;
    std::optional<KappaBranches> branches;
};

// Runs `levels` helical refinements of a unit-speed positively oriented base
// curve, checking at each level: endpoints, slope transport, sup drift, the
// vertical-speed bracket, measured measure ratios, and cone verification of
// dense samples at lambda'.
inline CascadeResult run_cascade(const SmoothCurveSpec& alpha0, const CascadeConfig& cfg) {
    if (cfg.phi != 1 && cfg.phi != -1) throw std::domain_error("run_cascade: phi must be +/-1");
    if (cfg.levels < 1) throw std::domain_error("run_cascade: need at least one level");
    if (!(cfg.lambda_prime > 0.0 && cfg.lambda_prime < cfg.lambda))
        throw std::domain_error("run_cascade: need 0 < lambda' < lambda");

    CascadeResult res;
    double kappa;
    if (cfg.kappa) {
        kappa = *cfg.kappa;
    } else {
        const double c = std::min(c_lambda(cfg.lambda), 0.25);
        res.branches = kappa_for(cfg.lambda, cfg.lambda_prime, cfg.epsilon, c);
        kappa = res.branches->value;
    }
    if (!(kappa > 0.0 && kappa < 1.0))
        throw std::domain_error("run_cascade: kappa must lie in (0,1)");
    res.kappa_used = kappa;

    // Base curve preconditions.
    if (!alpha0.unit_speed) {
        for (std::size_t k = 0; k <= 256; ++k) {
            const double t = alpha0.t0 + alpha0.length() * static_cast<double>(k) / 256.0;
            if (std::fabs(alpha0.vel(t).c - 1.0) > 1e-9)
                throw CascadeError(0, "base curve is not unit speed");
        }
    }
    if (!(alpha0.length() >= 1.0 - 1e-12))
        throw CascadeError(0, "base curve measure below 1");
    if (!(min_slope_sampled(alpha0) * kappa >= 1.0 - 1e-9))
        throw CascadeError(0, "base slope below 1/kappa");
    {
        auto base_samples = sample_curve(alpha0, cfg.dense_check_samples);
        if (verify_vertical(base_samples, cfg.lambda))
            throw CascadeError(0, "base curve failed cone verification at lambda");
    }

    CascadeCurve curve(alpha0);
    res.osc_hints.assign(1, alpha0.osc_hint);

    const double rho = cfg.rho;
    std::vector<double> ells;

    HelixParams hp;
    hp.kappa = kappa;
    hp.phi = cfg.phi;
    hp.r = rho;
    hp.gain = cfg.gain;
    hp.validate();

    const double A = hp.gain * kappa / (8.0 * rho);
    const bool paper_mode = (hp.gain == 1.0) && (rho > 1000.0 - 1e-9);

    double rho_pow_i = 1.0;  // rho^i
    for (int i = 0; i < cfg.levels; ++i) {
        const double phase_scale = rho_pow_i * rho_pow_i;  // rho^{2i}
        const SmoothCurveSpec cur = curve.spec(static_cast<std::size_t>(i), res.osc_hints[i]);

        // Arc table of the current level (also yields its measure).
        detail_helix::ArcTable arc;
        arc.t0 = cur.t0;
        double ell_i;
        if (i == 0 && alpha0.unit_speed) {
            ell_i = cur.length();
        } else {
            const std::size_t panels = quadrature_panels(cur, cfg.quad);
            const std::size_t nodes = std::min<std::size_t>(
                cfg.table_nodes_cap, std::max<std::size_t>(4096, panels / 8));
            arc.table = std::make_shared<detail::MonotoneTable>(detail::cumulative_integral(
                [&](double t) { return cur.vel(t).c; }, cur.t0, cur.t1, nodes, panels));
            ell_i = arc.table->back();
        }
        ells.push_back(ell_i);

        // Zoomed measure and slope preconditions for the next refinement.
        const double big_ell = phase_scale * ell_i;
        if (!(big_ell >= 1.0 - 1e-9))
            throw CascadeError(i, "zoomed measure below 1");
        const double min_slope = min_slope_sampled(cur);
        if (!(min_slope * rho_pow_i * kappa >= 1.0 - 1e-9))
            throw CascadeError(i, "zoomed slope below 1/kappa");

        CascadeState st;
        st.level = i;
        st.ell = ell_i;
        st.slope_floor = 1.0 / (kappa * rho_pow_i);
        st.min_slope_measured = min_slope;

        const double turns = std::ceil(rho * rho * big_ell / (2.0 * kPi));
        const double xi = 2.0 * kPi * turns / big_ell;

        CascadeCurve::Level lvl;
        lvl.amplitude = A;
        lvl.xi = xi;
        lvl.cycles = turns;
        lvl.total = big_ell;
        lvl.scale = 1.0 / rho_pow_i;
        lvl.phase_scale = phase_scale;
        lvl.phi = cfg.phi;
        lvl.arc = arc;
        curve.push_level(lvl);

        double max_z = 0.0;
        for (std::size_t k = 0; k <= 64; ++k) {
            const double t = cur.t0 + cur.length() * static_cast<double>(k) / 64.0;
            max_z = std::max(max_z, cur.vel(t).c);
        }
        res.osc_hints.push_back(res.osc_hints[i] + 1.25 * xi * phase_scale * max_z);

        // Per-level verification on a dense grid.
        const std::size_t n_check = cfg.dense_check_samples;
        double drift = 0.0, zr_min = std::numeric_limits<double>::infinity(), zr_max = 0.0;
        for (std::size_t k = 0; k <= n_check; ++k) {
            const double t =
                cur.t0 + cur.length() * static_cast<double>(k) / static_cast<double>(n_check);
            Point p_prev, p_next;
            TangentVector v_prev, v_next;
            curve.eval(t, static_cast<std::size_t>(i), p_prev, v_prev);
            curve.eval(t, static_cast<std::size_t>(i) + 1, p_next, v_next);
            drift = std::max(drift, dist(p_prev, p_next));
            if (!(v_next.c > 0.0)) throw CascadeError(i, "orientation lost after perturbation");
            const double ratio = v_next.c / v_prev.c;
            zr_min = std::min(zr_min, ratio);
            zr_max = std::max(zr_max, ratio);
        }
        // Endpoint preservation.
        {
            const double d0 = dist(curve.pos(cur.t0, i), curve.pos(cur.t0, i + 1));
            const double d1 = dist(curve.pos(cur.t1, i), curve.pos(cur.t1, i + 1));
            if (d0 > 1e-12 || d1 > 1e-12) throw CascadeError(i, "endpoints moved");
        }
        const double drift_budget = kappa / rho * (1.0 / rho_pow_i) * std::max(1.0, hp.gain / 4.0);
        if (drift > drift_budget * (1.0 + 1e-9))
            throw CascadeError(i, "pointwise drift exceeds budget");
        if (paper_mode) {
            const double lo = 1.0 + 2.0 * cfg.phi * hp.beta_const * kappa * kappa;
            const double hi = 1.0 + 6.0 * cfg.phi * hp.beta_const * kappa * kappa;
            const double lo_b = std::min(lo, hi), hi_b = std::max(lo, hi);
            if (zr_min < lo_b - cfg.tol || zr_max > hi_b + cfg.tol)
                throw CascadeError(i, "vertical-speed bracket violated");
        }

        st.drift_to_next = drift;
        st.drift_budget = drift_budget;
        st.z_ratio_min = zr_min;
        st.z_ratio_max = zr_max;

        // Cone verification of the new level: coarse global samples plus a
        // fine window around an interior point at the newest wavelength.
        {
            const SmoothCurveSpec next_spec =
                curve.spec(static_cast<std::size_t>(i) + 1, res.osc_hints[i + 1]);
            SampledCurve::Meta meta;
            meta.claimed_lambda = cfg.lambda_prime;
            auto coarse = sample_curve(next_spec, n_check, meta);
            if (auto bad = verify_vertical(coarse, cfg.lambda_prime)) {
                (void)bad;
                throw CascadeError(i, "cone verification failed (coarse)");
            }
            const double wl = 2.0 * kPi / std::max(res.osc_hints[i + 1], 1.0);
            const double window = std::min(cur.length(), 8.0 * wl);
            SmoothCurveSpec win = next_spec;
            win.t0 = cur.t0 + 0.37 * (cur.length() - window);
            win.t1 = win.t0 + window;
            auto fine = sample_curve(win, n_check, meta);
            if (verify_vertical(fine, cfg.lambda_prime))
                throw CascadeError(i, "cone verification failed (fine window)");
        }

        res.states.push_back(st);
        rho_pow_i *= rho;
    }

    // Measure of the deepest curve + cumulative-drift and ratio-vs-measure
    // consistency checks.
    {
        const SmoothCurveSpec deepest =
            curve.spec(static_cast<std::size_t>(cfg.levels), res.osc_hints.back());
        const double ell_last = h2_measure(deepest, cfg.quad);
        CascadeState st;
        st.level = cfg.levels;
        st.ell = ell_last;
        st.slope_floor = 1.0 / (kappa * rho_pow_i);
        st.min_slope_measured = min_slope_sampled(deepest);
        ells.push_back(ell_last);
        // Measure ratios must respect the measured pointwise brackets.
        for (int i = 0; i < cfg.levels; ++i) {
            const double ratio = ells[static_cast<std::size_t>(i) + 1] / ells[static_cast<std::size_t>(i)];
            // The bracket for the transition i -> i+1 is stored on state i.
            const CascadeState& prev = res.states[static_cast<std::size_t>(i)];
            const double zmin = prev.z_ratio_min, zmax = prev.z_ratio_max;
            if (ratio < zmin - 1e-6 || ratio > zmax + 1e-6)
                throw CascadeError(i, "measure ratio escapes sampled bracket");
            if (!(ells[static_cast<std::size_t>(i) + 1] >=
                  std::pow(0.5, static_cast<double>(i) + 1.0) - 1e-12))
                throw CascadeError(i, "measure fell below the halving floor");
        }
        res.states.push_back(st);
    }

    SampledCurve::Meta meta;
    meta.claimed_lambda = cfg.lambda_prime;
    meta.slope_bound = 1.0 / (kappa * rho_pow_i);
    res.final_curve = sample_curve(curve.spec(static_cast<std::size_t>(cfg.levels),
                                              res.osc_hints.back()),
                                   cfg.out_samples, meta);
    res.curve = std::move(curve);
    return res;
}

// ---------------------------------------------------------------------------
// Dimension bookkeeping
// ---------------------------------------------------------------------------

struct HolderBounds {
    double m_phi = 1.0;
    double M_phi = 1.0;
    double c_phi = 0.5;
    double C_phi = 0.5;
    double dim_lo = 2.0;
    double dim_hi = 2.0;
};

inline HolderBounds holder_exponent_bounds(int phi, double rho, double kappa,
                                           double beta_const = 1.0 / 400.0) {
    if (phi != 1 && phi != -1) throw std::domain_error("holder_exponent_bounds: phi must be +/-1");
    if (!(rho > 1.0)) throw std::domain_error("holder_exponent_bounds: rho must exceed 1");
    HolderBounds hb;
    const double k2 = beta_const * kappa * kappa;
    if (phi == 1) {
        hb.m_phi = 1.0 + 2.0 * k2;
        hb.M_phi = 1.0 + 6.0 * k2;
    } else {
        hb.m_phi = 1.0 - 6.0 * k2;
        hb.M_phi = 1.0 - 2.0 * k2;
    }
    const double lr = std::log(rho);
    hb.c_phi = lr / std::log(rho * rho * hb.M_phi);
    hb.C_phi = lr / std::log(rho * rho * hb.m_phi);
    hb.dim_lo = 2.0 + std::log(hb.m_phi) / lr;
    hb.dim_hi = 2.0 + std::log(hb.M_phi) / lr;
    return hb;
}

// Dimension interval implied by a measured per-level ratio bracket.
inline std::pair<double, double> dimension_interval_from_ratios(double rho, double ratio_min,
                                                                double ratio_max) {
    const double lr = std::log(rho);
    return {2.0 + std::log(ratio_min) / lr, 2.0 + std::log(ratio_max) / lr};
}

struct BoxDimReport {
    std::vector<double> scales;
    std::vector<std::size_t> counts;
    double estimate = 0.0;
    double intercept = 0.0;
    double max_abs_residual = 0.0;
    double r_squared = 0.0;
};

namespace detail_cover {

inline std::uint64_t cell_key(long ix, long iy, long iz) {
    const std::uint64_t a = static_cast<std::uint64_t>(ix + (1L << 20)) & 0x1FFFFF;
    const std::uint64_t b = static_cast<std::uint64_t>(iy + (1L << 20)) & 0x1FFFFF;
    const std::uint64_t c = static_cast<std::uint64_t>(iz + (1L << 20)) & 0x1FFFFF;
    return (a << 42) | (b << 21) | c;
}

// Greedy gauge-ball covering count at scale s: points become centers when no
// existing center is within distance s. Candidate centers are found through a
// conservative coordinate hash.
inline std::size_t covering_number(const std::vector<Point>& pts, double s) {
    double max_xy = 0.0;
    for (const Point& p : pts) max_xy = std::max({max_xy, std::fabs(p.x), std::fabs(p.y)});
    const double zcell = s * s / 4.0 + s * max_xy + 1e-300;
    std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> grid;
    std::vector<Point> centers;
    centers.reserve(1024);
    auto cell_of = [&](const Point& p, long& ix, long& iy, long& iz) {
        ix = static_cast<long>(std::floor(p.x / s));
        iy = static_cast<long>(std::floor(p.y / s));
        iz = static_cast<long>(std::floor(p.z / zcell));
    };
    for (const Point& p : pts) {
        long ix, iy, iz;
        cell_of(p, ix, iy, iz);
        bool covered = false;
        for (long dx = -1; dx <= 1 && !covered; ++dx)
            for (long dy = -1; dy <= 1 && !covered; ++dy)
                for (long dz = -1; dz <= 1 && !covered; ++dz) {
                    auto it = grid.find(cell_key(ix + dx, iy + dy, iz + dz));
                    if (it == grid.end()) continue;
                    for (std::uint32_t ci : it->second)
                        if (dist(p, centers[ci]) <= s) {
                            covered = true;
                            break;
                        }
                }
        if (!covered) {
            centers.push_back(p);
            grid[cell_key(ix, iy, iz)].push_back(static_cast<std::uint32_t>(centers.size() - 1));
        }
    }
    return centers.size();
}

}  // namespace detail_cover

// Box-counting estimate over the given scales: greedy gauge-ball covering
// counts and a least-squares fit of log N against log(1/s).
inline BoxDimReport box_dimension_estimate(const std::vector<Point>& pts,
                                           std::vector<double> scales) {
    if (pts.size() < 1000)
        throw std::domain_error("box_dimension_estimate: need at least 1000 samples");
    if (scales.size() < 4)
        throw std::domain_error("box_dimension_estimate: need at least 4 scales");
    std::sort(scales.begin(), scales.end(), std::greater<>());
    if (!(scales.front() / scales.back() >= 100.0 * (1.0 - 1e-9)))
        throw std::domain_error("box_dimension_estimate: scales must span two decades");
    BoxDimReport rep;
    rep.scales = scales;
    rep.counts.resize(scales.size());
    for (std::size_t i = 0; i < scales.size(); ++i)
        rep.counts[i] = detail_cover::covering_number(pts, scales[i]);
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(scales.size());
    for (std::size_t i = 0; i < scales.size(); ++i) {
        const double x = std::log(1.0 / scales[i]);
        const double y = std::log(static_cast<double>(rep.counts[i]));
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    rep.estimate = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    rep.intercept = (sy - rep.estimate * sx) / n;
    double ss_res = 0.0, ss_tot = 0.0;
    const double mean_y = sy / n;
    for (std::size_t i = 0; i < scales.size(); ++i) {
        const double x = std::log(1.0 / scales[i]);
        const double y = std::log(static_cast<double>(rep.counts[i]));
        const double r = y - (rep.estimate * x + rep.intercept);
        rep.max_abs_residual = std::max(rep.max_abs_residual, std::fabs(r));
        ss_res += r * r;
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    rep.r_squared = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
    return rep;
}

inline std::vector<double> log_spaced_scales(double lo, double hi, std::size_t n) {
    if (!(lo > 0.0 && hi > lo && n >= 2))
        throw std::invalid_argument("log_spaced_scales: bad range");
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i)
        s[i] = lo * std::pow(hi / lo, static_cast<double>(i) / static_cast<double>(n - 1));
    return s;
}

}  // namespace heis
