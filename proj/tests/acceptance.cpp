// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Heavy fixtures (the demo cascades, the multiscale reduction) are
// built once and shared between the criteria that consume them.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <random>
#include <string>
#include <vector>

#include "heis/cascade.hpp"
#include "heis/contact.hpp"
#include "heis/core.hpp"
#include "heis/curve.hpp"
#include "heis/graph.hpp"

using namespace heis;

namespace {

struct Failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define ACCEPT(cond, what)                                      \
    do {                                                        \
        if (!(cond)) throw Failure(std::string("FAILED: ") + what); \
    } while (0)

int g_failures = 0;

template <class Fn>
void criterion(int id, const std::string& name, double budget_seconds, Fn&& fn) {
    const auto start = std::chrono::steady_clock::now();
    std::string detail;
    bool pass = true;
    try {
        detail = fn();
    } catch (const std::exception& e) {
        pass = false;
        detail = e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (pass && budget_seconds > 0.0 && secs > budget_seconds) {
        pass = false;
        detail += " [runtime budget exceeded]";
    }
    std::printf("[%s] criterion %2d: %-34s (%7.2f s)  %s\n", pass ? "PASS" : "FAIL", id,
                name.c_str(), secs, detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), pattern, a, b, c);
    return buf;
}

// Shared heavy state.
CascadeResult g_cascade_up, g_cascade_down;
bool g_have_cascades = false;
Alpha0 g_alpha0;
bool g_have_alpha0 = false;
VitaliResult g_vitali;
bool g_have_vitali = false;

CascadeConfig demo_config(int phi) {
    CascadeConfig cfg;
    cfg.lambda = 1.0;
    cfg.lambda_prime = 0.5;
    cfg.epsilon = 0.5;
    cfg.phi = phi;
    cfg.levels = 6;
    cfg.rho = 4.0;
    cfg.kappa = 0.8;
    cfg.gain = 4.0;
    cfg.dense_check_samples = 1024;
    cfg.out_samples = 4096;
    return cfg;
}

std::string criterion_metric_suite() {
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<double> unif(-2.0, 2.0);
    std::uniform_real_distribution<double> scale(0.05, 20.0);
    auto rp = [&] { return Point{unif(rng), unif(rng), unif(rng)}; };
    double worst = 0.0;
    for (int k = 0; k < 100000; ++k) {
        const Point a = rp(), b = rp(), c = rp(), g = rp();
        const double r = scale(rng);
        const double dab = dist(a, b);
        const double tri = dist(a, c) - (dab + dist(b, c));
        worst = std::max(worst, tri / std::max(1.0, dist(a, c)));
        worst = std::max(worst, std::fabs(dist(group_mul(g, a), group_mul(g, b)) - dab) /
                                    std::max(dab, 1e-6));
        worst = std::max(worst,
                         std::fabs(dist(dilate(r, a), dilate(r, b)) - r * dab) /
                             std::max(r * dab, 1e-6));
        worst = std::max(worst,
                         std::fabs(koranyi_norm(dilate(r, a)) - r * koranyi_norm(a)) /
                             std::max(r * koranyi_norm(a), 1e-6));
    }
    ACCEPT(worst <= 1e-10, fmt("max relative violation %.3e", worst));
    return fmt("max relative violation %.3e over 1e5 tuples", worst);
}

std::string criterion_order_suite() {
    // Exact four-step cycle of the order relation.
    const Point X{1, 0, 0}, Y{0, 1, 0};
    ACCEPT(precedes(X, group_inv(Y)), "X before Y^{-1}");
    ACCEPT(precedes(group_inv(Y), group_inv(X)), "Y^{-1} before X^{-1}");
    ACCEPT(precedes(group_inv(X), Y), "X^{-1} before Y");
    ACCEPT(precedes(Y, X), "Y before X");

    // Transitivity for cone-linked triples at lambda = 1.
    std::mt19937_64 rng(102);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    std::uniform_real_distribution<double> pos(0.0, 1.0);
    auto cone_step = [&] {
        const double x = unif(rng), y = unif(rng);
        const double z = (x * x + y * y) * (1.0 + 3.0 * pos(rng)) + 0.01 * pos(rng);
        return Point{x, y, z};
    };
    for (int k = 0; k < 10000; ++k) {
        const Point a{unif(rng), unif(rng), unif(rng)};
        const Point b = group_mul(a, cone_step());
        const Point c = group_mul(b, cone_step());
        ACCEPT(precedes(a, b) && precedes(b, c), "construction sanity");
        ACCEPT(precedes(a, c), "transitivity violated inside the cone");
    }

    // Coarse monotonicity constants on a verified vertical curve.
    auto helix = fixtures::slope_helix(0.5, 2.0 * kPi);  // slope exactly 2
    CurveMeta meta;
    meta.claimed_lambda = 1.0;
    auto samples = sample_curve(helix, 500, meta);
    ACCEPT(!verify_vertical(samples, 1.0).has_value(), "fixture cone check");
    const auto rep = monotonicity_constants_check(samples, 1.0, 200000);
    ACCEPT(rep.triples_checked >= 10000, "triple budget");
    ACCEPT(rep.z_violations == 0 && rep.d_violations == 0,
           fmt("ratio violations: %g z, %g d", static_cast<double>(rep.z_violations),
               static_cast<double>(rep.d_violations)));
    ACCEPT(rep.min_z_ratio >= 0.5 && rep.min_d_ratio >= 0.5, "ratio floor");
    return fmt("min ratios z %.4f, d %.4f over %g triples", rep.min_z_ratio, rep.min_d_ratio,
               static_cast<double>(rep.triples_checked));
}

std::string criterion_measure_oracle() {
    const double T = 2.25;
    const auto t0 = std::chrono::steady_clock::now();
    const double mv = h2_measure(fixtures::vertical_segment(T));
    const double mh = h2_measure(fixtures::horizontal_segment(2.0));
    const double mc = h2_measure(fixtures::circle());
    const double each =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 3.0;
    ACCEPT(std::fabs(mv - T) / T <= 1e-8, fmt("vertical %.12g vs %.12g", mv, T));
    ACCEPT(std::fabs(mh) <= 1e-8, fmt("horizontal %.3e", mh));
    // Round horizontal trace: constant trivialized vertical speed one half,
    // so one full turn has measure pi (independent symbolic oracle).
    ACCEPT(std::fabs(mc - kPi) / kPi <= 1e-8, fmt("closed curve %.12g vs pi", mc));
    ACCEPT(each < 1.0, fmt("per-oracle runtime %.2f s", each));
    return fmt("vertical %.10g, horizontal %.1e, closed %.10g", mv, mh, mc);
}

std::string criterion_helix() {
    HelixParams hp;
    hp.kappa = 0.1;
    hp.phi = +1;
    hp.r = 1024.0;
    auto base = fixtures::slope_helix(hp.kappa, 2.0 * kPi);  // slope 10, unit speed
    auto tilde = helix_perturb(base, hp);

    const double e0 = dist(base.pos(base.t0), tilde.pos(tilde.t0));
    const double e1 = dist(base.pos(base.t1), tilde.pos(tilde.t1));
    ACCEPT(e0 <= 1e-12 && e1 <= 1e-12, fmt("endpoint moves %.2e / %.2e", e0, e1));

    double sup = 0.0;
    for (int k = 0; k <= 16384; ++k) {
        const double t = static_cast<double>(k) / 16384.0;
        sup = std::max(sup, dist(base.pos(t), tilde.pos(t)));
    }
    ACCEPT(sup <= hp.kappa / hp.r, fmt("sup displacement %.3e vs %.3e", sup, hp.kappa / hp.r));

    const double lo = 1.0 + 2.0 * hp.beta_const * hp.kappa * hp.kappa;
    const double hi = 1.0 + 6.0 * hp.beta_const * hp.kappa * hp.kappa;
    const double ratio = h2_measure(tilde) / h2_measure(base);
    ACCEPT(ratio >= lo - 1e-9 && ratio <= hi + 1e-9,
           fmt("measure ratio %.12f outside [%.6f, %.6f]", ratio, lo, hi));
    return fmt("ratio %.9f in [1+2bk^2, 1+6bk^2], sup move %.2e", ratio, sup);
}

std::string criterion_cascade() {
    for (int phi : {+1, -1}) {
        const auto cfg = demo_config(phi);
        auto res = run_cascade(fixtures::vertical_segment(1.0), cfg);
        ACCEPT(res.states.size() == 7, "level count");
        for (int i = 0; i < cfg.levels; ++i) {
            const auto& st = res.states[static_cast<std::size_t>(i)];
            const double ratio = res.states[static_cast<std::size_t>(i) + 1].ell / st.ell;
            if (phi == +1) ACCEPT(ratio > 1.0, fmt("level %g ratio %.6f not above one",
                                                   static_cast<double>(i), ratio));
            if (phi == -1) ACCEPT(ratio < 1.0, fmt("level %g ratio %.6f not below one",
                                                   static_cast<double>(i), ratio));
            ACCEPT(ratio >= st.z_ratio_min - 1e-6 && ratio <= st.z_ratio_max + 1e-6,
                   "measure ratio escapes the re-verified bracket");
        }
        // Cumulative drift tails against 2 kappa rho^{-j-1}.
        for (int j = 0; j < cfg.levels; ++j) {
            double tail = 0.0;
            for (int n = j; n < cfg.levels; ++n)
                tail += res.states[static_cast<std::size_t>(n)].drift_to_next;
            ACCEPT(tail <= 2.0 * res.kappa_used * std::pow(cfg.rho, -(j + 1.0)),
                   fmt("drift tail at level %g: %.3e", static_cast<double>(j), tail));
        }
        ACCEPT(!verify_vertical(res.final_curve, cfg.lambda_prime).has_value(),
               "final curve cone check");
        if (phi == +1)
            g_cascade_up = std::move(res);
        else
            g_cascade_down = std::move(res);
    }
    g_have_cascades = true;
    return fmt("6 levels both ways; measures %.4f (up) / %.4f (down)",
               g_cascade_up.states.back().ell, g_cascade_down.states.back().ell);
}

std::vector<Point> dense_cascade_points(const CascadeResult& res, std::size_t n) {
    std::vector<Point> pts;
    pts.reserve(n);
    const auto& c = res.curve;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = c.t0() + (c.t1() - c.t0()) * static_cast<double>(i) /
                                      static_cast<double>(n - 1);
        pts.push_back(c.pos(t, c.levels().size()));
    }
    return pts;
}

std::string criterion_box_dimension() {
    ACCEPT(g_have_cascades, "cascade fixtures unavailable");

    // Reference fixtures across two decades.
    std::vector<Point> vert;
    for (std::size_t i = 0; i < 400000; ++i)
        vert.push_back({0.0, 0.0, static_cast<double>(i) / 399999.0});
    const auto rv = box_dimension_estimate(vert, log_spaced_scales(0.012, 1.2, 12));
    ACCEPT(std::fabs(rv.estimate - 2.0) <= 0.1, fmt("vertical estimate %.3f", rv.estimate));

    std::vector<Point> horiz;
    for (std::size_t i = 0; i < 200000; ++i)
        horiz.push_back({static_cast<double>(i) / 199999.0, 0.0, 0.0});
    const auto rh = box_dimension_estimate(horiz, log_spaced_scales(0.005, 0.5, 12));
    ACCEPT(std::fabs(rh.estimate - 1.0) <= 0.1, fmt("horizontal estimate %.3f", rh.estimate));

    // Demo cascades must deviate in the direction of phi (sign test only).
    const auto scales = log_spaced_scales(0.004, 0.4, 12);
    const auto pu = dense_cascade_points(g_cascade_up, 4000000);
    const auto ru = box_dimension_estimate(pu, scales);
    const auto pd = dense_cascade_points(g_cascade_down, 4000000);
    const auto rd = box_dimension_estimate(pd, scales);
    ACCEPT(ru.estimate > 2.0, fmt("growing cascade estimate %.4f not above 2", ru.estimate));
    ACCEPT(rd.estimate < 2.0, fmt("shrinking cascade estimate %.4f not below 2", rd.estimate));
    return fmt("fixtures %.3f/%.3f; cascade %.4f up",
               rv.estimate, rh.estimate, ru.estimate) +
           fmt(", %.4f down (magnitudes reported, signs asserted)", rd.estimate);
}

std::string criterion_tracing() {
    ILipGraph g1, g2;
    g1.plane = VerticalPlane(0.0);
    g2.plane = VerticalPlane(0.5 * kPi);
    g1.L = g2.L = 0.25;
    g1.f = g2.f = [](double, double) { return 0.0; };

    ACCEPT(winding_number_check(g1, g2, Point{0, 0, 0}, 1.0, 64) == 1, "winding (planes)");
    const double lam = intersection_cone_lambda(0.25, g1.plane, g2.plane);

    const auto axis = trace_intersection(g1, g2, -0.5, 0.5, 1.0 / 64.0, lam);
    double worst = 0.0;
    for (const auto& p : axis.p) worst = std::max(worst, pi_norm(p));
    ACCEPT(worst < 1e-8, fmt("axis recovery error %.2e", worst));

    ILipGraph b1 = g1, b2 = g2;
    b1.f = [](double u, double z) { return 0.02 * std::exp(-(u * u + z * z)); };
    b2.f = [](double u, double z) { return -0.015 * std::exp(-(u * u + z * z)); };
    ACCEPT(winding_number_check(b1, b2, Point{0, 0, 0}, 1.0, 64) == 1, "winding (perturbed)");
    const auto curve = trace_intersection(b1, b2, -0.4, 0.4, 1.0 / 64.0, lam);
    double res_sum = 0.0;
    for (const auto& p : curve.p)
        res_sum = std::max(res_sum,
                           std::fabs(signed_distance(b1, p)) + std::fabs(signed_distance(b2, p)));
    ACCEPT(res_sum < 1e-8, fmt("surface residual %.2e", res_sum));
    ACCEPT(!verify_vertical(curve, lam).has_value(), "traced curve cone check");
    return fmt("certified lambda %.3f, residual %.1e, %g samples", lam, res_sum,
               static_cast<double>(curve.size()));
}

std::string criterion_contact_suite() {
    const auto pot = make_poly_bump();
    std::mt19937_64 rng(103);
    std::uniform_real_distribution<double> unif(-0.55, 0.55);
    std::uniform_real_distribution<double> unifz(-0.14, 0.14);
    auto inside = [&] {
        for (;;) {
            const Point p{unif(rng), unif(rng), unifz(rng)};
            if (koranyi_norm(p) < 0.8) return p;
        }
    };

    // Divergence identity by finite differences of the coordinate field.
    double worst_div = 0.0;
    for (int k = 0; k < 60; ++k) {
        const Point p = inside();
        auto f = [&](const Point& q) { return detail_contact::coordinate_velocity(pot, q); };
        const double h = 1e-5;
        const double div = (f({p.x + h, p.y, p.z}).x - f({p.x - h, p.y, p.z}).x +
                            f({p.x, p.y + h, p.z}).y - f({p.x, p.y - h, p.z}).y +
                            f({p.x, p.y, p.z + h}).z - f({p.x, p.y, p.z - h}).z) /
                           (2 * h);
        const double expect = 2.0 * pot.z_deriv(p);
        worst_div = std::max(worst_div,
                             std::fabs(div - expect) / std::max(1.0, std::fabs(expect)));
    }
    ACCEPT(worst_div < 1e-4, fmt("divergence identity error %.2e", worst_div));

    // Jacobian square identity on flow maps.
    const auto m = ContactMap::from_flow(pot, 0.35);
    double worst_sq = 0.0;
    for (int k = 0; k < 40; ++k)
        worst_sq = std::max(worst_sq, jacobian_identity_check(m, inside()).rel_err);
    ACCEPT(worst_sq < 1e-5, fmt("square identity error %.2e", worst_sq));

    // Short-time expansion with clean quadratic remainder.
    int checked = 0;
    for (int k = 0; k < 12 && checked < 6; ++k) {
        const Point p = inside();
        if (std::fabs(pot.z_deriv(p)) < 0.2) continue;
        ++checked;
        const auto rep = linearized_jacobian_check(pot, 2e-3, p);
        ACCEPT(rep.sign_ok, "expansion sign");
        for (double r : rep.ratios)
            ACCEPT(r > 3.5 && r < 4.5, fmt("halving ratio %.3f", r));
    }
    ACCEPT(checked == 6, "sample coverage");
    return fmt("div %.1e, square %.1e, halving ratios in 4 +- 0.5", worst_div, worst_sq);
}

std::string criterion_ball_reduction() {
    Alpha0Options opts;
    g_alpha0 = build_alpha0(opts);
    g_have_alpha0 = true;
    ACCEPT(g_alpha0.kappa > 0.005, fmt("kappa %.5f below floor", g_alpha0.kappa));

    std::mt19937_64 rng(104);
    std::uniform_real_distribution<double> unif(-0.5, 0.5);
    const auto id = ContactMap::identity();
    BallReductionOptions bopts;
    bopts.ball_qmc = 4096;
    double worst_ratio = 0.0;
    for (int k = 0; k < 10; ++k) {
        Point p{unif(rng), unif(rng), 0.2 * unif(rng)};
        while (koranyi_norm(p) > 0.7) p = Point{unif(rng), unif(rng), 0.2 * unif(rng)};
        const double r = 0.25 * (1.0 - koranyi_norm(p));
        const auto red = ball_reduction(id, g_alpha0, p, r, bopts);
        worst_ratio = std::max(worst_ratio, red.after / red.before);
    }
    ACCEPT(worst_ratio <= 1.0 - g_alpha0.kappa / 2.0,
           fmt("worst ratio %.5f vs %.5f", worst_ratio, 1.0 - g_alpha0.kappa / 2.0));
    return fmt("kappa %.4f (t=%.2f), worst ball ratio %.5f", g_alpha0.kappa, g_alpha0.time,
               worst_ratio);
}

std::string criterion_vitali() {
    ACCEPT(g_have_alpha0, "model map unavailable");
    VitaliOptions vopts;
    g_vitali = vitali_cascade(0.3, 3, g_alpha0, vopts);
    g_have_vitali = true;
    ACCEPT(g_vitali.F.size() >= 4, "level count");
    const double bound = std::pow(1.0 - g_alpha0.kappa / 2.0, 3.0) * g_vitali.F[0];
    ACCEPT(g_vitali.F[3] <= bound, fmt("F_3 %.5f above bound %.5f", g_vitali.F[3], bound));
    ACCEPT(g_vitali.displacement_max < 0.3,
           fmt("displacement %.4f reached epsilon", g_vitali.displacement_max));
    ACCEPT(g_vitali.boundary_identity_max <= 1e-12,
           fmt("boundary moved %.2e", g_vitali.boundary_identity_max));
    double balls = 0.0;
    for (const auto& lv : g_vitali.levels) balls += static_cast<double>(lv.n_balls);
    return fmt("F_3/F_0 = %.4f (bound %.4f), displacement %.3f",
               g_vitali.F[3] / g_vitali.F[0], bound / g_vitali.F[0],
               g_vitali.displacement_max) +
           fmt(", %g balls", balls);
}

std::string criterion_coarea() {
    ACCEPT(g_have_vitali, "reduced map unavailable");
    Box box;
    CoareaOptions opts;
    opts.fiber_step = 2e-3;

    const auto cal = coarea_check(ContactMap::identity(), box, 576, opts);
    ACCEPT(cal.fibers_failed == 0, "identity fibers failed");
    const double c = cal.ratio;

    auto opts2 = opts;
    opts2.c_calibration = c;
    const auto dil = coarea_check(ContactMap::dilation(1.5), box, 576, opts2);
    ACCEPT(std::fabs(dil.ratio - 1.0) <= 0.02, fmt("dilation ratio %.4f", dil.ratio));

    const auto red = coarea_check(g_vitali.beta, box, 576, opts2);
    ACCEPT(red.fibers_failed <= red.fibers_total / 50, "reduced-map fiber failures");
    const double predicted = red.rhs / cal.rhs;
    const double measured = red.lhs / cal.lhs;
    ACCEPT(measured < 1.0, "fiber integral did not drop");
    ACCEPT(std::fabs(measured / predicted - 1.0) <= 0.10,
           fmt("measured %.4f vs predicted %.4f", measured, predicted));
    return fmt("c %.4f, dilation %.4f, reduction measured/predicted %.4f", c, dil.ratio,
               measured / predicted);
}

}  // namespace

int main() {
    std::printf("acceptance suite (workers: %u)\n", detail::worker_count());
    criterion(1, "metric and group suite", 5.0, criterion_metric_suite);
    criterion(2, "order suite", 60.0, criterion_order_suite);
    criterion(3, "measure oracle", 10.0, criterion_measure_oracle);
    criterion(4, "helix perturbation", 30.0, criterion_helix);
    criterion(5, "demo cascade", 300.0, criterion_cascade);
    criterion(6, "box dimension", 600.0, criterion_box_dimension);
    criterion(7, "intersection tracing", 120.0, criterion_tracing);
    criterion(8, "contact flow suite", 60.0, criterion_contact_suite);
    criterion(9, "single-ball reduction", 120.0, criterion_ball_reduction);
    criterion(10, "multiscale reduction", 900.0, criterion_vitali);
    criterion(11, "coarea consistency", 600.0, criterion_coarea);
    if (g_failures == 0) {
        std::printf("all criteria passed\n");
        return 0;
    }
    std::printf("%d criterion(s) failed\n", g_failures);
    return 1;
}
