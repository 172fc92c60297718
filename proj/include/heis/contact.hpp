#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "heis/core.hpp"
#include "heis/curve.hpp"
#include "heis/detail/parallel.hpp"
#include "heis/detail/quad.hpp"

namespace heis {

// Lebesgue volume of the unit gauge ball (pi^2 / 8); Lebesgue measure is the
// Haar measure in these coordinates.
inline constexpr double kUnitBallVolume = 1.2337005501361697;

// Scalar potential with its left-invariant frame derivatives. Fields vanish
// outside the declared support ball.
struct ContactPotential {
    std::function<double(const Point&)> value;
    std::function<double(const Point&)> x_deriv;  // X[psi]
    std::function<double(const Point&)> y_deriv;  // Y[psi]
    std::function<double(const Point&)> z_deriv;  // Z[psi]
    // Optional fused evaluator returning (Y[psi], -X[psi], psi) in one call;
    // the flow integrator prefers it.
    std::function<TangentVector(const Point&)> field;
    Point support_center{};
    double support_radius = 0.0;  // 0 = everywhere
};

// Polynomial bump (1 - |v|^4)^4 on the unit ball, translated/dilated to the
// requested support. Closed-form frame derivatives, C^3 at the boundary.
inline ContactPotential make_poly_bump(double amplitude = 1.0, Point center = {},
                                       double radius = 1.0) {
    if (!(radius > 0.0)) throw std::domain_error("make_poly_bump: radius must be positive");
    auto rel = [center, radius](const Point& v) {
        return dilate(1.0 / radius, group_mul(group_inv(center), v));
    };
    auto gauge4 = [](const Point& w) {
        const double h = pi_norm_sq(w);
        return h * h + 16.0 * w.z * w.z;
    };
    ContactPotential pot;
    pot.support_center = center;
    pot.support_radius = radius;
    pot.value = [=](const Point& v) {
        const Point w = rel(v);
        const double q = gauge4(w);
        if (q >= 1.0) return 0.0;
        const double s = 1.0 - q;
        return amplitude * s * s * s * s;
    };
    // Frame derivatives of q = (x^2+y^2)^2 + 16 z^2:
    //   X[q] = 4x(x^2+y^2) - 16 y z,  Y[q] = 4y(x^2+y^2) + 16 x z,  Z[q] = 32 z.
    // Left translation leaves frame derivatives alone; dilation by 1/radius
    // scales X,Y by 1/radius and Z by 1/radius^2.
    auto common = [=](const Point& v, int which) {
        const Point w = rel(v);
        const double q = gauge4(w);
        if (q >= 1.0) return 0.0;
        const double s = 1.0 - q;
        const double outer = -4.0 * amplitude * s * s * s;
        const double h = pi_norm_sq(w);
        double dq, scale;
        if (which == 0) {
            dq = 4.0 * w.x * h - 16.0 * w.y * w.z;
            scale = 1.0 / radius;
        } else if (which == 1) {
            dq = 4.0 * w.y * h + 16.0 * w.x * w.z;
            scale = 1.0 / radius;
        } else {
            dq = 32.0 * w.z;
            scale = 1.0 / (radius * radius);
        }
        return outer * dq * scale;
    };
    pot.x_deriv = [common](const Point& v) { return common(v, 0); };
    pot.y_deriv = [common](const Point& v) { return common(v, 1); };
    pot.z_deriv = [common](const Point& v) { return common(v, 2); };
    pot.field = [=](const Point& v) -> TangentVector {
        const Point w = rel(v);
        const double q = gauge4(w);
        if (q >= 1.0) return {0.0, 0.0, 0.0};
        const double s = 1.0 - q;
        const double s3 = s * s * s;
        const double outer = -4.0 * amplitude * s3;
        const double h = pi_norm_sq(w);
        const double xq = 4.0 * w.x * h - 16.0 * w.y * w.z;
        const double yq = 4.0 * w.y * h + 16.0 * w.x * w.z;
        return {outer * yq / radius, -outer * xq / radius, amplitude * s3 * s};
    };
    return pot;
}

// Contact vector field of a potential: Y[psi] X - X[psi] Y + psi Z.
inline TangentVector contact_field(const ContactPotential& pot, const Point& p) {
    if (pot.field) return pot.field(p);
    return {pot.y_deriv(p), -pot.x_deriv(p), pot.value(p)};
}

namespace detail_contact {

inline Point coordinate_velocity(const ContactPotential& pot, const Point& p) {
    const TangentVector v = contact_field(pot, p);
    return {v.a, v.b, v.c - 0.5 * v.a * p.y + 0.5 * v.b * p.x};
}

}  // namespace detail_contact

// Fixed-step classical Runge-Kutta flow of the contact field. steps = 0
// picks 256 steps per unit time.
inline Point flow(const ContactPotential& pot, double time, const Point& p, int steps = 0) {
    if (time == 0.0) return p;
    if (steps <= 0) steps = std::max(16, static_cast<int>(std::ceil(std::fabs(time) * 256.0)));
    if (pot.support_radius > 0.0 && dist(p, pot.support_center) >= pot.support_radius) return p;
    const double h = time / static_cast<double>(steps);
    Point cur = p;
    for (int s = 0; s < steps; ++s) {
        const Point k1 = detail_contact::coordinate_velocity(pot, cur);
        auto advance = [&](const Point& k, double frac) {
            return Point{cur.x + frac * h * k.x, cur.y + frac * h * k.y, cur.z + frac * h * k.z};
        };
        const Point k2 = detail_contact::coordinate_velocity(pot, advance(k1, 0.5));
        const Point k3 = detail_contact::coordinate_velocity(pot, advance(k2, 0.5));
        const Point k4 = detail_contact::coordinate_velocity(pot, advance(k3, 1.0));
        cur.x += h / 6.0 * (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x);
        cur.y += h / 6.0 * (k1.y + 2.0 * k2.y + 2.0 * k3.y + k4.y);
        cur.z += h / 6.0 * (k1.z + 2.0 * k2.z + 2.0 * k3.z + k4.z);
    }
    return cur;
}

// ---------------------------------------------------------------------------
// Composable contact maps
// ---------------------------------------------------------------------------

class ContactMap {
  public:
    struct Ball {
        Point center;
        double r = 0.0;
    };

    ContactMap() = default;

    static ContactMap identity() { return ContactMap(); }

    static ContactMap from_flow(ContactPotential pot, double time, int steps = 0) {
        ContactMap m;
        if (steps <= 0) steps = std::max(16, static_cast<int>(std::ceil(std::fabs(time) * 256.0)));
        m.steps_.push_back(FlowStep{std::move(pot), time, steps});
        return m;
    }

    static ContactMap dilation(double r) {
        if (!(r > 0.0)) throw std::domain_error("ContactMap::dilation: r must be positive");
        ContactMap m;
        m.steps_.push_back(DilateStep{r});
        return m;
    }

    static ContactMap left_translation(const Point& g) {
        ContactMap m;
        m.steps_.push_back(TranslateStep{g});
        return m;
    }

    // Disjointly supported rescaled copies of a unit-scale model map:
    // v in B(c_j, r_j)  ->  c_j · s_{r_j}( model( s_{1/r_j}( c_j^{-1} v ) ) ).
    static ContactMap ball_layer(std::shared_ptr<const ContactMap> model,
                                 std::vector<Ball> balls) {
        ContactMap m;
        auto layer = std::make_shared<LayerStep>();
        layer->model = std::move(model);
        layer->balls = std::move(balls);
        layer->build_index();
        m.steps_.push_back(std::move(layer));
        return m;
    }

    // Composition this ∘ inner (inner applied first).
    ContactMap after(const ContactMap& inner) const {
        ContactMap m;
        m.steps_ = inner.steps_;
        m.steps_.insert(m.steps_.end(), steps_.begin(), steps_.end());
        return m;
    }

    Point operator()(const Point& v) const {
        Point cur = v;
        for (const auto& s : steps_) cur = apply(s, cur);
        return cur;
    }

    std::size_t depth() const { return steps_.size(); }

  private:
    struct FlowStep {
        ContactPotential pot;
        double time;
        int steps;
    };
    struct DilateStep {
        double r;
    };
    struct TranslateStep {
        Point g;
    };
    struct LayerStep {
        std::shared_ptr<const ContactMap> model;
        std::vector<Ball> balls;
        double cell_xy = 1.0, cell_z = 1.0;
        std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> grid;

        static std::uint64_t key(long a, long b, long c) {
            const std::uint64_t ka = static_cast<std::uint64_t>(a + (1L << 20)) & 0x1FFFFF;
            const std::uint64_t kb = static_cast<std::uint64_t>(b + (1L << 20)) & 0x1FFFFF;
            const std::uint64_t kc = static_cast<std::uint64_t>(c + (1L << 20)) & 0x1FFFFF;
            return (ka << 42) | (kb << 21) | kc;
        }

        void build_index() {
            double max_r = 0.0, max_zext = 0.0;
            for (const Ball& b : balls) {
                max_r = std::max(max_r, b.r);
                max_zext = std::max(max_zext, b.r * b.r / 4.0 +
                                                  0.5 * b.r * (std::fabs(b.center.x) +
                                                               std::fabs(b.center.y)));
            }
            cell_xy = std::max(max_r, 1e-12);
            cell_z = std::max(max_zext, 1e-12);
            for (std::uint32_t j = 0; j < balls.size(); ++j) {
                const Ball& b = balls[j];
                const double zext = b.r * b.r / 4.0 +
                                    0.5 * b.r * (std::fabs(b.center.x) + std::fabs(b.center.y));
                const long x0 = static_cast<long>(std::floor((b.center.x - b.r) / cell_xy));
                const long x1 = static_cast<long>(std::floor((b.center.x + b.r) / cell_xy));
                const long y0 = static_cast<long>(std::floor((b.center.y - b.r) / cell_xy));
                const long y1 = static_cast<long>(std::floor((b.center.y + b.r) / cell_xy));
                const long z0 = static_cast<long>(std::floor((b.center.z - zext) / cell_z));
                const long z1 = static_cast<long>(std::floor((b.center.z + zext) / cell_z));
                for (long ix = x0; ix <= x1; ++ix)
                    for (long iy = y0; iy <= y1; ++iy)
                        for (long iz = z0; iz <= z1; ++iz)
                            grid[key(ix, iy, iz)].push_back(j);
            }
        }

        const Ball* find(const Point& v) const {
            const long ix = static_cast<long>(std::floor(v.x / cell_xy));
            const long iy = static_cast<long>(std::floor(v.y / cell_xy));
            const long iz = static_cast<long>(std::floor(v.z / cell_z));
            const auto it = grid.find(key(ix, iy, iz));
            if (it == grid.end()) return nullptr;
            for (std::uint32_t j : it->second)
                if (dist(v, balls[j].center) < balls[j].r) return &balls[j];
            return nullptr;
        }
    };
    using Step = std::variant<FlowStep, DilateStep, TranslateStep, std::shared_ptr<LayerStep>>;

    static Point apply(const Step& s, const Point& v) {
        if (const auto* fs = std::get_if<FlowStep>(&s)) return flow(fs->pot, fs->time, v, fs->steps);
        if (const auto* ds = std::get_if<DilateStep>(&s)) return dilate(ds->r, v);
        if (const auto* ts = std::get_if<TranslateStep>(&s)) return group_mul(ts->g, v);
        const auto& layer = *std::get<std::shared_ptr<LayerStep>>(s);
        const Ball* b = layer.find(v);
        if (!b) return v;
        const Point inner = dilate(1.0 / b->r, group_mul(group_inv(b->center), v));
        return group_mul(b->center, dilate(b->r, (*layer.model)(inner)));
    }

    std::vector<Step> steps_;
};

// ---------------------------------------------------------------------------
// Differentials
// ---------------------------------------------------------------------------

template <class MapFn>
std::array<TangentVector, 3> frame_differential(const MapFn& m, const Point& p,
                                                double h = 1e-5) {
    const Point mp = m(p);
    const Point mp_inv = group_inv(mp);
    std::array<TangentVector, 3> cols;
    const Point dirs[3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    for (int i = 0; i < 3; ++i) {
        const Point e{dirs[i].x * h, dirs[i].y * h, dirs[i].z * h};
        const Point plus = group_mul(mp_inv, m(group_mul(p, e)));
        const Point minus = group_mul(mp_inv, m(group_mul(p, group_inv(e))));
        cols[static_cast<std::size_t>(i)] = {(plus.x - minus.x) / (2.0 * h),
                                             (plus.y - minus.y) / (2.0 * h),
                                             (plus.z - minus.z) / (2.0 * h)};
    }
    return cols;
}

template <class MapFn>
double horizontal_jacobian(const MapFn& m, const Point& p, double h = 1e-5) {
    const auto cols = frame_differential(m, p, h);
    return cols[0].a * cols[1].b - cols[1].a * cols[0].b;
}

template <class MapFn>
double full_jacobian(const MapFn& m, const Point& p, double h = 1e-5) {
    double J[3][3];
    const Point dirs[3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    for (int i = 0; i < 3; ++i) {
        const Point dp{dirs[i].x * h, dirs[i].y * h, dirs[i].z * h};
        const Point plus = m(Point{p.x + dp.x, p.y + dp.y, p.z + dp.z});
        const Point minus = m(Point{p.x - dp.x, p.y - dp.y, p.z - dp.z});
        J[0][i] = (plus.x - minus.x) / (2.0 * h);
        J[1][i] = (plus.y - minus.y) / (2.0 * h);
        J[2][i] = (plus.z - minus.z) / (2.0 * h);
    }
    return J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
           J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
           J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
}

struct JacobianIdentityReport {
    double full = 0.0;
    double horizontal = 0.0;
    double rel_err = 0.0;
};

// Compares the space Jacobian with the square of the horizontal one.
template <class MapFn>
JacobianIdentityReport jacobian_identity_check(const MapFn& m, const Point& p,
                                               double h = 1e-5) {
    JacobianIdentityReport rep;
    rep.full = full_jacobian(m, p, h);
    rep.horizontal = horizontal_jacobian(m, p, h);
    const double sq = rep.horizontal * rep.horizontal;
    rep.rel_err = std::fabs(rep.full - sq) / std::max(std::fabs(rep.full), 1e-300);
    return rep;
}

struct LinearizedJacobianReport {
    std::vector<double> times;
    std::vector<double> errors;   // |J(t) - 1 - 2 Z[psi] t|
    std::vector<double> ratios;   // error(t) / error(t/2); 4 for a clean t^2 term
    double K_fit = 0.0;           // fitted constant in error <= K t^2
    bool sign_ok = true;          // sign(J - 1) matches sign(Z[psi] t)
};

// Short-time expansion of the flow Jacobian: J = 1 + 2 Z[psi] t + O(t^2),
// checked by a halving sequence.
inline LinearizedJacobianReport linearized_jacobian_check(const ContactPotential& pot,
                                                          double t0, const Point& p,
                                                          int halvings = 3,
                                                          double fd_step = 1e-5) {
    LinearizedJacobianReport rep;
    const double zpsi = pot.z_deriv(p);
    double t = t0;
    for (int k = 0; k <= halvings; ++k) {
        auto m = [&](const Point& q) { return flow(pot, t, q); };
        const double J = full_jacobian(m, p, fd_step);
        rep.times.push_back(t);
        rep.errors.push_back(std::fabs(J - 1.0 - 2.0 * zpsi * t));
        rep.K_fit = std::max(rep.K_fit, rep.errors.back() / (t * t));
        if (zpsi != 0.0 && (J - 1.0) * (zpsi * t) < 0.0) rep.sign_ok = false;
        t *= 0.5;
    }
    for (std::size_t k = 0; k + 1 < rep.errors.size(); ++k)
        rep.ratios.push_back(rep.errors[k] / std::max(rep.errors[k + 1], 1e-300));
    return rep;
}

// ---------------------------------------------------------------------------
// Model map and ball reductions
// ---------------------------------------------------------------------------

// Low-discrepancy points of the closed unit gauge ball.
inline std::vector<Point> qmc_unit_ball(std::size_t n) {
    std::vector<Point> pts;
    pts.reserve(n);
    detail::Halton3 h;
    while (pts.size() < n) {
        auto u = h.next();
        Point p{2.0 * u[0] - 1.0, 2.0 * u[1] - 1.0, (2.0 * u[2] - 1.0) / 4.0};
        if (koranyi_norm(p) <= 1.0) pts.push_back(p);
    }
    return pts;
}

// The model perturbation: a single contact-flow map supported in the unit
// ball, non-volume-preserving, with its measured horizontal-Jacobian deficit
// kappa = (1 - mean J^H)/2 and a cached quadrature rule for ball integrals.
struct Alpha0 {
    ContactPotential pot;
    double time = 0.0;
    int steps = 0;
    double kappa = 0.0;
    double jh_mean = 1.0;
    std::shared_ptr<const ContactMap> map;
    std::vector<Point> qmc;
    std::vector<Point> qmc_image;
    std::vector<double> qmc_jh;
};

struct Alpha0Options {
    double amplitude = 1.0;
    std::vector<double> t_schedule = {0.1, 0.2, 0.4, 0.8};
    std::size_t qmc_n = 1u << 16;
    double kappa_floor = 0.008;
    double fd_step = 1e-5;
};

struct Alpha0Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline Alpha0 build_alpha0(const Alpha0Options& opts = {}) {
    Alpha0 out;
    out.pot = make_poly_bump(opts.amplitude);
    out.qmc = qmc_unit_ball(opts.qmc_n);
    for (double t : opts.t_schedule) {
        auto map = std::make_shared<ContactMap>(ContactMap::from_flow(out.pot, t));
        std::vector<double> jh(out.qmc.size());
        std::vector<Point> img(out.qmc.size());
        bool positive = true;
        detail::parallel_for(out.qmc.size(), [&](std::size_t k) {
            img[k] = (*map)(out.qmc[k]);
            jh[k] = horizontal_jacobian(*map, out.qmc[k], opts.fd_step);
        });
        double mean = 0.0;
        for (std::size_t k = 0; k < jh.size(); ++k) {
            if (!(jh[k] > 0.0)) positive = false;
            mean += jh[k];
        }
        mean /= static_cast<double>(jh.size());
        const double kappa = 0.5 * (1.0 - mean);
        if (positive && kappa >= opts.kappa_floor) {
            out.time = t;
            out.steps = std::max(16, static_cast<int>(std::ceil(t * 256.0)));
            out.kappa = kappa;
            out.jh_mean = mean;
            out.map = std::move(map);
            out.qmc_image = std::move(img);
            out.qmc_jh = std::move(jh);
            return out;
        }
    }
    throw Alpha0Error("build_alpha0: no schedule entry reached the kappa floor");
}

struct BallReductionResult {
    ContactMap alpha;
    double r_used = 0.0;
    double before = 0.0;  // integral of |J^H_beta| over the ball
    double after = 0.0;   // integral of |J^H_{beta o alpha}|
    int halvings = 0;
};

struct BallReductionOptions {
    std::size_t ball_qmc = 2048;
    int max_halvings = 4;
    std::size_t cross_check = 48;
    double cross_tol = 2e-3;
    double fd_step = 1e-5;
};

struct ReductionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Composes beta with a rescaled copy of the model map on B(p, r), halving r
// until the measured ratio clears 1 - kappa/2. Integrals use the model's
// cached rule through the horizontal chain rule, cross-checked against
// direct finite differences on a subsample.
inline BallReductionResult ball_reduction(const ContactMap& beta, const Alpha0& a0,
                                          const Point& p, double r,
                                          const BallReductionOptions& opts = {}) {
    if (!(r > 0.0)) throw std::domain_error("ball_reduction: r must be positive");
    const std::size_t n = std::min(opts.ball_qmc, a0.qmc.size());
    if (n == 0) throw std::domain_error("ball_reduction: model cache empty");
    const double target = 1.0 - a0.kappa / 2.0;
    BallReductionResult res;
    for (int h = 0; h <= opts.max_halvings; ++h) {
        const double vol = r * r * r * r * kUnitBallVolume;
        std::vector<double> before_vals(n), after_vals(n);
        detail::parallel_for(n, [&](std::size_t k) {
            const Point at_before = group_mul(p, dilate(r, a0.qmc[k]));
            const Point at_after = group_mul(p, dilate(r, a0.qmc_image[k]));
            before_vals[k] = std::fabs(horizontal_jacobian(beta, at_before, opts.fd_step));
            after_vals[k] =
                std::fabs(horizontal_jacobian(beta, at_after, opts.fd_step) * a0.qmc_jh[k]);
        });
        double before = 0.0, after = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            before += before_vals[k];
            after += after_vals[k];
        }
        before = before / static_cast<double>(n) * vol;
        after = after / static_cast<double>(n) * vol;
        if (after <= target * before) {
            std::vector<ContactMap::Ball> balls{{p, r}};
            res.alpha = ContactMap::ball_layer(a0.map, std::move(balls));
            res.r_used = r;
            res.before = before;
            res.after = after;
            res.halvings = h;
            // Direct evaluation agrees with the chain-rule shortcut.
            const ContactMap composed = beta.after(res.alpha);
            const std::size_t stride = std::max<std::size_t>(1, n / std::max<std::size_t>(1, opts.cross_check));
            for (std::size_t k = 0; k < n; k += stride) {
                const Point at = group_mul(p, dilate(r, a0.qmc[k]));
                const double direct = std::fabs(horizontal_jacobian(composed, at, opts.fd_step));
                if (std::fabs(direct - after_vals[k]) >
                    opts.cross_tol * std::max(1.0, std::fabs(direct)))
                    throw ReductionError("ball_reduction: chain-rule cross-check failed");
            }
            return res;
        }
        r *= 0.5;
    }
    throw ReductionError("ball_reduction: no admissible radius found above the floor");
}

// ---------------------------------------------------------------------------
// Multiscale reduction over the unit ball
// ---------------------------------------------------------------------------

struct VitaliLevel {
    int index = 0;
    double F = 0.0;               // mass at the start of the level
    std::size_t n_balls = 0;
    double max_radius = 0.0;
    double captured_frac = 0.0;   // measured captured mass / F
    std::size_t exact_checked = 0;
    double exact_worst_ratio = 0.0;
};

struct VitaliOptions {
    std::size_t f_qmc = 1u << 15;
    std::size_t ball_qmc = 192;
    std::size_t exact_cap = 160;
    double capture_margin = 0.06;
    std::size_t max_balls = 8000000;
    int max_pass_halvings = 6;
    double boundary_margin = 0.995;
    double fd_step = 1e-5;
    std::size_t displacement_samples = 10000;
};

struct VitaliError : std::runtime_error {
    int level;
    VitaliError(int lvl, const std::string& what)
        : std::runtime_error("vitali level " + std::to_string(lvl) + ": " + what), level(lvl) {}
};

struct VitaliResult {
    std::vector<VitaliLevel> levels;
    std::vector<double> F;  // F_0 .. F_n
    double kappa = 0.0;
    double displacement_max = 0.0;
    double boundary_identity_max = 0.0;
    ContactMap beta;
};

namespace detail_vitali {

// Disjointness index for one radius class: flat per-cell entries with cheap
// coordinate prefilters before the exact gauge test.
struct PassGrid {
    double r = 0.0;
    double cell_xy = 1.0, cell_z = 1.0;
    struct Entry {
        double x, y, z, r;
    };
    std::unordered_map<std::uint64_t, std::vector<Entry>> cells;

    static std::uint64_t key(long a, long b, long c) {
        const std::uint64_t ka = static_cast<std::uint64_t>(a + (1L << 20)) & 0x1FFFFF;
        const std::uint64_t kb = static_cast<std::uint64_t>(b + (1L << 20)) & 0x1FFFFF;
        const std::uint64_t kc = static_cast<std::uint64_t>(c + (1L << 20)) & 0x1FFFFF;
        return (ka << 42) | (kb << 21) | kc;
    }

    void init(double radius) {
        r = radius;
        cell_xy = radius;
        cell_z = radius * radius / 4.0 + radius;  // twist-aware vertical extent
    }

    void insert(const Point& p, double radius) {
        const long ix = static_cast<long>(std::floor(p.x / cell_xy));
        const long iy = static_cast<long>(std::floor(p.y / cell_xy));
        const long iz = static_cast<long>(std::floor(p.z / cell_z));
        cells[key(ix, iy, iz)].push_back({p.x, p.y, p.z, radius});
    }

    // True when B(p, radius) is disjoint from every ball stored here.
    bool disjoint(const Point& p, double radius) const {
        const double reach = radius + r;
        const long sx = static_cast<long>(std::floor(reach / cell_xy)) + 1;
        const double zreach = reach * reach / 4.0 +
                              0.5 * reach * (std::fabs(p.x) + std::fabs(p.y) + reach);
        const long sz = static_cast<long>(std::floor(zreach / cell_z)) + 1;
        const long ix = static_cast<long>(std::floor(p.x / cell_xy));
        const long iy = static_cast<long>(std::floor(p.y / cell_xy));
        const long iz = static_cast<long>(std::floor(p.z / cell_z));
        for (long dx = -sx; dx <= sx; ++dx)
            for (long dy = -sx; dy <= sx; ++dy)
                for (long dz = -sz; dz <= sz; ++dz) {
                    const auto it = cells.find(key(ix + dx, iy + dy, iz + dz));
                    if (it == cells.end()) continue;
                    for (const Entry& e : it->second) {
                        const double ax = p.x - e.x;
                        if (ax > reach || ax < -reach) continue;
                        const double ay = p.y - e.y;
                        if (ay > reach || ay < -reach) continue;
                        const double sum = radius + e.r + 1e-12;
                        if (dist(p, Point{e.x, e.y, e.z}) < sum) return false;
                    }
                }
        return true;
    }
};

}  // namespace detail_vitali

// Greedy multiscale mass reduction: per level, a disjoint family of balls
// with radii capped by eps * 2^{-i-1} captures at least half the current
// mass, a rescaled model map is applied in each, and the mass must drop by
// the factor 1 - kappa/2.
inline VitaliResult vitali_cascade(double eps, int max_levels, const Alpha0& a0,
                                   const VitaliOptions& opts = {}) {
    if (!(eps > 0.0)) throw std::domain_error("vitali_cascade: eps must be positive");
    if (max_levels < 1) throw std::domain_error("vitali_cascade: need at least one level");

    VitaliResult out;
    out.kappa = a0.kappa;
    out.beta = ContactMap::identity();

    const std::vector<Point> mass_pts = qmc_unit_ball(opts.f_qmc);
    std::vector<double> jh_cache(mass_pts.size());
    auto measure_mass = [&](const ContactMap& m) {
        detail::parallel_for(mass_pts.size(), [&](std::size_t k) {
            jh_cache[k] = std::fabs(horizontal_jacobian(m, mass_pts[k], opts.fd_step));
        });
        double s = 0.0;
        for (double v : jh_cache) s += v;
        return s / static_cast<double>(mass_pts.size()) * kUnitBallVolume;
    };

    out.F.push_back(measure_mass(out.beta));
    const double F0 = out.F[0];

    for (int level = 0; level < max_levels; ++level) {
        const double F_i = out.F.back();
        if (F_i < eps * F0) break;

        const double cap = eps * std::pow(2.0, -(level + 1));

        std::vector<ContactMap::Ball> balls;
        std::vector<detail_vitali::PassGrid> grids;

        // Lattice passes: centers on left-translated copies of the group
        // lattice {(2ri, 2rj, r^2 m)}, whose minimal gauge norm is exactly 2r,
        // so same-pass balls are disjoint by construction. Each halving pass
        // fills the gaps left by the previous ones; the captured mass is
        // measured on the cached quadrature points after every pass.
        double measured_capture = 0.0;
        auto measure_capture = [&]() {
            const double sum = detail::parallel_sum(64, [&](std::size_t chunk) {
                double local = 0.0;
                const std::size_t i0 = mass_pts.size() * chunk / 64;
                const std::size_t i1 = mass_pts.size() * (chunk + 1) / 64;
                for (std::size_t k = i0; k < i1; ++k) {
                    bool inside = false;
                    for (const auto& g : grids) {
                        if (!g.disjoint(mass_pts[k], 0.0)) {
                            inside = true;
                            break;
                        }
                    }
                    if (inside) local += jh_cache[k];
                }
                return local;
            });
            return sum / static_cast<double>(mass_pts.size()) * kUnitBallVolume;
        };

        detail::Halton3 offsets;
        offsets.index = 5000 + static_cast<std::uint64_t>(level) * 131071;
        const double capture_target = (0.5 + opts.capture_margin) * F_i;
        for (int pass = 0; pass <= opts.max_pass_halvings; ++pass) {
            const double r = cap * std::pow(2.0, -pass);
            auto u = offsets.next();
            const Point sigma{2.0 * r * u[0], 2.0 * r * u[1], r * r * u[2]};
            detail_vitali::PassGrid grid;
            grid.init(r);
            const long ij_range = static_cast<long>(std::ceil(1.0 / (2.0 * r))) + 1;
            bool done = false;
            for (long i = -ij_range; i <= ij_range && !done; ++i) {
                for (long j = -ij_range; j <= ij_range && !done; ++j) {
                    const Point column = group_mul(
                        sigma, Point{2.0 * r * static_cast<double>(i),
                                     2.0 * r * static_cast<double>(j), 0.0});
                    if (pi_norm(column) - r > opts.boundary_margin) continue;
                    const long m_range =
                        static_cast<long>(std::ceil(0.27 / (r * r))) + 1;
                    for (long m = -m_range; m <= m_range; ++m) {
                        const Point p{column.x, column.y,
                                      column.z + r * r * static_cast<double>(m)};
                        if (koranyi_norm(p) + r > opts.boundary_margin) continue;
                        bool ok = true;
                        for (const auto& g : grids) {
                            if (!g.disjoint(p, r)) {
                                ok = false;
                                break;
                            }
                        }
                        if (!ok) continue;
                        balls.push_back({p, r});
                        grid.insert(p, r);
                        if (balls.size() >= opts.max_balls) {
                            done = true;
                            break;
                        }
                    }
                }
            }
            grids.push_back(std::move(grid));
            measured_capture = measure_capture();
            if (measured_capture >= capture_target || balls.size() >= opts.max_balls) break;
        }
        if (measured_capture < 0.5 * F_i)
            throw VitaliError(level, "greedy selection failed to capture half the mass");

        // Honest before/after integrals on a deterministic subsample.
        VitaliLevel lv;
        lv.index = level;
        lv.F = F_i;
        lv.n_balls = balls.size();
        for (const auto& b : balls) lv.max_radius = std::max(lv.max_radius, b.r);
        lv.captured_frac = measured_capture / F_i;
        const std::size_t n_cache = std::min(opts.ball_qmc, a0.qmc.size());
        const std::size_t stride = std::max<std::size_t>(1, balls.size() / opts.exact_cap);
        double worst = 0.0;
        std::vector<std::size_t> check_ids;
        for (std::size_t j = 0; j < balls.size(); j += stride) check_ids.push_back(j);
        std::vector<double> ratios(check_ids.size());
        detail::parallel_for(check_ids.size(), [&](std::size_t idx) {
            const auto& b = balls[check_ids[idx]];
            double before = 0.0, after = 0.0;
            for (std::size_t k = 0; k < n_cache; ++k) {
                const Point at_b = group_mul(b.center, dilate(b.r, a0.qmc[k]));
                const Point at_a = group_mul(b.center, dilate(b.r, a0.qmc_image[k]));
                before += std::fabs(horizontal_jacobian(out.beta, at_b, opts.fd_step));
                after += std::fabs(horizontal_jacobian(out.beta, at_a, opts.fd_step) *
                                   a0.qmc_jh[k]);
            }
            ratios[idx] = before > 0.0 ? after / before : 1.0;
        });
        for (double rt : ratios) worst = std::max(worst, rt);
        lv.exact_checked = check_ids.size();
        lv.exact_worst_ratio = worst;
        out.levels.push_back(lv);

        out.beta = out.beta.after(ContactMap::ball_layer(a0.map, std::move(balls)));
        const double F_next = measure_mass(out.beta);
        out.F.push_back(F_next);
        if (!(F_next <= (1.0 - a0.kappa / 2.0) * F_i))
            throw VitaliError(level, "mass failed to decay by 1 - kappa/2");
    }

    // Displacement over interior samples; exact identity outside every
    // selected ball, in particular on the boundary sphere.
    {
        auto pts = qmc_unit_ball(opts.displacement_samples);
        std::vector<double> disp(pts.size());
        detail::parallel_for(pts.size(), [&](std::size_t k) {
            disp[k] = dist(pts[k], out.beta(pts[k]));
        });
        for (double d : disp) out.displacement_max = std::max(out.displacement_max, d);
        for (std::size_t k = 0; k < 400; ++k) {
            const double ang = 2.0 * kPi * static_cast<double>(k) / 400.0;
            const double psi = -0.5 * kPi + kPi * static_cast<double>((k * 137) % 400) / 400.0;
            const double u = std::sqrt(std::max(0.0, std::cos(psi)));
            const Point p{u * std::cos(ang), u * std::sin(ang), std::sin(psi) / 4.0};
            out.boundary_identity_max =
                std::max(out.boundary_identity_max, dist(p, out.beta(p)));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Coarea consistency
// ---------------------------------------------------------------------------

struct Box {
    double xlo = -0.5, xhi = 0.5;
    double ylo = -0.5, yhi = 0.5;
    double zlo = -0.125, zhi = 0.125;

    bool contains(const Point& p) const {
        return p.x >= xlo && p.x <= xhi && p.y >= ylo && p.y <= yhi && p.z >= zlo && p.z <= zhi;
    }
    double volume() const { return (xhi - xlo) * (yhi - ylo) * (zhi - zlo); }
};

struct CoareaOptions {
    double fiber_step = 4e-3;
    double newton_tol = 1e-11;
    int newton_iters = 40;
    double fd_step = 1e-6;
    std::size_t rhs_qmc = 1u << 16;
    double c_calibration = 1.0;
    double grid_margin = 0.0;
};

struct CoareaReport {
    double lhs = 0.0;
    double rhs = 0.0;
    double ratio = 0.0;  // lhs / (c * rhs)
    std::size_t fibers_total = 0;
    std::size_t fibers_traced = 0;
    std::size_t fibers_empty = 0;
    std::size_t fibers_failed = 0;
};

namespace detail_coarea {

// 2x3 frame differential of v -> pi(m(v)).
template <class MapFn>
void pi_frame_rows(const MapFn& m, const Point& p, double h, double r1[3], double r2[3]) {
    const Point dirs[3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    for (int i = 0; i < 3; ++i) {
        const Point e{dirs[i].x * h, dirs[i].y * h, dirs[i].z * h};
        const Point plus = m(group_mul(p, e));
        const Point minus = m(group_mul(p, group_inv(e)));
        r1[i] = (plus.x - minus.x) / (2.0 * h);
        r2[i] = (plus.y - minus.y) / (2.0 * h);
    }
}

template <class MapFn>
double pi_horizontal_jacobian(const MapFn& m, const Point& p, double h) {
    double r1[3], r2[3];
    pi_frame_rows(m, p, h, r1, r2);
    return r1[0] * r2[1] - r1[1] * r2[0];
}

// Newton on the horizontal disc through q for pi(m(.)) = v.
template <class MapFn>
std::optional<Point> pin_to_fiber(const MapFn& m, const Point& q, double vx, double vy,
                                  const CoareaOptions& opts) {
    double x1 = 0.0, x2 = 0.0;
    auto value = [&](double a, double b) {
        const Point p = group_mul(q, Point{a, b, 0.0});
        const Point img = m(p);
        return std::pair<double, double>{img.x - vx, img.y - vy};
    };
    auto cur = value(x1, x2);
    for (int it = 0; it < opts.newton_iters; ++it) {
        const double n2 = cur.first * cur.first + cur.second * cur.second;
        if (std::sqrt(n2) < opts.newton_tol) return group_mul(q, Point{x1, x2, 0.0});
        const double h = opts.fd_step;
        const auto fpx = value(x1 + h, x2), fmx = value(x1 - h, x2);
        const auto fpy = value(x1, x2 + h), fmy = value(x1, x2 - h);
        const double j11 = (fpx.first - fmx.first) / (2 * h);
        const double j21 = (fpx.second - fmx.second) / (2 * h);
        const double j12 = (fpy.first - fmy.first) / (2 * h);
        const double j22 = (fpy.second - fmy.second) / (2 * h);
        const double det = j11 * j22 - j12 * j21;
        if (std::fabs(det) < 1e-14) return std::nullopt;
        double dx1 = (-cur.first * j22 + cur.second * j12) / det;
        double dx2 = (-cur.second * j11 + cur.first * j21) / det;
        double damp = 1.0;
        bool ok = false;
        for (int ls = 0; ls < 10; ++ls) {
            const auto trial = value(x1 + damp * dx1, x2 + damp * dx2);
            if (trial.first * trial.first + trial.second * trial.second < n2) {
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
    const double n2 = cur.first * cur.first + cur.second * cur.second;
    if (std::sqrt(n2) < opts.newton_tol) return group_mul(q, Point{x1, x2, 0.0});
    return std::nullopt;
}

}  // namespace detail_coarea

// Checks the fiber-measure identity on a box: the averaged fiber measures of
// pi o m against the integral of |J^H|. Fibers are traced by continuation
// along the kernel of the projected differential.
template <class MapFn>
CoareaReport coarea_check(const MapFn& m, const Box& box, std::size_t n_fibers,
                          const CoareaOptions& opts = {}) {
    CoareaReport rep;

    // Right-hand side: quadrature of |J^H_{pi o m}| over the box.
    {
        detail::Halton3 hal;
        std::vector<Point> pts;
        pts.reserve(opts.rhs_qmc);
        while (pts.size() < opts.rhs_qmc) {
            auto u = hal.next();
            pts.push_back(Point{box.xlo + (box.xhi - box.xlo) * u[0],
                                box.ylo + (box.yhi - box.ylo) * u[1],
                                box.zlo + (box.zhi - box.zlo) * u[2]});
        }
        std::vector<double> vals(pts.size());
        detail::parallel_for(pts.size(), [&](std::size_t k) {
            vals[k] = std::fabs(detail_coarea::pi_horizontal_jacobian(m, pts[k], opts.fd_step));
        });
        double s = 0.0;
        for (double v : vals) s += v;
        rep.rhs = s / static_cast<double>(pts.size()) * box.volume();
    }

    // Image rectangle for the fiber grid.
    double vx_lo = std::numeric_limits<double>::infinity(), vx_hi = -vx_lo;
    double vy_lo = vx_lo, vy_hi = -vx_lo;
    for (int ix = 0; ix <= 6; ++ix)
        for (int iy = 0; iy <= 6; ++iy)
            for (int iz = 0; iz <= 2; ++iz) {
                const Point p{box.xlo + (box.xhi - box.xlo) * ix / 6.0,
                              box.ylo + (box.yhi - box.ylo) * iy / 6.0,
                              box.zlo + (box.zhi - box.zlo) * iz / 2.0};
                const Point img = m(p);
                vx_lo = std::min(vx_lo, img.x);
                vx_hi = std::max(vx_hi, img.x);
                vy_lo = std::min(vy_lo, img.y);
                vy_hi = std::max(vy_hi, img.y);
            }
    const double mx = opts.grid_margin * (vx_hi - vx_lo);
    const double my = opts.grid_margin * (vy_hi - vy_lo);
    vx_lo -= mx;
    vx_hi += mx;
    vy_lo -= my;
    vy_hi += my;

    const std::size_t g = std::max<std::size_t>(2, static_cast<std::size_t>(
                                                       std::llround(std::sqrt(
                                                           static_cast<double>(n_fibers)))));
    const double cell_w = (vx_hi - vx_lo) / static_cast<double>(g);
    const double cell_h = (vy_hi - vy_lo) / static_cast<double>(g);
    const double cell_area = cell_w * cell_h;
    rep.fibers_total = g * g;

    // Fiber measure at one projection value: trace both directions from a
    // pinned seed, accumulating |z| chords clipped to the box. Returns false
    // on continuation failure.
    auto fiber_measure_at = [&](double vx, double vy, double& measure, bool& found) {
        measure = 0.0;
        found = false;
        std::optional<Point> seed;
        for (double frac : {0.5, 0.25, 0.75, 0.05, 0.95}) {
            const double z0 = box.zlo + (box.zhi - box.zlo) * frac;
            seed = detail_coarea::pin_to_fiber(m, Point{vx, vy, z0}, vx, vy, opts);
            if (seed) break;
        }
        if (!seed) return true;  // empty fiber
        found = true;
        for (int dir = -1; dir <= 1; dir += 2) {
            Point cur = *seed;
            for (int step_count = 0; step_count < 100000; ++step_count) {
                double r1[3], r2[3];
                detail_coarea::pi_frame_rows(m, cur, opts.fd_step, r1, r2);
                double k1 = r1[1] * r2[2] - r1[2] * r2[1];
                double k2 = r1[2] * r2[0] - r1[0] * r2[2];
                double k3 = r1[0] * r2[1] - r1[1] * r2[0];
                const double nrm = std::sqrt(k1 * k1 + k2 * k2 + k3 * k3);
                if (!(nrm > 1e-14) || k3 == 0.0) return false;
                if ((k3 > 0.0 ? 1 : -1) != dir) {
                    k1 = -k1;
                    k2 = -k2;
                    k3 = -k3;
                }
                const double h = opts.fiber_step / nrm;
                const Point pred = group_mul(cur, Point{h * k1, h * k2, h * k3});
                auto corrected = detail_coarea::pin_to_fiber(m, pred, vx, vy, opts);
                if (!corrected) return false;
                const Point nxt = *corrected;
                const double chord = std::fabs(group_diff(nxt, cur).z);
                const bool in_cur = box.contains(cur);
                const bool in_nxt = box.contains(nxt);
                if (in_cur && in_nxt) {
                    measure += chord;
                } else if (in_cur != in_nxt) {
                    double frac = 1.0;
                    if (nxt.z > box.zhi && cur.z < box.zhi)
                        frac = (box.zhi - cur.z) / (nxt.z - cur.z);
                    else if (nxt.z < box.zlo && cur.z > box.zlo)
                        frac = (box.zlo - cur.z) / (nxt.z - cur.z);
                    measure += chord * std::min(1.0, std::max(0.0, frac));
                }
                cur = nxt;
                if (cur.z > box.zhi + 2.0 * opts.fiber_step ||
                    cur.z < box.zlo - 2.0 * opts.fiber_step)
                    break;
                if (cur.x < box.xlo - 0.2 || cur.x > box.xhi + 0.2 || cur.y < box.ylo - 0.2 ||
                    cur.y > box.yhi + 0.2)
                    break;
            }
        }
        return true;
    };

    auto center_of = [&](std::size_t i, std::size_t j, double fx, double fy, double& vx,
                         double& vy) {
        vx = vx_lo + cell_w * (static_cast<double>(i) + fx);
        vy = vy_lo + cell_h * (static_cast<double>(j) + fy);
    };

    std::vector<double> fiber_measure(g * g, 0.0);
    std::vector<int> fiber_status(g * g, 0);  // 0 empty, 1 traced, 2 failed

    detail::parallel_for(g * g, [&](std::size_t idx) {
        const std::size_t i = idx % g, j = idx / g;
        double vx, vy, measure;
        bool found;
        center_of(i, j, 0.5, 0.5, vx, vy);
        if (!fiber_measure_at(vx, vy, measure, found)) {
            fiber_status[idx] = 2;
            return;
        }
        fiber_status[idx] = found ? 1 : 0;
        fiber_measure[idx] = measure;
    });

    // Midpoint integration is biased on cells straddling the boundary of the
    // fiber support; refine those on a sub-grid.
    double peak = 0.0;
    for (double v : fiber_measure) peak = std::max(peak, v);
    std::vector<std::size_t> boundary;
    for (std::size_t idx = 0; idx < g * g; ++idx) {
        if (fiber_status[idx] == 2) continue;
        const std::size_t i = idx % g, j = idx / g;
        // The outermost ring always straddles the support boundary.
        bool mixed = (i == 0 || j == 0 || i + 1 == g || j + 1 == g);
        for (int d = 0; d < 4 && !mixed; ++d) {
            const long ni = static_cast<long>(i) + (d == 0) - (d == 1);
            const long nj = static_cast<long>(j) + (d == 2) - (d == 3);
            if (ni < 0 || nj < 0 || ni >= static_cast<long>(g) || nj >= static_cast<long>(g))
                continue;
            const std::size_t nidx = static_cast<std::size_t>(nj) * g +
                                     static_cast<std::size_t>(ni);
            if (fiber_status[nidx] == 2) continue;
            if (std::fabs(fiber_measure[idx] - fiber_measure[nidx]) > 0.25 * peak) mixed = true;
        }
        if (mixed) boundary.push_back(idx);
    }
    const int sub = 4;
    detail::parallel_for(boundary.size(), [&](std::size_t b) {
        const std::size_t idx = boundary[b];
        const std::size_t i = idx % g, j = idx / g;
        double acc = 0.0;
        bool bad = false;
        for (int si = 0; si < sub && !bad; ++si)
            for (int sj = 0; sj < sub && !bad; ++sj) {
                double vx, vy, measure;
                bool found;
                center_of(i, j, (si + 0.5) / sub, (sj + 0.5) / sub, vx, vy);
                if (!fiber_measure_at(vx, vy, measure, found))
                    bad = true;
                else
                    acc += measure;
            }
        if (!bad) fiber_measure[idx] = acc / (sub * sub);
    });

    for (std::size_t idx = 0; idx < g * g; ++idx) {
        if (fiber_status[idx] == 1) {
            ++rep.fibers_traced;
            rep.lhs += fiber_measure[idx] * cell_area;
        } else if (fiber_status[idx] == 2) {
            ++rep.fibers_failed;
        } else {
            ++rep.fibers_empty;
            rep.lhs += fiber_measure[idx] * cell_area;  // refined empties may carry mass
        }
    }
    rep.ratio = rep.lhs / (opts.c_calibration * rep.rhs);
    return rep;
}

}  // namespace heis
