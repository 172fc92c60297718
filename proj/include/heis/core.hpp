#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace heis {

inline constexpr double kDefaultTol = 1e-12;
inline constexpr double kPi = 3.14159265358979323846;

// Group element in exponential coordinates (x, y, z). The center is the
// z-axis; the product twists the z coordinate by half the signed area of
// the horizontal parts.
struct Point {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
};

// Left-trivialized Lie algebra element: coefficients on the frame X, Y, Z.
struct TangentVector {
    double a = 0.0;
    double b = 0.0;
    double c = 0.0;
};

inline Point group_mul(const Point& p, const Point& q) {
    return {p.x + q.x, p.y + q.y, p.z + q.z + 0.5 * (p.x * q.y - q.x * p.y)};
}

inline Point group_inv(const Point& p) { return {-p.x, -p.y, -p.z}; }

// b^{-1} · a, the displacement of a seen from b.
inline Point group_diff(const Point& a, const Point& b) { return group_mul(group_inv(b), a); }

inline double pi_norm_sq(const Point& p) { return p.x * p.x + p.y * p.y; }
inline double pi_norm(const Point& p) { return std::hypot(p.x, p.y); }
inline double pi_norm(const TangentVector& v) { return std::hypot(v.a, v.b); }

inline double koranyi_norm(const Point& p) {
    const double h = pi_norm_sq(p);
    return std::sqrt(std::sqrt(h * h + 16.0 * p.z * p.z));
}

inline double dist(const Point& a, const Point& b) { return koranyi_norm(group_diff(a, b)); }

// Homogeneous dilation (x,y,z) -> (rx, ry, r^2 z); group automorphism that
// scales the gauge by r.
inline Point dilate(double r, const Point& p) {
    if (!(r > 0.0)) throw std::domain_error("dilate: scale must be positive");
    return {r * p.x, r * p.y, r * r * p.z};
}

inline TangentVector dilate(double r, const TangentVector& v) {
    if (!(r > 0.0)) throw std::domain_error("dilate: scale must be positive");
    return {r * v.a, r * v.b, r * r * v.c};
}

// Adjoint action on the Lie algebra: Ad_g(v) = v + omega(pi(g), pi(v)) Z
// with omega the area form on the horizontal plane.
inline TangentVector adjoint(const Point& g, const TangentVector& v) {
    return {v.a, v.b, v.c + g.x * v.b - g.y * v.a};
}

// Vertical double cone |z| >= lambda (x^2 + y^2). Membership is closed and
// scale invariant; `tol` gives boundary slack for points produced by
// floating-point constructions.
inline bool in_vcone(double lambda, const Point& p, double tol = kDefaultTol) {
    if (!(lambda > 0.0)) throw std::domain_error("in_vcone: lambda must be positive");
    return std::fabs(p.z) >= lambda * pi_norm_sq(p) - tol;
}

enum class ConeSign { plus, minus, zero };

inline ConeSign vcone_sign(const Point& p, double tol = kDefaultTol) {
    if (p.z > tol) return ConeSign::plus;
    if (p.z < -tol) return ConeSign::minus;
    return ConeSign::zero;
}

// Two-dimensional vertical subgroup: the plane spanned by the z-axis and the
// horizontal direction at angle theta. Stored angle is normalized to [0, pi).
struct VerticalPlane {
    double theta = 0.0;

    VerticalPlane() = default;
    explicit VerticalPlane(double angle) {
        constexpr double pi = 3.14159265358979323846;
        double t = std::fmod(angle, pi);
        if (t < 0.0) t += pi;
        theta = t;
    }

    // Unit vector along the plane's horizontal line.
    void direction(double& dx, double& dy) const {
        dx = std::cos(theta);
        dy = std::sin(theta);
    }
    // Horizontal unit normal.
    void normal(double& nx, double& ny) const {
        nx = -std::sin(theta);
        ny = std::cos(theta);
    }
};

// Gauge distance from p to the plane. The vertical coordinate is free along
// the plane, so the infimum is attained with a purely horizontal offset and
// equals the Euclidean distance of pi(p) to the plane's horizontal line.
inline double dist_to_plane(const Point& p, const VerticalPlane& w) {
    double nx, ny;
    w.normal(nx, ny);
    return std::fabs(p.x * nx + p.y * ny);
}

// Flat cone around a vertical plane: d(p, W) <= L |p|.
inline bool in_ilip_cone(const VerticalPlane& w, double L, const Point& p,
                         double tol = kDefaultTol) {
    if (!(L > 0.0 && L < 1.0)) throw std::domain_error("in_ilip_cone: L must lie in (0,1)");
    return dist_to_plane(p, w) <= L * koranyi_norm(p) + tol;
}

// Smallest aperture L* such that the vertical cone with parameter lambda is
// contained in every plane cone with aperture L >= L*.
inline double cone_containment_threshold(double lambda) {
    if (!(lambda > 0.0))
        throw std::domain_error("cone_containment_threshold: lambda must be positive");
    return std::pow(1.0 + 16.0 * lambda * lambda, -0.25);
}

// Monotonicity constant min{1/2, lambda^2} of the coarse order bound on
// lambda-vertical sets.
inline double c_lambda(double lambda) {
    if (!(lambda > 0.0)) throw std::domain_error("c_lambda: lambda must be positive");
    return std::min(0.5, lambda * lambda);
}

// Diameter constant for the compact lens p VCone^+ ∩ q VCone^-.
inline double compact_intersection_const(double lambda) {
    const double c = c_lambda(lambda);
    return std::sqrt(1.0 / (4.0 * c * lambda)) + std::sqrt(1.0 / c);
}

}  // namespace heis
