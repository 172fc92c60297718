#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "heis/core.hpp"
#include "helpers.hpp"

using namespace heis;
using heis::testing::Rng;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

TEST_CASE("group law and inverse") {
    const Point e{0, 0, 0};
    const Point x{1, 0, 0};
    const Point y{0, 1, 0};

    SECTION("identity and inverse") {
        auto r = group_mul(x, e);
        REQUIRE(r.x == 1.0);
        REQUIRE(r.y == 0.0);
        REQUIRE(r.z == 0.0);
        auto inv = group_mul(x, group_inv(x));
        REQUIRE(inv.x == 0.0);
        REQUIRE(inv.z == 0.0);
    }

    SECTION("half-area twist") {
        const Point p = group_mul(x, y);
        REQUIRE_THAT(p.z, WithinAbs(0.5, 1e-15));
        REQUIRE(p.x == 1.0);
        REQUIRE(p.y == 1.0);
    }

    SECTION("associativity on random triples") {
        Rng rng(11);
        for (int k = 0; k < 2000; ++k) {
            const Point a = rng.point(), b = rng.point(), c = rng.point();
            const Point lhs = group_mul(group_mul(a, b), c);
            const Point rhs = group_mul(a, group_mul(b, c));
            REQUIRE_THAT(lhs.x, WithinAbs(rhs.x, 1e-12));
            REQUIRE_THAT(lhs.y, WithinAbs(rhs.y, 1e-12));
            REQUIRE_THAT(lhs.z, WithinAbs(rhs.z, 1e-12));
        }
    }

    SECTION("difference formula for the vertical coordinate") {
        Rng rng(12);
        for (int k = 0; k < 1000; ++k) {
            const Point a = rng.point(), b = rng.point();
            const double expected = a.z - b.z + 0.5 * (a.x * b.y - b.x * a.y);
            REQUIRE_THAT(group_diff(a, b).z, WithinAbs(expected, 1e-12));
        }
    }
}

TEST_CASE("gauge norm") {
    REQUIRE(koranyi_norm({0, 0, 0}) == 0.0);
    REQUIRE_THAT(koranyi_norm({1, 0, 0}), WithinAbs(1.0, 1e-15));
    REQUIRE_THAT(koranyi_norm({0, 0, 1}), WithinAbs(2.0, 1e-15));

    SECTION("homogeneity under dilation") {
        Rng rng(13);
        for (int k = 0; k < 2000; ++k) {
            const Point p = rng.point();
            const double r = rng.uniform(0.01, 100.0);
            REQUIRE_THAT(koranyi_norm(dilate(r, p)), WithinRel(r * koranyi_norm(p), 1e-12));
        }
    }
}

TEST_CASE("distance") {
    SECTION("axis values") {
        for (double t : {0.25, 1.0, 7.5}) {
            REQUIRE_THAT(dist({0, 0, 0}, {0, 0, t}), WithinRel(2.0 * std::sqrt(t), 1e-14));
        }
        const Point p{0.4, -0.7, 0.2};
        REQUIRE(dist(p, p) == 0.0);
    }

    SECTION("left invariance") {
        Rng rng(14);
        for (int k = 0; k < 2000; ++k) {
            const Point g = rng.point(), a = rng.point(), b = rng.point();
            REQUIRE_THAT(dist(group_mul(g, a), group_mul(g, b)),
                         WithinAbs(dist(a, b), 1e-12));
        }
    }

    SECTION("metric axioms on random triples") {
        Rng rng(15);
        for (int k = 0; k < 20000; ++k) {
            const Point a = rng.point(), b = rng.point(), c = rng.point();
            const double dab = dist(a, b), dba = dist(b, a);
            REQUIRE_THAT(dab, WithinAbs(dba, 1e-12));
            REQUIRE(dab >= 0.0);
            REQUIRE(dist(a, c) <= dab + dist(b, c) + 1e-12);
        }
    }
}

TEST_CASE("dilation") {
    Rng rng(16);
    SECTION("unit scale and the quadratic center") {
        const Point p = rng.point();
        const Point q = dilate(1.0, p);
        REQUIRE(q.x == p.x);
        REQUIRE(q.z == p.z);
        const Point one{1, 1, 1};
        const Point d = dilate(2.0, one);
        REQUIRE(d.x == 2.0);
        REQUIRE(d.y == 2.0);
        REQUIRE(d.z == 4.0);
    }
    SECTION("automorphism and metric scaling") {
        for (int k = 0; k < 2000; ++k) {
            const Point a = rng.point(), b = rng.point();
            const double r = rng.uniform(0.05, 20.0);
            const Point lhs = dilate(r, group_mul(a, b));
            const Point rhs = group_mul(dilate(r, a), dilate(r, b));
            REQUIRE_THAT(lhs.z, WithinAbs(rhs.z, 1e-10));
            REQUIRE_THAT(dist(dilate(r, a), dilate(r, b)), WithinRel(r * dist(a, b), 1e-12));
        }
    }
    SECTION("rejects nonpositive scales") {
        const Point unit{1, 0, 0};
        REQUIRE_THROWS_AS(dilate(0.0, unit), std::domain_error);
        REQUIRE_THROWS_AS(dilate(-2.0, unit), std::domain_error);
    }
}

TEST_CASE("vertical cone membership") {
    REQUIRE(in_vcone(1.0, {0, 0, 5}));
    REQUIRE_FALSE(in_vcone(1.0, {1, 0, 0.5}));
    REQUIRE(in_vcone(1.0, {1, 1, 2}));  // boundary included

    SECTION("scale invariance") {
        Rng rng(17);
        for (int k = 0; k < 2000; ++k) {
            const Point p = rng.point();
            const double r = rng.uniform(0.05, 20.0);
            REQUIRE(in_vcone(0.7, p) == in_vcone(0.7, dilate(r, p)));
        }
    }

    SECTION("sign classification") {
        REQUIRE(vcone_sign({0, 0, 1}) == ConeSign::plus);
        REQUIRE(vcone_sign({0, 0, -1}) == ConeSign::minus);
        REQUIRE(vcone_sign({1, 0, 0}) == ConeSign::zero);
    }
}

TEST_CASE("distance to vertical planes") {
    const VerticalPlane xz_plane(0.0);  // the plane y = 0

    SECTION("plane members and the center") {
        REQUIRE_THAT(dist_to_plane({3.0, 0.0, 5.0}, xz_plane), WithinAbs(0.0, 1e-15));
        const VerticalPlane w(1.1);
        REQUIRE_THAT(dist_to_plane({0.0, 0.0, 9.0}, w), WithinAbs(0.0, 1e-15));
    }

    SECTION("closed-form value") {
        REQUIRE_THAT(dist_to_plane({3.0, 4.0, 0.0}, xz_plane), WithinAbs(4.0, 1e-14));
    }

    SECTION("direct minimization over the plane agrees") {
        // The gauge distance to a plane point is unimodal in each coordinate,
        // so a nested ternary search is an independent minimization oracle.
        Rng rng(18);
        for (int k = 0; k < 20; ++k) {
            const Point p = rng.point(1.5);
            const VerticalPlane w(rng.uniform(0.0, 3.1));
            double dx, dy;
            w.direction(dx, dy);
            auto over_zeta = [&](double u) {
                double lo = -12.0, hi = 12.0;
                for (int it = 0; it < 100; ++it) {
                    const double m1 = lo + (hi - lo) / 3.0, m2 = hi - (hi - lo) / 3.0;
                    if (dist(p, {u * dx, u * dy, m1}) < dist(p, {u * dx, u * dy, m2}))
                        hi = m2;
                    else
                        lo = m1;
                }
                return dist(p, {u * dx, u * dy, 0.5 * (lo + hi)});
            };
            double lo = -12.0, hi = 12.0;
            for (int it = 0; it < 100; ++it) {
                const double m1 = lo + (hi - lo) / 3.0, m2 = hi - (hi - lo) / 3.0;
                if (over_zeta(m1) < over_zeta(m2))
                    hi = m2;
                else
                    lo = m1;
            }
            const double best = over_zeta(0.5 * (lo + hi));
            REQUIRE_THAT(dist_to_plane(p, w), WithinAbs(best, 1e-6));
            REQUIRE(dist_to_plane(p, w) <= best + 1e-12);
        }
    }
}

TEST_CASE("plane cone membership") {
    const VerticalPlane yz_plane(0.5 * kPi);  // x = 0
    SECTION("members and the center") {
        REQUIRE(in_ilip_cone(VerticalPlane(0.7), 0.3, {0, 0, 1}));
        REQUIRE_FALSE(in_ilip_cone(yz_plane, 0.5, {1, 0, 0}));
    }
    SECTION("plane points pass for every aperture") {
        const VerticalPlane w(0.9);
        double dx, dy;
        w.direction(dx, dy);
        REQUIRE(in_ilip_cone(w, 0.05, {2.0 * dx, 2.0 * dy, -3.0}));
    }
}

TEST_CASE("cone containment threshold") {
    SECTION("limit toward flat cones") {
        REQUIRE_THAT(cone_containment_threshold(1e-8), WithinAbs(1.0, 1e-9));
    }
    SECTION("closed forms") {
        // 1 + 16 (15/16) = 16, fourth root 2
        REQUIRE_THAT(cone_containment_threshold(std::sqrt(15.0) / 4.0), WithinAbs(0.5, 1e-14));
        // 1 + 16 (3/16) = 4, fourth root sqrt(2)
        REQUIRE_THAT(cone_containment_threshold(std::sqrt(3.0) / 4.0),
                     WithinAbs(1.0 / std::sqrt(2.0), 1e-14));
    }
    SECTION("sampled containment over a plane family") {
        Rng rng(19);
        const double lambda = 0.8;
        const double L = cone_containment_threshold(lambda);
        for (int k = 0; k < 10000; ++k) {
            const Point p = rng.cone_point(lambda);
            for (int j = 0; j < 36; ++j) {
                const VerticalPlane w(kPi * j / 36.0);
                REQUIRE(in_ilip_cone(w, L, p, 1e-9));
            }
        }
    }
}

TEST_CASE("order-related constants") {
    REQUIRE(c_lambda(1.0) == 0.5);
    REQUIRE(c_lambda(0.5) == 0.25);
    REQUIRE(c_lambda(10.0) == 0.5);

    SECTION("lens diameter constant values") {
        REQUIRE_THAT(compact_intersection_const(1.0),
                     WithinAbs(std::sqrt(0.5) + std::sqrt(2.0), 1e-12));
        REQUIRE_THAT(compact_intersection_const(0.25), WithinAbs(8.0, 1e-12));
    }

    SECTION("nonincreasing in lambda") {
        double prev = 1e300;
        for (double lam = 0.1; lam <= 10.0; lam *= 1.3) {
            const double cur = compact_intersection_const(lam);
            REQUIRE(cur <= prev + 1e-12);
            prev = cur;
        }
    }

    SECTION("sampled lens bound") {
        Rng rng(20);
        const double lambda = 1.0;
        const double C = compact_intersection_const(lambda);
        for (int trial = 0; trial < 6; ++trial) {
            const Point q = rng.cone_point(lambda, 0.8);
            const Point qq = q.z > 0 ? q : group_inv(q);
            const double dq = koranyi_norm(qq);
            std::vector<Point> lens;
            const double a = std::sqrt(2.0 * std::fabs(qq.z) / lambda) + 1.0;
            while (lens.size() < 4000) {
                Point v{rng.uniform(-a, a), rng.uniform(-a, a),
                        rng.uniform(0.0, 2.0 * std::fabs(qq.z))};
                if (!in_vcone(lambda, v, 0.0) || v.z <= 0.0) continue;
                const Point rel = group_diff(v, qq);
                if (!in_vcone(lambda, rel, 0.0) || rel.z > 0.0) continue;
                lens.push_back(v);
            }
            double far = 0.0, diam = 0.0;
            for (const Point& v : lens) far = std::max(far, koranyi_norm(v));
            for (std::size_t i = 0; i < lens.size(); i += 20)
                for (std::size_t j = i + 1; j < lens.size(); j += 20)
                    diam = std::max(diam, dist(lens[i], lens[j]));
            REQUIRE(far <= C * dq * (1.0 + 1e-9));
            REQUIRE(diam <= C * dq * (1.0 + 1e-9));
        }
    }
}

TEST_CASE("order relation is not transitive globally") {
    const Point X{1, 0, 0}, Y{0, 1, 0};
    auto prec = [](const Point& p, const Point& q) { return group_diff(q, p).z > 0.0; };
    REQUIRE(prec(X, group_inv(Y)));
    REQUIRE(prec(group_inv(Y), group_inv(X)));
    REQUIRE(prec(group_inv(X), Y));
    REQUIRE(prec(Y, X));
}
