#pragma once

#include <random>

#include "heis/core.hpp"

namespace heis::testing {

struct Rng {
    std::mt19937_64 gen;
    explicit Rng(std::uint64_t seed = 1234567) : gen(seed) {}

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(gen);
    }

    Point point(double box = 2.0) {
        return {uniform(-box, box), uniform(-box, box), uniform(-box, box)};
    }

    // Random element of the vertical double cone.
    Point cone_point(double lambda, double box = 2.0) {
        const double x = uniform(-box, box), y = uniform(-box, box);
        const double base = lambda * (x * x + y * y);
        const double z = base * (1.0 + uniform(0.0, 3.0)) + uniform(0.0, 0.5);
        return {x, y, uniform(-1.0, 1.0) < 0.0 ? -z : z};
    }
};

}  // namespace heis::testing
