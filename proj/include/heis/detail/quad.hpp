#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "heis/detail/parallel.hpp"

namespace heis::detail {

// Composite Simpson over [a,b]. Blocks of two panels are independent, so the
// sum parallelizes with a deterministic chunked reduction.
template <class Fn>
double simpson(Fn&& f, double a, double b, std::size_t panels) {
    if (!(b > a)) {
        if (b == a) return 0.0;
        throw std::invalid_argument("simpson: empty interval");
    }
    if (panels < 2) panels = 2;
    if (panels % 2) ++panels;
    const std::size_t blocks = panels / 2;
    const double h = (b - a) / static_cast<double>(panels);
    const std::size_t n_chunks =
        std::min<std::size_t>(blocks, std::max<std::size_t>(1, worker_count() * 8));
    auto chunk_sum = [&](std::size_t c) {
        const std::size_t k0 = blocks * c / n_chunks;
        const std::size_t k1 = blocks * (c + 1) / n_chunks;
        double s = 0.0;
        double left = f(a + 2.0 * static_cast<double>(k0) * h);
        for (std::size_t k = k0; k < k1; ++k) {
            const double x0 = a + 2.0 * static_cast<double>(k) * h;
            const double mid = f(x0 + h);
            const double right = (k + 1 == blocks) ? f(b) : f(x0 + 2.0 * h);
            s += left + 4.0 * mid + right;
            left = right;
        }
        return s;
    };
    return parallel_sum(n_chunks, chunk_sum) * h / 3.0;
}

// Monotone cubic interpolant (Fritsch–Carlson) on uniform nodes.
class MonotoneTable {
  public:
    MonotoneTable() = default;
    MonotoneTable(double a, double b, std::vector<double> values)
        : a_(a), b_(b), y_(std::move(values)) {
        if (y_.size() < 2 || !(b > a))
            throw std::invalid_argument("MonotoneTable: need >= 2 nodes");
        const std::size_t n = y_.size() - 1;
        h_ = (b - a) / static_cast<double>(n);
        std::vector<double> m(n);
        for (std::size_t k = 0; k < n; ++k) m[k] = (y_[k + 1] - y_[k]) / h_;
        d_.resize(n + 1);
        d_[0] = m[0];
        d_[n] = m[n - 1];
        for (std::size_t k = 1; k < n; ++k) {
            if (m[k - 1] * m[k] <= 0.0)
                d_[k] = 0.0;
            else
                d_[k] = 2.0 * m[k - 1] * m[k] / (m[k - 1] + m[k]);
        }
    }

    double operator()(double t) const {
        if (t <= a_) return y_.front();
        if (t >= b_) return y_.back();
        const std::size_t n = y_.size() - 1;
        std::size_t k = static_cast<std::size_t>((t - a_) / h_);
        if (k >= n) k = n - 1;
        const double u = (t - (a_ + static_cast<double>(k) * h_)) / h_;
        const double u2 = u * u, u3 = u2 * u;
        const double h00 = 2 * u3 - 3 * u2 + 1;
        const double h10 = u3 - 2 * u2 + u;
        const double h01 = -2 * u3 + 3 * u2;
        const double h11 = u3 - u2;
        return h00 * y_[k] + h10 * h_ * d_[k] + h01 * y_[k + 1] + h11 * h_ * d_[k + 1];
    }

    double front() const { return y_.front(); }
    double back() const { return y_.back(); }
    double domain_lo() const { return a_; }
    double domain_hi() const { return b_; }
    std::size_t nodes() const { return y_.size(); }

  private:
    double a_ = 0.0, b_ = 1.0, h_ = 1.0;
    std::vector<double> y_, d_;
};

// Serial Simpson used inside already-parallel loops.
template <class Fn>
double simpson_serial(Fn&& f, double a, double b, std::size_t panels) {
    if (panels < 2) panels = 2;
    if (panels % 2) ++panels;
    const double h = (b - a) / static_cast<double>(panels);
    double s = f(a) + f(b);
    double four = 0.0, two = 0.0;
    for (std::size_t i = 1; i < panels; i += 2) four += f(a + static_cast<double>(i) * h);
    for (std::size_t i = 2; i < panels; i += 2) two += f(a + static_cast<double>(i) * h);
    return (s + 4.0 * four + 2.0 * two) * h / 3.0;
}

// Cumulative integral F(t) = \int_a^t f as a monotone table on `nodes`
// uniform intervals; each interval integrated by Simpson with enough
// sub-panels that the total panel count is at least `min_total_panels`.
template <class Fn>
MonotoneTable cumulative_integral(Fn&& f, double a, double b, std::size_t nodes,
                                  std::size_t min_total_panels) {
    if (nodes < 1) nodes = 1;
    std::size_t sub = (min_total_panels + nodes - 1) / nodes;
    if (sub < 2) sub = 2;
    if (sub % 2) ++sub;
    const double h = (b - a) / static_cast<double>(nodes);
    std::vector<double> increments(nodes);
    parallel_for(nodes, [&](std::size_t k) {
        const double lo = a + static_cast<double>(k) * h;
        const double hi = (k + 1 == nodes) ? b : lo + h;
        increments[k] = simpson_serial(f, lo, hi, sub);
    });
    std::vector<double> cumulative(nodes + 1);
    cumulative[0] = 0.0;
    for (std::size_t k = 0; k < nodes; ++k) cumulative[k + 1] = cumulative[k] + increments[k];
    return MonotoneTable(a, b, std::move(cumulative));
}

inline double radical_inverse(std::uint64_t i, std::uint32_t base) {
    const double inv = 1.0 / static_cast<double>(base);
    double f = inv, r = 0.0;
    while (i) {
        r += f * static_cast<double>(i % base);
        i /= base;
        f *= inv;
    }
    return r;
}

// Low-discrepancy 3d point stream (Halton, bases 2/3/5), fixed start offset.
struct Halton3 {
    std::uint64_t index = 64;
    std::array<double, 3> next() {
        const std::uint64_t i = index++;
        return {radical_inverse(i, 2), radical_inverse(i, 3), radical_inverse(i, 5)};
    }
};

struct Halton2 {
    std::uint64_t index = 64;
    std::array<double, 2> next() {
        const std::uint64_t i = index++;
        return {radical_inverse(i, 2), radical_inverse(i, 3)};
    }
};

}  // namespace heis::detail
