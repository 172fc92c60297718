#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "heis/cascade.hpp"
#include "heis/contact.hpp"
#include "heis/core.hpp"
#include "heis/curve.hpp"
#include "heis/graph.hpp"

namespace heis::io {

using nlohmann::json;

inline json to_json(const Point& p) { return json::array({p.x, p.y, p.z}); }

inline Point point_from_json(const json& j) {
    if (!j.is_array() || j.size() != 3) throw std::runtime_error("point: expected [x,y,z]");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline json to_json(const VerticalPlane& w) { return json{{"theta", w.theta}}; }

inline VerticalPlane plane_from_json(const json& j) {
    return VerticalPlane(j.at("theta").get<double>());
}

inline json to_json(const SampledCurve& c) {
    json samples = json::array();
    for (std::size_t i = 0; i < c.size(); ++i)
        samples.push_back(json::array({c.t[i], c.p[i].x, c.p[i].y, c.p[i].z}));
    json meta;
    if (c.meta.claimed_lambda) meta["claimed_lambda"] = *c.meta.claimed_lambda;
    if (c.meta.slope_bound) meta["slope_bound"] = *c.meta.slope_bound;
    meta["unit_speed"] = c.meta.unit_speed;
    return json{{"samples", samples}, {"meta", meta}};
}

inline SampledCurve curve_from_json(const json& j) {
    const auto& samples = j.at("samples");
    std::vector<double> ts;
    std::vector<Point> ps;
    ts.reserve(samples.size());
    ps.reserve(samples.size());
    for (const auto& row : samples) {
        if (!row.is_array() || row.size() != 4)
            throw std::runtime_error("curve: sample rows must be [t,x,y,z]");
        ts.push_back(row[0].get<double>());
        ps.push_back({row[1].get<double>(), row[2].get<double>(), row[3].get<double>()});
    }
    SampledCurve::Meta meta;
    if (j.contains("meta")) {
        const auto& m = j["meta"];
        if (m.contains("claimed_lambda")) meta.claimed_lambda = m["claimed_lambda"].get<double>();
        if (m.contains("slope_bound")) meta.slope_bound = m["slope_bound"].get<double>();
        if (m.contains("unit_speed")) meta.unit_speed = m["unit_speed"].get<bool>();
    }
    return SampledCurve(std::move(ts), std::move(ps), meta);
}

inline std::string curve_to_csv(const SampledCurve& c) {
    std::string out = "t,x,y,z\n";
    char buf[128];
    for (std::size_t i = 0; i < c.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g\n", c.t[i], c.p[i].x, c.p[i].y,
                      c.p[i].z);
        out += buf;
    }
    return out;
}

// Graph fixtures: {"plane": {"theta": t}, "L": L, "function": {"kind": ...}}.
// Kinds: zero, constant{value}, linear{cu, czeta}, bump{amplitude, width},
// tabulated{points: [[u, zeta, v], ...], power}.
inline ILipGraph graph_from_json(const json& j) {
    ILipGraph g;
    g.plane = plane_from_json(j.at("plane"));
    g.L = j.at("L").get<double>();
    const auto& fn = j.at("function");
    const std::string kind = fn.at("kind").get<std::string>();
    if (kind == "zero") {
        g.f = [](double, double) { return 0.0; };
    } else if (kind == "constant") {
        const double v = fn.at("value").get<double>();
        g.f = [v](double, double) { return v; };
    } else if (kind == "linear") {
        const double cu = fn.value("cu", 0.0);
        const double cz = fn.value("czeta", 0.0);
        g.f = [cu, cz](double u, double zeta) { return cu * u + cz * zeta; };
    } else if (kind == "bump") {
        const double a = fn.at("amplitude").get<double>();
        const double w = fn.value("width", 1.0);
        g.f = [a, w](double u, double zeta) {
            return a * std::exp(-(u * u + zeta * zeta) / (w * w));
        };
    } else if (kind == "tabulated") {
        std::vector<PlaneCoords> data;
        for (const auto& row : fn.at("points"))
            data.push_back({row[0].get<double>(), row[1].get<double>(), row[2].get<double>()});
        const double power = fn.value("power", 4.0);
        g = tabulated_graph(g.plane, g.L, std::move(data), power);
        g.L = j.at("L").get<double>();
    } else {
        throw std::runtime_error("graph: unknown function kind '" + kind + "'");
    }
    return g;
}

inline json to_json(const CascadeState& s) {
    return json{{"level", s.level},
                {"ell", s.ell},
                {"slope_floor", s.slope_floor},
                {"min_slope_measured", s.min_slope_measured},
                {"drift_to_next", s.drift_to_next},
                {"drift_budget", s.drift_budget},
                {"z_ratio_min", s.z_ratio_min},
                {"z_ratio_max", s.z_ratio_max}};
}

inline std::string cascade_levels_csv(const std::vector<CascadeState>& states) {
    std::string out = "level,ell,min_slope,max_drift\n";
    char buf[160];
    for (const auto& s : states) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", s.level, s.ell,
                      s.min_slope_measured, s.drift_to_next);
        out += buf;
    }
    return out;
}

inline json to_json(const BoxDimReport& r) {
    json scales = json::array(), counts = json::array();
    for (double s : r.scales) scales.push_back(s);
    for (std::size_t n : r.counts) counts.push_back(n);
    return json{{"scales", scales},
                {"counts", counts},
                {"estimate", r.estimate},
                {"intercept", r.intercept},
                {"max_abs_residual", r.max_abs_residual},
                {"r_squared", r.r_squared}};
}

inline json to_json(const VitaliResult& r) {
    json levels = json::array();
    for (const auto& lv : r.levels)
        levels.push_back(json{{"i", lv.index},
                              {"F_i", lv.F},
                              {"n_balls", lv.n_balls},
                              {"max_radius", lv.max_radius},
                              {"captured_frac", lv.captured_frac},
                              {"exact_checked", lv.exact_checked},
                              {"exact_worst_ratio", lv.exact_worst_ratio}});
    json f = json::array();
    for (double v : r.F) f.push_back(v);
    return json{{"levels", levels},
                {"F", f},
                {"kappa_measured", r.kappa},
                {"displacement_max", r.displacement_max},
                {"boundary_identity_max", r.boundary_identity_max}};
}

inline json to_json(const CoareaReport& r) {
    return json{{"lhs", r.lhs},
                {"rhs", r.rhs},
                {"ratio", r.ratio},
                {"fibers_total", r.fibers_total},
                {"fibers_traced", r.fibers_traced},
                {"fibers_empty", r.fibers_empty},
                {"fibers_failed", r.fibers_failed}};
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << content;
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace heis::io
