// Command-line front end: construct fractal vertical curves, verify cone and
// order properties of sampled curves, estimate box dimensions, run the
// multiscale Jacobian reduction, and check the fiber-measure identity.
//
// Exit codes: 0 all checks pass, 1 a mathematical invariant failed,
// 2 usage or input error.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include "heis/cascade.hpp"
#include "heis/contact.hpp"
#include "heis/core.hpp"
#include "heis/curve.hpp"
#include "heis/graph.hpp"
#include "heis/io.hpp"

namespace {

using heis::io::json;

constexpr int kExitOk = 0;
constexpr int kExitInvariant = 1;
constexpr int kExitUsage = 2;

heis::SmoothCurveSpec base_curve_from_config(const json& cfg) {
    if (!cfg.contains("base")) return heis::fixtures::vertical_segment(1.0);
    const auto& b = cfg["base"];
    const std::string kind = b.value("kind", "axis");
    if (kind == "axis") return heis::fixtures::vertical_segment(b.value("height", 1.0));
    if (kind == "helix")
        return heis::fixtures::slope_helix(b.value("kappa", 0.1),
                                           b.value("omega", 2.0 * heis::kPi),
                                           b.value("length", 1.0));
    throw std::runtime_error("unknown base curve kind: " + kind);
}

int cmd_construct(const std::string& config_path, const std::string& out_dir) {
    json cfg;
    heis::CascadeConfig cc;
    try {
        cfg = json::parse(heis::io::read_file(config_path));
        cc.lambda = cfg.value("lambda", 1.0);
        cc.lambda_prime = cfg.value("lambda_prime", 0.5);
        cc.epsilon = cfg.value("epsilon", 0.5);
        cc.phi = cfg.value("phi", 1);
        cc.levels = cfg.value("levels", 3);
        cc.rho = cfg.value("rho", 1000.0);
        if (cfg.contains("kappa_override")) cc.kappa = cfg["kappa_override"].get<double>();
        cc.gain = cfg.value("gain", 1.0);
        cc.out_samples = cfg.value("out_samples", std::size_t{4096});
        cc.dense_check_samples = cfg.value("dense_check_samples", std::size_t{1024});
        std::filesystem::create_directories(out_dir);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    }
    try {
        const auto base = base_curve_from_config(cfg);
        const auto res = heis::run_cascade(base, cc);
        json summary;
        summary["kappa_used"] = res.kappa_used;
        summary["phi"] = cc.phi;
        summary["rho"] = cc.rho;
        summary["levels"] = json::array();
        for (const auto& st : res.states) summary["levels"].push_back(heis::io::to_json(st));
        bool monotone = true;
        for (std::size_t i = 0; i + 1 < res.states.size(); ++i) {
            const double ratio = res.states[i + 1].ell / res.states[i].ell;
            if (cc.phi == 1 && !(ratio > 1.0)) monotone = false;
            if (cc.phi == -1 && !(ratio < 1.0)) monotone = false;
        }
        summary["measure_monotone"] = monotone;
        heis::io::write_file(out_dir + "/curve.json", heis::io::to_json(res.final_curve).dump());
        heis::io::write_file(out_dir + "/levels.csv", heis::io::cascade_levels_csv(res.states));
        heis::io::write_file(out_dir + "/summary.json", summary.dump(2));
        if (!monotone) {
            std::cerr << "invariant failure: measures not strictly monotone\n";
            return kExitInvariant;
        }
        std::cout << "construct: " << cc.levels << " levels, kappa " << res.kappa_used
                  << ", final measure " << res.states.back().ell << "\n";
        return kExitOk;
    } catch (const heis::CascadeError& e) {
        std::cerr << "invariant failure: " << e.what() << "\n";
        return kExitInvariant;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInvariant;
    }
}

int cmd_verify(const std::string& curve_path, double lambda, const std::string& out_path,
               double tol) {
    heis::SampledCurve curve;
    try {
        curve = heis::io::curve_from_json(json::parse(heis::io::read_file(curve_path)));
    } catch (const std::exception& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return kExitUsage;
    }
    json report;
    bool pass = true;
    const auto witness = heis::verify_vertical(curve, lambda, tol);
    report["vertical_ok"] = !witness.has_value();
    if (witness) {
        pass = false;
        report["counterexample"] = json::array({witness->i, witness->j});
    }
    const auto mono = heis::verify_monotone(curve);
    report["monotone"] = mono == heis::Monotonicity::increasing
                             ? "increasing"
                             : (mono == heis::Monotonicity::decreasing ? "decreasing" : "neither");
    if (mono == heis::Monotonicity::neither) pass = false;
    if (!witness && mono != heis::Monotonicity::neither) {
        heis::SampledCurve oriented = curve;
        if (mono == heis::Monotonicity::decreasing) {
            std::reverse(oriented.p.begin(), oriented.p.end());
            for (auto& t : oriented.t) t = -t;
            std::reverse(oriented.t.begin(), oriented.t.end());
        }
        const auto mc = heis::monotonicity_constants_check(oriented, lambda);
        report["min_z_ratio"] = mc.min_z_ratio;
        report["min_d_ratio"] = mc.min_d_ratio;
        report["c_lambda"] = mc.c_lambda_used;
        report["ratio_violations"] = mc.z_violations + mc.d_violations;
        if (mc.z_violations + mc.d_violations > 0) pass = false;
    }
    report["pass"] = pass;
    const std::string text = report.dump(2);
    if (!out_path.empty()) heis::io::write_file(out_path, text);
    std::cout << text << "\n";
    return pass ? kExitOk : kExitInvariant;
}

int cmd_dimension(const std::string& curve_path, double scale_min, double scale_max,
                  std::size_t n_scales, const std::string& out_path) {
    heis::SampledCurve curve;
    try {
        curve = heis::io::curve_from_json(json::parse(heis::io::read_file(curve_path)));
    } catch (const std::exception& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return kExitUsage;
    }
    try {
        const auto scales = heis::log_spaced_scales(scale_min, scale_max, n_scales);
        const auto rep = heis::box_dimension_estimate(curve.p, scales);
        const std::string text = heis::io::to_json(rep).dump(2);
        if (!out_path.empty()) heis::io::write_file(out_path, text);
        std::cout << text << "\n";
        return kExitOk;
    } catch (const std::domain_error& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kExitUsage;
    }
}

int cmd_reduce(double epsilon, int max_levels, const std::string& out_path) {
    try {
        const auto a0 = heis::build_alpha0();
        const auto res = heis::vitali_cascade(epsilon, max_levels, a0);
        const std::string text = heis::io::to_json(res).dump(2);
        if (!out_path.empty()) heis::io::write_file(out_path, text);
        std::cout << text << "\n";
        if (!(res.displacement_max < epsilon)) {
            std::cerr << "invariant failure: displacement reached " << res.displacement_max
                      << "\n";
            return kExitInvariant;
        }
        return kExitOk;
    } catch (const heis::VitaliError& e) {
        std::cerr << "invariant failure: " << e.what() << "\n";
        return kExitInvariant;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInvariant;
    }
}

int cmd_coarea(const std::string& map_spec, std::size_t n_fibers, const std::string& out_path) {
    try {
        heis::ContactMap map = heis::ContactMap::identity();
        json extra;
        if (map_spec == "identity" || map_spec == "id") {
            // keep identity
        } else if (map_spec.rfind("dilation:", 0) == 0) {
            map = heis::ContactMap::dilation(std::stod(map_spec.substr(9)));
        } else if (map_spec.rfind("reduced:", 0) == 0) {
            const double eps = std::stod(map_spec.substr(8));
            const auto a0 = heis::build_alpha0();
            const auto res = heis::vitali_cascade(eps, 3, a0);
            map = res.beta;
            extra["reduction"] = heis::io::to_json(res);
        } else {
            const json spec = json::parse(heis::io::read_file(map_spec));
            const std::string kind = spec.at("kind").get<std::string>();
            if (kind == "identity") {
            } else if (kind == "dilation") {
                map = heis::ContactMap::dilation(spec.at("r").get<double>());
            } else if (kind == "flow") {
                map = heis::ContactMap::from_flow(heis::make_poly_bump(spec.value("amplitude", 1.0)),
                                                  spec.at("t").get<double>());
            } else {
                std::cerr << "unknown map kind\n";
                return kExitUsage;
            }
        }
        // Calibrate on the identity, then evaluate the requested map.
        heis::Box box;
        heis::CoareaOptions opts;
        const auto cal = heis::coarea_check(heis::ContactMap::identity(), box, n_fibers, opts);
        opts.c_calibration = cal.ratio;
        const auto rep = heis::coarea_check(map, box, n_fibers, opts);
        json out;
        out["calibration"] = heis::io::to_json(cal);
        out["run"] = heis::io::to_json(rep);
        out["c"] = cal.ratio;
        if (!extra.is_null()) out["extra"] = extra;
        const std::string text = out.dump(2);
        if (!out_path.empty()) heis::io::write_file(out_path, text);
        std::cout << text << "\n";
        if (rep.fibers_failed > rep.fibers_total / 20) {
            std::cerr << "invariant failure: too many fiber traces diverged\n";
            return kExitInvariant;
        }
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInvariant;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Computational toolkit for vertical curves and contact flows"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out";
    auto* construct = app.add_subcommand("construct", "run the fractal curve construction");
    construct->add_option("--config", config_path, "JSON configuration")->required();
    construct->add_option("--out", out_dir, "output directory");

    std::string curve_path, report_path;
    double lambda = 0.5, tol = heis::kDefaultTol;
    auto* verify = app.add_subcommand("verify", "verify cone/order properties of a curve file");
    verify->add_option("curve", curve_path, "curve JSON path")->required();
    verify->add_option("--lambda", lambda, "cone parameter")->required();
    verify->add_option("--out", report_path, "report JSON path");
    verify->add_option("--tol", tol, "comparison tolerance");

    std::string dim_curve, dim_out;
    double scale_min = 0.004, scale_max = 0.4;
    std::size_t n_scales = 12;
    auto* dimension = app.add_subcommand("dimension", "box-dimension estimate of a curve file");
    dimension->add_option("curve", dim_curve, "curve JSON path")->required();
    dimension->add_option("--scale-min", scale_min, "smallest scale");
    dimension->add_option("--scale-max", scale_max, "largest scale");
    dimension->add_option("--scales", n_scales, "number of scales");
    dimension->add_option("--out", dim_out, "report JSON path");

    double epsilon = 0.3;
    int max_levels = 3;
    std::string reduce_out;
    auto* reduce = app.add_subcommand("reduce", "multiscale horizontal-Jacobian reduction");
    reduce->add_option("--epsilon", epsilon, "target displacement / mass bound")->required();
    reduce->add_option("--max-levels", max_levels, "level cap");
    reduce->add_option("--out", reduce_out, "report JSON path");

    std::string map_spec = "identity", coarea_out;
    std::size_t n_fibers = 576;
    auto* coarea = app.add_subcommand("coarea", "fiber-measure consistency check");
    coarea->add_option("--map", map_spec, "identity | dilation:R | reduced:EPS | spec.json");
    coarea->add_option("--fibers", n_fibers, "fiber grid size");
    coarea->add_option("--out", coarea_out, "report JSON path");

    std::uint64_t seed = 0;
    app.add_option("--seed", seed, "seed override (reserved; runs are deterministic)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    if (construct->parsed()) return cmd_construct(config_path, out_dir);
    if (verify->parsed()) return cmd_verify(curve_path, lambda, report_path, tol);
    if (dimension->parsed()) return cmd_dimension(dim_curve, scale_min, scale_max, n_scales, dim_out);
    if (reduce->parsed()) return cmd_reduce(epsilon, max_levels, reduce_out);
    if (coarea->parsed()) return cmd_coarea(map_spec, n_fibers, coarea_out);
    return kExitUsage;
}
