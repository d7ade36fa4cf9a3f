// hypertower: run the verification suites from the command line.

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hypertower/hypertower.hpp"

using namespace hypertower;

namespace {

TorusPoint parse_point(const std::string& s, const std::string& what) {
    const auto comma = s.find(',');
    if (comma == std::string::npos) throw ConfigError(what + " expects x1,x2 (got '" + s + "')");
    try {
        return {std::stod(s.substr(0, comma)), std::stod(s.substr(comma + 1))};
    } catch (const std::exception&) {
        throw ConfigError(what + " expects x1,x2 (got '" + s + "')");
    }
}

EmitOptions parse_emit(const std::vector<std::string>& v) {
    if (v.empty()) return {};
    EmitOptions e{false, false};
    for (const auto& item : v) {
        std::stringstream in(item);
        std::string tok;
        while (std::getline(in, tok, ',')) {
            if (tok == "csv") e.csv = true;
            else if (tok == "jsonl") e.jsonl = true;
            else throw ConfigError("--emit expects csv or jsonl (got '" + tok + "')");
        }
    }
    return e;
}

void print_summary(const SuiteResult& r) {
    std::cout << r.name << ": " << (r.pass ? "pass" : "FAIL") << "\n";
    for (const auto& f : r.failures) std::cout << "  " << f << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Young towers for surface diffeomorphisms: charts, shadowing, nice domains, towers and statistics"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, map, chi, output;
    std::optional<double> perturbation, lambda, epsilon;
    std::optional<int> grid, horizon, depth;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> emit, sets;
    app.add_option("--config", config_path, "flat TOML config file");
    app.add_option("--map", map, "cat, perturbed-cat or linear");
    app.add_option("--perturbation", perturbation, "perturbation amplitude of perturbed-cat");
    app.add_option("--chi", chi, "chi, or 'auto'");
    app.add_option("--lambda", lambda, "lambda (default chi / 2)");
    app.add_option("--epsilon", epsilon, "epsilon");
    app.add_option("--grid", grid, "tower grid per axis");
    app.add_option("--horizon", horizon, "tower horizon (0: 40 T)");
    app.add_option("--depth", depth, "witness depth D");
    app.add_option("--seed", seed, "master seed");
    app.add_option("--output", output, "output directory");
    app.add_option("--emit", emit, "table formats: csv, jsonl (default both)");
    app.add_option("--set", sets, "any config key as key=value");

    auto* c_constants = app.add_subcommand("constants", "derived constants and the b, delta calibration");
    auto* c_charts = app.add_subcommand("charts", "chart, one-step hyperbolicity and regular-branch suite");
    auto* c_shadow = app.add_subcommand("shadow", "shadowing and bracket suite");
    auto* c_bracket = app.add_subcommand("bracket", "one bracket [x, y] with its convergence rates");
    auto* c_close = app.add_subcommand("close", "closing suite: periodic points from periodic pseudo-orbits");
    auto* c_nice = app.add_subcommand("nice", "nice-domain search and niceness check");
    auto* c_tower = app.add_subcommand("tower", "saturation, partition and tower axioms");
    auto* c_stats = app.add_subcommand("stats", "return-time tail, return frequency and SRB estimates");
    auto* c_all = app.add_subcommand("all", "every suite in dependency order");

    std::string bx, by;
    std::optional<double> bdelta;
    int btrack = 8;
    c_bracket->add_option("--x", bx, "x as x1,x2")->required();
    c_bracket->add_option("--y", by, "y as x1,x2")->required();
    c_bracket->add_option("--delta", bdelta, "pseudo-orbit scale (default: calibrated, else b/10)");
    c_bracket->add_option("--track", btrack, "orbit indices tabulated on each side");

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
        if (!map.empty()) set_config_value(cfg, "map", map);
        if (perturbation) cfg.perturbation = *perturbation;
        if (!chi.empty()) cfg.chi = chi == "auto" ? 0.0 : std::stod(chi);
        if (lambda) cfg.lambda = *lambda;
        if (epsilon) cfg.epsilon = *epsilon;
        if (grid) cfg.grid = *grid;
        if (horizon) cfg.horizon = *horizon;
        if (depth) cfg.depth = *depth;
        if (seed) cfg.seed = *seed;
        if (!output.empty()) cfg.output = output;
        for (const auto& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value (got '" + kv + "')");
            set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        }
        // parameters are validated before any work starts
        (void)resolve_params(cfg);

        Pipeline pipe(cfg, parse_emit(emit), &std::cerr);
        if (*c_constants) {
            const SuiteResult r = pipe.run_constants();
            std::cout << "# configuration\n" << to_toml(cfg) << "\n# derived constants\n"
                      << describe_constants(pipe.resolved()) << std::setprecision(10) << "b          "
                      << pipe.chart_settings().b << "  (calibrated)\n"
                      << "delta      " << pipe.delta() << "  (calibrated)\n";
            return r.pass ? 0 : 1;
        }
        if (*c_bracket) {
            const TorusPoint x = parse_point(bx, "--x"), y = parse_point(by, "--y");
            const auto run = pipe.bracket_once(x, y, bdelta, btrack);
            std::cout << std::setprecision(17);
            std::cout << "z = (" << run.result.point.x1 << ", " << run.result.point.x2 << ")\n";
            std::cout << std::setprecision(6) << "level " << run.level << ", b " << run.b << ", delta " << run.delta
                      << (bdelta ? " (given)" : " (calibrated)") << ", admissible radius " << run.radius
                      << ", certified " << (run.result.certified ? "yes" : "no") << ", diameter "
                      << run.result.diameter << "\n";
            if (run.scale != 1)
                std::cout << "note: d(x, y) exceeds the calibrated radius; b and delta scaled by " << run.scale
                          << " (linear map, global charts)\n";
            std::cout << std::setw(5) << "n" << std::setw(16) << "d(f^n z, x_n)" << std::setw(16) << "bound" << "\n";
            for (const RateRow& row : run.rates)
                std::cout << std::setw(5) << row.n << std::setw(16) << row.distance << std::setw(16) << row.bound << "\n";
            return 0;
        }
        if (*c_all) {
            const int status = pipe.run_all();
            std::cout << "summary: " << (pipe.config().output + "/summary.json") << " (" << (status ? "FAIL" : "pass")
                      << ")\n";
            return status;
        }
        SuiteResult r;
        if (*c_charts) r = pipe.run_charts();
        else if (*c_shadow) r = pipe.run_shadow();
        else if (*c_close) r = pipe.run_close();
        else if (*c_nice) r = pipe.run_nice();
        else if (*c_tower) r = pipe.run_tower();
        else if (*c_stats) r = pipe.run_stats();
        print_summary(r);
        return r.pass ? 0 : 1;
    } catch (const MissingPrerequisite& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
