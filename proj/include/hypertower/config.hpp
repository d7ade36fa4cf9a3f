#pragma once

// Run configuration: a flat TOML-syntax file of `key = value` lines. Every
// key has an embedded default; unknown keys and sections are rejected, and
// the hyperbolicity parameters are re-validated when the map is resolved.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "hypertower/charts.hpp"
#include "hypertower/dynamics.hpp"
#include "hypertower/regularity.hpp"

namespace hypertower {

class ConfigError : public PreconditionError {
public:
    using PreconditionError::PreconditionError;
};

struct RunConfig {
    // map
    std::string map = "cat";
    double perturbation = 0.03;
    std::string matrix = "2,1,1,1";  // used by map = "linear"
    // hyperbolicity; chi = 0 means auto, lambda = 0 means chi / 2
    double chi = 0;
    double lambda = 0;
    double epsilon = 0.008;
    double epsilon0 = 0.01;
    double alpha = 1.0;
    // calibration
    int b_points = 100;
    int delta_pairs = 500;
    // suites
    int chart_samples = 500;
    int branch_orbits = 100;
    int shadow_depth = 30;
    int bracket_pairs = 1000;
    int closing_patterns = 50;
    // nice domain: search rectangle of lifted coordinates and level
    double region_x = 0.2, region_y = 0.4, region_hx = 0.45, region_hy = 0.45;
    long level = 1;
    int max_period = 2;
    int n_nice = 50;
    // tower
    int grid = 512;
    int horizon = 0;  // 0 means 40 T
    int depth = 3;
    int markov_elements = 300;
    int y1_samples = 20000;
    int y2_pairs = 400;
    int y2_steps = 8;
    // stats
    long pinheiro_n = 100000;
    int pinheiro_samples = 100;
    int birkhoff_samples = 400;
    long birkhoff_iterations = 20000;
    std::string observables = "one,cos1,cos2,x1x2";
    // tolerances
    double tol = 1e-7;
    double band = 1e-6;
    double residual_tol = 1e-12;
    double target_diameter = 1e-9;
    // run
    std::uint64_t seed = 1;
    std::string output = "hypertower-out";
};

namespace detail {

using ConfigValue = std::variant<std::string, double, long, bool>;

struct ConfigKey {
    std::string name;
    std::function<void(RunConfig&, const ConfigValue&)> set;
    std::function<std::string(const RunConfig&)> show;
    bool text = false;
};

[[nodiscard]] inline std::string toml_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
    std::string s(buf, res.ptr);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

[[nodiscard]] inline std::string toml_string(const std::string& v) {
    std::string s = "\"";
    for (char c : v) {
        if (c == '"' || c == '\\') s += '\\';
        s += c;
    }
    return s + '"';
}

template <class T>
[[nodiscard]] ConfigKey key(const std::string& name, T RunConfig::*field) {
    ConfigKey k{name, {}, {}, std::is_same_v<T, std::string>};
    k.set = [name, field](RunConfig& c, const ConfigValue& v) {
        if constexpr (std::is_same_v<T, std::string>) {
            if (!std::holds_alternative<std::string>(v)) throw ConfigError("config key '" + name + "' expects a string");
            c.*field = std::get<std::string>(v);
        } else if constexpr (std::is_same_v<T, double>) {
            if (const auto* d = std::get_if<double>(&v)) c.*field = *d;
            else if (const auto* i = std::get_if<long>(&v)) c.*field = static_cast<double>(*i);
            else throw ConfigError("config key '" + name + "' expects a number");
        } else {
            const auto* i = std::get_if<long>(&v);
            if (!i) throw ConfigError("config key '" + name + "' expects an integer");
            if constexpr (std::is_unsigned_v<T>)
                if (*i < 0) throw ConfigError("config key '" + name + "' expects a non-negative integer");
            c.*field = static_cast<T>(*i);
        }
    };
    k.show = [field](const RunConfig& c) {
        if constexpr (std::is_same_v<T, std::string>) return toml_string(c.*field);
        else if constexpr (std::is_same_v<T, double>) return toml_double(c.*field);
        else return std::to_string(c.*field);
    };
    return k;
}

[[nodiscard]] inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        key("map", &RunConfig::map),
        key("perturbation", &RunConfig::perturbation),
        key("matrix", &RunConfig::matrix),
        key("chi", &RunConfig::chi),
        key("lambda", &RunConfig::lambda),
        key("epsilon", &RunConfig::epsilon),
        key("epsilon0", &RunConfig::epsilon0),
        key("alpha", &RunConfig::alpha),
        key("b_points", &RunConfig::b_points),
        key("delta_pairs", &RunConfig::delta_pairs),
        key("chart_samples", &RunConfig::chart_samples),
        key("branch_orbits", &RunConfig::branch_orbits),
        key("shadow_depth", &RunConfig::shadow_depth),
        key("bracket_pairs", &RunConfig::bracket_pairs),
        key("closing_patterns", &RunConfig::closing_patterns),
        key("region_x", &RunConfig::region_x),
        key("region_y", &RunConfig::region_y),
        key("region_hx", &RunConfig::region_hx),
        key("region_hy", &RunConfig::region_hy),
        key("level", &RunConfig::level),
        key("max_period", &RunConfig::max_period),
        key("n_nice", &RunConfig::n_nice),
        key("grid", &RunConfig::grid),
        key("horizon", &RunConfig::horizon),
        key("depth", &RunConfig::depth),
        key("markov_elements", &RunConfig::markov_elements),
        key("y1_samples", &RunConfig::y1_samples),
        key("y2_pairs", &RunConfig::y2_pairs),
        key("y2_steps", &RunConfig::y2_steps),
        key("pinheiro_n", &RunConfig::pinheiro_n),
        key("pinheiro_samples", &RunConfig::pinheiro_samples),
        key("birkhoff_samples", &RunConfig::birkhoff_samples),
        key("birkhoff_iterations", &RunConfig::birkhoff_iterations),
        key("observables", &RunConfig::observables),
        key("tol", &RunConfig::tol),
        key("band", &RunConfig::band),
        key("residual_tol", &RunConfig::residual_tol),
        key("target_diameter", &RunConfig::target_diameter),
        key("seed", &RunConfig::seed),
        key("output", &RunConfig::output),
    };
    return keys;
}

[[nodiscard]] inline std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

// A TOML scalar: basic string, boolean, integer or float.
[[nodiscard]] inline ConfigValue parse_scalar(std::string_view s, const std::string& where) {
    if (s.empty()) throw ConfigError(where + ": missing value");
    if (s.front() == '"') {
        std::string out;
        std::size_t i = 1;
        for (; i < s.size() && s[i] != '"'; ++i) {
            if (s[i] == '\\' && i + 1 < s.size()) ++i;
            out += s[i];
        }
        if (i >= s.size()) throw ConfigError(where + ": unterminated string");
        if (!trim(s.substr(i + 1)).empty()) throw ConfigError(where + ": trailing text after string");
        return out;
    }
    if (s == "true") return true;
    if (s == "false") return false;
    std::string num;
    for (char c : s)
        if (c != '_') num += c;
    if (num.find_first_of(".eE") == std::string::npos && num != "inf" && num != "nan") {
        long v = 0;
        const char* b = num.data() + (num[0] == '+' ? 1 : 0);
        const auto [p, ec] = std::from_chars(b, num.data() + num.size(), v);
        if (ec == std::errc() && p == num.data() + num.size()) return v;
    } else {
        double v = 0;
        const char* b = num.data() + (num[0] == '+' ? 1 : 0);
        const auto [p, ec] = std::from_chars(b, num.data() + num.size(), v);
        if (ec == std::errc() && p == num.data() + num.size()) return v;
    }
    throw ConfigError(where + ": cannot parse value '" + std::string(s) + "'");
}

// Strips a trailing comment that is not inside a string.
[[nodiscard]] inline std::string_view strip_comment(std::string_view line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '\\' && quoted) {
            ++i;
        } else if (line[i] == '"') {
            quoted = !quoted;
        } else if (line[i] == '#' && !quoted) {
            return line.substr(0, i);
        }
    }
    return line;
}

}  // namespace detail

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& text) {
    for (const auto& k : detail::config_keys())
        if (k.name == key) {
            const std::string_view t = detail::trim(text);
            // bare words from the command line are strings
            detail::ConfigValue v;
            try {
                v = detail::parse_scalar(t, key);
            } catch (const ConfigError&) {
                v = std::string(t);
            }
            if (std::holds_alternative<std::string>(v) && !k.text)
                throw ConfigError("config key '" + key + "' expects a number, got '" + text + "'");
            k.set(c, v);
            return;
        }
    throw ConfigError("unknown config key '" + key + "'");
}

[[nodiscard]] inline RunConfig parse_config(std::string_view text, const std::string& origin = "config") {
    RunConfig c;
    std::map<std::string, int> seen;
    int lineno = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t nl = text.find('\n', pos);
        const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++lineno;
        const std::string where = origin + ":" + std::to_string(lineno);
        const std::string_view line = detail::trim(detail::strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') throw ConfigError(where + ": sections are not supported (the config is flat)");
        const std::size_t eq = line.find('=');
        if (eq == std::string_view::npos) throw ConfigError(where + ": expected key = value");
        std::string key(detail::trim(line.substr(0, eq)));
        if (key.size() >= 2 && key.front() == '"' && key.back() == '"') key = key.substr(1, key.size() - 2);
        if (seen.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
        seen[key] = lineno;
        const auto it = std::find_if(detail::config_keys().begin(), detail::config_keys().end(),
                                     [&](const detail::ConfigKey& k) { return k.name == key; });
        if (it == detail::config_keys().end()) throw ConfigError(where + ": unknown config key '" + key + "'");
        try {
            it->set(c, detail::parse_scalar(detail::trim(line.substr(eq + 1)), where));
        } catch (const ConfigError& e) {
            const std::string m = e.what();
            throw ConfigError(m.rfind(where, 0) == 0 ? m : where + ": " + m);
        }
    }
    return c;
}

[[nodiscard]] inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config not found: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str(), path.string());
}

// Every key with its current value, loadable by parse_config.
[[nodiscard]] inline std::string to_toml(const RunConfig& c) {
    std::string s;
    for (const auto& k : detail::config_keys()) s += k.name + " = " + k.show(c) + "\n";
    return s;
}

// ---------------------------------------------------------------------------
// Resolution: the map, chi/lambda defaults and validated constants.

struct ResolvedParams {
    MapPtr f;
    HyperbolicityParams params;
    DerivedConstants k;
    bool chi_auto = false;
};

[[nodiscard]] inline IMat2 parse_matrix(const std::string& s) {
    std::vector<long> v;
    std::stringstream in(s);
    std::string tok;
    while (std::getline(in, tok, ',')) {
        const std::string_view t = detail::trim(tok);
        long x = 0;
        const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), x);
        if (ec != std::errc() || p != t.data() + t.size()) throw ConfigError("matrix entry '" + tok + "' is not an integer");
        v.push_back(x);
    }
    if (v.size() != 4) throw ConfigError("matrix needs four comma-separated integers, got '" + s + "'");
    return IMat2{v[0], v[1], v[2], v[3]};
}

[[nodiscard]] inline ResolvedParams resolve_params(const RunConfig& c) {
    if (c.chi < 0) throw ConfigError("chi must be positive (0 selects auto)");
    if (c.lambda < 0) throw ConfigError("lambda must be positive (0 selects chi / 2)");
    if (!(c.alpha > 0 && c.alpha <= 1)) throw ConfigError("alpha must lie in (0, 1]");
    if (!(c.epsilon0 > 0)) throw ConfigError("epsilon0 must be positive");
    if (!(c.perturbation >= 0 && c.perturbation <= 0.05)) throw ConfigError("perturbation must lie in [0, 0.05]");
    // lambda >= chi is decidable before the map is built when both are explicit
    if (c.chi > 0 && c.lambda > 0 && !(c.lambda < c.chi))
        throw ConfigError("lambda = " + detail::toml_double(c.lambda) + " must be smaller than chi = " +
                          detail::toml_double(c.chi));
    ResolvedParams r;
    try {
        r.f = make_map(c.map, c.perturbation, parse_matrix(c.matrix));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    r.chi_auto = c.chi == 0;
    r.params.chi = r.chi_auto ? auto_chi(*r.f) : c.chi;
    r.params.lambda = c.lambda > 0 ? c.lambda : r.params.chi / 2;
    r.params.epsilon = c.epsilon;
    r.params.alpha = c.alpha;
    r.params.epsilon0 = c.epsilon0;
    if (!(r.params.lambda < r.params.chi))
        throw ConfigError("lambda = " + detail::toml_double(r.params.lambda) + " must be smaller than chi = " +
                          detail::toml_double(r.params.chi));
    try {
        r.k = derive_constants(*r.f, r.params);
        validate(r.params, r.k);
    } catch (const ConfigError&) {
        throw;
    } catch (const PreconditionError& e) {
        throw ConfigError(e.what());
    }
    return r;
}

}  // namespace hypertower
