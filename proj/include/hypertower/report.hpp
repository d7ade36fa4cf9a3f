#pragma once

// Report emission. Every numeric value goes out as {"value", "provenance"}
// with provenance measured, bound or calibrated; files are written with a
// fixed key order so identical runs give identical bytes.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hypertower/error.hpp"

namespace hypertower {

using Json = nlohmann::ordered_json;

enum class Provenance { measured, bound, calibrated };

[[nodiscard]] inline const char* provenance_name(Provenance p) {
    switch (p) {
        case Provenance::measured: return "measured";
        case Provenance::bound: return "bound";
        case Provenance::calibrated: return "calibrated";
    }
    return "measured";
}

// Non-finite values have no JSON number; they are written as null with the
// IEEE spelling alongside.
[[nodiscard]] inline Json tagged(double v, Provenance p) {
    Json j;
    if (std::isfinite(v)) {
        j["value"] = v;
    } else {
        j["value"] = nullptr;
        j["nonfinite"] = std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
    }
    j["provenance"] = provenance_name(p);
    return j;
}

template <class I>
    requires std::is_integral_v<I>
[[nodiscard]] Json tagged(I v, Provenance p) {
    return Json{{"value", v}, {"provenance", provenance_name(p)}};
}

template <class V>
[[nodiscard]] Json measured(V v) {
    return tagged(v, Provenance::measured);
}
template <class V>
[[nodiscard]] Json bound(V v) {
    return tagged(v, Provenance::bound);
}
template <class V>
[[nodiscard]] Json calibrated(V v) {
    return tagged(v, Provenance::calibrated);
}

// The value of a tagged number; throws when the dump lacks it.
[[nodiscard]] inline double tagged_value(const Json& j, const std::string& what) {
    if (!j.is_object() || !j.contains("value")) throw PreconditionError("dump lacks the tagged value '" + what + "'");
    if (j["value"].is_null()) {
        const std::string s = j.value("nonfinite", "nan");
        if (s == "inf") return INFINITY;
        if (s == "-inf") return -INFINITY;
        return NAN;
    }
    return j["value"].get<double>();
}

inline void write_json(const std::filesystem::path& path, const Json& j) {
    std::ofstream out(path);
    if (!out) throw PreconditionError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<Json>& rows) {
    std::ofstream out(path);
    if (!out) throw PreconditionError("cannot write " + path.string());
    for (const Json& r : rows) out << r.dump() << '\n';
}

[[nodiscard]] inline Json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw PreconditionError("cannot read " + path.string());
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw PreconditionError(path.string() + " is not valid JSON: " + e.what());
    }
}

}  // namespace hypertower
