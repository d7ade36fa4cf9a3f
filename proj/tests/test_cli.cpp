#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hypertower/pipeline.hpp"

using namespace hypertower;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("hypertower_test_" + name);
    fs::remove_all(d);
    return d;
}

// cheap settings: the pipeline tests only care about plumbing
RunConfig small_run(const fs::path& out) {
    RunConfig c;
    c.b_points = 20;
    c.delta_pairs = 40;
    c.closing_patterns = 6;
    c.output = out.string();
    return c;
}

template <class F>
std::string error_of(F&& f) {
    try {
        f();
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Config, ParsesKeysAndComments) {
    const RunConfig c = parse_config(
        "# a run\n"
        "map = \"perturbed-cat\"   # inline comment\n"
        "perturbation = 0.02\n"
        "grid = 256\n"
        "\n"
        "seed = 7\n");
    EXPECT_EQ(c.map, "perturbed-cat");
    EXPECT_DOUBLE_EQ(c.perturbation, 0.02);
    EXPECT_EQ(c.grid, 256);
    EXPECT_EQ(c.seed, 7u);
    EXPECT_EQ(c.depth, RunConfig{}.depth);
}

TEST(Config, UnknownKeyNamesTheLine) {
    const std::string msg = error_of([] { (void)parse_config("grid = 64\ngird = 64\n", "run.toml"); });
    EXPECT_NE(msg.find("gird"), std::string::npos) << msg;
    EXPECT_NE(msg.find("2"), std::string::npos) << msg;
    EXPECT_THROW((void)parse_config("gird = 64\n"), ConfigError);
}

TEST(Config, DuplicatesSectionsAndBadValuesRejected) {
    EXPECT_THROW((void)parse_config("grid = 64\ngrid = 128\n"), ConfigError);
    EXPECT_THROW((void)parse_config("[tower]\ngrid = 64\n"), ConfigError);
    EXPECT_THROW((void)parse_config("grid = \"many\"\n"), ConfigError);
    EXPECT_THROW((void)parse_config("grid 64\n"), ConfigError);
}

TEST(Config, MissingFileReported) {
    const std::string msg = error_of([] { (void)load_config("/nonexistent/run.toml"); });
    EXPECT_NE(msg.find("config not found"), std::string::npos) << msg;
}

TEST(Config, TomlRoundTrip) {
    RunConfig c;
    c.map = "linear";
    c.matrix = "3,2,1,1";
    c.perturbation = 0.1 + 0.2;  // not exactly representable in short decimal
    c.epsilon = 0.007;
    c.level = 5;
    c.seed = 123456789;
    const RunConfig back = parse_config(to_toml(c));
    EXPECT_EQ(to_toml(back), to_toml(c));
    EXPECT_EQ(back.perturbation, c.perturbation);
    EXPECT_EQ(back.matrix, "3,2,1,1");
}

TEST(Config, LambdaMustBeBelowChi) {
    RunConfig c;
    c.chi = 0.9;
    c.lambda = 0.9;
    const std::string msg = error_of([&] { (void)resolve_params(c); });
    EXPECT_NE(msg.find("lambda"), std::string::npos) << msg;
    EXPECT_THROW((void)resolve_params(c), ConfigError);
    c.lambda = 0.5;
    EXPECT_NO_THROW((void)resolve_params(c));
}

TEST(Config, EpsilonAboveEps1NamesEps1) {
    RunConfig c;
    c.epsilon = 0.5;
    const std::string msg = error_of([&] { (void)resolve_params(c); });
    EXPECT_NE(msg.find("eps1"), std::string::npos) << msg;
}

TEST(Config, AutoChiIsTheLogEigenvalue) {
    const ResolvedParams rp = resolve_params(RunConfig{});
    EXPECT_NEAR(rp.params.chi, std::log((3 + std::sqrt(5.0)) / 2), 1e-8);
    EXPECT_NEAR(rp.params.lambda, rp.params.chi / 2, 1e-15);
}

TEST(Report, TaggedValuesRoundTrip) {
    EXPECT_EQ(measured(0.5)["provenance"], "measured");
    EXPECT_EQ(bound(3)["value"], 3);
    EXPECT_EQ(calibrated(1e-6)["provenance"], "calibrated");
    const Json inf = measured(INFINITY);
    EXPECT_TRUE(inf["value"].is_null());
    EXPECT_EQ(tagged_value(inf, "x"), INFINITY);
    EXPECT_TRUE(std::isnan(tagged_value(measured(NAN), "x")));
    EXPECT_THROW((void)tagged_value(Json(1.0), "x"), PreconditionError);
}

TEST(Report, TableWritesCsvAndTaggedJsonl) {
    const fs::path d = fresh_dir("table");
    fs::create_directories(d);
    Table t("demo", {{"n", Provenance::bound}, {"err", Provenance::measured}, {"label", Provenance::measured}});
    t.add({1LL, 0.1, std::string("a")});
    t.add({2LL, 1e-17, std::string("b")});
    EXPECT_THROW(t.add({3LL}), PreconditionError);
    t.write(d, EmitOptions{});
    const std::string csv = slurp(d / "demo.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "n,err,label");
    std::istringstream lines(slurp(d / "demo.jsonl"));
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) {
        const Json j = Json::parse(line);
        EXPECT_EQ(j["n"]["provenance"], "bound");
        EXPECT_EQ(j["err"]["provenance"], "measured");
        EXPECT_TRUE(j["label"].is_string());
        ++n;
    }
    EXPECT_EQ(n, 2);
    // 17 significant digits survive the CSV
    std::istringstream rows(csv);
    std::getline(rows, line);
    std::getline(rows, line);
    std::getline(rows, line);
    EXPECT_EQ(std::stod(line.substr(2, line.rfind(',') - 2)), 1e-17);

    const fs::path only = fresh_dir("table_csv");
    fs::create_directories(only);
    t.write(only, EmitOptions{true, false});
    EXPECT_TRUE(fs::exists(only / "demo.csv"));
    EXPECT_FALSE(fs::exists(only / "demo.jsonl"));
}

TEST(Pipeline, MissingPrerequisiteNamesTheProducer) {
    const fs::path d = fresh_dir("missing");
    Pipeline pipe(small_run(d), {}, nullptr);
    const std::string msg = error_of([&] { (void)pipe.run_nice(); });
    EXPECT_NE(msg.find("hypertower constants"), std::string::npos) << msg;
    EXPECT_THROW((void)Pipeline(small_run(d), {}, nullptr).run_stats(), MissingPrerequisite);
}

TEST(Pipeline, StaleConstantsDetected) {
    const fs::path d = fresh_dir("stale");
    ASSERT_TRUE(Pipeline(small_run(d), {}, nullptr).run_constants().pass);
    RunConfig other = small_run(d);
    other.seed = 99;
    Pipeline pipe(other, {}, nullptr);
    const std::string msg = error_of([&] { (void)pipe.run_close(); });
    EXPECT_NE(msg.find("seed"), std::string::npos) << msg;
}

TEST(Pipeline, RunsAreByteIdentical) {
    std::string first_csv, first_jsonl;
    for (const std::string name : {"det_a", "det_b"}) {
        const fs::path d = fresh_dir(name);
        Pipeline pipe(small_run(d), {}, nullptr);
        ASSERT_TRUE(pipe.run_constants().pass);
        ASSERT_TRUE(pipe.run_close().pass);
        const std::string csv = slurp(d / "closing.csv"), jsonl = slurp(d / "closing.jsonl");
        EXPECT_FALSE(csv.empty());
        if (first_csv.empty()) {
            first_csv = csv;
            first_jsonl = jsonl;
        } else {
            EXPECT_EQ(csv, first_csv);
            EXPECT_EQ(jsonl, first_jsonl);
        }
    }
}
