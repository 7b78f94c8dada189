#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "common.hpp"
#include "difl/errors.hpp"
#include "difl/evaluator.hpp"

using namespace difl;

namespace {

Quaternion random_quaternion(std::mt19937_64& rng) {
    std::normal_distribution<double> g(0, 1);
    return Quaternion{g(rng), g(rng), g(rng), g(rng)}.normalized();
}

DatasetManifest slices_manifest() {
    DatasetManifest m;
    m.domains = {"ref", "q"};
    m.slices = {"east", "west"};
    for (int i = 0; i < 4; ++i) {
        m.records.push_back({"e" + std::to_string(i), "", "q", "east", Role::Query, Pose{}});
        m.records.push_back({"w" + std::to_string(i), "", "q", "west", Role::Query, Pose{}});
    }
    std::sort(m.records.begin(), m.records.end(), [](auto& a, auto& b) { return a.id < b.id; });
    return m;
}

}  // namespace

TEST_CASE("position error") {
    CHECK(position_error(Pose{{1, 2, 3}, {}}, Pose{{1, 2, 3}, {}}) == 0.0);
    CHECK(position_error(Pose{{0, 0, 0}, {}}, Pose{{0.3, 0.4, 0}, {}}) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("rotation error examples") {
    std::mt19937_64 rng(1);
    const auto q = random_quaternion(rng);
    CHECK(rotation_error(q, q) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(rotation_error(q, {-q.w, -q.x, -q.y, -q.z}) < 1e-6);
    const Quaternion z90{std::cos(std::numbers::pi / 4), 0, 0, std::sin(std::numbers::pi / 4)};
    CHECK(rotation_error({}, z90) == doctest::Approx(90.0).epsilon(1e-12));
    // Normalized on entry.
    CHECK(rotation_error({2, 0, 0, 0}, {3 * z90.w, 0, 0, 3 * z90.z}) == doctest::Approx(90.0).epsilon(1e-12));
    CHECK(rotation_error({}, {0, 1, 0, 0}) == doctest::Approx(180.0));
    CHECK_THROWS_AS(rotation_error({0, 0, 0, 0}, q), DegenerateRotation);
    CHECK_THROWS_AS(rotation_error(q, {0, 0, 0, 0}), DegenerateRotation);
}

TEST_CASE("rotation error symmetry and sign invariance") {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 200; ++i) {
        const auto a = random_quaternion(rng), b = random_quaternion(rng);
        const double e = rotation_error(a, b);
        CHECK(e >= 0.0);
        CHECK(e <= 180.0);
        CHECK(rotation_error(b, a) == doctest::Approx(e).epsilon(1e-9));
        CHECK(rotation_error({-a.w, -a.x, -a.y, -a.z}, b) == doctest::Approx(e).epsilon(1e-9));
        // A common left rotation does not change the relative angle.
        const auto c = random_quaternion(rng);
        CHECK(rotation_error(c * a, c * b) == doctest::Approx(e).epsilon(1e-7));
    }
}

TEST_CASE("classify") {
    const PrecisionRegimes r;
    CHECK(classify(0.1, 1, r) == (std::vector<bool>{true, true, true}));
    CHECK(classify(0.3, 1, r) == (std::vector<bool>{false, true, true}));
    CHECK(classify(6, 1, r) == (std::vector<bool>{false, false, false}));
    CHECK(classify(0.1, 3, r) == (std::vector<bool>{false, true, true}));
    CHECK(classify(0.25, 2, r) == (std::vector<bool>{true, true, true}));  // thresholds are inclusive
}

TEST_CASE("classify is monotone in thresholds") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 12);
    const PrecisionRegimes base;
    for (int i = 0; i < 300; ++i) {
        const double ep = u(rng) / 2, er = u(rng);
        auto bigger = base;
        for (auto& t : bigger.thresholds) {
            t.max_position_m *= 1.0 + u(rng) / 12;
            t.max_rotation_deg += u(rng) / 4;
        }
        const auto f0 = classify(ep, er, base), f1 = classify(ep, er, bigger);
        for (size_t k = 0; k < f0.size(); ++k) {
            if (f0[k]) CHECK(f1[k]);
            if (k > 0 && f0[k - 1]) CHECK(f0[k]);
        }
    }
}

TEST_CASE("regime validation") {
    PrecisionRegimes r;
    CHECK_NOTHROW(r.validate());
    r.thresholds = {{0.5, 5}, {0.25, 10}};
    CHECK_THROWS_AS(r.validate(), ConfigError);
    r.thresholds = {{0.5, 5}, {0.5, 5}};
    CHECK_THROWS_AS(r.validate(), ConfigError);
    r.thresholds = {};
    CHECK_THROWS_AS(r.validate(), ConfigError);
}

TEST_CASE("report from a log aggregates per query and per slice") {
    const auto m = slices_manifest();
    std::vector<RetrievalLogRow> log{
        {"e0", "r", 0.1, 0.1, 1.0},  // all
        {"e1", "r", 0.1, 0.4, 1.0},  // medium+coarse
        {"e2", "r", 0.1, 9.0, 1.0},  // none
        {"w0", "r", 0.1, 0.1, 0.5},  // all
        {"w1", "r", 0.1, 3.0, 7.0},  // coarse
    };
    const PrecisionRegimes regimes;
    const auto rep = report_from_log(log, m, regimes, 3);
    CHECK(rep.n_queries == 5);
    CHECK(rep.skipped == 3);
    CHECK(rep.per_regime_accuracy == (std::vector<double>{40.0, 60.0, 80.0}));
    REQUIRE(rep.per_slice.size() == 2);
    CHECK(rep.per_slice.at("east").n_queries == 3);
    CHECK(rep.per_slice.at("east").accuracy[1] == doctest::Approx(200.0 / 3));
    CHECK(rep.per_slice.at("west").accuracy == (std::vector<double>{50.0, 50.0, 100.0}));
    CHECK(format_accuracies(rep.per_regime_accuracy) == "40.0/60.0/80.0");
    const auto table = format_report_table(rep, regimes);
    CHECK(table.find("0.25/0.5/5 m") != std::string::npos);
    CHECK(table.find("40.0/60.0/80.0") != std::string::npos);
    CHECK(report_from_log({}, m, regimes).per_regime_accuracy == (std::vector<double>{0, 0, 0}));
}

TEST_CASE("retrieval log round trip reproduces the report") {
    const auto dir = testing::scratch_dir("evallog");
    const auto m = slices_manifest();
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<RetrievalLogRow> log;
    for (const auto& r : m.records) log.push_back({r.id, "ref" + r.id, u(rng), u(rng) * 0.7, u(rng) * 7});
    write_retrieval_log(log, dir / "log.csv");
    const auto back = read_retrieval_log(dir / "log.csv");
    CHECK(back == log);
    CHECK(report_from_log(back, m, {}) == report_from_log(log, m, {}));
    write_report_csv(report_from_log(log, m, {}), dir / "report.csv");
    CHECK(std::filesystem::file_size(dir / "report.csv") > 0);

    std::ofstream(dir / "bad.csv") << "query_id,retrieved_id,distance,e_pos,e_rot\na,b,1,2\n";
    CHECK_THROWS_AS(read_retrieval_log(dir / "bad.csv"), FormatError);
    std::ofstream(dir / "bad2.csv") << "wrong header\n";
    CHECK_THROWS_AS(read_retrieval_log(dir / "bad2.csv"), FormatError);
    CHECK_THROWS_AS(read_retrieval_log(dir / "missing.csv"), IoError);
}
