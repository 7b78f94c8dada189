#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "common.hpp"
#include "difl/checksum.hpp"
#include "difl/errors.hpp"
#include "difl/feature_index.hpp"

using namespace difl;

namespace {

std::vector<float> random_vector(std::mt19937_64& rng, size_t n) {
    std::normal_distribution<float> g(0.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

std::vector<Descriptor> random_descriptors(std::mt19937_64& rng, int n, size_t dim, int slices) {
    std::vector<Descriptor> out;
    for (int i = 0; i < n; ++i) {
        char id[16];
        std::snprintf(id, sizeof id, "img%04d", i);
        out.push_back({random_vector(rng, dim), id, "s" + std::to_string(i % slices)});
    }
    return out;
}

std::vector<std::string> ids(const std::vector<Match>& m) {
    std::vector<std::string> out;
    for (const auto& x : m) out.push_back(x.image_id);
    return out;
}

}  // namespace

TEST_CASE("cosine distance examples") {
    const std::vector<float> u{1, 0}, v{1, 1}, w{0, 3};
    CHECK(cosine_distance(u, u) == 0.0);
    CHECK(cosine_distance(u, w) == doctest::Approx(1.0));
    CHECK(cosine_distance(u, v) == doctest::Approx(1 - 1 / std::sqrt(2.0)).epsilon(1e-7));
    CHECK(cosine_distance(u, std::vector<float>{-2, 0}) == doctest::Approx(2.0));
    const std::vector<float> zero{0, 0};
    CHECK_THROWS_AS(cosine_distance(u, zero), DegenerateVector);
    CHECK_THROWS_AS(cosine_distance(u, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST_CASE("l2 distance examples") {
    const std::vector<float> z{0, 0}, p{3, 4};
    CHECK(l2_distance(z, z) == 0.0);
    CHECK(l2_distance(z, p) == 5.0);
    CHECK_THROWS_AS(l2_distance(z, std::vector<float>{1}), ShapeError);
    std::mt19937_64 rng(1);
    for (int i = 0; i < 50; ++i) {
        const auto a = random_vector(rng, 17), b = random_vector(rng, 17);
        CHECK(l2_distance(a, b) == l2_distance(b, a));
        CHECK(cosine_distance(a, b) == doctest::Approx(cosine_distance(b, a)).epsilon(1e-12));
        const double c = cosine_distance(a, b);
        CHECK(c >= 0.0);
        CHECK(c <= 2.0);
    }
}

TEST_CASE("metric and PCA spec parsing") {
    CHECK(parse_metric("cosine") == Metric::Cosine);
    CHECK(parse_metric("l2") == Metric::L2);
    CHECK_THROWS_AS(parse_metric("l1"), ConfigError);
    CHECK(PcaSpec::parse("none").kind == PcaSpec::Kind::None);
    CHECK(PcaSpec::parse("slice").kind == PcaSpec::Kind::Slice);
    CHECK(PcaSpec::parse("100").k == 100);
    CHECK(PcaSpec::parse("100").to_string() == "100");
    CHECK_THROWS_AS(PcaSpec::parse("-3"), ConfigError);
    CHECK_THROWS_AS(PcaSpec::parse("12abc"), ConfigError);
}

TEST_CASE("PCA model properties") {
    std::mt19937_64 rng(3);
    std::vector<std::vector<float>> rows;
    for (int i = 0; i < 30; ++i) rows.push_back(random_vector(rng, 12));
    bool clamped = true;
    const auto m = fit_pca(rows, 5, false, &clamped);
    CHECK_FALSE(clamped);
    CHECK(m.k == 5);
    CHECK(m.dim == 12);
    // Orthonormal rows.
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            double s = 0;
            for (int c = 0; c < 12; ++c) s += double(m.components[i * 12 + c]) * m.components[j * 12 + c];
            CHECK(std::abs(s - (i == j ? 1.0 : 0.0)) < 1e-5);
        }
    // Projection of the mean is zero.
    const auto pm = m.project(m.mean);
    for (float v : pm) CHECK(std::abs(v) < 1e-5);
    CHECK_THROWS_AS(m.project(std::vector<float>(3)), ShapeError);

    // Requesting more than the rank clamps.
    std::vector<std::vector<float>> few(rows.begin(), rows.begin() + 4);
    const auto small = fit_pca(few, 10, false, &clamped);
    CHECK(clamped);
    CHECK(small.k == 3);
    CHECK_THROWS_AS(fit_pca({}, 2), IndexError);
    CHECK_THROWS_AS(fit_pca({{1, 2}, {1, 2}}, 1), IndexError);

    // Whitened components give unit variance projections.
    const auto wm = fit_pca(rows, 4, true);
    double var = 0;
    for (const auto& r : rows) var += std::pow(wm.project(r)[0], 2);
    CHECK(var / (rows.size() - 1) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("index build groups, sorts and applies PCA per slice") {
    std::mt19937_64 rng(5);
    auto descs = random_descriptors(rng, 10, 512, 1);
    std::reverse(descs.begin(), descs.end());
    const auto idx = build_index_from_descriptors(descs, Metric::Cosine, {});
    CHECK(idx.size() == 10);
    CHECK(idx.latent_dim == 512);
    CHECK(idx.slices.at("s0").front().image_id == "img0000");
    CHECK(idx.slices.at("s0").front().values.size() == 512);

    const auto sliced = build_index_from_descriptors(descs, Metric::Cosine, PcaSpec::parse("slice"));
    for (const auto& d : sliced.slices.at("s0")) CHECK(d.values.size() <= 10);

    auto many = random_descriptors(rng, 240, 256, 2);
    const auto k100 = build_index_from_descriptors(many, Metric::L2, PcaSpec::parse("100"));
    CHECK(k100.pca.size() == 2);
    for (const auto& [_, list] : k100.slices)
        for (const auto& d : list) CHECK(d.values.size() == 100);

    auto dup = descs;
    dup.push_back(descs.front());
    CHECK_THROWS_AS(build_index_from_descriptors(dup, Metric::L2, {}), IndexError);
    CHECK_THROWS_AS(build_index_from_descriptors({}, Metric::L2, {}), IndexError);
    descs[3].values.resize(7);
    CHECK_THROWS_AS(build_index_from_descriptors(descs, Metric::L2, {}), ShapeError);
}

TEST_CASE("retrieval basics") {
    std::mt19937_64 rng(7);
    const auto descs = random_descriptors(rng, 40, 16, 2);
    const auto idx = build_index_from_descriptors(descs, Metric::L2, {});
    const auto& target = idx.slices.at("s1")[4];
    const auto top = retrieve_descriptor(idx, "s1", target.values, 5);
    REQUIRE(top.size() == 5);
    CHECK(top[0].image_id == target.image_id);
    CHECK(top[0].distance == 0.0);
    for (size_t i = 1; i < top.size(); ++i) CHECK(top[i - 1].distance <= top[i].distance);
    for (const auto& m : top) CHECK(std::stoi(m.image_id.substr(3)) % 2 == 1);  // never crosses slices
    CHECK(retrieve_descriptor(idx, "s1", target.values, 1000).size() == 20);
    CHECK_THROWS_AS(retrieve_descriptor(idx, "nope", target.values, 1), KeyNotFound);
    CHECK_THROWS_AS(retrieve_descriptor(idx, "s1", target.values, 0), ConfigError);
}

TEST_CASE("ties break by ascending id") {
    std::vector<Descriptor> descs{{{1, 0}, "c", "s"}, {{0, 1}, "a", "s"}, {{1, 0}, "b", "s"}};
    const auto idx = build_index_from_descriptors(descs, Metric::L2, {});
    const auto r = retrieve_descriptor(idx, "s", std::vector<float>{1, 1}, 3);
    CHECK(ids(r) == (std::vector<std::string>{"a", "b", "c"}));
}

TEST_CASE("cosine ranking is scale invariant") {
    std::mt19937_64 rng(9);
    const auto idx = build_index_from_descriptors(random_descriptors(rng, 60, 24, 1), Metric::Cosine, {});
    for (int i = 0; i < 20; ++i) {
        const auto q = random_vector(rng, 24);
        for (float c : {0.001f, 0.5f, 4.0f, 1000.0f}) {
            auto qc = q;
            for (auto& x : qc) x *= c;
            const auto a = retrieve_descriptor(idx, "s0", q, 10), b = retrieve_descriptor(idx, "s0", qc, 10);
            CHECK(ids(a) == ids(b));
            for (size_t k = 0; k < a.size(); ++k) CHECK(a[k].distance == doctest::Approx(b[k].distance).epsilon(1e-5));
        }
    }
}

TEST_CASE("full-rank PCA preserves L2 ranking") {
    std::mt19937_64 rng(11);
    const auto descs = random_descriptors(rng, 30, 64, 1);
    const auto raw = build_index_from_descriptors(descs, Metric::L2, {});
    const auto pca = build_index_from_descriptors(descs, Metric::L2, PcaSpec::parse("slice"));
    const auto& model = pca.pca.at("s0");
    CHECK(model.k == 29);
    for (int i = 0; i < 30; ++i) {
        const auto q = random_vector(rng, 64);
        const auto a = retrieve_descriptor(raw, "s0", q, 30);
        const auto b = retrieve_descriptor(pca, "s0", model.project(q), 30);
        // Distances differ by a query-only constant; compare orders where gaps exceed float noise.
        for (size_t k = 0; k + 1 < a.size(); ++k)
            if (a[k + 1].distance - a[k].distance > 1e-3) {
                const auto pos = std::find(ids(b).begin(), ids(b).end(), a[k].image_id) - ids(b).begin();
                const auto pos_next = std::find(ids(b).begin(), ids(b).end(), a[k + 1].image_id) - ids(b).begin();
                CHECK(pos < pos_next);
            }
        CHECK(a[0].image_id == b[0].image_id);
    }
}

TEST_CASE("index persistence") {
    const auto dir = testing::scratch_dir("index");
    std::mt19937_64 rng(13);
    const auto idx = build_index_from_descriptors(random_descriptors(rng, 10, 20, 2), Metric::Cosine,
                                                  PcaSpec::parse("3"));
    save_index(idx, dir / "a.difx");
    const auto back = load_index(dir / "a.difx");
    CHECK(back == idx);
    CHECK(crc32(std::span<const unsigned char>(serialize_index(back))) ==
          crc32(std::span<const unsigned char>(serialize_index(idx))));

    auto bytes = serialize_index(idx);
    SUBCASE("flipped payload byte") {
        bytes[bytes.size() / 2] ^= 0x40;
        CHECK_THROWS_AS(deserialize_index(bytes), FormatError);
    }
    SUBCASE("truncation at every length") {
        for (size_t n = 0; n < bytes.size(); n += 7)
            CHECK_THROWS_AS(deserialize_index(std::span(bytes).first(n)), FormatError);
    }
    SUBCASE("bad magic") {
        bytes[0] = 'X';
        CHECK_THROWS_AS(deserialize_index(bytes), FormatError);
    }
    SUBCASE("version bump names the version") {
        bytes[4] = 7;
        try {
            deserialize_index(bytes);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("version 7") != std::string::npos);
        }
    }
    CHECK_THROWS_AS(load_index(dir / "missing.difx"), IoError);
}

TEST_CASE("index over a micro bank and a small manifest") {
    const auto dir = testing::scratch_dir("index_bank");
    auto cfg = testing::micro_config(16);
    cfg.base_channels = 8;
    const auto banks = init_bank(cfg, make_domains({"ref", "other"}), 1);
    DatasetManifest m;
    m.base_dir = dir;
    m.domains = {"ref", "other"};
    m.slices = {"s0"};
    for (int i = 0; i < 10; ++i) {
        RawImage img{16, 16, std::vector<uint8_t>(16 * 16 * 3)};
        std::mt19937_64 r(i);
        for (auto& b : img.rgb) b = static_cast<uint8_t>(r() % 256);
        const std::string id = "r" + std::to_string(i);
        write_png(img, dir / (id + ".png"));
        m.records.push_back({id, id + ".png", "ref", "s0", Role::Reference, Pose{}});
    }
    std::sort(m.records.begin(), m.records.end(), [](auto& a, auto& b) { return a.id < b.id; });
    const auto idx = build_index(banks.generators, m, Metric::Cosine, {});
    CHECK(idx.size() == 10);
    CHECK(idx.slices.at("s0").front().values.size() == 512);

    // A reference queried as itself comes back first at distance zero.
    ImageStore store(m, 16, 16);
    const auto res = retrieve(idx, banks.generators, m.find("r3"), 3, store);
    CHECK(res[0].image_id == "r3");
    CHECK(res[0].distance == doctest::Approx(0.0).epsilon(1e-6));

    auto m2 = m;
    m2.slices.push_back("empty");
    CHECK_THROWS_AS(build_index(banks.generators, m2, Metric::Cosine, {}), IndexError);
    auto q = m.find("r3");
    q.slice = "elsewhere";
    CHECK_THROWS_AS(retrieve(idx, banks.generators, q, 1, store), KeyNotFound);
}
