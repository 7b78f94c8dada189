#include <doctest.h>

#include <fstream>
#include <vector>

#include "common.hpp"
#include "difl/checksum.hpp"
#include "difl/errors.hpp"
#include "difl/kv.hpp"

using namespace difl;

TEST_CASE("crc32 matches the standard check value") {
    CHECK(crc32(std::string_view("123456789")) == 0xCBF43926u);
    CHECK(crc32(std::string_view("")) == 0u);
}

TEST_CASE("crc32 chains across calls") {
    const std::string all = "domain invariant features";
    const auto head = crc32(std::string_view(all).substr(0, 7));
    CHECK(crc32(std::string_view(all).substr(7), head) == crc32(std::string_view(all)));
}

TEST_CASE("key/value parsing") {
    const auto kv = parse_key_values("# comment\n  a = 1  \nb=two # trailing\n\n c = 3.5\n");
    CHECK(kv.size() == 3);
    CHECK(kv_int(kv, "a", 0) == 1);
    CHECK(kv_string(kv, "b", "") == "two");
    CHECK(kv_real(kv, "c", 0.0) == doctest::Approx(3.5));
    CHECK(kv_int(kv, "missing", 42) == 42);
    CHECK_THROWS_AS(kv_int(kv, "b", 0), ConfigError);
    CHECK_THROWS_AS(kv_int(kv, "c", 0), ConfigError);
    CHECK_THROWS_AS(parse_key_values("no equals sign"), ConfigError);
    CHECK_THROWS_AS(parse_key_values(" = value"), ConfigError);
}

TEST_CASE("key/value format round trip") {
    KeyValues kv{{"x", "1"}, {"net.base_channels", "64"}, {"path", "/tmp/a b"}};
    CHECK(parse_key_values(format_key_values(kv)) == kv);
}

TEST_CASE("booleans") {
    const auto kv = parse_key_values("t = true\nf = 0\nbad = maybe\n");
    CHECK(kv_bool(kv, "t", false));
    CHECK_FALSE(kv_bool(kv, "f", true));
    CHECK_THROWS_AS(kv_bool(kv, "bad", false), ConfigError);
}

TEST_CASE("missing config file") {
    CHECK_THROWS_AS(read_key_values_file("/nonexistent/difl.cfg"), IoError);
}
