#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include "sfms/common.hpp"
#include "sfms/config.hpp"

using namespace sfms;

namespace {
// Force the log-level env var before the first (cached) level() call.
struct EnvSetter {
    EnvSetter() { setenv("SFMS_LOG_LEVEL", "debug", 1); }
} env_setter;
}  // namespace

TEST_CASE("log level reads SFMS_LOG_LEVEL") {
    CHECK(logging::level() == logging::Level::kDebug);
}

TEST_CASE("derive is deterministic and sensitive to every argument") {
    std::uint64_t a = rng::derive(42, "batch", 3, 7);
    CHECK(a == rng::derive(42, "batch", 3, 7));
    CHECK(a != rng::derive(43, "batch", 3, 7));
    CHECK(a != rng::derive(42, "noise", 3, 7));
    CHECK(a != rng::derive(42, "batch", 4, 7));
    CHECK(a != rng::derive(42, "batch", 3, 8));
    // Counter defaults: derive(s, t) == derive(s, t, 0, 0).
    CHECK(rng::derive(9, "x") == rng::derive(9, "x", 0, 0));
}

TEST_CASE("derived streams do not collide across tags for many counters") {
    std::vector<std::uint64_t> seen;
    for (int step = 0; step < 200; ++step) {
        seen.push_back(rng::derive(1, "batch", step));
        seen.push_back(rng::derive(1, "noise", step));
    }
    std::sort(seen.begin(), seen.end());
    CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
}

TEST_CASE("Rng uniform01 stays in the open unit interval and replays") {
    rng::Rng r1(123), r2(123);
    for (int i = 0; i < 10000; ++i) {
        double u = r1.uniform01();
        CHECK(u > 0.0);
        CHECK(u < 1.0);
        CHECK(u == r2.uniform01());
    }
}

TEST_CASE("Rng uniform01 mean is near 1/2") {
    rng::Rng r(777);
    double s = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) s += r.uniform01();
    CHECK(std::abs(s / n - 0.5) < 0.005);
}

TEST_CASE("Rng uniform_int covers [0, n)") {
    rng::Rng r(5);
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 7000; ++i) {
        std::uint64_t v = r.uniform_int(7);
        REQUIRE(v < 7);
        hits[v]++;
    }
    for (int h : hits) CHECK(h > 500);
}

TEST_CASE("Rng normal has roughly standard moments") {
    rng::Rng r(99);
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        double v = r.normal();
        REQUIRE(std::isfinite(v));
        s += v;
        s2 += v * v;
    }
    CHECK(std::abs(s / n) < 0.01);
    CHECK(std::abs(s2 / n - 1.0) < 0.02);
}

TEST_CASE("config parses values, comments and blanks") {
    KvConfig cfg = KvConfig::parse_text(
        "# leading comment\n"
        "steps = 500\n"
        "\n"
        "lr_main=0.001  # trailing comment\n"
        "mode = dynamic\n"
        "resume = true\n");
    CHECK(cfg.get_long("steps", 0) == 500);
    CHECK(cfg.get_double("lr_main", 0) == doctest::Approx(0.001));
    CHECK(cfg.get_string("mode", "") == "dynamic");
    CHECK(cfg.get_bool("resume", false));
    CHECK_NOTHROW(cfg.reject_unknown_keys());
}

TEST_CASE("config getters fall back when a key is absent") {
    KvConfig cfg = KvConfig::parse_text("a = 1\n");
    CHECK(cfg.get_int("missing", 17) == 17);
    CHECK(cfg.get_double("missing", 2.5) == 2.5);
    CHECK(cfg.get_string("missing", "x") == "x");
    CHECK(cfg.get_bool("missing", true));
    CHECK(cfg.has("a"));
    CHECK_FALSE(cfg.has("missing"));
}

TEST_CASE("config rejects malformed input") {
    CHECK_THROWS_AS(KvConfig::parse_text("novalue\n"), ParseError);
    CHECK_THROWS_AS(KvConfig::parse_text("= 3\n"), ParseError);
    CHECK_THROWS_AS(KvConfig::parse_text("a = 1\na = 2\n"), ParseError);
}

TEST_CASE("config duplicate-key error names the key") {
    try {
        KvConfig::parse_text("k = 1\nk = 2\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("'k'") != std::string::npos);
    }
}

TEST_CASE("config typed getters reject junk values") {
    KvConfig a = KvConfig::parse_text("steps = soon\n");
    CHECK_THROWS_AS(a.get_long("steps", 0), ParseError);
    KvConfig b = KvConfig::parse_text("lr = fast\n");
    CHECK_THROWS_AS(b.get_double("lr", 0), ParseError);
    KvConfig c = KvConfig::parse_text("flag = maybe\n");
    CHECK_THROWS_AS(c.get_bool("flag", false), ParseError);
}

TEST_CASE("config reports unread keys by name") {
    KvConfig cfg = KvConfig::parse_text("good = 1\nmispeled = 2\n");
    cfg.get_int("good", 0);
    try {
        cfg.reject_unknown_keys();
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        std::string msg = e.what();
        CHECK(msg.find("mispeled") != std::string::npos);
        CHECK(msg.find("good") == std::string::npos);
    }
}

TEST_CASE("config loads from file and errors on missing path") {
    std::string path = "/tmp/sfms_test_cfg.txt";
    {
        std::ofstream out(path);
        out << "x = 3\n";
    }
    KvConfig cfg = KvConfig::load(path);
    CHECK(cfg.get_int("x", 0) == 3);
    CHECK_THROWS_AS(KvConfig::load("/tmp/sfms_no_such_cfg_file.txt"), IoError);
}

TEST_CASE("error hierarchy keeps validation subtypes catchable as ValidationError") {
    CHECK_THROWS_AS(throw DimensionError("d"), ValidationError);
    CHECK_THROWS_AS(throw CapacityError("c"), ValidationError);
    ParseError p("bad magic", 12);
    CHECK(p.byte_offset == 12);
    CHECK(std::string(p.what()).find("12") != std::string::npos);
}
