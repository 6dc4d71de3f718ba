#include "physteer/common.hpp"

#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <numeric>
#include <set>
#include <vector>

using namespace physteer;

TEST_SUITE("common") {

TEST_CASE("fnv1a known vectors") {
    CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a("foobar") == 0x85944171f73967e8ULL);
    CHECK(hexDigest(0xabcULL) == "0000000000000abc");
}

TEST_CASE("derived seeds differ per tag and are stable") {
    CHECK(deriveSeed(7, "dataset") == deriveSeed(7, "dataset"));
    CHECK(deriveSeed(7, "dataset") != deriveSeed(7, "encoder"));
    CHECK(deriveSeed(7, "dataset") != deriveSeed(8, "dataset"));
}

TEST_CASE("rng streams are reproducible") {
    Rng a(42);
    Rng b(42);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.normal() == b.normal());
        CHECK(a.uniform() == b.uniform());
    }
}

TEST_CASE("rng uniform and below stay in range") {
    Rng r(3);
    for (int i = 0; i < 10000; ++i) {
        const double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(r.below(7) < 7u);
    }
}

TEST_CASE("rng normal moments") {
    Rng r(9);
    const int n = 200000;
    double s = 0.0;
    double s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        s += z;
        s2 += z * z;
    }
    // 5 standard errors
    CHECK(std::abs(s / n) < 5.0 / std::sqrt(n));
    CHECK(std::abs(s2 / n - 1.0) < 5.0 * std::sqrt(2.0 / n));
}

TEST_CASE("shuffle is a permutation") {
    Rng r(1);
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    r.shuffle(v.begin(), v.end());
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) {
        CHECK(sorted[static_cast<std::size_t>(i)] == i);
    }
}

TEST_CASE("parallelFor visits each index once for any worker count") {
    for (int threads : {1, 2, 5}) {
        std::vector<std::atomic<int>> hits(97);
        parallelFor(hits.size(), threads, [&](std::size_t i) { hits[i]++; });
        for (const auto& h : hits) {
            CHECK(h.load() == 1);
        }
    }
}

}
