#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include <fedseg/dice.hpp>
#include <fedseg/rng.hpp>

using namespace fedseg;

namespace {

std::pair<std::vector<double>, std::vector<std::uint8_t>> random_pair(rng_stream& rng,
                                                                      std::size_t n) {
    std::vector<double> p(n);
    std::vector<std::uint8_t> t(n);
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = rng.uniform();
        t[i] = rng.uniform() < 0.4 ? 1 : 0;
    }
    return {std::move(p), std::move(t)};
}

} // namespace

TEST_CASE("overlap score on a known configuration") {
    // soft outputs thresholded at 0.5 inclusive, as evaluation does:
    // |P| = 4, |T| = 6, |P inter T| = 3  ->  2*3 / (4+6) = 0.6
    std::vector<float> soft = {0.9f, 0.8f, 0.7f, 0.5f, 0.1f, 0.2f, 0.0f, 0.3f, 0.4f, 0.1f};
    std::vector<std::uint8_t> t = {1, 1, 1, 0, 1, 1, 1, 0, 0, 0};
    std::vector<float> p(soft.size());
    for (std::size_t i = 0; i < soft.size(); ++i) p[i] = soft[i] >= 0.5f ? 1.0f : 0.0f;
    CHECK(dice_binary<float>(p, t) == Catch::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("both-empty masks score 1") {
    std::vector<float> p = {0.0f, 0.0f, 0.0f};
    std::vector<std::uint8_t> t = {0, 0, 0};
    CHECK(dice_binary<float>(p, t) == 1.0);
}

TEST_CASE("non-binary prediction values are rejected") {
    std::vector<float> p = {0.5f, 0.0f};
    std::vector<std::uint8_t> t = {1, 0};
    CHECK_THROWS_AS(dice_binary<float>(p, t), precondition_error);
}

TEST_CASE("score is bounded, symmetric, and exact on self-overlap") {
    rng_stream rng(31);
    for (int it = 0; it < 10000; ++it) {
        auto [soft, t] = random_pair(rng, 24);
        std::vector<double> p(soft.size());
        std::vector<std::uint8_t> pb(soft.size());
        for (std::size_t i = 0; i < soft.size(); ++i) {
            p[i] = soft[i] >= 0.5 ? 1.0 : 0.0;
            pb[i] = soft[i] >= 0.5 ? 1 : 0;
        }
        const double d = dice_binary<double>(p, t);
        CHECK(d >= 0.0);
        CHECK(d <= 1.0);

        // symmetry: swap the roles of prediction and target
        std::vector<double> tf(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) tf[i] = t[i] ? 1.0 : 0.0;
        CHECK(dice_binary<double>(tf, pb) == Catch::Approx(d).margin(1e-15));

        // self-overlap is perfect
        CHECK(dice_binary<double>(tf, t) == 1.0);
    }
}

TEST_CASE("loss on fully disjoint hard masks") {
    // |P| = |T| = 2 with empty intersection: log(2+2+1) - log(0+1) = log 5
    std::vector<double> p = {1.0, 1.0, 0.0, 0.0};
    std::vector<std::uint8_t> t = {0, 0, 1, 1};
    CHECK(soft_dice_loss<double>(p, t) == Catch::Approx(std::log(5.0)).epsilon(1e-14));
}

TEST_CASE("loss is nonnegative with equality exactly at the smoothed optimum") {
    rng_stream rng(37);
    for (int it = 0; it < 10000; ++it) {
        auto [p, t] = random_pair(rng, 16);
        const double loss = soft_dice_loss<double>(p, t);
        CHECK(loss >= 0.0);
        const double e = std::exp(-loss);
        CHECK(e > 0.0);
        CHECK(e <= 1.0);

        double sp = 0, st = 0, si = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            sp += p[i];
            st += t[i];
            si += p[i] * (t[i] ? 1.0 : 0.0);
        }
        if (loss < 1e-12) CHECK(std::fabs(sp + st - 2 * si) < 1e-9);
    }

    // exact-match soft masks hit zero exactly
    std::vector<double> p = {1.0, 0.0, 1.0};
    std::vector<std::uint8_t> t = {1, 0, 1};
    CHECK(soft_dice_loss<double>(p, t) == 0.0);
}

TEST_CASE("loss strictly decreases as soft intersection grows at fixed total mass") {
    rng_stream rng(41);
    for (int it = 0; it < 10000; ++it) {
        std::vector<std::uint8_t> t = {1, 0};
        const double mass = rng.uniform(0.2, 1.0);
        const double shift = rng.uniform(0.01, mass / 2);
        // same |P|+|T|, more of the mass moved onto the target pixel
        std::vector<double> lo = {mass / 2, mass / 2};
        std::vector<double> hi = {mass / 2 + shift, mass / 2 - shift};
        CHECK(soft_dice_loss<double>(hi, t) < soft_dice_loss<double>(lo, t));
    }
}

TEST_CASE("loss gradient matches finite differences") {
    rng_stream rng(43);
    for (int seed_it = 0; seed_it < 12; ++seed_it) {
        auto [p, t] = random_pair(rng, 20);
        const auto g = soft_dice_loss_grad<double>(p, t);
        REQUIRE(g.size() == p.size());
        const double h = 1e-7;
        for (std::size_t i = 0; i < p.size(); ++i) {
            auto q = p;
            q[i] = p[i] + h;
            const double lp = soft_dice_loss<double>(q, t);
            q[i] = p[i] - h;
            const double lm = soft_dice_loss<double>(q, t);
            const double fd = (lp - lm) / (2 * h);
            const double denom = std::max({std::fabs(g[i]), std::fabs(fd), 1e-3});
            CHECK(std::fabs(g[i] - fd) / denom < 1e-6);
        }
    }
}

TEST_CASE("loss gradient closed form on empty masks") {
    // all-zero prediction and target: d/dp_i = 1/(0+0+1) - 0 = 1 per pixel
    std::vector<double> p(6, 0.0);
    std::vector<std::uint8_t> t(6, 0);
    for (double gi : soft_dice_loss_grad<double>(p, t)) CHECK(gi == 1.0);
}

TEST_CASE("loss gradient scale factor multiplies through") {
    rng_stream rng(47);
    auto [p, t] = random_pair(rng, 10);
    const auto g1 = soft_dice_loss_grad<double>(p, t, 1.0);
    const auto g3 = soft_dice_loss_grad<double>(p, t, 0.25);
    for (std::size_t i = 0; i < g1.size(); ++i)
        CHECK(g3[i] == Catch::Approx(0.25 * g1[i]).margin(1e-15));
}
