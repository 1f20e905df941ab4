#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <limits>
#include <random>
#include <vector>

#include "meroflow/expr.hpp"
#include "meroflow/wv.hpp"

using namespace meroflow::wv;
using meroflow::expr::parse;

namespace {

const double kPi = std::acos(-1.0);
const double kInf = std::numeric_limits<double>::infinity();

CoefficientSeries exp_series(int k_max = 170) {
    return CoefficientSeries::from_rule(
        [](int k) { return Complex(std::exp(-std::lgamma(k + 1.0)), 0); }, k_max);
}

CoefficientSeries monomial_series(int n) {
    std::vector<Complex> b(static_cast<size_t>(n) + 1);
    b.back() = 1;
    return CoefficientSeries::from_list(std::move(b));
}

// straight argmax of |b_k| r^k, last index winning ties
int argmax_index(const CoefficientSeries& s, double r) {
    double best = -kInf;
    int n = -1;
    for (int k = 0; k <= s.k_max(); ++k) {
        if (s.at(k) == Complex(0, 0)) continue;
        double lg = std::log(std::abs(s.at(k))) + k * std::log(r);
        if (lg >= best) {
            best = lg;
            n = k;
        }
    }
    return n;
}

}  // namespace

TEST_CASE("central index of reference series") {
    auto e = exp_series();
    CHECK(central_index(e, 10.0) == 10);   // exact tie at 9 resolves upward
    CHECK(central_index(e, 10.5) == 10);
    CHECK(central_index(e, 30.0) == 30);

    auto quad = CoefficientSeries::from_list({{1, 0}, {0, 0}, {1, 0}});
    CHECK(central_index(quad, 2.0) == 2);
    CHECK(central_index(quad, 1.0) == 2);  // 1 vs 1, larger index wins
    CHECK(central_index(quad, 0.25) == 0);

    auto mono = monomial_series(5);
    CHECK(central_index(mono, 0.3) == 5);
    CHECK(central_index(mono, 7.0) == 5);

    CHECK_THROWS_AS(central_index(e, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(central_index(e, -2.0), std::invalid_argument);
    CHECK_THROWS_AS(central_index(CoefficientSeries::from_list({{0, 0}, {0, 0}}), 1.0),
                    std::invalid_argument);
}

TEST_CASE("truncated series demand a dominated tail") {
    // cutting the exponential at k = 12 leaves the peak at the edge for r = 10
    auto cut = CoefficientSeries::from_rule(
        [](int k) { return Complex(std::exp(-std::lgamma(k + 1.0)), 0); }, 12);
    CHECK_THROWS_AS(central_index(cut, 10.0), std::runtime_error);
    CHECK(central_index(cut, 0.5) == 0);  // small radius: peak well inside

    // geometric coefficients keep growing at r = 3, decay at r = 1
    auto geo = CoefficientSeries::from_rule(
        [](int k) { return Complex(std::pow(0.5, k), 0); }, 40);
    CHECK_THROWS_AS(central_index(geo, 3.0), std::runtime_error);
    CHECK(central_index(geo, 1.0) == 0);

    // the identical list taken as exact is always admissible
    std::vector<Complex> b;
    for (int k = 0; k <= 40; ++k) b.push_back({std::pow(0.5, k), 0});
    CHECK(central_index(CoefficientSeries::from_list(b), 3.0) == 40);
}

TEST_CASE("central index equals the brute-force argmax and grows with r") {
    std::mt19937 rng(20260823u);
    std::uniform_real_distribution<double> mag(-12.0, 12.0);
    std::uniform_real_distribution<double> phase(0.0, 2 * kPi);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> len(5, 60);
    std::uniform_real_distribution<double> logr(std::log(0.05), std::log(40.0));

    for (int trial = 0; trial < 100; ++trial) {
        int K = len(rng);
        std::vector<Complex> b(static_cast<size_t>(K) + 1);
        for (auto& c : b)
            if (unit(rng) >= 0.1) c = std::polar(std::pow(10.0, mag(rng)), phase(rng));
        if (b.back() == Complex(0, 0)) b.back() = 1;
        auto series = CoefficientSeries::from_list(b);

        double r = std::exp(logr(rng));
        int got = central_index(series, r);
        CHECK(got == argmax_index(series, r));
        CHECK(got <= central_index(series, 1.7 * r));
    }
}

TEST_CASE("max modulus point on reference circles") {
    Complex a = max_modulus_point(parse("exp(z)"), 30.0);
    CHECK(a.real() == 30.0);  // flat-tie fallback snaps the axis exactly
    CHECK(a.imag() == 0.0);

    // a smooth modulus is flat to second order at its peak, so comparisons go
    // below rounding noise at about sqrt(eps) in angle; r * 1e-7 covers that
    Complex b = max_modulus_point(parse("exp(-z)"), 5.0);
    CHECK(std::abs(b - Complex(-5, 0)) <= 5e-7);

    Complex c = max_modulus_point(parse("exp(i*z)"), 5.0);
    CHECK(std::abs(c - Complex(0, -5)) <= 5e-7);

    Complex d = max_modulus_point(parse("z^2"), 2.0);  // constant modulus
    CHECK(d == Complex(2, 0));

    CHECK_THROWS_AS(max_modulus_point(parse("1/(z-2)"), 2.0), std::invalid_argument);
}

TEST_CASE("context assembles the derived scales") {
    auto ctx = make_context(parse("exp(z)"), exp_series(), 30.0, 1.0);
    CHECK(ctx.N == 30);
    CHECK(ctx.z_r == Complex(30, 0));
    CHECK(std::abs(ctx.A_r - std::exp(-30.0)) <= 1e-26);
    CHECK(ctx.T_r == doctest::Approx(30.0 * std::exp(-30.0) / 29.0).epsilon(1e-12));
    CHECK(ctx.S_r == doctest::Approx(ctx.T_r * std::exp(-std::pow(30.0, 0.25))).epsilon(1e-12));
    CHECK(ctx.P_r == 2 * ctx.S_r);
    CHECK(ctx.Q == 4);
    CHECK(ctx.P_r == doctest::Approx(1.864313175636826e-14).epsilon(1e-9));

    auto j = context_to_json(ctx);
    CHECK(j["N"] == 30);
    CHECK(j["z_r"] == "30+0i");
    CHECK(j["Q"] == 4);

    // a constant series has central index 0, below the usable range
    CHECK_THROWS_AS(make_context(parse("z^2"), CoefficientSeries::from_list({{1, 0}}), 2.0, 1.0),
                    std::domain_error);
}

TEST_CASE("power-law deviation vanishes exactly for a pure power") {
    auto ctx = make_context(parse("z^5"), monomial_series(5), 2.0, 1.0);
    auto rep = power_law_deviation(parse("z^5"), ctx, 16);
    CHECK(rep.max_deviation <= 1e-12);
    CHECK(rep.skipped_nodes == 0);
    CHECK(rep.grid_nodes == 256);
}

TEST_CASE("power-law deviation on the exponential at r = 30") {
    auto ctx = make_context(parse("exp(z)"), exp_series(), 30.0, 1.0);

    auto degenerate = ctx;
    degenerate.L = 0;  // the box collapses to the single point z_r
    CHECK(power_law_deviation(parse("exp(z)"), degenerate, 8).max_deviation == 0.0);

    // the corner of the L = 1 box carries the largest relative error
    auto rep = power_law_deviation(parse("exp(z)"), ctx, 16);
    CHECK(rep.max_deviation >= 0.3);
    CHECK(rep.max_deviation <= 0.6);
    CHECK(rep.skipped_nodes == 0);

    CHECK_THROWS_AS(power_law_deviation(parse("exp(z)"), ctx, 4), std::invalid_argument);
}

TEST_CASE("deviation grid reports nodes the function cannot cover") {
    // exp(i z^8) overflows or underflows at the box corners around z = 2
    WvContext ctx;
    ctx.r = 2.0;
    ctx.z_r = Complex(2, 0);
    ctx.N = 5;
    ctx.L = 1.0;
    auto rep = power_law_deviation(parse("exp(i*z^8)"), ctx, 16);
    CHECK(rep.skipped_nodes > 0);
    CHECK(rep.skipped_nodes < rep.grid_nodes);
    CHECK(std::isfinite(rep.max_deviation));
}

TEST_CASE("antiderivative reproduces the closed form for a pure power") {
    auto f = parse("z^5");
    auto ctx = make_context(f, monomial_series(5), 2.0, 1.0);
    auto F = build_F(f, ctx);

    CHECK(F(F.base_point()) == F.constant());
    // for z^5 the anchor constant collapses F to -z^-4/4 identically
    for (Complex tau : {Complex(0, 0), Complex(0.3, 0.2), Complex(0, -0.5), Complex(1.0, 0),
                        Complex(-1.0, 0.8), Complex(0.9, -1.1)}) {
        Complex z = ctx.z_r * std::exp(tau);
        Complex exact = -0.25 / (z * z * z * z);
        CHECK(std::abs(F(z) - exact) <= 1e-10 * (1 + std::abs(exact)));
    }
}

TEST_CASE("antiderivative of the exponential matches -exp(-z) up to the anchor") {
    auto f = parse("exp(z)");
    auto ctx = make_context(f, exp_series(), 30.0, 1.0);
    auto F = build_F(f, ctx);

    // F(z_r) sits within 10% of -T_r
    Complex at_zr = F(ctx.z_r);
    CHECK(std::abs(at_zr / ctx.T_r + 1.0) <= 0.1);
    CHECK(std::abs(at_zr / ctx.T_r + 1.0) >= 0.01);  // and is measurably offset

    Complex shift = F.constant() + std::exp(-F.base_point());
    double delta = std::pow(30.0, -0.625);
    for (int a = 0; a < 5; ++a) {
        for (int b = 0; b < 5; ++b) {
            Complex tau(-delta + delta * a / 2.0, -delta + delta * b / 2.0);
            Complex z = ctx.z_r * std::exp(tau);
            Complex exact = -std::exp(-z) + shift;
            CHECK(std::abs(F(z) - exact) <= 1e-10 * ctx.T_r);
        }
    }
}

TEST_CASE("escape scan on the exponential at r = 30 finds the three seeds") {
    auto f = parse("exp(z)");
    auto ctx = make_context(f, exp_series(), 30.0, 1.0);
    auto report = escape_scan(f, ctx);

    REQUIRE_FALSE(report.aborted);
    REQUIRE(report.seeds.size() == 3);
    CHECK(report.count == 3);

    // seeds ordered along the locus: imaginary parts +2 pi, 0, -2 pi
    CHECK(std::abs(report.seeds[0].y.imag() - 2 * kPi) <= 1e-6);
    CHECK(std::abs(report.seeds[1].y.imag()) <= 1e-6);
    CHECK(std::abs(report.seeds[2].y.imag() + 2 * kPi) <= 1e-6);

    for (const auto& s : report.seeds) {
        CHECK(s.outcome == "EscapedFiniteTime");
        CHECK(s.pass);
        CHECK(std::abs(s.y.real() - 32.3064) <= 1e-2);
        CHECK(s.T > 0);
        CHECK(s.T <= ctx.P_r);
        // the blow-up time tracks e^{-Re Y} closely at this radius
        CHECK(std::abs(s.T / std::exp(-s.y.real()) - 1.0) <= 0.15);
        // either the single-crossing gate (no ladder fit, unbounded) or a
        // ladder that survived the turnback and nailed T
        CHECK((std::isinf(s.uncertainty) || s.uncertainty <= 1e-6));
    }
    // the center seed keeps a residual phase error, turns back below the
    // second rung and reports the crossing-only uncertainty
    CHECK(std::isinf(report.seeds[1].uncertainty));

    CHECK(report.min_separation >= 2 * kPi * 0.9);
    CHECK(report.min_separation <= 2 * kPi * 1.1);
    // power law still weak at r = 30, so the count gate is informational here
    CHECK(report.gate_deviation >= 1.0);
    CHECK(report.gate_deviation <= 2.0);

    auto j = report_to_json(report);
    CHECK(j["N"] == 30);
    CHECK(j["seeds"].size() == 3);
    CHECK(j["seeds"][0]["pass"] == true);
    CHECK(j["seeds"][1]["uncertainty"].is_null());
    CHECK(j["count"] == 3);
    CHECK(j.contains("aborted") == false);
}

TEST_CASE("escape scan on a pure power measures the blow-up time exactly") {
    auto f = parse("z^5");
    auto ctx = make_context(f, monomial_series(5), 2.0, 1.0);
    auto report = escape_scan(f, ctx);

    REQUIRE_FALSE(report.aborted);
    REQUIRE(report.seeds.size() == 1);  // one arg F = pi crossing inside the box
    const auto& s = report.seeds[0];
    CHECK(s.pass);
    CHECK(s.outcome == "EscapedFiniteTime");
    CHECK(std::abs(s.y - Complex(2.9066010540941365, 0)) <= 1e-6);
    // T equals -F(Y) = S_r for the exact power flow
    CHECK(std::abs(s.T - ctx.S_r) <= 1e-8 * ctx.S_r);
    CHECK(std::isfinite(s.uncertainty));
    CHECK(s.uncertainty <= 1e-4 * s.T);
    CHECK(report.count == 1);
    CHECK(report.gate_deviation <= 1e-10);
}

TEST_CASE("escape scan report does not depend on the worker count") {
    auto f = parse("exp(z)");
    auto ctx = make_context(f, exp_series(), 30.0, 1.0);
    auto one = report_to_json(escape_scan(f, ctx, {}, 1)).dump();
    auto many = report_to_json(escape_scan(f, ctx, {}, 3)).dump();
    CHECK(one == many);
}

TEST_CASE("ring sampling recovers Maclaurin coefficients") {
    auto series = maclaurin_series(parse("exp(z)"), 10.0);
    CHECK(series.truncated());
    for (int k = 0; k <= 25; ++k) {
        double exact = std::exp(-std::lgamma(k + 1.0));
        CHECK(std::abs(series.at(k) - Complex(exact, 0)) <= 1e-9 * exact);
    }
    CHECK(central_index(series, 10.0) == 10);

    // a polynomial spectrum falls straight to noise and stays exact
    auto poly = maclaurin_series(parse("1+z^2"), 2.0);
    CHECK_FALSE(poly.truncated());
    CHECK(poly.k_max() == 2);
    CHECK(central_index(poly, 2.0) == 2);
    CHECK(central_index(poly, 1.0) == 2);

    CHECK_THROWS_AS(maclaurin_series(parse("1/z"), 1.0), std::invalid_argument);
}
