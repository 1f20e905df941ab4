// Acceptance harness: one line per criterion, measured values inline, every
// tolerance pinned as a named constant next to the check that uses it.
// Exits nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "meroflow/conformal.hpp"
#include "meroflow/expr.hpp"
#include "meroflow/flow.hpp"
#include "meroflow/numfmt.hpp"
#include "meroflow/wv.hpp"

using meroflow::expr::Expression;
using meroflow::expr::parse;
using Complex = std::complex<double>;
namespace flow = meroflow::flow;
namespace conformal = meroflow::conformal;
namespace wv = meroflow::wv;

namespace {

int g_failures = 0;

void report(int idx, const char* title, bool pass, const std::string& detail) {
    std::printf("%s  criterion %2d: %s  (%s)\n", pass ? "PASS" : "FAIL", idx, title,
                detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

struct Stopwatch {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

const double kPi = 3.14159265358979323846;

// ------------------------------------------------------------------------
// 1. f = -exp(-z) from 0 escapes at T = 1; exp(z(t)) = 1 - t along the way.

void criterion_1() {
    constexpr double kTolT = 1e-6, kTolResidual = 1e-8, kBudgetS = 1.0;
    Stopwatch sw;
    Expression f = parse("-exp(-z)");
    flow::Trajectory traj = flow::integrate(f, {0, 0}, {});
    const auto* esc = std::get_if<flow::EscapedFiniteTime>(&traj.termination);
    double t_err = esc ? std::fabs(esc->T_est - 1.0) : INFINITY;
    double resid = 0;
    for (const auto& s : traj.samples)
        resid = std::max(resid, std::abs(std::exp(s.z) + s.t - 1.0));
    double secs = sw.seconds();
    bool pass = esc && t_err <= kTolT && resid <= kTolResidual && secs < kBudgetS;
    report(1, "exponential flow escapes at the closed-form time", pass,
           fmt("|T-1| = %.2e, max residual = %.2e, %.2f s", t_err, resid, secs));
}

// ------------------------------------------------------------------------
// 2. Same field from i*pi: the image walks along the negative real axis, the
//    crossing times diverge, and only the time budget stops the run.

void criterion_2() {
    constexpr double kBudgetS = 2.0;
    Stopwatch sw;
    Expression f = parse("-exp(-z)");
    flow::Trajectory traj = flow::integrate(f, {0, kPi}, {});
    bool budget = std::holds_alternative<flow::TimeBudgetExhausted>(traj.termination);
    double secs = sw.seconds();
    report(2, "non-escaping branch exhausts the time budget", budget && secs < kBudgetS,
           fmt("kind = %s, %.2f s", flow::termination_kind(traj.termination), secs));
}

// ------------------------------------------------------------------------
// 3. z^2 has one escape direction, z^3 has two; the symmetric 9x9 grid over
//    [-2,2]^2 must escape exactly on those rays with the closed-form times.

void criterion_3() {
    constexpr double kTolT = 1e-6;
    flow::IntegrationControls controls;
    controls.max_time = 50;

    struct Field {
        const char* text;
        bool (*expected)(double, double);
        double (*T_exact)(double);
    };
    const Field fields[] = {
        {"z^2", [](double re, double im) { return im == 0 && re > 0; },
         [](double re) { return 1.0 / re; }},
        {"z^3", [](double re, double im) { return im == 0 && re != 0; },
         [](double re) { return 1.0 / (2 * re * re); }},
    };

    bool pass = true;
    std::string detail;
    for (const Field& field : fields) {
        Expression f = parse(field.text);
        int escapes = 0, expected_total = 0;
        double worst_T = 0;
        bool set_match = true;
        for (int iy = 0; iy < 9; ++iy)
            for (int ix = 0; ix < 9; ++ix) {
                double re = -2 + 0.5 * ix, im = -2 + 0.5 * iy;
                bool expect = field.expected(re, im);
                expected_total += expect;
                flow::Trajectory traj = flow::integrate(f, {re, im}, controls);
                const auto* esc = std::get_if<flow::EscapedFiniteTime>(&traj.termination);
                if ((esc != nullptr) != expect) set_match = false;
                if (esc && expect)
                    worst_T = std::max(worst_T, std::fabs(esc->T_est - field.T_exact(re)));
                escapes += esc != nullptr;
            }
        pass = pass && set_match && worst_T <= kTolT;
        if (!detail.empty()) detail += "; ";
        detail += fmt("%s: %d/%d escapes, max |T-exact| = %.1e", field.text, escapes,
                      expected_total, worst_T);
    }
    report(3, "grid escapes only along the pole-at-infinity directions", pass, detail);
}

// ------------------------------------------------------------------------
// 4. Elapsed time between two trajectory samples equals the real part of the
//    reciprocal integral along the traversed path; the imaginary part is 0.

void criterion_4() {
    constexpr double kTol = 1e-8, kBudgetS = 30.0;
    Stopwatch sw;
    struct Case {
        const char* text;
        double re_lo, re_hi, im_lo, im_hi, horizon;
    };
    const Case cases[] = {
        {"z^2", 0.3, 1.2, -0.4, 0.4, 2.0},
        {"-exp(-z)", -0.8, 0.8, -0.8, 0.8, 0.3},
        {"i*cos(z)/sin(z)", 0.4, 2.7, -1.0, 1.0, 2.0},
        {"exp(z)", -0.5, 0.5, -0.5, 0.5, 0.2},
    };
    Expression parsed[] = {parse(cases[0].text), parse(cases[1].text), parse(cases[2].text),
                           parse(cases[3].text)};

    std::mt19937 rng(902140u);
    std::uniform_real_distribution<double> unit(0, 1);
    int checked = 0, violations = 0;
    double worst = 0;
    while (checked < 100) {
        int which = checked % 4;
        const Case& c = cases[which];
        Complex z0(c.re_lo + (c.re_hi - c.re_lo) * unit(rng),
                   c.im_lo + (c.im_hi - c.im_lo) * unit(rng));
        flow::IntegrationControls controls;
        controls.max_time = c.horizon;
        flow::Trajectory traj = flow::integrate(parsed[which], z0, controls);

        // keep chords well clear of the overflow regime
        size_t usable = 0;
        while (usable < traj.samples.size() && std::abs(traj.samples[usable].z) <= 50) ++usable;
        if (usable < 3) continue;

        std::uniform_int_distribution<size_t> pick_a(0, usable - 2);
        size_t ia = pick_a(rng);
        std::uniform_int_distribution<size_t> pick_b(ia + 1, std::min(usable - 1, ia + 200));
        size_t ib = pick_b(rng);

        double elapsed = traj.samples[ib].t - traj.samples[ia].t;
        std::vector<Complex> nodes;
        for (size_t k = ia; k <= ib; ++k) nodes.push_back(traj.samples[k].z);
        Complex integral = conformal::travel_time(parsed[which], nodes.front(), nodes.back(),
                                                  conformal::polyline(nodes));
        double err_re = std::fabs(elapsed - integral.real());
        double err_im = std::fabs(integral.imag());
        worst = std::max(worst, std::max(err_re / (1 + elapsed), err_im));
        if (err_re > kTol * (1 + elapsed) || err_im > kTol) ++violations;
        ++checked;
    }
    double secs = sw.seconds();
    report(4, "travel time equals the reciprocal integral on 100 segments",
           violations == 0 && secs < kBudgetS,
           fmt("worst normalized error = %.2e, %d violations, %.1f s", worst, violations, secs));
}

// ------------------------------------------------------------------------
// 5. Pole-local structure: m+1 incoming directions at (pi + arg c + 2 pi k)/(m+1),
//    each confirmed by a capture run, plus the closed-form arrival time for 1/z.

void criterion_5() {
    constexpr double kTolAngle = 1e-6, kTolArrival = 1e-6;
    struct Case {
        const char* text;
        Complex at;
        int m;
        double arg_c;
    };
    const Case cases[] = {
        {"1/z", {0, 0}, 1, 0},
        {"1/z^2", {0, 0}, 2, 0},
        {"2/z", {0, 0}, 1, 0},
        {"1/(z-1)^2", {1, 0}, 2, 0},
    };
    bool pass = true;
    double worst_angle = 0;
    for (const Case& c : cases) {
        conformal::PoleLocalData data = conformal::pole_incoming_directions(parse(c.text), c.at);
        if (data.order != c.m || data.directions.size() != size_t(c.m) + 1) {
            pass = false;
            continue;
        }
        std::vector<double> expected;
        for (int k = 0; k <= c.m; ++k) {
            double a = std::fmod((kPi + c.arg_c + 2 * kPi * k) / (c.m + 1), 2 * kPi);
            expected.push_back(a);
        }
        std::sort(expected.begin(), expected.end());
        std::vector<double> got = data.directions;
        std::sort(got.begin(), got.end());
        for (size_t k = 0; k < got.size(); ++k)
            worst_angle = std::max(worst_angle, std::fabs(got[k] - expected[k]));
        for (bool v : data.verified) pass = pass && v;
    }
    pass = pass && worst_angle <= kTolAngle;

    conformal::PoleArrival arrival = conformal::time_to_pole(parse("1/z"), {0, 1});
    double arrival_err = std::fabs(arrival.T - 0.5);
    pass = pass && arrival_err <= kTolArrival;
    report(5, "pole directions and arrival time match the local model", pass,
           fmt("max angle error = %.1e, |T-0.5| = %.1e", worst_angle, arrival_err));
}

// ------------------------------------------------------------------------
// 6. Zero-approach transit bound: shells n = 3..20 for a simple and a double
//    zero, each transit at least 2^((m-1)n - 1) with C = 1.

void criterion_6() {
    constexpr double kBudgetS = 5.0;
    Stopwatch sw;
    bool pass = true;
    std::string detail;
    struct Case {
        const char* text;
        int m;
        double max_time;
    };
    for (const Case& c : {Case{"-z", 1, 100}, Case{"-z^2", 2, 5e6}}) {
        flow::IntegrationControls controls;
        controls.max_time = c.max_time;
        auto transits =
            flow::zero_approach_bound_check(parse(c.text), {0.5, 0}, {0, 0}, c.m, 1.0, 3, 20,
                                            controls);
        bool all = transits.size() == 18;
        for (const auto& tr : transits) all = all && tr.satisfies;
        pass = pass && all;
        if (!detail.empty()) detail += "; ";
        detail += fmt("%s: %zu shells, %s", c.text, transits.size(), all ? "all bound" : "VIOLATED");
    }
    double secs = sw.seconds();
    pass = pass && secs < kBudgetS;
    report(6, "dyadic shell transits respect the lower bound", pass,
           detail + fmt(", %.2f s", secs));
}

// ------------------------------------------------------------------------
// 7. Central index: exp picks N(10) = 10 and N(10.5) = 10, and the
//    implementation agrees with a brute-force argmax on random series.

void criterion_7() {
    wv::CoefficientSeries expseries = wv::CoefficientSeries::from_rule(
        [](int k) { return Complex(std::exp(-std::lgamma(k + 1.0)), 0); }, 170);
    int n10 = wv::central_index(expseries, 10.0);
    int n105 = wv::central_index(expseries, 10.5);

    std::mt19937 rng(461207u);
    std::uniform_real_distribution<double> unit(0, 1);
    int mismatches = 0;
    for (int trial = 0; trial < 100; ++trial) {
        int len = 3 + int(unit(rng) * 38);
        std::vector<Complex> b(len);
        for (auto& c : b) {
            if (unit(rng) < 0.2) continue;  // keep some gaps
            double mag = std::exp(-6 + 8 * unit(rng));
            double phase = 2 * kPi * unit(rng);
            c = std::polar(mag, phase);
        }
        if (std::abs(b.back()) == 0) b.back() = Complex(0.25, 0);
        double r = std::exp(-1.5 + 3 * unit(rng));

        int oracle = 0;
        long double best = -INFINITY;
        for (int k = 0; k < len; ++k) {
            if (std::abs(b[k]) == 0) continue;
            long double lg = std::log((long double)std::abs(b[k])) + k * std::log((long double)r);
            if (lg >= best) {
                best = lg;
                oracle = k;
            }
        }
        int got = wv::central_index(wv::CoefficientSeries::from_list(b), r);
        mismatches += got != oracle;
    }
    bool pass = n10 == 10 && n105 == 10 && mismatches == 0;
    report(7, "central index matches the argmax oracle", pass,
           fmt("N(10) = %d, N(10.5) = %d, %d/100 oracle mismatches", n10, n105, mismatches));
}

// ------------------------------------------------------------------------
// 8. Power-law disc at r = 100 with L = 8: the box reaches |z| ~ 157 where
//    exp is nowhere near its N = 100 power fit, so the 0.05 gate is far out
//    of reach at this radius. Kept faithful; expected to stay red until the
//    asymptotic regime (N ~ 1e11) is computable.

void criterion_8() {
    constexpr double kGate = 0.05, kBudgetS = 5.0;
    Stopwatch sw;
    Expression f = parse("exp(z)");
    wv::CoefficientSeries series = wv::CoefficientSeries::from_rule(
        [](int k) { return Complex(std::exp(-std::lgamma(k + 1.0)), 0); }, 170);
    wv::WvContext ctx = wv::make_context(f, series, 100.0, 8.0);
    wv::DeviationReport dev = wv::power_law_deviation(f, ctx, 32);
    double secs = sw.seconds();
    bool pass = dev.max_deviation <= kGate && secs < kBudgetS;
    report(8, "power-law deviation on the wide box meets the gate", pass,
           fmt("measured %.4g vs gate %.2f (N = %d, L = 8, 32x32), %.2f s", dev.max_deviation,
               kGate, ctx.N, secs));
}

// ------------------------------------------------------------------------
// 9. Desk-scale escape scan at r = 30: N = 30, P_r within 1% of 1.86e-14,
//    at least ceil(30^(1/4)) = 3 distinct seeds, all passing times in
//    (0, P_r], each within 15% of the exact exp-flow escape law.

void criterion_9() {
    constexpr double kTolP = 0.01, kTolLaw = 0.15, kBudgetS = 60.0;
    constexpr double kPTarget = 1.86e-14;
    Stopwatch sw;
    Expression f = parse("exp(z)");
    wv::CoefficientSeries series = wv::CoefficientSeries::from_rule(
        [](int k) { return Complex(std::exp(-std::lgamma(k + 1.0)), 0); }, 170);
    wv::WvContext ctx = wv::make_context(f, series, 30.0, 1.0);
    wv::EscapeScanReport scan = wv::escape_scan(f, ctx, {}, 2);

    int need = (int)std::ceil(std::pow(30.0, 0.25));
    bool pass = ctx.N == 30;
    double p_err = std::fabs(ctx.P_r / kPTarget - 1);
    pass = pass && p_err <= kTolP;
    pass = pass && !scan.aborted && scan.count >= need && scan.min_separation > 1e-9;
    double worst_law = 0;
    for (const auto& seed : scan.seeds) {
        if (!seed.pass) continue;
        pass = pass && seed.T > 0 && seed.T <= ctx.P_r * (1 + 1e-12);
        double law = std::fabs(seed.T / std::exp(-seed.y.real()) - 1);
        worst_law = std::max(worst_law, law);
    }
    pass = pass && worst_law <= kTolLaw;
    double secs = sw.seconds();
    pass = pass && secs < kBudgetS;
    report(9, "escape scan reproduces the fast-escape bound at r = 30", pass,
           fmt("N = %d, |P_r/target - 1| = %.4f, %d seeds (need %d), sep = %.2f, worst law dev = "
               "%.2e, %.1f s",
               ctx.N, p_err, scan.count, need, scan.min_separation, worst_law, secs));
}

// ------------------------------------------------------------------------
// 10. The i*cot z flow preserves |cos z|; 20 random seeds in the period
//     strip must hold the level to 1e-6 relative over the whole run.

void criterion_10() {
    constexpr double kTol = 1e-6;
    Expression f = parse("i*cos(z)/sin(z)");
    flow::IntegrationControls controls;
    controls.max_time = 20;
    std::mt19937 rng(118406u);
    std::uniform_real_distribution<double> re_d(0.35, 2.79), im_d(-1.2, 1.2);
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
        Complex z0(re_d(rng), im_d(rng));
        double level = std::abs(std::cos(z0));
        flow::Trajectory traj = flow::integrate(f, z0, controls);
        for (const auto& s : traj.samples)
            worst = std::max(worst,
                             std::fabs(std::abs(std::cos(s.z)) - level) / (1 + level));
    }
    report(10, "modulus level sets are preserved along the flow", worst <= kTol,
           fmt("worst relative drift = %.2e over 20 seeds", worst));
}

// ------------------------------------------------------------------------
// 11. exp(-z^2) tan z from 1.5i: finite-time escape whose extrapolation
//     converges, cross-checked by a re-run at a tenth of the tolerance.

void criterion_11() {
    constexpr double kUncFraction = 1e-4;
    Expression f = parse("exp(-z^2)*tan(z)");
    flow::Trajectory traj = flow::integrate(f, {0, 1.5}, {});
    const auto* esc = std::get_if<flow::EscapedFiniteTime>(&traj.termination);
    if (!esc) {
        report(11, "logarithmic-singularity example escapes with tight uncertainty", false,
               fmt("kind = %s", flow::termination_kind(traj.termination)));
        return;
    }
    bool tight = std::isfinite(esc->uncertainty) && esc->uncertainty < kUncFraction * esc->T_est;

    flow::IntegrationControls fine;
    fine.rel_tol /= 10;
    fine.abs_tol /= 10;
    flow::Trajectory traj2 = flow::integrate(f, {0, 1.5}, fine);
    const auto* esc2 = std::get_if<flow::EscapedFiniteTime>(&traj2.termination);
    double shift = esc2 ? std::fabs(esc2->T_est - esc->T_est) : INFINITY;
    bool pass = tight && shift < esc->uncertainty;
    report(11, "logarithmic-singularity example escapes with tight uncertainty", pass,
           fmt("T = %.6g, unc = %.1e, refined shift = %.1e", esc->T_est, esc->uncertainty,
               shift));
}

// ------------------------------------------------------------------------
// 12. The criterion-9 scan through the CLI is byte-identical at 1 and 8
//     worker threads.

void criterion_12() {
    auto slurp = [](const char* path) {
        std::ifstream in(path, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    std::string base = "\"" MEROFLOW_CLI_PATH "\" escape-scan -f \"exp(z)\" -r 30";
    int rc1 = std::system((base + " -j 1 > acc_scan1.json 2>/dev/null").c_str());
    int rc8 = std::system((base + " -j 8 > acc_scan8.json 2>/dev/null").c_str());
    std::string a = slurp("acc_scan1.json"), b = slurp("acc_scan8.json");
    bool pass = rc1 == 0 && rc8 == 0 && !a.empty() && a == b;
    report(12, "scan output is byte-identical across thread counts", pass,
           fmt("%zu bytes, exit codes %d/%d, %s", a.size(), rc1, rc8,
               a == b ? "identical" : "DIFFER"));
}

}  // namespace

int main() {
    Stopwatch total;
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_6();
    criterion_7();
    criterion_8();
    criterion_9();
    criterion_10();
    criterion_11();
    criterion_12();
    std::printf("%d/12 criteria pass, %.1f s total\n", 12 - g_failures, total.seconds());
    return g_failures == 0 ? 0 : 1;
}
