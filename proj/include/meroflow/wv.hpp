#pragma once

#include <complex>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "meroflow/expr.hpp"
#include "meroflow/flow.hpp"

namespace meroflow::wv {

using Complex = std::complex<double>;

/** Maclaurin coefficients b_0..b_k_max. A list is an exact polynomial; a rule
 *  (or truncated list) stands for an infinite series cut at k_max, and then
 *  central_index demands that |b_k| r^k decays over the last 10 indices. */
class CoefficientSeries {
  public:
    static CoefficientSeries from_list(std::vector<Complex> b);
    static CoefficientSeries from_truncated_list(std::vector<Complex> b);
    static CoefficientSeries from_rule(const std::function<Complex(int)>& rule, int k_max);

    Complex at(int k) const { return b_.at(static_cast<size_t>(k)); }
    int k_max() const { return static_cast<int>(b_.size()) - 1; }
    bool truncated() const { return truncated_; }

  private:
    CoefficientSeries(std::vector<Complex> b, bool truncated)
        : b_(std::move(b)), truncated_(truncated) {}
    std::vector<Complex> b_;
    bool truncated_;
};

/** Ring-sample discrete Fourier coefficients of an expression around 0,
 *  trimmed where the terms fall below 1e-10 of the peak at the sample radius.
 *  The result is marked truncated. */
CoefficientSeries maclaurin_series(const expr::Expression& f, double radius,
                                   int k_limit = 1024);

/** Largest k maximizing |b_k| r^k; log-space ties within 1e-10 resolve to the
 *  larger index. Throws when a truncated series is not tail-dominated at r. */
int central_index(const CoefficientSeries& series, double r);

/** Angle scan (4096 samples) plus golden-section refinement of |f| on |z| = r;
 *  a flat modulus falls back to the angle 0. */
Complex max_modulus_point(const expr::Expression& f, double r);

struct WvContext {
    double r = 0;
    Complex z_r{};   // max-modulus point, |z_r| = r
    int N = 0;       // central index at r
    Complex A_r{};   // 1/f(z_r)
    double T_r = 0;  // r |A_r| / (N-1)
    double S_r = 0;  // T_r exp(-N^(1/4))
    double P_r = 0;  // 2 S_r
    int Q = 0;       // floor(2 N^(1/4))
    double L = 1;    // log-box half-width parameter
};

/** Assembles the scales above; requires N >= 2 and f finite nonzero at z_r. */
WvContext make_context(const expr::Expression& f, const CoefficientSeries& series,
                       double r, double L = 1);

nlohmann::ordered_json context_to_json(const WvContext& ctx);

struct DeviationReport {
    double max_deviation = 0;
    long skipped_nodes = 0;  // nodes where f vanished or failed to evaluate
    long grid_nodes = 0;
};

/** Max over a grid on the log-box D(z_r, L) of |f(z)/((z/z_r)^N f(z_r)) - 1|,
 *  evaluated as |exp(log f(z) - log f(z_r) - N log(z/z_r)) - 1| so branch
 *  jumps cancel and moduli never overflow. grid is points per side, >= 8. */
DeviationReport power_law_deviation(const expr::Expression& f, const WvContext& ctx,
                                    int grid);

/** Antiderivative F of 1/f anchored in the context: F(z) = w_r A(w_r)/(1-N)
 *  + integral of 1/f from w_r to z along the radial-then-arc path, with
 *  w_r = z_r exp(4 N^(-5/8)). Quadrature tolerance scales with T_r so F keeps
 *  absolute accuracy at the S_r magnitude. */
class Antiderivative {
  public:
    Antiderivative(expr::Expression f, const WvContext& ctx);
    Complex operator()(Complex z) const;
    Complex constant() const { return constant_; }
    Complex base_point() const { return w_r_; }

  private:
    expr::Expression f_;
    Complex z_r_;
    Complex w_r_;
    Complex constant_;
    double tol_;
};

Antiderivative build_F(const expr::Expression& f, const WvContext& ctx);

struct SeedResult {
    Complex y{};
    double T = 0;
    double uncertainty = 0;  // +inf when only the single-radius crossing exists
    std::string outcome;
    bool pass = false;
};

struct EscapeScanReport {
    WvContext ctx;
    std::vector<SeedResult> seeds;  // ordered along the locus
    double min_separation = 0;
    int count = 0;  // passing seeds
    double gate_deviation = 0;
    bool aborted = false;
    std::string abort_reason;
};

nlohmann::ordered_json report_to_json(const EscapeScanReport& report);

/** Traces the level locus |F| = S_r through the log-box around z_r, bisects
 *  the points where arg F = pi (F real negative), and integrates the flow from
 *  each such seed. A seed passes when it escapes in finite time or reaches a
 *  pole within T <= P_r. Seed runs fan out over `threads`; results are merged
 *  in locus order so the report does not depend on scheduling. */
EscapeScanReport escape_scan(const expr::Expression& f, const WvContext& ctx,
                             const flow::IntegrationControls& controls = {},
                             int threads = 1);

}  // namespace meroflow::wv
