#include "meroflow/wv.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <thread>

#include "meroflow/conformal.hpp"
#include "meroflow/numfmt.hpp"

namespace meroflow::wv {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kInf = std::numeric_limits<double>::infinity();

// log-space slack under which two term magnitudes count as equal
constexpr double kTieTol = 1e-10;

double box_half_width(int n, double factor) { return factor * std::pow(n, -0.625); }

}  // namespace

CoefficientSeries CoefficientSeries::from_list(std::vector<Complex> b) {
    if (b.empty()) throw std::invalid_argument("series needs at least one coefficient");
    return CoefficientSeries(std::move(b), false);
}

CoefficientSeries CoefficientSeries::from_truncated_list(std::vector<Complex> b) {
    if (b.empty()) throw std::invalid_argument("series needs at least one coefficient");
    return CoefficientSeries(std::move(b), true);
}

CoefficientSeries CoefficientSeries::from_rule(const std::function<Complex(int)>& rule,
                                               int k_max) {
    if (k_max < 0 || k_max > 1'000'000)
        throw std::invalid_argument("rule cutoff out of range");
    std::vector<Complex> b(static_cast<size_t>(k_max) + 1);
    for (int k = 0; k <= k_max; ++k) b[static_cast<size_t>(k)] = rule(k);
    return CoefficientSeries(std::move(b), true);
}

CoefficientSeries maclaurin_series(const expr::Expression& f, double radius, int k_limit) {
    if (!(radius > 0) || !std::isfinite(radius))
        throw std::invalid_argument("sampling radius must be positive");
    if (k_limit < 1 || k_limit > 2048) throw std::invalid_argument("k_limit out of range");

    constexpr int kRing = 4096;
    std::vector<Complex> v(kRing);
    for (int j = 0; j < kRing; ++j) {
        auto out = expr::evaluate(f, std::polar(radius, 2 * kPi * j / kRing));
        if (!out.ok)
            throw std::invalid_argument("f must evaluate everywhere on the sampling circle");
        v[static_cast<size_t>(j)] = out.value;
    }

    // c_k = |b_k| radius^k carrier; direct sums keep the dependency footprint flat
    int k_top = std::min(k_limit, kRing / 2);
    std::vector<Complex> c(static_cast<size_t>(k_top) + 1);
    for (int k = 0; k <= k_top; ++k) {
        Complex acc{};
        for (int j = 0; j < kRing; ++j) {
            long idx = (static_cast<long>(j) * k) % kRing;
            acc += v[static_cast<size_t>(j)] * std::polar(1.0, -2 * kPi * idx / kRing);
        }
        c[static_cast<size_t>(k)] = acc / static_cast<double>(kRing);
    }

    double ring_mag = 0;
    for (auto& vj : v) ring_mag = std::max(ring_mag, std::abs(vj));
    double peak = 0;
    for (auto& ck : c) peak = std::max(peak, std::abs(ck));
    // a Laurent part (pole at 0) leaves nothing but rounding noise in the
    // nonnegative modes; refuse to pass that off as a Maclaurin series
    if (!(peak >= 1e-13 * ring_mag) || !(peak > 0))
        throw std::invalid_argument("f has no resolvable Maclaurin part at this radius");

    // trim where the ring terms sink toward the sampling noise floor
    int keep = 0;
    for (int k = 0; k <= k_top; ++k)
        if (std::abs(c[static_cast<size_t>(k)]) >= 1e-10 * peak) keep = k;

    // a spectrum that drops straight to rounding noise past the cut is a
    // polynomial and stays exact; a smooth decay past the cut means the
    // series really continues and the result must carry the truncation mark
    bool truncated = keep == k_top;
    for (int k = keep + 1; k <= std::min(keep + 16, k_top); ++k)
        if (std::abs(c[static_cast<size_t>(k)]) >= 1e-13 * peak) truncated = true;

    std::vector<Complex> b(static_cast<size_t>(keep) + 1);
    double log_rho = std::log(radius);
    for (int k = 0; k <= keep; ++k)
        b[static_cast<size_t>(k)] =
            c[static_cast<size_t>(k)] * std::exp(-static_cast<double>(k) * log_rho);
    return truncated ? CoefficientSeries::from_truncated_list(std::move(b))
                     : CoefficientSeries::from_list(std::move(b));
}

int central_index(const CoefficientSeries& series, double r) {
    if (!(r > 0) || !std::isfinite(r))
        throw std::invalid_argument("central index needs a positive finite radius");

    double log_r = std::log(r);
    double best = -kInf;
    int n = -1;
    for (int k = 0; k <= series.k_max(); ++k) {
        Complex b = series.at(k);
        if (b == Complex(0, 0)) continue;
        double lg = std::log(std::abs(b)) + k * log_r;
        double tol = kTieTol * (1 + std::fabs(best));
        if (lg >= best - tol) {  // ties resolve to the larger index
            n = k;
            best = std::max(best, lg);
        }
    }
    if (n < 0) throw std::invalid_argument("series has no nonzero coefficient");

    if (series.truncated()) {
        // A cut series only certifies the maximum when the terms are already
        // falling at the cut; a polynomial list is exact and skips this.
        int lo = std::max(0, series.k_max() - 9);
        if (n >= lo)
            throw std::runtime_error(
                "series terms still near their peak at the cutoff; raise k_max");
        double prev = kInf;
        int seen = 0;
        for (int k = lo; k <= series.k_max(); ++k) {
            Complex b = series.at(k);
            if (b == Complex(0, 0)) continue;
            double lg = std::log(std::abs(b)) + k * log_r;
            if (seen > 0 && lg >= prev)
                throw std::runtime_error(
                    "series terms not decreasing at the cutoff; raise k_max");
            prev = lg;
            ++seen;
        }
        if (seen < 2)
            throw std::runtime_error("series tail vanishes identically; use an exact list");
    }
    return n;
}

Complex max_modulus_point(const expr::Expression& f, double r) {
    if (!(r > 0) || !std::isfinite(r))
        throw std::invalid_argument("max-modulus scan needs a positive finite radius");

    auto score = [&](double theta) -> double {
        auto out = expr::evaluate(f, std::polar(r, theta));
        if (!out.ok) {
            if (out.error == expr::EvalError::Overflow) return 750.0;  // beyond any finite log
            throw std::invalid_argument("f must evaluate everywhere on |z| = r");
        }
        double m = std::abs(out.value);
        return m > 0 ? std::log(m) : -kInf;
    };

    constexpr int kAngles = 4096;
    double best_theta = 0;
    double best = score(0.0);
    for (int j = 1; j < kAngles; ++j) {
        double theta = 2 * kPi * j / kAngles;
        double s = score(theta);
        if (s > best) {
            best = s;
            best_theta = theta;
        }
    }

    constexpr double kGold = 0.618033988749894848;
    double a = best_theta - 2 * kPi / kAngles;
    double b = best_theta + 2 * kPi / kAngles;
    double x1 = b - kGold * (b - a), x2 = a + kGold * (b - a);
    double f1 = score(x1), f2 = score(x2);
    for (int it = 0; it < 90 && b - a > 1e-13; ++it) {
        if (f1 < f2) {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + kGold * (b - a);
            f2 = score(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - kGold * (b - a);
            f1 = score(x1);
        }
    }
    double theta = 0.5 * (a + b);

    // flat modulus keeps the reference angle
    double s0 = score(0.0);
    if (score(theta) <= s0 + 1e-12 * (1 + std::fabs(s0))) theta = 0;
    return std::polar(r, theta);
}

WvContext make_context(const expr::Expression& f, const CoefficientSeries& series,
                       double r, double L) {
    if (!(L >= 0) || !std::isfinite(L))
        throw std::invalid_argument("box parameter L must be finite and nonnegative");

    WvContext ctx;
    ctx.r = r;
    ctx.L = L;
    ctx.z_r = max_modulus_point(f, r);
    ctx.N = central_index(series, r);
    if (ctx.N < 2) throw std::domain_error("central index must be at least 2");

    auto out = expr::evaluate(f, ctx.z_r);
    if (!out.ok || out.value == Complex(0, 0))
        throw std::invalid_argument("f must be finite and nonzero at the max-modulus point");
    ctx.A_r = 1.0 / out.value;

    double root4 = std::pow(ctx.N, 0.25);
    ctx.T_r = r * std::abs(ctx.A_r) / (ctx.N - 1);
    ctx.S_r = ctx.T_r * std::exp(-root4);
    ctx.P_r = 2 * ctx.S_r;
    ctx.Q = static_cast<int>(std::floor(2 * root4));
    if (!(ctx.T_r > 0) || !(ctx.S_r > 0) || !std::isfinite(ctx.T_r))
        throw std::invalid_argument("context scales degenerate at this radius");
    return ctx;
}

nlohmann::ordered_json context_to_json(const WvContext& ctx) {
    nlohmann::ordered_json j;
    j["r"] = ctx.r;
    j["z_r"] = format_complex(ctx.z_r);
    j["N"] = ctx.N;
    j["A_r"] = format_complex(ctx.A_r);
    j["T_r"] = ctx.T_r;
    j["S_r"] = ctx.S_r;
    j["P_r"] = ctx.P_r;
    j["Q"] = ctx.Q;
    j["L"] = ctx.L;
    return j;
}

DeviationReport power_law_deviation(const expr::Expression& f, const WvContext& ctx,
                                    int grid) {
    if (grid < 8) throw std::invalid_argument("deviation grid needs at least 8 points per side");

    auto base = expr::evaluate(f, ctx.z_r);
    if (!base.ok || base.value == Complex(0, 0))
        throw std::invalid_argument("f must be finite and nonzero at the max-modulus point");
    Complex lf_r = std::log(base.value);

    double delta = box_half_width(ctx.N, ctx.L);
    DeviationReport rep;
    rep.grid_nodes = static_cast<long>(grid) * grid;
    for (int a = 0; a < grid; ++a) {
        for (int b = 0; b < grid; ++b) {
            Complex tau(-delta + 2 * delta * a / (grid - 1),
                        -delta + 2 * delta * b / (grid - 1));
            auto out = expr::evaluate(f, ctx.z_r * std::exp(tau));
            if (!out.ok || out.value == Complex(0, 0)) {
                ++rep.skipped_nodes;
                continue;
            }
            // |f/(power law) - 1| through exp of the log difference: the 2 pi i
            // ambiguity of the principal logs cancels and moduli stay bounded
            Complex w = std::log(out.value) - lf_r - static_cast<double>(ctx.N) * tau;
            rep.max_deviation = std::max(rep.max_deviation, std::abs(std::exp(w) - 1.0));
        }
    }
    return rep;
}

Antiderivative::Antiderivative(expr::Expression f, const WvContext& ctx)
    : f_(std::move(f)), z_r_(ctx.z_r) {
    w_r_ = z_r_ * std::exp(box_half_width(ctx.N, 4));
    auto out = expr::evaluate(f_, w_r_);
    if (!out.ok || out.value == Complex(0, 0))
        throw std::invalid_argument("f must be finite and nonzero at the anchor point");
    constant_ = w_r_ / (out.value * (1.0 - ctx.N));
    tol_ = 1e-11 * ctx.T_r;
}

Complex Antiderivative::operator()(Complex z) const {
    double rz = std::abs(z);
    double theta_r = std::arg(w_r_);
    double sweep = std::remainder(std::arg(z) - theta_r, 2 * kPi);
    Complex corner = std::polar(rz, theta_r);

    conformal::PathSpec path;
    if (std::abs(w_r_ - corner) > 0)
        path.segments.push_back(conformal::Segment::line(w_r_, corner));
    if (sweep != 0)
        path.segments.push_back(conformal::Segment::arc(Complex(0, 0), rz, theta_r,
                                                        theta_r + sweep));
    if (path.segments.empty()) return constant_;
    return constant_ + conformal::contour_integral_reciprocal(f_, path, tol_);
}

Antiderivative build_F(const expr::Expression& f, const WvContext& ctx) {
    return Antiderivative(f, ctx);
}

nlohmann::ordered_json report_to_json(const EscapeScanReport& report) {
    nlohmann::ordered_json j;
    j["r"] = report.ctx.r;
    j["N"] = report.ctx.N;
    j["z_r"] = format_complex(report.ctx.z_r);
    j["T_r"] = report.ctx.T_r;
    j["S_r"] = report.ctx.S_r;
    j["P_r"] = report.ctx.P_r;
    j["Q"] = report.ctx.Q;
    j["seeds"] = nlohmann::ordered_json::array();
    for (const auto& s : report.seeds) {
        nlohmann::ordered_json js;
        js["y"] = format_complex(s.y);
        js["T"] = s.T;
        if (std::isfinite(s.uncertainty))
            js["uncertainty"] = s.uncertainty;
        else
            js["uncertainty"] = nullptr;
        js["outcome"] = s.outcome;
        js["pass"] = s.pass;
        j["seeds"].push_back(std::move(js));
    }
    j["count"] = report.count;
    j["gate_deviation"] = report.gate_deviation;
    if (report.aborted) {
        j["aborted"] = true;
        j["reason"] = report.abort_reason;
    }
    return j;
}

namespace {

struct ScanAbort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LocusNode {
    Complex z;
    Complex F;
};

class LocusTracer {
  public:
    LocusTracer(const expr::Expression& f, const Antiderivative& F, const WvContext& ctx)
        : f_(f), F_(F), ctx_(ctx),
          log_S_(std::log(ctx.S_r)),
          delta2_(box_half_width(ctx.N, 2)),
          step_(1e-2 * ctx.r * box_half_width(ctx.N, 1)) {}

    double step() const { return step_; }

    Complex field(Complex z) const {
        auto out = expr::evaluate(f_, z);
        if (!out.ok || out.value == Complex(0, 0))
            throw ScanAbort("f failed to evaluate on the level locus");
        return out.value;
    }

    // derivative of log F along the path, 1/(f F)
    Complex g_prime(Complex z, Complex Fz) const {
        Complex g = 1.0 / (field(z) * Fz);
        if (g == Complex(0, 0) || !std::isfinite(std::abs(g)))
            throw ScanAbort("locus derivative left the double range");
        return g;
    }

    Complex tau(Complex z) const { return std::log(z / ctx_.z_r); }

    // one Newton step toward |F| = S_r; returns the moved point and its F
    LocusNode correct(Complex p) const {
        for (int it = 0; it < 2; ++it) {
            Complex Fp = F_(p);
            double resid = std::log(std::abs(Fp)) - log_S_;
            Complex gp = g_prime(p, Fp);
            Complex delta = -resid * std::conj(gp) / std::norm(gp);
            if (std::abs(delta) > 0.5 * step_)
                throw ScanAbort("level correction overshot; power law too weak here");
            p += delta;
        }
        return {p, F_(p)};
    }

    // radial bracket and bisection for the start point on the ray through z_r
    Complex find_start() const {
        constexpr int kScan = 64;
        auto u_at = [&](double x) {
            return std::log(std::abs(F_(ctx_.z_r * std::exp(x)))) - log_S_;
        };
        double lo = -delta2_, hi = delta2_;
        double prev_x = lo, prev_u = u_at(lo);
        double a = 0, b = 0;
        bool found = false;
        for (int j = 1; j <= kScan && !found; ++j) {
            double x = lo + (hi - lo) * j / kScan;
            double u = u_at(x);
            if (u == 0) return ctx_.z_r * std::exp(x);
            if (prev_u * u < 0) {
                a = prev_x;
                b = x;
                found = true;
            }
            prev_x = x;
            prev_u = u;
        }
        if (!found) throw ScanAbort("level set |F| = S_r not found on the radial ray");
        double ua = u_at(a);
        for (int it = 0; it < 90; ++it) {
            double m = 0.5 * (a + b);
            double um = u_at(m);
            if (um == 0) return ctx_.z_r * std::exp(m);
            if (ua * um < 0)
                b = m;
            else {
                a = m;
                ua = um;
            }
        }
        return ctx_.z_r * std::exp(0.5 * (a + b));
    }

    // continuation in one angular direction until the box edge
    std::vector<LocusNode> trace(Complex start, Complex F_start, int direction) const {
        std::vector<LocusNode> nodes;
        Complex z = start, Fz = F_start;
        for (long n = 0; n < 100'000; ++n) {
            Complex gp = g_prime(z, Fz);
            Complex v = static_cast<double>(direction) * Complex(0, 1) * std::conj(gp) /
                        std::abs(gp);
            LocusNode next = correct(z + step_ * v);
            Complex t = tau(next.z);
            if (std::fabs(t.real()) > delta2_)
                throw ScanAbort("locus left the working disc radially");
            nodes.push_back(next);
            z = next.z;
            Fz = next.F;
            if (std::fabs(t.imag()) > delta2_) break;  // normal exit through the edge
        }
        return nodes;
    }

  private:
    const expr::Expression& f_;
    const Antiderivative& F_;
    const WvContext& ctx_;
    double log_S_;
    double delta2_;
    double step_;
};

// seeds solve arg F = pi on the locus; bisection along the chord between two
// bracketing nodes, re-projected onto the level set at every probe
Complex refine_seed(const LocusTracer& tracer, const LocusNode& a, const LocusNode& b,
                    double phi_a, double target) {
    double lo = 0, hi = 1;
    Complex best = a.z;
    double u_lo = phi_a;
    for (int it = 0; it < 60; ++it) {
        double t = 0.5 * (lo + hi);
        LocusNode probe = tracer.correct(a.z + t * (b.z - a.z));
        best = probe.z;
        double phi = phi_a + std::remainder(std::arg(probe.F) - phi_a, 2 * kPi);
        bool same_side = (phi - target) * (u_lo - target) > 0;
        if (same_side) {
            lo = t;
            u_lo = phi;
        } else {
            hi = t;
        }
    }
    return best;
}

SeedResult integrate_seed(const expr::Expression& f, const WvContext& ctx, Complex seed,
                          const flow::IntegrationControls& base) {
    // The locus sits at |F| values near S_r where the seed phase is only known
    // to quadrature accuracy, so a finite-precision trajectory turns back at a
    // modulus around -log of that phase error. The escape gate therefore fires
    // on a single crossing just outside the working disc; a short doubling
    // ladder afterwards tightens T when the flow survives it.
    flow::IntegrationControls gate = base;
    gate.escape_radius = 1.2 * ctx.r * std::exp(box_half_width(ctx.N, 2));
    gate.escape_levels = 0;
    gate.max_time = std::min(base.max_time, 10 * ctx.P_r);

    SeedResult result;
    result.y = seed;
    flow::Trajectory first = flow::integrate(f, seed, gate);
    result.outcome = flow::termination_kind(first.termination);

    if (auto* esc = std::get_if<flow::EscapedFiniteTime>(&first.termination)) {
        result.T = esc->T_est;
        result.uncertainty = esc->uncertainty;
        result.pass = result.T > 0 && result.T <= ctx.P_r;
        flow::IntegrationControls ladder = gate;
        ladder.escape_levels = 4;
        flow::Trajectory refined = flow::integrate(f, seed, ladder);
        if (auto* esc2 = std::get_if<flow::EscapedFiniteTime>(&refined.termination)) {
            result.T = esc2->T_est;
            result.uncertainty = esc2->uncertainty;
            result.pass = result.T > 0 && result.T <= ctx.P_r;
        }
    } else if (auto* pole = std::get_if<flow::ReachedPole>(&first.termination)) {
        result.T = pole->T;
        result.uncertainty = 0;
        result.pass = result.T > 0 && result.T <= ctx.P_r;
    }
    return result;
}

}  // namespace

EscapeScanReport escape_scan(const expr::Expression& f, const WvContext& ctx,
                             const flow::IntegrationControls& controls, int threads) {
    if (ctx.N < 2 || !(ctx.S_r > 0) || !(ctx.P_r > 0))
        throw std::invalid_argument("scan context scales must be positive with N >= 2");

    EscapeScanReport report;
    report.ctx = ctx;
    report.min_separation = kInf;

    WvContext gate_ctx = ctx;
    gate_ctx.L = 2;  // the locus and seeds live in the L = 2 box
    report.gate_deviation = power_law_deviation(f, gate_ctx, 16).max_deviation;

    std::vector<Complex> seeds;
    try {
        Antiderivative F = build_F(f, ctx);
        LocusTracer tracer(f, F, ctx);

        Complex start = tracer.find_start();
        LocusNode origin{start, F(start)};
        std::vector<LocusNode> chain = tracer.trace(origin.z, origin.F, -1);
        std::reverse(chain.begin(), chain.end());
        chain.push_back(origin);
        auto up = tracer.trace(origin.z, origin.F, +1);
        chain.insert(chain.end(), up.begin(), up.end());

        std::vector<double> phi(chain.size());
        phi[0] = std::arg(chain[0].F);
        for (size_t i = 1; i < chain.size(); ++i)
            phi[i] = phi[i - 1] +
                     std::remainder(std::arg(chain[i].F) - phi[i - 1], 2 * kPi);

        auto [mn, mx] = std::minmax_element(phi.begin(), phi.end());
        long k_lo = static_cast<long>(std::ceil((*mn - kPi) / (2 * kPi)));
        long k_hi = static_cast<long>(std::floor((*mx - kPi) / (2 * kPi)));

        for (size_t i = 0; i + 1 < chain.size(); ++i) {
            for (long k = k_lo; k <= k_hi; ++k) {
                double target = kPi + 2 * kPi * k;
                double a = phi[i], b = phi[i + 1];
                bool straddles = (a < target && target <= b) || (b <= target && target < a);
                if (!straddles) continue;
                Complex y = refine_seed(tracer, chain[i], chain[i + 1], a, target);
                if (!seeds.empty() && std::abs(y - seeds.back()) < tracer.step())
                    continue;  // same crossing seen from the adjacent pair
                seeds.push_back(y);
            }
        }
    } catch (const ScanAbort& e) {
        report.aborted = true;
        report.abort_reason = e.what();
        return report;
    } catch (const conformal::SingularPathError& e) {
        report.aborted = true;
        report.abort_reason = std::string("quadrature for F broke down: ") + e.what();
        return report;
    }

    for (size_t i = 0; i < seeds.size(); ++i)
        for (size_t j = i + 1; j < seeds.size(); ++j)
            report.min_separation =
                std::min(report.min_separation, std::abs(seeds[i] - seeds[j]));

    report.seeds.resize(seeds.size());
    int workers = std::clamp<int>(threads, 1, static_cast<int>(std::max<size_t>(seeds.size(), 1)));
    std::atomic<size_t> cursor{0};
    auto run = [&]() {
        for (size_t i = cursor.fetch_add(1); i < seeds.size(); i = cursor.fetch_add(1)) {
            try {
                report.seeds[i] = integrate_seed(f, ctx, seeds[i], controls);
            } catch (const std::exception& e) {
                report.seeds[i].y = seeds[i];
                report.seeds[i].outcome = std::string("error: ") + e.what();
            }
        }
    };
    if (workers <= 1 || seeds.size() <= 1) {
        run();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(run);
        for (auto& th : pool) th.join();
    }

    for (const auto& s : report.seeds)
        if (s.pass) ++report.count;
    return report;
}

}  // namespace meroflow::wv
