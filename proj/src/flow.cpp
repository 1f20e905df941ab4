#include "meroflow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "meroflow/numfmt.hpp"

namespace meroflow::flow {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Dormand-Prince 5(4) tableau
constexpr double A21 = 1.0 / 5;
constexpr double A31 = 3.0 / 40, A32 = 9.0 / 40;
constexpr double A41 = 44.0 / 45, A42 = -56.0 / 15, A43 = 32.0 / 9;
constexpr double A51 = 19372.0 / 6561, A52 = -25360.0 / 2187, A53 = 64448.0 / 6561,
                 A54 = -212.0 / 729;
constexpr double A61 = 9017.0 / 3168, A62 = -355.0 / 33, A63 = 46732.0 / 5247,
                 A64 = 49.0 / 176, A65 = -5103.0 / 18656;
constexpr double B1 = 35.0 / 384, B3 = 500.0 / 1113, B4 = 125.0 / 192,
                 B5 = -2187.0 / 6784, B6 = 11.0 / 84;
// b - bhat, for the embedded error estimate
constexpr double E1 = 71.0 / 57600, E3 = -71.0 / 16695, E4 = 71.0 / 1920,
                 E5 = -17253.0 / 339200, E6 = 22.0 / 525, E7 = -1.0 / 40;
// dense output weights
constexpr double D1 = -12715105075.0 / 11282082432.0;
constexpr double D3 = 87487479700.0 / 32700410799.0;
constexpr double D4 = -10690763975.0 / 1880347072.0;
constexpr double D5 = 701980252875.0 / 199316789632.0;
constexpr double D6 = -1453857185.0 / 822651844.0;
constexpr double D7 = 69997945.0 / 29380423.0;

bool finite(Complex v) { return std::isfinite(v.real()) && std::isfinite(v.imag()); }

struct Field {
    const expr::Expression& f;

    std::optional<Complex> operator()(Complex z) const {
        auto r = expr::evaluate(f, z);
        if (!r.ok) return std::nullopt;
        return r.value;
    }
};

struct DenseStep {
    // u(theta) = r1 + theta (r2 + (1-theta)(r3 + theta (r4 + (1-theta) r5)))
    Complex r1, r2, r3, r4, r5;
    double t0 = 0, h = 0;

    Complex eval(double th) const {
        return r1 + th * (r2 + (1 - th) * (r3 + th * (r4 + (1 - th) * r5)));
    }
};

double golden_min(const DenseStep& d, Complex target, double* th_out) {
    const double invphi = (std::sqrt(5.0) - 1) / 2;
    double a = 0, b = 1;
    double c1 = b - invphi * (b - a), c2 = a + invphi * (b - a);
    double f1 = std::abs(d.eval(c1) - target), f2 = std::abs(d.eval(c2) - target);
    for (int it = 0; it < 80; ++it) {
        if (f1 < f2) {
            b = c2; c2 = c1; f2 = f1;
            c1 = b - invphi * (b - a);
            f1 = std::abs(d.eval(c1) - target);
        } else {
            a = c1; c1 = c2; f1 = f2;
            c2 = a + invphi * (b - a);
            f2 = std::abs(d.eval(c2) - target);
        }
    }
    double th = (a + b) / 2;
    *th_out = th;
    return std::abs(d.eval(th) - target);
}

// theta in (lo, 1] where |u(theta) - center| crosses radius, given a sign
// change of (distance - radius) between lo and 1
double bisect_radius(const DenseStep& d, Complex center, double radius, double lo = 0) {
    auto g = [&](double th) { return std::abs(d.eval(th) - center) - radius; };
    double a = lo, b = 1, ga = g(a);
    for (int it = 0; it < 100; ++it) {
        double m = (a + b) / 2, gm = g(m);
        if ((gm <= 0) == (ga <= 0)) { a = m; ga = gm; }
        else b = m;
    }
    return (a + b) / 2;
}

class Driver {
  public:
    Driver(const expr::Expression& f, const IntegrationControls& c, Trajectory& traj)
        : field_{f}, df_(expr::differentiate(f)), c_(c), traj_(traj) {}

    // crossing recorder around an interior point, used by the shell checker
    struct ShellMode {
        Complex center;
        int next_n = 0, last_n = 0;
        std::vector<std::pair<int, double>> crossings;
    };

    bool escape_only = false;  // skip equilibrium/periodic bookkeeping
    ShellMode* shell_mode = nullptr;

    void run() {
        init();
        while (!done_) step();
    }

    EscapeEstimate estimate() const { return estimate_; }

  private:
    Field field_;
    expr::Expression df_;
    IntegrationControls c_;
    Trajectory& traj_;

    double t_ = 0, h_ = 0;
    Complex z_{}, k1_{};
    long steps_ = 0;
    long frozen_steps_ = 0;
    bool done_ = false;
    double dt_err_acc_ = 0;  // accumulated local-error estimates, in time units

    // escape bookkeeping
    std::vector<std::pair<int, double>> crossings_;  // (level, crossing time)
    int next_level_ = 0;
    EscapeEstimate estimate_{};

    // pole capture
    bool pole_known_ = false;
    Complex pole_{};
    int pole_order_ = 0;
    double pole_coeff_abs_ = 0;
    double pole_probe_f_ = 0;  // |f| at the last probe attempt

    // equilibrium
    long next_eq_check_ = 32;
    long eq_backoff_ = 32;

    // periodicity
    bool left_ball_ = false;
    Complex f_seed_{};

    // ring of recent accepted positions
    std::vector<Sample> recent_;
    size_t recent_head_ = 0;

    long emit_every_ = 1;
    long emit_counter_ = 0;

    double radius_of(int level) const { return c_.escape_radius * std::ldexp(1.0, level); }

    void terminate(Termination term) {
        traj_.termination = std::move(term);
        done_ = true;
    }

    void emit(double t, Complex z, bool force = false) {
        // near the terminal time the clock quantizes; keep only gaps wide
        // enough that the stored dt reflects the elapsed time, and leave the
        // endpoint to the termination record
        if (!traj_.samples.empty()) {
            double prev = traj_.samples.back().t;
            if (t <= prev + 4 * std::numeric_limits<double>::epsilon() * prev) return;
        }
        if (!force && ++emit_counter_ % emit_every_ != 0) return;
        traj_.samples.push_back({t, z});
        if (traj_.samples.size() >= (1u << 20)) {
            // halve the stored history; spacing doubles, which the residual
            // tolerance absorbs for smooth stretches
            auto& s = traj_.samples;
            size_t w = 0;
            for (size_t r = 0; r < s.size(); r += 2) s[w++] = s[r];
            s.resize(w);
            emit_every_ *= 2;
        }
    }

    void remember(double t, Complex z) {
        if (recent_.size() < 64) {
            recent_.push_back({t, z});
        } else {
            recent_[recent_head_] = {t, z};
            recent_head_ = (recent_head_ + 1) % recent_.size();
        }
    }

    const Sample* oldest_recent(size_t at_least) const {
        if (recent_.size() < at_least) return nullptr;
        if (recent_.size() < 64) return &recent_.front();
        return &recent_[recent_head_];  // next slot to overwrite is the oldest
    }

    void init() {
        if (!traj_.samples.empty()) {
            t_ = traj_.samples.back().t;
            z_ = traj_.samples.back().z;
        } else {
            z_ = traj_.seed;
            emit(0, z_, true);
        }
        auto f0 = field_(z_);
        if (!f0) throw std::invalid_argument("seed does not evaluate (singular point)");
        if (*f0 == Complex(0, 0) && !escape_only && !shell_mode) {
            terminate(EquilibriumApproach{z_});
            return;
        }
        k1_ = *f0;
        f_seed_ = *f0;
        while (next_level_ <= c_.escape_levels && radius_of(next_level_) <= std::abs(z_))
            ++next_level_;
        if (shell_mode) {
            double d = std::abs(z_ - shell_mode->center);
            if (d <= std::ldexp(1.0, -shell_mode->next_n))
                throw std::invalid_argument("seed already inside the first shell");
        }
        h_ = 1e-4 * (1 + std::abs(z_)) / (1 + std::abs(k1_));
        remember(t_, z_);
    }

    double rate_cap() const {
        auto rate = expr::evaluate(df_, z_);
        if (!rate.ok) return kInf;
        double a = std::abs(rate.value);
        return a > 0 ? c_.sample_rate_cap / a : kInf;
    }

    void step() {
        if (steps_ >= c_.max_steps) {
            terminate(TimeBudgetExhausted{});
            return;
        }
        double remaining = c_.max_time - t_;
        if (remaining <= 0) {
            terminate(TimeBudgetExhausted{});
            return;
        }

        double cap = rate_cap();
        double speed = std::max(std::abs(k1_), 1e-300);
        if (std::abs(z_) >= 0.5 * c_.escape_radius)
            cap = std::min(cap, 0.1 * std::abs(z_) / speed);
        if (pole_known_)
            cap = std::min(cap, 0.5 * std::max(std::abs(z_ - pole_), c_.pole_radius) / speed);
        double h = std::min(h_, cap);
        bool final_step = false;
        if (h >= remaining) {
            h = remaining;
            final_step = true;
        }
        if (!(h > 0)) {
            stall();
            return;
        }

        // stages (FSAL: k1 carried over)
        Complex k2, k3, k4, k5, k6, k7, z5;
        bool ok = [&] {
            auto f = [&](Complex p, Complex* out) {
                if (!finite(p)) return false;
                auto r = field_(p);
                if (!r) return false;
                *out = *r;
                return true;
            };
            if (!f(z_ + h * (A21 * k1_), &k2)) return false;
            if (!f(z_ + h * (A31 * k1_ + A32 * k2), &k3)) return false;
            if (!f(z_ + h * (A41 * k1_ + A42 * k2 + A43 * k3), &k4)) return false;
            if (!f(z_ + h * (A51 * k1_ + A52 * k2 + A53 * k3 + A54 * k4), &k5)) return false;
            if (!f(z_ + h * (A61 * k1_ + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5), &k6))
                return false;
            z5 = z_ + h * (B1 * k1_ + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6);
            return f(z5, &k7);
        }();

        if (!ok) {
            h_ = 0.3 * h;
            if (h_ < c_.min_step) stall();
            return;
        }

        Complex err_v = h * (E1 * k1_ + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7);
        double err_abs = std::abs(err_v);
        double scale = c_.abs_tol + c_.rel_tol * std::max(std::abs(z_), std::abs(z5));
        double err = err_abs / scale;
        if (err > 1) {
            h_ = h * std::clamp(0.9 * std::pow(err, -0.2), 0.2, 1.0);
            if (h_ < c_.min_step) stall();
            return;
        }

        ++steps_;
        dt_err_acc_ += err_abs / std::max(std::abs(k7), 1e-300);

        DenseStep dense;
        dense.t0 = t_;
        dense.h = h;
        dense.r1 = z_;
        dense.r2 = z5 - z_;
        dense.r3 = h * k1_ - dense.r2;
        dense.r4 = dense.r2 - h * k7 - dense.r3;
        dense.r5 = h * (D1 * k1_ + D3 * k3 + D4 * k4 + D5 * k5 + D6 * k6 + D7 * k7);

        Complex z_prev = z_;
        double t_new = t_ + h;

        // pole capture has priority: everything past the contact time is moot
        if (pole_known_ && std::abs(z5 - pole_) <= c_.pole_radius) {
            double th = std::abs(z_prev - pole_) > c_.pole_radius
                            ? bisect_radius(dense, pole_, c_.pole_radius)
                            : 0.0;
            contact_pole(dense.eval(th), t_ + th * h);
            return;
        }

        if (shell_mode && handle_shells(dense, z5, t_new)) return;

        if (next_level_ <= c_.escape_levels && std::abs(z5) >= radius_of(next_level_)) {
            if (handle_escape_crossings(dense, z5)) return;
        }
        if (!crossings_.empty() &&
            std::abs(z5) < 0.45 * radius_of(crossings_.back().first)) {
            crossings_.clear();  // fell back toward the origin; restart the ladder
            next_level_ = 0;
            while (next_level_ <= c_.escape_levels && radius_of(next_level_) <= std::abs(z5))
                ++next_level_;
        }

        if (!escape_only && !shell_mode && handle_periodicity(dense, z_prev, z5)) return;

        emit(t_new, z5);
        remember(t_new, z5);
        if (t_new == t_) {
            // the clock has converged to the terminal time within double
            // resolution; keep following z so an event can still classify
            if (++frozen_steps_ > 1'000'000) {
                z_ = z5;
                k1_ = k7;
                stall();
                return;
            }
        } else {
            frozen_steps_ = 0;
        }
        t_ = t_new;
        z_ = z5;
        k1_ = k7;

        if (final_step) {
            if (traj_.samples.empty() || traj_.samples.back().t != t_) emit(t_, z_, true);
            terminate(TimeBudgetExhausted{});
            return;
        }

        if (!escape_only && !shell_mode && maybe_equilibrium()) return;
        maybe_probe_pole();

        double grow = err > 0 ? std::clamp(0.9 * std::pow(err, -0.2), 0.2, 5.0) : 5.0;
        h_ = h * grow;
    }

    // ---- events ----------------------------------------------------------

    bool handle_shells(const DenseStep& dense, Complex z5, double t_new) {
        auto& sm = *shell_mode;
        double d_new = std::abs(z5 - sm.center);
        double lo = 0;
        while (sm.next_n <= sm.last_n + 1) {
            double r = std::ldexp(1.0, -sm.next_n);
            if (d_new > r) break;
            double th = std::abs(dense.r1 - sm.center) > r
                            ? bisect_radius(dense, sm.center, r, lo)
                            : lo;
            sm.crossings.emplace_back(sm.next_n, dense.t0 + th * dense.h);
            lo = th;
            ++sm.next_n;
        }
        if (sm.next_n > sm.last_n + 1) {
            emit(t_new, z5, true);
            terminate(TimeBudgetExhausted{});
            return true;
        }
        return false;
    }

    bool handle_escape_crossings(const DenseStep& dense, Complex z5) {
        double za = std::abs(dense.r1);
        while (next_level_ <= c_.escape_levels) {
            double r = radius_of(next_level_);
            if (std::abs(z5) < r) break;
            double th = za < r ? bisect_radius(dense, Complex(0, 0), r) : 0.0;
            crossings_.emplace_back(next_level_, dense.t0 + th * dense.h);
            ++next_level_;

            if (diverging_crossings()) {
                emit(dense.t0 + dense.h, z5, true);
                estimate_ = EscapeEstimate{false, 0, 0};
                terminate(TimeBudgetExhausted{});
                return true;
            }
            if (crossings_.back().first == c_.escape_levels) {
                emit(dense.t0 + dense.h, z5, true);
                finish_escape(dense.t0 + dense.h);
                return true;
            }
        }
        return false;
    }

    bool diverging_crossings() const {
        // crossing-time gaps must keep contracting; once the last five gaps
        // all fail to shrink by 10% the blow-up time is not converging
        if (crossings_.size() < 6) return false;
        size_t n = crossings_.size();
        for (size_t j = n - 5; j < n - 1; ++j) {
            double d_prev = crossings_[j].second - crossings_[j - 1].second;
            double d_next = crossings_[j + 1].second - crossings_[j].second;
            if (d_next <= 0.9 * d_prev) return false;
        }
        return true;
    }

    void finish_escape(double t_last) {
        size_t n = crossings_.size();
        if (n < 3) {
            estimate_ = EscapeEstimate{true, t_last * (1 + 1e-15) + 1e-300, kInf};
            terminate(EscapedFiniteTime{estimate_.T_est, estimate_.uncertainty});
            return;
        }
        double tK = crossings_[n - 1].second;
        double d2 = tK - crossings_[n - 2].second;
        double d1 = crossings_[n - 2].second - crossings_[n - 3].second;
        double T, unc;
        if (std::fabs(d2) <= 1e-15 * std::max(1.0, std::fabs(tK))) {
            T = tK;
            unc = std::fabs(d2) + 2 * dt_err_acc_;
        } else if (std::fabs(d2) >= std::fabs(d1)) {
            estimate_ = EscapeEstimate{false, 0, 0};
            terminate(TimeBudgetExhausted{});
            return;
        } else {
            T = tK + d2 * d2 / (d1 - d2);  // Aitken, exact for geometric gaps
            unc = std::fabs(d2) + 2 * dt_err_acc_;
        }
        if (T <= t_last) T = t_last * (1 + 1e-15) + 1e-300;
        estimate_ = EscapeEstimate{true, T, unc};
        terminate(EscapedFiniteTime{T, unc});
    }

    bool handle_periodicity(const DenseStep& dense, Complex z_prev, Complex z5) {
        const double ball = 1e-3 * (1 + std::abs(traj_.seed));
        if (!left_ball_) {
            if (std::abs(z5 - traj_.seed) > ball) left_ball_ = true;
            return false;
        }
        // cheap gate: distance from the seed to the chord of this step
        Complex d = z5 - z_prev;
        double dd = std::norm(d);
        if (dd == 0) return false;
        double proj = std::clamp(std::real(std::conj(d) * (traj_.seed - z_prev)) / dd, 0.0, 1.0);
        if (std::abs(z_prev + proj * d - traj_.seed) > ball) return false;

        double th;
        double dmin = golden_min(dense, traj_.seed, &th);
        if (dmin > 1e-6 * (1 + std::abs(traj_.seed))) return false;
        Complex at = dense.eval(th);
        auto fv = field_(at);
        if (!fv || std::real(*fv * std::conj(f_seed_)) <= 0) return false;
        double t_hit = dense.t0 + th * dense.h;
        if (t_hit <= 0) return false;
        emit(t_hit, at, true);
        terminate(Periodic{t_hit});
        return true;
    }

    // ---- pole machinery --------------------------------------------------

    void maybe_probe_pole() {
        double fmag = std::abs(k1_);
        if (pole_known_ || fmag < 1e8) return;
        if (pole_probe_f_ != 0 && fmag < 4 * pole_probe_f_) return;
        pole_probe_f_ = fmag;

        expr::LocalOrderOptions opt;
        opt.radius = 1e-3 * std::max(1.0, std::abs(z_));
        auto lo = expr::local_order(field_.f, z_, opt);
        if (!lo || lo->order >= 0) return;
        int m = -lo->order;

        // polish on 1/f: a pole of order m obeys p <- p + m f(p)/f'(p)
        Complex p = z_;
        for (int it = 0; it < 40; ++it) {
            auto fv = expr::evaluate(field_.f, p);
            auto dv = expr::evaluate(df_, p);
            if (!fv.ok || !dv.ok || std::abs(dv.value) == 0) break;
            Complex stepv = double(m) * fv.value / dv.value;
            p += stepv;
            if (std::abs(stepv) <= 1e-15 * (1 + std::abs(p))) break;
        }
        auto at_p = expr::evaluate(field_.f, p);
        bool blows_up = !at_p.ok ? (at_p.error == expr::EvalError::Pole ||
                                    at_p.error == expr::EvalError::Overflow)
                                 : std::abs(at_p.value) > 1e13;
        if (!blows_up) return;

        expr::LocalOrderOptions opt2;
        opt2.radius = std::min(opt.radius, 0.5 * std::max(std::abs(z_ - p), 1e-6));
        auto lo2 = expr::local_order(field_.f, p, opt2);
        if (!lo2 || lo2->order >= 0) return;

        // only accept a pole the trajectory is actually falling into
        if (std::real(std::conj(z_ - p) * k1_) >= 0) return;

        pole_known_ = true;
        pole_ = p;
        pole_order_ = -lo2->order;
        pole_coeff_abs_ = std::abs(lo2->witness);
    }

    void contact_pole(Complex z_at, double t_at) {
        emit(t_at, z_at, true);
        double d = std::abs(z_at - pole_);
        // residual fall time for dz/dt ~ c (z-p)^-m from distance d
        double residual = pole_coeff_abs_ > 0
                              ? std::pow(d, pole_order_ + 1) /
                                    ((pole_order_ + 1) * pole_coeff_abs_)
                              : 0;
        terminate(ReachedPole{pole_, t_at + residual, pole_order_});
    }

    // ---- equilibrium machinery ------------------------------------------

    bool maybe_equilibrium() {
        if (std::abs(k1_) >= 1e-4 || steps_ < next_eq_check_) return false;
        next_eq_check_ = steps_ + eq_backoff_;

        Complex ze = z_;
        bool converged = false;
        for (int it = 0; it < 100; ++it) {
            auto fv = expr::evaluate(field_.f, ze);
            auto dv = expr::evaluate(df_, ze);
            if (!fv.ok || !dv.ok || std::abs(dv.value) == 0) break;
            double cur = std::abs(fv.value);
            if (cur <= 1e-12) {
                converged = true;
                break;
            }
            Complex stepv = fv.value / dv.value;
            double damp = 1;
            Complex cand = ze - stepv;
            for (int half = 0; half < 20; ++half) {
                auto cv = expr::evaluate(field_.f, cand);
                if (cv.ok && std::abs(cv.value) < cur) break;
                damp /= 2;
                cand = ze - damp * stepv;
            }
            if (std::abs(cand - ze) <= 1e-16 * (1 + std::abs(ze))) {
                converged = cur < 1e-8;
                break;
            }
            ze = cand;
        }
        if (converged) {
            auto fe = expr::evaluate(field_.f, ze);
            converged = fe.ok && std::abs(fe.value) < 1e-8;
        }
        if (converged) {
            // require a sustained inward approach toward the located zero
            const Sample* old = oldest_recent(32);
            if (old) {
                double d_old = std::abs(old->z - ze), d_now = std::abs(z_ - ze);
                bool inward = std::real(std::conj(z_ - ze) * k1_) < 0;
                if (d_now <= 0.9 * d_old && inward) {
                    terminate(EquilibriumApproach{ze});
                    return true;
                }
            }
        }
        eq_backoff_ *= 2;
        return false;
    }

    // ---- stalls ----------------------------------------------------------

    bool monotone_outward() const {
        if (oldest_recent(6) == nullptr) return false;
        size_t n = recent_.size();
        for (size_t j = 1; j < n; ++j) {
            size_t i0 = j - 1, i1 = j;
            if (n == 64) {
                i0 = (recent_head_ + j - 1) % n;
                i1 = (recent_head_ + j) % n;
            }
            if (std::abs(recent_[i1].z) < std::abs(recent_[i0].z)) return false;
        }
        return true;
    }

    void stall() {
        bool outward = monotone_outward();
        const Sample* old = oldest_recent(6);
        double fmag = std::abs(k1_);
        if (outward && std::abs(z_) >= 10 && fmag >= 1e50 &&
            std::real(std::conj(z_) * k1_) > 0) {
            // the field outgrew the representable range while racing outward;
            // bound the remaining time by the observed growth law of |f|
            double rem = std::abs(z_) / fmag;
            double f_old = field_at_abs(old->z);
            double dz = std::abs(z_) - std::abs(old->z);
            double dlf = std::log(fmag) - std::log(std::max(f_old, 1e-300));
            if (dz > 0 && dlf > 0 && std::isfinite(dlf)) {
                double a = dlf / dz;
                rem = std::min(rem, 1 / (a * fmag));
                double dlz = std::log(std::abs(z_)) - std::log(std::abs(old->z));
                if (dlz > 0) {
                    double npow = dlf / dlz;
                    if (npow > 1.2) rem = std::min(rem, std::abs(z_) / ((npow - 1) * fmag));
                }
            }
            double T = t_ + rem / 2;
            if (T <= t_) T = t_ * (1 + 1e-15) + 1e-300;
            double unc = rem + 2 * dt_err_acc_;
            estimate_ = EscapeEstimate{true, T, unc};
            terminate(EscapedFiniteTime{T, unc});
            return;
        }
        if (pole_known_ && std::abs(z_ - pole_) <= 32 * c_.pole_radius) {
            contact_pole(z_, t_);
            return;
        }
        if (!crossings_.empty()) {
            estimate_ = EscapeEstimate{true, t_ * (1 + 1e-15) + 1e-300, kInf};
            terminate(EscapedFiniteTime{estimate_.T_est, estimate_.uncertainty});
            return;
        }
        terminate(StepUnderflow{});
    }

    double field_at_abs(Complex p) const {
        auto r = expr::evaluate(field_.f, p);
        return r.ok ? std::abs(r.value) : kInf;
    }
};

}  // namespace

Trajectory integrate(const expr::Expression& f, Complex z0, const IntegrationControls& controls) {
    Trajectory traj;
    traj.seed = z0;
    Driver d(f, controls, traj);
    d.run();
    return traj;
}

EscapeEstimate escape_time(const expr::Expression& f, Trajectory& partial,
                           const IntegrationControls& controls) {
    if (partial.samples.empty()) throw std::invalid_argument("empty trajectory");
    if (std::abs(partial.samples.back().z) < controls.escape_radius)
        throw std::invalid_argument("trajectory has not left the first escape radius");
    Driver d(f, controls, partial);
    d.escape_only = true;
    d.run();
    return d.estimate();
}

std::vector<ShellTransit> zero_approach_bound_check(const expr::Expression& f, Complex z0,
                                                    Complex zero, int order, double C,
                                                    int n_lo, int n_hi,
                                                    const IntegrationControls& controls) {
    if (order < 1 || C <= 0 || n_hi < n_lo) throw std::invalid_argument("bad shell parameters");
    Trajectory traj;
    traj.seed = z0;
    Driver d(f, controls, traj);
    Driver::ShellMode sm;
    sm.center = zero;
    sm.next_n = n_lo;
    sm.last_n = n_hi;
    d.shell_mode = &sm;
    d.run();
    if (sm.crossings.empty() || sm.crossings.back().first != n_hi + 1)
        throw std::runtime_error("trajectory stopped before the innermost shell");

    std::vector<ShellTransit> out;
    for (size_t j = 0; j + 1 < sm.crossings.size(); ++j) {
        int n = sm.crossings[j].first;
        double dur = sm.crossings[j + 1].second - sm.crossings[j].second;
        double bound = std::ldexp(1.0, (order - 1) * n - 1) / C;
        out.push_back({n, sm.crossings[j].second, dur, bound, dur >= bound});
    }
    return out;
}

std::optional<Complex> position_at(const Trajectory& traj, const expr::Expression& f, double t) {
    const auto& s = traj.samples;
    if (s.empty() || t < s.front().t || t > s.back().t) return std::nullopt;
    auto it = std::lower_bound(s.begin(), s.end(), t,
                               [](const Sample& a, double v) { return a.t < v; });
    if (it->t == t) return it->z;
    const Sample& b = *it;
    const Sample& a = *(it - 1);
    double h = b.t - a.t;
    if (h <= 0) return a.z;
    auto fa = expr::evaluate(f, a.z);
    auto fb = expr::evaluate(f, b.z);
    if (!fa.ok || !fb.ok) return std::nullopt;
    double th = (t - a.t) / h;
    double u = 1 - th;
    return u * u * (1 + 2 * th) * a.z + th * th * (3 - 2 * th) * b.z +
           th * u * u * h * fa.value - th * th * u * h * fb.value;
}

double max_residual_ratio(const Trajectory& traj, const expr::Expression& f) {
    double worst = 0;
    const auto& s = traj.samples;
    for (size_t j = 0; j + 1 < s.size(); ++j) {
        auto fa = expr::evaluate(f, s[j].z);
        auto fb = expr::evaluate(f, s[j + 1].z);
        if (!fa.ok || !fb.ok) continue;
        double dt = s[j + 1].t - s[j].t;
        double resid = std::abs((s[j + 1].z - s[j].z) - fa.value * dt);
        double speed = std::max(std::abs(fa.value), std::abs(fb.value));
        double bound = kSampleResidualTol * (1 + speed * dt);
        worst = std::max(worst, resid / bound);
    }
    return worst;
}

std::string to_csv(const Trajectory& traj) {
    std::string out = "t,re,im\n";
    for (const auto& s : traj.samples) {
        out += format_double(s.t);
        out += ',';
        out += format_double(s.z.real());
        out += ',';
        out += format_double(s.z.imag());
        out += '\n';
    }
    return out;
}

const char* termination_kind(const Termination& term) {
    return std::visit(
        [](const auto& v) -> const char* {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, EscapedFiniteTime>) return "EscapedFiniteTime";
            else if constexpr (std::is_same_v<T, ReachedPole>) return "ReachedPole";
            else if constexpr (std::is_same_v<T, EquilibriumApproach>) return "EquilibriumApproach";
            else if constexpr (std::is_same_v<T, Periodic>) return "Periodic";
            else if constexpr (std::is_same_v<T, TimeBudgetExhausted>) return "TimeBudgetExhausted";
            else return "StepUnderflow";
        },
        term);
}

nlohmann::ordered_json termination_to_json(const Termination& term) {
    nlohmann::ordered_json j;
    j["kind"] = termination_kind(term);
    std::visit(
        [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, EscapedFiniteTime>) {
                j["T_est"] = v.T_est;
                if (std::isfinite(v.uncertainty)) j["uncertainty"] = v.uncertainty;
                else j["uncertainty"] = nullptr;
            } else if constexpr (std::is_same_v<T, ReachedPole>) {
                j["location"] = format_complex(v.location);
                j["T"] = v.T;
                j["order"] = v.order;
            } else if constexpr (std::is_same_v<T, EquilibriumApproach>) {
                j["zero"] = format_complex(v.zero);
            } else if constexpr (std::is_same_v<T, Periodic>) {
                j["period"] = v.period;
            }
        },
        term);
    return j;
}

}  // namespace meroflow::flow
