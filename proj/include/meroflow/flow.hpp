#pragma once

#include <complex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "meroflow/expr.hpp"

namespace meroflow::flow {

using Complex = std::complex<double>;

struct IntegrationControls {
    double rel_tol = 1e-10;
    double abs_tol = 1e-12;
    long max_steps = 10'000'000;
    double max_time = 1e3;
    double escape_radius = 1e3;  // first radius; schedule doubles per level
    int escape_levels = 40;      // R_k = escape_radius * 2^k, k = 0..escape_levels
    double pole_radius = 1e-8;   // capture proximity around a located pole
    double min_step = 1e-300;
    double sample_rate_cap = 0.1;  // max |d log f| between consecutive samples
};

// Consecutive samples (a, b) stay consistent with the field to first order:
// |dz - f(z_a) dt| <= tol * (1 + max(|f(z_a)|, |f(z_b)|) dt).
inline constexpr double kSampleResidualTol = 0.5;

struct Sample {
    double t;
    Complex z;
};

struct EscapedFiniteTime {
    double T_est;
    double uncertainty;  // +inf when the schedule ended with too few crossings
};
struct ReachedPole {
    Complex location;
    double T;
    int order;
};
struct EquilibriumApproach {
    Complex zero;
};
struct Periodic {
    double period;
};
struct TimeBudgetExhausted {};
struct StepUnderflow {};

using Termination = std::variant<EscapedFiniteTime, ReachedPole, EquilibriumApproach,
                                 Periodic, TimeBudgetExhausted, StepUnderflow>;

struct Trajectory {
    Complex seed{};
    std::vector<Sample> samples;
    Termination termination = TimeBudgetExhausted{};
};

/** Integrates dz/dt = f(z) forward from z0 with an embedded 5(4) pair and
 *  classifies how the trajectory ends. Throws std::invalid_argument when the
 *  seed itself fails to evaluate (e.g. sits on a pole); a seed with f(z0) = 0
 *  returns immediately as an equilibrium. */
Trajectory integrate(const expr::Expression& f, Complex z0,
                     const IntegrationControls& controls = {});

struct EscapeEstimate {
    bool finite_time = false;
    double T_est = 0;
    double uncertainty = 0;
};

/** Continues a trajectory that already left the first escape radius through
 *  the doubling radius schedule, records crossing times and extrapolates the
 *  blow-up time. Appends the continued samples to `partial`. */
EscapeEstimate escape_time(const expr::Expression& f, Trajectory& partial,
                           const IntegrationControls& controls = {});

struct ShellTransit {
    int n;            // shell between radii 2^-n and 2^-(n+1) around the zero
    double t_enter;
    double duration;
    double bound;     // 2^((m-1)n - 1) / C
    bool satisfies;
};

/** Measures the time spent in each dyadic shell around a zero of order m and
 *  compares against the lower bound C^-1 2^((m-1)n - 1). C must dominate
 *  sup |f(z)| / |z - zero|^m near the zero. Throws if the trajectory stops
 *  before the innermost requested shell. */
std::vector<ShellTransit> zero_approach_bound_check(const expr::Expression& f, Complex z0,
                                                    Complex zero, int order, double C,
                                                    int n_lo, int n_hi,
                                                    const IntegrationControls& controls = {});

/** Cubic Hermite read-off between samples; nullopt outside the sampled range. */
std::optional<Complex> position_at(const Trajectory& traj, const expr::Expression& f, double t);

/** Largest ratio of the first-order residual to its tolerance (see
 *  kSampleResidualTol) over consecutive sample pairs; values <= 1 mean the
 *  spacing invariant holds. */
double max_residual_ratio(const Trajectory& traj, const expr::Expression& f);

std::string to_csv(const Trajectory& traj);
nlohmann::ordered_json termination_to_json(const Termination& term);
const char* termination_kind(const Termination& term);

}  // namespace meroflow::flow
