#pragma once

#include <complex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "meroflow/expr.hpp"
#include "meroflow/flow.hpp"

namespace meroflow::conformal {

using Complex = std::complex<double>;

/** One piece of a contour: a straight segment or a circular arc, both
 *  parameterized over s in [0, 1]. Arcs sweep from angle0 to angle1 in the
 *  signed direction of angle1 - angle0. */
struct Segment {
    enum class Type { Line, Arc };

    Type type = Type::Line;
    Complex a{}, b{};   // line endpoints
    Complex center{};   // arc data
    double radius = 0;
    double angle0 = 0, angle1 = 0;

    static Segment line(Complex a, Complex b);
    static Segment arc(Complex center, double radius, double angle0, double angle1);

    Complex point(double s) const;
    Complex velocity(double s) const;  // d point / ds
    Complex start() const { return point(0); }
    Complex end() const { return point(1); }
};

/** Ordered contour: consecutive segments share endpoints. */
struct PathSpec {
    std::vector<Segment> segments;

    Complex start() const { return segments.front().start(); }
    Complex end() const { return segments.back().end(); }
};

PathSpec polyline(const std::vector<Complex>& nodes);

// JSON array of {type: "line", endpoints: [..]} / {type: "arc", center, radius, angles}
nlohmann::ordered_json path_to_json(const PathSpec& path);
PathSpec path_from_json(const nlohmann::ordered_json& j);

/** Quadrature ran into a non-integrable point (a zero of f on or next to the
 *  contour). `where` is the offending location on the path. */
class SingularPathError : public std::runtime_error {
  public:
    SingularPathError(const std::string& what, Complex where)
        : std::runtime_error(what), where_(where) {}
    Complex where() const { return where_; }

  private:
    Complex where_;
};

/** Integral of dz / f(z) along the path: adaptive Gauss-Kronrod 7-15 per
 *  segment with global refinement until the error estimate drops below
 *  tol * (1 + |result|). Poles of f are regular points of the integrand;
 *  zeros of f on the contour raise SingularPathError. */
Complex contour_integral_reciprocal(const expr::Expression& f, const PathSpec& path,
                                    double tol = 1e-10);

/** F(w1) - F(w0) for the antiderivative F of 1/f carried along the hint path
 *  (straight segment when absent). Real positive when w0, w1 sit on one
 *  trajectory in forward order, since dF/dt = 1 along solutions. */
Complex travel_time(const expr::Expression& f, Complex w0, Complex w1,
                    const std::optional<PathSpec>& hint = std::nullopt);

struct TraceOptions {
    double spacing = 1e-3;        // node spacing = spacing * max(|z|, min_scale)
    double min_scale = 0.1;       // keeps the tracer moving near the origin
    double singular_guard = 1e-5; // stop when |f/f'| (distance to a zero or pole) drops below
    long max_nodes = 2'000'000;
};

/** Traced level set of Im F with accumulated F values per node. re_F starts
 *  at 0 and is strictly monotone (increasing for orientation +1). */
struct LevelCurve {
    PathSpec path;  // polyline through nodes
    std::vector<Complex> nodes;
    std::vector<double> re_F;
    double im_F_drift = 0;         // max |Im(F - F(z0))| seen at a node
    bool reached_budget = false;
    bool hit_singularity = false;  // stopped at the singular_guard instead
    Complex stop_point{};
};

/** Continuation of the curve Im F = Im F(z0) through z0. Predictor moves one
 *  node spacing along orientation * f/|f|; corrector applies one Newton step
 *  on Im F (derivative 1/f), capped at half the spacing. Stops once
 *  |Re F - Re F(z0)| reaches re_F_budget, or earlier at a zero/pole of f. */
LevelCurve trace_level_curve(const expr::Expression& f, Complex z0, int orientation,
                             double re_F_budget, const TraceOptions& opt = {});

/** Local data of a pole of order m: f ~ c (z - location)^-m, plus the m+1
 *  incoming trajectory angles (pi + arg c + 2 pi k)/(m+1). `verified[k]` is the
 *  reverse-flow check: seeding at location + 1e-3 e^{i theta_k} and integrating
 *  dz/dt = -f must leave the 1e-2 ball instead of falling back in. */
struct PoleLocalData {
    Complex location{};
    int order = 0;
    Complex coefficient{};
    std::vector<double> directions;  // ascending in [0, 2 pi)
    std::vector<bool> verified;
};

nlohmann::ordered_json pole_to_json(const PoleLocalData& data);

/** Throws std::invalid_argument when z1 is not a pole of f. */
PoleLocalData pole_incoming_directions(const expr::Expression& f, Complex z1);

struct PoleArrival {
    double T = 0;
    double uncertainty = 0;
    Complex pole{};
};

/** Forward integration from the seed until pole capture. The uncertainty
 *  comes from re-running at a tenth of the tolerance. Throws std::runtime_error
 *  when the trajectory ends any other way. */
PoleArrival time_to_pole(const expr::Expression& f, Complex seed,
                         const flow::IntegrationControls& controls = {});

}  // namespace meroflow::conformal
