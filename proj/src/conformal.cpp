#include "meroflow/conformal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "meroflow/numfmt.hpp"

namespace meroflow::conformal {

namespace {

using expr::EvalError;

// 15-point Kronrod rule with the embedded 7-point Gauss rule on [-1, 1].
// Gauss nodes are kXgk[1], kXgk[3], kXgk[5] and the center.
constexpr double kXgk[8] = {
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144838258730,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
};
constexpr double kWgk[8] = {
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
};
constexpr double kWg[4] = {
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
};

constexpr double kEps = std::numeric_limits<double>::epsilon();

/** Integrand dz/f along a segment. Poles of f are zeros of the integrand and
 *  therefore harmless; a vanishing f is a genuine singularity. */
class ReciprocalIntegrand {
  public:
    explicit ReciprocalIntegrand(const expr::Expression& f) : f_(f) {}

    Complex at(const Segment& seg, double s) const {
        Complex z = seg.point(s);
        auto r = expr::evaluate(f_, z);
        if (!r.ok) {
            if (r.error == EvalError::BranchUndefined)
                throw SingularPathError("integrand undefined on path", z);
            return Complex{};  // |f| beyond the overflow guard, 1/f ~ 0
        }
        if (std::abs(r.value) < 1e-150)
            throw SingularPathError("f vanishes on the path", z);
        return seg.velocity(s) / r.value;
    }

  private:
    const expr::Expression& f_;
};

struct RuleOut {
    Complex integral;
    double err;
};

RuleOut kronrod15(const ReciprocalIntegrand& g, const Segment& seg, double s0, double s1) {
    const double h = 0.5 * (s1 - s0);
    const double mid = 0.5 * (s0 + s1);

    Complex vals[15];
    Complex resk{}, resg{};
    double resabs = 0;
    int vi = 0;
    for (int j = 0; j < 7; ++j) {
        Complex vp = g.at(seg, mid + h * kXgk[j]);
        Complex vm = g.at(seg, mid - h * kXgk[j]);
        vals[vi++] = vp;
        vals[vi++] = vm;
        resk += kWgk[j] * (vp + vm);
        resabs += kWgk[j] * (std::abs(vp) + std::abs(vm));
        if (j % 2 == 1) resg += kWg[j / 2] * (vp + vm);
    }
    Complex vc = g.at(seg, mid);
    vals[vi] = vc;
    resk += kWgk[7] * vc;
    resg += kWg[3] * vc;
    resabs += kWgk[7] * std::abs(vc);

    // deviation-scaled error estimate; exact for the embedded difference,
    // damped when the integrand is smooth at this scale
    Complex mean = resk * 0.5;
    double resasc = 0;
    vi = 0;
    for (int j = 0; j < 7; ++j) {
        resasc += kWgk[j] * (std::abs(vals[vi] - mean) + std::abs(vals[vi + 1] - mean));
        vi += 2;
    }
    resasc += kWgk[7] * std::abs(vals[14] - mean);

    double ha = std::fabs(h);
    double err = std::abs(resk - resg) * ha;
    double asc = resasc * ha;
    if (asc != 0 && err != 0) err = asc * std::min(1.0, std::pow(200 * err / asc, 1.5));
    err = std::max(err, 50 * kEps * resabs * ha);
    return {resk * h, err};
}

struct Piece {
    double err;
    int seg;
    double s0, s1;
    Complex integral;
};

bool piece_less(const Piece& a, const Piece& b) { return a.err < b.err; }

}  // namespace

Segment Segment::line(Complex a, Complex b) {
    Segment s;
    s.type = Type::Line;
    s.a = a;
    s.b = b;
    return s;
}

Segment Segment::arc(Complex center, double radius, double angle0, double angle1) {
    Segment s;
    s.type = Type::Arc;
    s.center = center;
    s.radius = radius;
    s.angle0 = angle0;
    s.angle1 = angle1;
    return s;
}

Complex Segment::point(double s) const {
    if (type == Type::Line) return a + s * (b - a);
    return center + std::polar(radius, angle0 + s * (angle1 - angle0));
}

Complex Segment::velocity(double s) const {
    if (type == Type::Line) return b - a;
    double sweep = angle1 - angle0;
    return Complex(0, sweep) * std::polar(radius, angle0 + s * sweep);
}

PathSpec polyline(const std::vector<Complex>& nodes) {
    if (nodes.empty()) throw std::invalid_argument("polyline needs at least one node");
    PathSpec path;
    if (nodes.size() == 1) {
        path.segments.push_back(Segment::line(nodes[0], nodes[0]));
        return path;
    }
    path.segments.reserve(nodes.size() - 1);
    for (size_t j = 0; j + 1 < nodes.size(); ++j)
        path.segments.push_back(Segment::line(nodes[j], nodes[j + 1]));
    return path;
}

nlohmann::ordered_json path_to_json(const PathSpec& path) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const Segment& seg : path.segments) {
        nlohmann::ordered_json j;
        if (seg.type == Segment::Type::Line) {
            j["type"] = "line";
            j["endpoints"] = {format_complex(seg.a), format_complex(seg.b)};
        } else {
            j["type"] = "arc";
            j["center"] = format_complex(seg.center);
            j["radius"] = seg.radius;
            j["angles"] = {seg.angle0, seg.angle1};
        }
        arr.push_back(std::move(j));
    }
    return arr;
}

PathSpec path_from_json(const nlohmann::ordered_json& j) {
    if (!j.is_array() || j.empty()) throw std::invalid_argument("path: expected a segment array");
    PathSpec path;
    for (const auto& seg : j) {
        std::string type = seg.at("type").get<std::string>();
        if (type == "line") {
            const auto& ep = seg.at("endpoints");
            if (!ep.is_array() || ep.size() != 2)
                throw std::invalid_argument("line segment: endpoints must have two entries");
            path.segments.push_back(Segment::line(parse_complex(ep[0].get<std::string>()),
                                                  parse_complex(ep[1].get<std::string>())));
        } else if (type == "arc") {
            const auto& an = seg.at("angles");
            if (!an.is_array() || an.size() != 2)
                throw std::invalid_argument("arc segment: angles must have two entries");
            path.segments.push_back(Segment::arc(parse_complex(seg.at("center").get<std::string>()),
                                                 seg.at("radius").get<double>(),
                                                 an[0].get<double>(), an[1].get<double>()));
        } else {
            throw std::invalid_argument("unknown segment type: " + type);
        }
    }
    return path;
}

Complex contour_integral_reciprocal(const expr::Expression& f, const PathSpec& path,
                                    double tol) {
    if (path.segments.empty()) throw std::invalid_argument("empty path");
    ReciprocalIntegrand g(f);

    std::vector<Piece> heap;
    heap.reserve(path.segments.size() + 64);
    Complex total{};
    double total_err = 0;
    for (size_t j = 0; j < path.segments.size(); ++j) {
        RuleOut r = kronrod15(g, path.segments[j], 0, 1);
        heap.push_back({r.err, static_cast<int>(j), 0, 1, r.integral});
        total += r.integral;
        total_err += r.err;
    }
    std::make_heap(heap.begin(), heap.end(), piece_less);

    while (total_err > tol * (1 + std::abs(total))) {
        std::pop_heap(heap.begin(), heap.end(), piece_less);
        Piece worst = heap.back();
        heap.pop_back();

        double smid = 0.5 * (worst.s0 + worst.s1);
        if (worst.s1 - worst.s0 < 1e-13 || heap.size() > 16384)
            throw SingularPathError("quadrature does not converge",
                                    path.segments[worst.seg].point(smid));

        RuleOut lo = kronrod15(g, path.segments[worst.seg], worst.s0, smid);
        RuleOut hi = kronrod15(g, path.segments[worst.seg], smid, worst.s1);
        total += lo.integral + hi.integral - worst.integral;
        total_err += lo.err + hi.err - worst.err;
        heap.push_back({lo.err, worst.seg, worst.s0, smid, lo.integral});
        std::push_heap(heap.begin(), heap.end(), piece_less);
        heap.push_back({hi.err, worst.seg, smid, worst.s1, hi.integral});
        std::push_heap(heap.begin(), heap.end(), piece_less);
    }

    // incremental updates drift by a few ulp per split; re-sum the pieces
    total = Complex{};
    for (const Piece& p : heap) total += p.integral;
    return total;
}

Complex travel_time(const expr::Expression& f, Complex w0, Complex w1,
                    const std::optional<PathSpec>& hint) {
    PathSpec path;
    if (hint) {
        path = *hint;
        if (path.segments.empty()) throw std::invalid_argument("empty hint path");
        if (std::abs(path.start() - w0) > 1e-9 * (1 + std::abs(w0)) ||
            std::abs(path.end() - w1) > 1e-9 * (1 + std::abs(w1)))
            throw std::invalid_argument("hint path does not join the endpoints");
    } else {
        path = polyline({w0, w1});
    }
    return contour_integral_reciprocal(f, path);
}

LevelCurve trace_level_curve(const expr::Expression& f, Complex z0, int orientation,
                             double re_F_budget, const TraceOptions& opt) {
    if (orientation != 1 && orientation != -1)
        throw std::invalid_argument("orientation must be +1 or -1");
    if (!(re_F_budget >= 0)) throw std::invalid_argument("re_F_budget must be >= 0");

    auto fz0 = expr::evaluate(f, z0);
    if (!fz0.ok || std::abs(fz0.value) < 1e-150)
        throw std::invalid_argument("level curve needs f(z0) finite and nonzero");
    expr::Expression df = expr::differentiate(f);

    LevelCurve out;
    out.nodes.push_back(z0);
    out.re_F.push_back(0);
    out.stop_point = z0;

    Complex z = z0;
    Complex f_z = fz0.value;
    Complex acc_F{};  // F(z) - F(z0) accumulated along the traced nodes

    // each failure mode leaves the already-accepted nodes intact
    auto stop_singular = [&](Complex where) {
        out.hit_singularity = true;
        out.stop_point = where;
    };

    while (static_cast<long>(out.nodes.size()) < opt.max_nodes) {
        double remaining = re_F_budget - std::fabs(acc_F.real());
        if (remaining <= 1e-12 * (1 + re_F_budget)) {
            out.reached_budget = true;
            break;
        }

        double scale = std::max(std::abs(z), opt.min_scale);
        double step = std::min(opt.spacing * scale, remaining * std::abs(f_z));
        if (step < 1e-15 * scale) {
            out.reached_budget = true;  // budget residue below resolution
            break;
        }

        Complex dir = static_cast<double>(orientation) * f_z / std::abs(f_z);
        Complex p = z + step * dir;
        auto fp = expr::evaluate(f, p);
        if (!fp.ok || std::abs(fp.value) < 1e-150) {
            stop_singular(p);
            break;
        }
        // Newton distance to the nearest zero or pole of f; the trigger radius
        // grows with the step so one step cannot jump across the guard zone
        auto dfp = expr::evaluate(df, p);
        if (dfp.ok && std::abs(dfp.value) > 0 &&
            std::abs(fp.value) / std::abs(dfp.value) < std::max(opt.singular_guard, step)) {
            stop_singular(p);
            break;
        }

        auto fmid = expr::evaluate(f, 0.5 * (z + p));
        if (!fmid.ok || std::abs(fmid.value) < 1e-150) {
            stop_singular(0.5 * (z + p));
            break;
        }

        // Simpson along the chord predicts the accumulated F at p
        Complex dF_pred = (p - z) * (1.0 / f_z + 4.0 / fmid.value + 1.0 / fp.value) / 6.0;
        double resid = (acc_F + dF_pred).imag();

        // one Newton step on Im F; the derivative of Im F along i f/|f| is 1/|f|
        Complex delta = Complex(0, -resid) * fp.value;
        if (std::abs(delta) > 0.5 * step) {
            stop_singular(p);  // level set bends faster than the spacing resolves
            break;
        }
        Complex c = p + delta;
        auto fc = expr::evaluate(f, c);
        if (!fc.ok || std::abs(fc.value) < 1e-150) {
            stop_singular(c);
            break;
        }
        auto fmid2 = expr::evaluate(f, 0.5 * (z + c));
        if (!fmid2.ok || std::abs(fmid2.value) < 1e-150) {
            stop_singular(0.5 * (z + c));
            break;
        }

        acc_F += (c - z) * (1.0 / f_z + 4.0 / fmid2.value + 1.0 / fc.value) / 6.0;
        z = c;
        f_z = fc.value;
        out.nodes.push_back(z);
        out.re_F.push_back(acc_F.real());
        out.im_F_drift = std::max(out.im_F_drift, std::fabs(acc_F.imag()));
        out.stop_point = z;
    }

    out.path = polyline(out.nodes);
    return out;
}

nlohmann::ordered_json pole_to_json(const PoleLocalData& data) {
    nlohmann::ordered_json j;
    j["location"] = format_complex(data.location);
    j["m"] = data.order;
    j["c"] = format_complex(data.coefficient);
    j["directions"] = data.directions;
    j["verified"] = data.verified;
    return j;
}

PoleLocalData pole_incoming_directions(const expr::Expression& f, Complex z1) {
    auto lo = expr::local_order(f, z1);
    if (!lo || lo->order >= 0)
        throw std::invalid_argument("pole_incoming_directions: z1 is not a pole of f");
    const int m = -lo->order;
    const Complex c = lo->witness;

    PoleLocalData out;
    out.location = z1;
    out.order = m;
    out.coefficient = c;
    for (int k = 0; k <= m; ++k) {
        double th = std::fmod((M_PI + std::arg(c) + 2 * M_PI * k) / (m + 1), 2 * M_PI);
        if (th < 0) th += 2 * M_PI;
        out.directions.push_back(th);
    }
    std::sort(out.directions.begin(), out.directions.end());

    // Time-reversed flow from just inside: a genuine incoming direction leaves
    // the 1e-2 ball; anything else falls back into the pole.
    expr::Expression reversed = expr::make_unary(expr::Kind::Neg, f);
    double exit_est = std::pow(1e-2, m + 1) / ((m + 1) * std::abs(c));
    flow::IntegrationControls ctl;
    ctl.max_time = 100 * exit_est;

    for (double th : out.directions) {
        Complex seed = z1 + std::polar(1e-3, th);
        bool ok = false;
        try {
            flow::Trajectory traj = flow::integrate(reversed, seed, ctl);
            double min_d = std::numeric_limits<double>::infinity();
            for (const flow::Sample& s : traj.samples) {
                double d = std::abs(s.z - z1);
                if (d >= 1e-2 * (1 - 1e-9)) {
                    ok = min_d > 0.25e-3;
                    break;
                }
                min_d = std::min(min_d, d);
            }
        } catch (const std::invalid_argument&) {
            ok = false;  // seed rejected, direction unverifiable
        }
        out.verified.push_back(ok);
    }
    return out;
}

PoleArrival time_to_pole(const expr::Expression& f, Complex seed,
                         const flow::IntegrationControls& controls) {
    auto run = [&](const flow::IntegrationControls& ctl) -> flow::ReachedPole {
        flow::Trajectory traj = flow::integrate(f, seed, ctl);
        const auto* rp = std::get_if<flow::ReachedPole>(&traj.termination);
        if (!rp)
            throw std::runtime_error(std::string("time_to_pole: trajectory ended as ") +
                                     flow::termination_kind(traj.termination));
        return *rp;
    };

    flow::ReachedPole coarse = run(controls);
    flow::IntegrationControls fine = controls;
    fine.rel_tol /= 10;
    fine.abs_tol /= 10;
    flow::ReachedPole refined = run(fine);

    PoleArrival out;
    out.T = refined.T;
    out.uncertainty = std::fabs(coarse.T - refined.T) + 4 * kEps * (1 + std::fabs(refined.T));
    out.pole = refined.location;
    return out;
}

}  // namespace meroflow::conformal
