#include "meroflow/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "meroflow/conformal.hpp"
#include "meroflow/numfmt.hpp"
#include "meroflow/wv.hpp"

namespace meroflow::cli {

namespace {

using nlohmann::ordered_json;

void write_file(const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open output file: " + path);
    out << body;
}

void emit_json(const ordered_json& j, const std::string& file_path) {
    std::string text = j.dump(2);
    text += '\n';
    std::cout << text;
    if (!file_path.empty()) write_file(file_path, text);
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    std::string piece;
    while (std::getline(ss, piece, ',')) parts.push_back(piece);
    return parts;
}

/** Flat `key = value` config support. CLI11 only reads config files on the
 *  root app, so the file is expanded into trailing long options here before
 *  the real parse; keys already present on the command line are dropped,
 *  which is what makes flags override the file. */
std::vector<std::string> expand_config(std::vector<std::string> args) {
    std::string path;
    for (size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    }
    if (path.empty()) return args;

    std::set<std::string> given;
    for (const std::string& t : args) {
        if (t.rfind("--", 0) == 0 && t.size() > 2) {
            std::string name = t.substr(2);
            if (auto eq = name.find('='); eq != std::string::npos) name.resize(eq);
            given.insert(name);
        } else if (t.size() >= 2 && t[0] == '-') {
            // short aliases; negative numeric values match none of these
            if (t[1] == 'f') given.insert("function");
            if (t[1] == 'r') given.insert("radius");
            if (t[1] == 'j') given.insert("threads");
        }
    }

    std::ifstream in(path);
    if (!in) throw CLI::FileError::Missing(path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string text = CLI::detail::trim_copy(line);
        if (text.empty() || text[0] == '#') continue;
        auto eq = text.find('=');
        if (eq == std::string::npos)
            throw CLI::ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = CLI::detail::trim_copy(text.substr(0, eq));
        std::string value = CLI::detail::trim_copy(text.substr(eq + 1));
        CLI::detail::remove_quotes(value);
        if (key.empty())
            throw CLI::ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
        if (given.count(key)) continue;
        args.push_back("--" + key);
        args.push_back(value);
    }
    return args;
}

// ---------------------------------------------------------------- flow ----

int cmd_flow(const RunConfig& cfg) {
    expr::Expression f = expr::parse(cfg.function);
    flow::Trajectory traj = flow::integrate(f, cfg.z0, cfg.controls);
    if (!cfg.out_csv.empty()) write_file(cfg.out_csv, flow::to_csv(traj));
    emit_json(flow::termination_to_json(traj.termination), cfg.out_json);
    return 0;
}

// ------------------------------------------------------------- portrait ----

struct PortraitRow {
    Complex seed;
    std::string kind;
    bool has_T = false;
    double T = 0;
    bool has_unc = false;
    double unc = 0;
    std::vector<Complex> pts;  // decimated polyline for the SVG
};

std::vector<Complex> decimate(const std::vector<flow::Sample>& samples, size_t cap) {
    std::vector<Complex> pts;
    if (samples.empty()) return pts;
    size_t stride = (samples.size() + cap - 1) / cap;
    for (size_t k = 0; k < samples.size(); k += stride) pts.push_back(samples[k].z);
    if ((samples.size() - 1) % stride != 0) pts.push_back(samples.back().z);
    return pts;
}

PortraitRow run_seed(const expr::Expression& f, Complex seed,
                     const flow::IntegrationControls& controls, size_t point_cap) {
    PortraitRow row;
    row.seed = seed;
    try {
        flow::Trajectory traj = flow::integrate(f, seed, controls);
        row.kind = flow::termination_kind(traj.termination);
        if (auto* esc = std::get_if<flow::EscapedFiniteTime>(&traj.termination)) {
            row.has_T = true;
            row.T = esc->T_est;
            row.has_unc = true;
            row.unc = esc->uncertainty;
        } else if (auto* pole = std::get_if<flow::ReachedPole>(&traj.termination)) {
            row.has_T = true;
            row.T = pole->T;
            row.has_unc = true;
            row.unc = 0;
        }
        row.pts = decimate(traj.samples, point_cap);
    } catch (const std::exception&) {
        row.kind = "SeedRejected";
    }
    return row;
}

const char* color_for(const std::string& kind) {
    if (kind == "EscapedFiniteTime") return "#d62728";
    if (kind == "ReachedPole") return "#9467bd";
    if (kind == "EquilibriumApproach") return "#1f77b4";
    if (kind == "Periodic") return "#2ca02c";
    if (kind == "TimeBudgetExhausted") return "#7f7f7f";
    if (kind == "StepUnderflow") return "#ff7f0e";
    return "#000000";
}

/** SVG 1.1 document in data coordinates with the imaginary axis pointing up.
 *  Trajectories are cut at twice the frame half-width so far-field excursions
 *  cannot blow up the coordinate range. */
std::string make_svg(const RunConfig& cfg, const std::vector<PortraitRow>& rows) {
    double vx = cfg.re_min, vw = cfg.re_max - cfg.re_min;
    double vy = cfg.im_min, vh = cfg.im_max - cfg.im_min;
    if (!(vw > 0)) {
        vx -= 0.5;
        vw = 1;
    }
    if (!(vh > 0)) {
        vy -= 0.5;
        vh = 1;
    }
    double cx = vx + 0.5 * vw, cy = vy + 0.5 * vh;
    int width = 800;
    int height = std::max(1, (int)std::lround(800.0 * vh / vw));

    std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
         std::to_string(width) + "\" height=\"" + std::to_string(height) + "\" viewBox=\"" +
         format_double(vx) + " " + format_double(-(vy + vh)) + " " + format_double(vw) + " " +
         format_double(vh) + "\">\n";
    std::string sw = format_double(vw / 400);
    s += "<rect x=\"" + format_double(vx) + "\" y=\"" + format_double(-(vy + vh)) + "\" width=\"" +
         format_double(vw) + "\" height=\"" + format_double(vh) +
         "\" fill=\"none\" stroke=\"#cccccc\" stroke-width=\"" + sw + "\"/>\n";
    for (const auto& row : rows) {
        if (row.pts.size() < 2) continue;
        std::string pts;
        for (Complex z : row.pts) {
            bool inside = std::abs(z.real() - cx) <= vw && std::abs(z.imag() - cy) <= vh;
            if (!inside) {
                z = Complex(std::clamp(z.real(), cx - vw, cx + vw),
                            std::clamp(z.imag(), cy - vh, cy + vh));
            }
            if (!pts.empty()) pts += ' ';
            pts += format_double(z.real());
            pts += ',';
            pts += format_double(-z.imag());
            if (!inside) break;
        }
        s += "<polyline fill=\"none\" stroke=\"";
        s += color_for(row.kind);
        s += "\" stroke-width=\"" + sw + "\" points=\"" + pts + "\"/>\n";
    }
    s += "</svg>\n";
    return s;
}

std::string portrait_csv(const std::vector<PortraitRow>& rows) {
    std::string s = "re0,im0,kind,T_est,uncertainty\n";
    for (const auto& row : rows) {
        s += format_double(row.seed.real());
        s += ',';
        s += format_double(row.seed.imag());
        s += ',';
        s += row.kind;
        s += ',';
        if (row.has_T) s += format_double(row.T);
        s += ',';
        if (row.has_unc) s += format_double(row.unc);
        s += '\n';
    }
    return s;
}

int cmd_portrait(const RunConfig& cfg) {
    expr::Expression f = expr::parse(cfg.function);

    // Jitter is drawn once, in row-major seed order, so the seed list does
    // not depend on the worker count.
    std::vector<Complex> seeds;
    seeds.reserve((size_t)cfg.nx * (size_t)cfg.ny);
    std::mt19937 rng(cfg.rng_seed);
    std::uniform_real_distribution<double> unit(-0.5, 0.5);
    double span_x = cfg.re_max - cfg.re_min, span_y = cfg.im_max - cfg.im_min;
    double dx = cfg.nx > 1 ? span_x / (cfg.nx - 1) : span_x;
    double dy = cfg.ny > 1 ? span_y / (cfg.ny - 1) : span_y;
    for (int iy = 0; iy < cfg.ny; ++iy)
        for (int ix = 0; ix < cfg.nx; ++ix) {
            double re = cfg.nx > 1 ? cfg.re_min + dx * ix : 0.5 * (cfg.re_min + cfg.re_max);
            double im = cfg.ny > 1 ? cfg.im_min + dy * iy : 0.5 * (cfg.im_min + cfg.im_max);
            if (cfg.jitter > 0) {
                re += cfg.jitter * dx * unit(rng);
                im += cfg.jitter * dy * unit(rng);
            }
            seeds.emplace_back(re, im);
        }

    // Polyline budget shrinks on dense grids so the whole portrait stays
    // bounded in memory; each trajectory still gets at most 4096 points.
    size_t point_cap = seeds.empty()
                           ? 4096
                           : std::min<size_t>(4096, std::max<size_t>(16, 16'777'216 / seeds.size()));

    std::vector<PortraitRow> rows(seeds.size());
    int workers = std::max(1, std::min<int>(resolve_threads(cfg.threads), (int)seeds.size()));
    std::atomic<size_t> cursor{0};
    auto drain = [&] {
        for (;;) {
            size_t k = cursor.fetch_add(1);
            if (k >= seeds.size()) return;
            rows[k] = run_seed(f, seeds[k], cfg.controls, point_cap);
        }
    };
    std::vector<std::thread> pool;
    for (int w = 1; w < workers; ++w) pool.emplace_back(drain);
    drain();
    for (auto& th : pool) th.join();

    std::string csv = portrait_csv(rows);
    if (cfg.out_csv.empty())
        std::cout << csv;
    else
        write_file(cfg.out_csv, csv);
    write_file(cfg.out_svg.empty() ? "portrait.svg" : cfg.out_svg, make_svg(cfg, rows));
    return 0;
}

// ----------------------------------------------------- time / poles / wv ----

int cmd_time(const RunConfig& cfg) {
    expr::Expression f = expr::parse(cfg.function);
    std::optional<conformal::PathSpec> hint;
    if (!cfg.via.empty()) {
        std::vector<Complex> nodes;
        nodes.push_back(cfg.from);
        nodes.insert(nodes.end(), cfg.via.begin(), cfg.via.end());
        nodes.push_back(cfg.to);
        hint = conformal::polyline(nodes);
    }
    Complex t = conformal::travel_time(f, cfg.from, cfg.to, hint);
    ordered_json j;
    j["time"] = format_complex(t);
    emit_json(j, cfg.out_json);
    return 0;
}

int cmd_poles(const RunConfig& cfg) {
    expr::Expression f = expr::parse(cfg.function);
    emit_json(conformal::pole_to_json(conformal::pole_incoming_directions(f, cfg.at)),
              cfg.out_json);
    return 0;
}

int cmd_wv(const RunConfig& cfg) {
    expr::Expression f = expr::parse(cfg.function);
    wv::CoefficientSeries series = cfg.series.empty()
                                       ? wv::maclaurin_series(f, cfg.r, cfg.k_limit)
                                       : wv::CoefficientSeries::from_list(cfg.series);
    wv::WvContext ctx = wv::make_context(f, series, cfg.r, cfg.box_width);
    wv::DeviationReport dev = wv::power_law_deviation(f, ctx, cfg.grid);
    ordered_json j = wv::context_to_json(ctx);
    j["deviation"] = dev.max_deviation;
    j["skipped_nodes"] = dev.skipped_nodes;
    emit_json(j, cfg.out_json);
    return 0;
}

int cmd_escape_scan(const RunConfig& cfg) {
    expr::Expression f = expr::parse(cfg.function);
    wv::CoefficientSeries series = wv::maclaurin_series(f, cfg.r, cfg.k_limit);
    wv::WvContext ctx = wv::make_context(f, series, cfg.r, cfg.box_width);
    wv::EscapeScanReport report =
        wv::escape_scan(f, ctx, flow::IntegrationControls{}, resolve_threads(cfg.threads));
    emit_json(wv::report_to_json(report), cfg.out_json);
    int required =
        cfg.gate_count > 0 ? cfg.gate_count : (int)std::ceil(std::pow((double)ctx.N, 0.25));
    bool pass = !report.aborted && report.count >= required;
    if (!pass) std::cerr << "gate failed: " << report.count << " passing seed(s), " << required
                         << " required" << (report.aborted ? " (scan aborted)" : "") << '\n';
    return pass ? 0 : 4;
}

// ------------------------------------------------------------ app setup ----

struct RawArgs {
    std::string z0, from, to, at;
    std::vector<std::string> via;
    std::string series;
};

void add_controls(CLI::App* cmd, flow::IntegrationControls& c) {
    cmd->add_option("--rel-tol", c.rel_tol, "relative step tolerance");
    cmd->add_option("--abs-tol", c.abs_tol, "absolute step tolerance");
    cmd->add_option("--max-steps", c.max_steps, "step budget");
    cmd->add_option("--max-time", c.max_time, "integration time budget");
    cmd->add_option("--escape-radius", c.escape_radius, "first escape-ladder radius");
    cmd->add_option("--escape-levels", c.escape_levels, "doubling ladder levels");
    cmd->add_option("--pole-radius", c.pole_radius, "pole capture proximity");
}

}  // namespace

int resolve_threads(int flag_value) {
    if (flag_value > 0) return flag_value;
    if (const char* env = std::getenv("MEROFLOW_THREADS")) {
        int v = std::atoi(env);
        if (v > 0) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc > 0 ? (int)hc : 1;
}

int run(int argc, const char* const* argv) {
    RunConfig cfg;
    RawArgs raw;
    int exit_code = 0;

    CLI::Validator complex_literal(
        [](std::string& s) -> std::string {
            try {
                parse_complex(s);
                return {};
            } catch (const std::exception&) {
                return "bad complex literal: " + s;
            }
        },
        "COMPLEX");
    CLI::Validator complex_list(
        [](std::string& s) -> std::string {
            try {
                for (const auto& piece : split_list(s)) parse_complex(piece);
                return {};
            } catch (const std::exception&) {
                return "bad complex list: " + s;
            }
        },
        "COMPLEX,...");

    CLI::App app{"trajectory toolkit for complex flows dz/dt = f(z)"};
    app.require_subcommand(1);

    std::string config_path;  // consumed by expand_config before the parse
    auto configure = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path,
                        "flat key = value defaults for this subcommand; flags override");
        cmd->add_option("-f,--function", cfg.function, "field expression in z")->required();
        cmd->add_option("--out-json", cfg.out_json, "also write the JSON report to a file");
        return cmd;
    };

    CLI::App* c_flow = configure(app.add_subcommand("flow", "integrate one trajectory"));
    c_flow->add_option("--z0", raw.z0, "seed a+bi")->required()->check(complex_literal);
    c_flow->add_option("--out-csv", cfg.out_csv, "write t,re,im samples to a file");
    add_controls(c_flow, cfg.controls);

    CLI::App* c_port = configure(app.add_subcommand("portrait", "integrate a grid of seeds"));
    c_port->add_option("--re-min", cfg.re_min, "grid rectangle");
    c_port->add_option("--re-max", cfg.re_max, "grid rectangle");
    c_port->add_option("--im-min", cfg.im_min, "grid rectangle");
    c_port->add_option("--im-max", cfg.im_max, "grid rectangle");
    c_port->add_option("--nx", cfg.nx, "grid columns")->check(CLI::Range(0, 512));
    c_port->add_option("--ny", cfg.ny, "grid rows")->check(CLI::Range(0, 512));
    c_port->add_option("--jitter", cfg.jitter, "node displacement, fraction of one cell")
        ->check(CLI::Range(0.0, 1.0));
    c_port->add_option("--rng-seed", cfg.rng_seed, "jitter stream seed");
    c_port->add_option("--out-csv", cfg.out_csv, "summary CSV path (default stdout)");
    c_port->add_option("--out-svg", cfg.out_svg, "SVG path (default portrait.svg)");
    c_port->add_option("-j,--threads", cfg.threads, "worker threads (0 = auto)");
    add_controls(c_port, cfg.controls);

    CLI::App* c_time = configure(app.add_subcommand("time", "travel time between two points"));
    c_time->add_option("--from", raw.from, "start a+bi")->required()->check(complex_literal);
    c_time->add_option("--to", raw.to, "end a+bi")->required()->check(complex_literal);
    c_time->add_option("--via", raw.via, "path hint waypoints a+bi")->check(complex_literal);

    CLI::App* c_poles = configure(app.add_subcommand("poles", "local data at a pole"));
    c_poles->add_option("--at", raw.at, "pole location a+bi")->required()->check(complex_literal);

    CLI::App* c_wv = configure(app.add_subcommand("wv", "power-law context at radius r"));
    c_wv->add_option("-r,--radius", cfg.r, "working radius")->required();
    c_wv->add_option("--box-width", cfg.box_width, "log-box half-width parameter");
    c_wv->add_option("--grid", cfg.grid, "deviation grid points per side");
    c_wv->add_option("--k-limit", cfg.k_limit, "series truncation order");
    c_wv->add_option("--series", raw.series, "explicit coefficients b0,b1,... overriding the fit")
        ->check(complex_list);

    CLI::App* c_scan =
        configure(app.add_subcommand("escape-scan", "locate fast-escaping seeds at radius r"));
    c_scan->add_option("-r,--radius", cfg.r, "working radius")->required();
    c_scan->add_option("--box-width", cfg.box_width, "log-box half-width parameter");
    c_scan->add_option("--k-limit", cfg.k_limit, "series truncation order");
    c_scan->add_option("--gate-count", cfg.gate_count,
                       "required passing seeds (0 = ceil(N^(1/4)))");
    c_scan->add_option("-j,--threads", cfg.threads, "worker threads (0 = auto)");

    try {
        std::vector<std::string> args(argv + 1, argv + argc);
        args = expand_config(std::move(args));
        std::reverse(args.begin(), args.end());  // App::parse consumes back to front
        app.parse(args);

        for (const auto& s : raw.via) cfg.via.push_back(parse_complex(s));
        if (!raw.series.empty())
            for (const auto& s : split_list(raw.series)) cfg.series.push_back(parse_complex(s));
        if (!raw.z0.empty()) cfg.z0 = parse_complex(raw.z0);
        if (!raw.from.empty()) cfg.from = parse_complex(raw.from);
        if (!raw.to.empty()) cfg.to = parse_complex(raw.to);
        if (!raw.at.empty()) cfg.at = parse_complex(raw.at);

        if (c_flow->parsed()) exit_code = cmd_flow(cfg);
        else if (c_port->parsed()) exit_code = cmd_portrait(cfg);
        else if (c_time->parsed()) exit_code = cmd_time(cfg);
        else if (c_poles->parsed()) exit_code = cmd_poles(cfg);
        else if (c_wv->parsed()) exit_code = cmd_wv(cfg);
        else if (c_scan->parsed()) exit_code = cmd_escape_scan(cfg);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const expr::ParseError& e) {
        std::cerr << "parse error at offset " << e.offset() << ": " << e.what() << '\n';
        return 1;
    } catch (const conformal::SingularPathError& e) {
        std::cerr << "obstructed path near " << format_complex(e.where()) << ": " << e.what()
                  << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return exit_code;
}

}  // namespace meroflow::cli
