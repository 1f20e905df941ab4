#pragma once

#include <complex>
#include <string>
#include <vector>

#include "meroflow/expr.hpp"
#include "meroflow/flow.hpp"

namespace meroflow::cli {

using Complex = std::complex<double>;

/** Merged view of one invocation after flags and the optional key = value
 *  config file have been combined (flags win over file entries). */
struct RunConfig {
    std::string function;

    // flow / time / poles arguments
    Complex z0{};
    Complex from{};
    Complex to{};
    std::vector<Complex> via;  // waypoints of an explicit path hint
    Complex at{};

    // portrait grid
    double re_min = -2;
    double re_max = 2;
    double im_min = -2;
    double im_max = 2;
    int nx = 16;
    int ny = 16;
    double jitter = 0;      // node displacement as a fraction of one cell
    unsigned rng_seed = 0;  // seeds the jitter stream only

    // wv / escape-scan arguments
    double r = 0;
    double box_width = 1;  // log-box half-width parameter L
    int grid = 16;         // deviation grid, points per side
    int k_limit = 1024;
    std::vector<Complex> series;  // optional override for the derived series
    int gate_count = 0;           // 0 means ceil(N^(1/4))

    flow::IntegrationControls controls;

    int threads = 0;  // 0 defers to env, then logical cores
    std::string out_csv;
    std::string out_svg;
    std::string out_json;
};

/** Thread-count precedence: explicit flag, then MEROFLOW_THREADS, then
 *  hardware concurrency, never less than 1. */
int resolve_threads(int flag_value);

/** Parses argv, runs the requested subcommand, returns the process exit
 *  code: 0 success or gates pass, 1 parse error, 2 rejected seed or
 *  unusable input, 3 obstructed path, 4 gate failure. */
int run(int argc, const char* const* argv);

}  // namespace meroflow::cli
