#include "meroflow/cli.hpp"

int main(int argc, char** argv) { return meroflow::cli::run(argc, argv); }
