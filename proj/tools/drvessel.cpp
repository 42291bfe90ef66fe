#include "drvessel/cli.hpp"

int main(int argc, char** argv) { return drvessel::cli::run(argc, argv); }
