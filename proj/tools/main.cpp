#include "cli.hpp"

int main(int argc, char** argv) { return afterimage::cli::dispatch(argc, argv); }
