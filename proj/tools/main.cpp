#include "ringmo/cli.hpp"

int main(int argc, char** argv) { return ringmo::cli::main(argc, argv); }
