#include "cli.hpp"

int main(int argc, char** argv) { return rinv::cli::main(argc, argv); }
