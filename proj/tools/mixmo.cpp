#include <iostream>

#include "mixmo/cli.hpp"

int main(int argc, char** argv) { return mixmo::run_cli(argc, argv, std::cout, std::cerr); }
