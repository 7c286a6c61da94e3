#include <iostream>

#include "pmqve/cli.hpp"

int main(int argc, char** argv) { return pmqve::run_cli(argc, argv, std::cout, std::cerr); }
