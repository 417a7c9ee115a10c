#include <iostream>

#include "gatecraft/cli.hpp"

int main(int argc, char** argv) { return gatecraft::run_cli(argc, argv, std::cout, std::cerr); }
