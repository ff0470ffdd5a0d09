#include <iostream>

#include "sapo/cli.hpp"

int main(int argc, char** argv) { return sapo::run_cli(argc, argv, std::cout, std::cerr); }
