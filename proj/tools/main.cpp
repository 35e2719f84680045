#include <iostream>

#include "difflab/cli.hpp"

int main(int argc, char** argv) { return difflab::run_cli(argc, argv, std::cout, std::cerr); }
