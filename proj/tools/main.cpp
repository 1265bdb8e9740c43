#include <iostream>

#include "mvaf/cli.hpp"

int main(int argc, char** argv) { return mvaf::run_cli(argc, argv, std::cout, std::cerr); }
