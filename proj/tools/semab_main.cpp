#include "semab/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return semab::cli_main(argc, argv, std::cout, std::cerr); }
