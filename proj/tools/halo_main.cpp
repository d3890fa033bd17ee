#include <iostream>

#include "halo/cli.hpp"

int main(int argc, char** argv) { return halo::cli::run(argc, argv, std::cout, std::cerr); }
