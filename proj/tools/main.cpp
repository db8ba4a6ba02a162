#include <iostream>

#include "octproj/cli.hpp"

int main(int argc, char** argv) { return octproj::cli::run(argc, argv, std::cout, std::cerr); }
