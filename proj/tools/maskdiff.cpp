#include <iostream>

#include "maskdiff/cli.hpp"

int main(int argc, char** argv) { return maskdiff::cli::run(argc, argv, std::cout, std::cerr); }
