#include <iostream>

#include "dtrak/cli.hpp"

int main(int argc, char** argv) { return dtrak::cli::run(argc, argv, std::cout, std::cerr); }
