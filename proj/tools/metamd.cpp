#include <iostream>

#include "metamd/cli.hpp"

int main(int argc, char** argv) { return metamd::cli::run(argc, argv, std::cout, std::cerr); }
