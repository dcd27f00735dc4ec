#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) { return probdrop::cli::run(argc, argv, std::cout, std::cerr); }
