#include <iostream>

#include "star_cli.hpp"

int main(int argc, char** argv) { return star::cli::run_cli(argc, argv, std::cout, std::cerr); }
