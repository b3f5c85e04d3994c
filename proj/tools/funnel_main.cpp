#include <iostream>

#include "funnel/cli.hpp"

int main(int argc, char** argv) { return funnel::cli::run(argc, argv, std::cout, std::cerr); }
