#include <iostream>

#include "lqsep/pipeline.hpp"

int main(int argc, char** argv) { return lqsep::run_subcommand(argc, argv, std::cout, std::cerr); }
