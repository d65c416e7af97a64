#include <iostream>

#include "slim/pipeline.hpp"

int main(int argc, char** argv) { return slim::pipeline::run_cli(argc, argv, std::cout, std::cerr); }
