#include <iostream>

#include "mmgl/cli.hpp"

int main(int argc, char** argv) { return mmgl::run_cli(argc, argv, std::cout, std::cerr); }
