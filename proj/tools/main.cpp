#include <iostream>

#include "layerscope/cli.hpp"

int main(int argc, char** argv) { return layerscope::run_cli(argc, argv, std::cout, std::cerr); }
