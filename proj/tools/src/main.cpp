#include <iostream>

#include "boltzlab/cli/commands.hpp"

int main(int argc, char** argv) { return boltzlab::cli::main_entry(argc, argv, std::cout, std::cerr); }
