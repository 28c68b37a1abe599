#include <iostream>

#include "neurocell/cli.hpp"

int main(int argc, char** argv) {
  return neurocell::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
