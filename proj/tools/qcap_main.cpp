#include <iostream>

#include "qcap/cli.hpp"

int main(int argc, char** argv) {
  return qcap::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
